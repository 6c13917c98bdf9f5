"""How forward time and memory grow with the number of views."""

# %%
import tempfile
from pathlib import Path

from pointfuse.cli import cmd_benchmark
from pointfuse.model import ModelConfig, init_params, save_params

cfg = ModelConfig(embed_dim=64, fusion_layers=4, attention_heads=4, head_hidden_dim=64, pool_size=32)

with tempfile.TemporaryDirectory() as d:
    ckpt = Path(d) / "model.f3rckpt"
    save_params(init_params(cfg), ckpt, cfg)
    rows = cmd_benchmark(ckpt, [2, 4, 8, 16, 32], repeats=2)

# %% attention over all N*64 tokens is quadratic, so time per view rises with N
for r in rows:
    print(f"N={r['n_views']:>2}  tokens={r['tokens']:>5}  {1000 * r['wall_time_seconds'] / r['n_views']:.1f} ms/view")
