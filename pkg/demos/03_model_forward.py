"""One forward pass: N images in, local and global pointmaps plus confidences out."""

# %%
import numpy as np

from pointfuse.model import (
    ModelConfig, forward, index_embedding, init_params, sample_index_assignment,
)
from pointfuse.synthgen import make_sample

cfg = ModelConfig(embed_dim=64, fusion_layers=4, attention_heads=4, head_hidden_dim=64, pool_size=32)
params = init_params(cfg, seed=0)
print(sum(p.size for p in params.params.values()), "parameters")

# %% each view gets an image index; the first view is always 1, the rest are drawn from 2..32
rng = np.random.default_rng(0)
assignment = sample_index_assignment(4, cfg.pool_size, rng)
print("assignment:", assignment)
emb = index_embedding(np.array(assignment), cfg.embed_dim, cfg.pool_size)
print("index embedding", emb.shape, "norms", np.linalg.norm(emb, axis=1).round(3))

# %% forward
s = make_sample(0, 4)
out = forward(s.images, assignment, params, cfg)
print("local", out.local_points.shape, "global", out.global_points.shape, "conf", out.global_conf.shape)

# %% reordering views 2..4 together with their indices just reorders the outputs
perm = [0, 3, 1, 2]
out2 = forward(s.images[perm], [assignment[i] for i in perm], params, cfg)
print("max |difference| after permutation:", np.abs(out.global_points[perm] - out2.global_points).max())

# %% a model trained on 4 views still runs on 24: only the index pool bounds N
many = make_sample(0, 24)
big = forward(many.images, sample_index_assignment(24, cfg.pool_size, rng), params, cfg)
print("24 views finite:", all(np.isfinite(a).all() for a in big.arrays()))
