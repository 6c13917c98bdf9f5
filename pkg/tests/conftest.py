import numpy as np
import pytest

from pointfuse.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(patch_size=4, embed_dim=16, fusion_layers=1, attention_heads=2,
                       mlp_ratio=2.0, head_hidden_dim=16, pool_size=8, max_train_views=2)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
