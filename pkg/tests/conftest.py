import pytest

from dcp.harness.config import load_config, resolve
from dcp.harness.runner import dataset_for, get_encoders

# small enough that a full CLI round trip takes about a second
TINY = ["vision.n_layers=2", "vision.model_dim=16", "vision.ffn_dim=16", "text.n_layers=2", "text.model_dim=16",
        "text.ffn_dim=16", "prompt.M=4", "prompt.N=2", "prompt.d_attn=8", "prompt.n_heads_cmpa=2", "data.K=3",
        "data.train_per_class=4", "data.test_per_class=4", "pretrain.steps=20", "pretrain.batch=8", "shots=2",
        "epochs=2", "shot_list=1,2", "seeds=0,1"]


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("encoder-cache")


@pytest.fixture(scope="session")
def tiny(cache_dir):
    cfg = resolve(load_config(None, TINY))
    return cfg, get_encoders(cfg, cache_dir), dataset_for(cfg)


@pytest.fixture(scope="session")
def pretrained():
    """Default-config pretrain-lite encoders (shared user cache; a cold cache costs a few minutes)."""
    cfg = resolve(load_config())
    return cfg, get_encoders(cfg), dataset_for(cfg)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
