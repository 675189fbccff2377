import pytest
import torch

from caidd.config import build_config

TINY = [
    "denoiser.image_size=16",
    "batch_size=2",
    "denoiser.base_channels=16",
    "denoiser.channel_multipliers=1,2,2",
    "denoiser.time_embed_dim=32",
    "denoiser.n_heads=2",
    "denoiser.d_head=8",
    "eval_every=0",
    "checkpoint_every=0",
    "data.n=4",
    "data.n_identities=4",
]


def tiny_config(*overrides):
    """A configuration small enough for per-test training runs."""
    return build_config({}, TINY + list(overrides))


@pytest.fixture(autouse=True, scope="session")
def _threads():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
