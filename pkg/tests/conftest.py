import numpy as np
import pytest

from helpers import llama_checkpoint, write_descriptor
from wisca.attention import AttentionLayout

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def criterion(request, capsys):
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""

    def report(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        request.config.stash[ACCEPTANCE].append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def gqa_layout():
    return AttentionLayout(d_model=32, n_q_heads=8, n_kv_heads=2, head_dim=4)


@pytest.fixture
def llama_fixture(tmp_path, gqa_layout):
    """Two-layer Llama-style GQA checkpoint (f32, transposed storage) plus its descriptor."""
    ckpt = tmp_path / "llama.safetensors"
    llama_checkpoint(ckpt, gqa_layout, 2, np.random.default_rng(7))
    layout = write_descriptor(tmp_path / "llama.json", preset="llama", n_q_heads=8, n_kv_heads=2, head_dim=4)
    return ckpt, layout
