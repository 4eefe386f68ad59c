import numpy as np
import pytest
import torch

from proto_retrieval.config import desk_config
from proto_retrieval.data import SyntheticSpec, generate_synthetic_corpus
from proto_retrieval.trainer import train

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(SyntheticSpec(n_videos=12, seed=3))


@pytest.fixture(scope="session")
def small_state(small_corpus):
    videos, queries = small_corpus
    return train(videos, queries, desk_config(seed=1, batch_size=8), 20)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


OVERFIT_STEPS = 2000


@pytest.fixture(scope="session")
def overfit_corpus():
    return generate_synthetic_corpus(SyntheticSpec(n_videos=64, seed=0))


@pytest.fixture(scope="session")
def overfit_run(overfit_corpus):
    """Desk-scale model trained on the 64-video corpus; shared by trend and acceptance checks."""
    import time

    videos, queries = overfit_corpus
    t0 = time.perf_counter()
    state = train(videos, queries, desk_config(seed=0), OVERFIT_STEPS)
    return state, time.perf_counter() - t0


class PooledStub:
    """Stands in for a model whose query pooling is the identity on one-row token matrices."""

    def query_tokens(self, token_list):
        rows = np.stack([np.asarray(t, dtype=np.float64)[0] for t in token_list])
        return {"clip": rows, "frame": rows}


@pytest.fixture
def pooled_stub():
    return PooledStub()


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one verdict line per acceptance criterion; echoed live and in the session summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print("\n" + line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
