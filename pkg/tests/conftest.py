import numpy as np
import pytest

from scenevoice import kernels
from scenevoice.model import Batch, MemoryAligner
from scenevoice.rng import make_rng
from scenevoice.synth import WorldSpec, build_world


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run the decorated test once per compiled/pure kernel backend."""
    previous = kernels.get_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


@pytest.fixture
def small_model():
    return MemoryAligner.create(4, 6, make_rng(11), temperature=0.5)


@pytest.fixture
def small_batch():
    rng = make_rng(12)
    return Batch(
        v=rng.normal(0.0, 1.0, (6, 6)),
        a=rng.normal(0.0, 1.0, (6, 6)),
        timbre_pairs=np.array([[0, 1]], dtype=np.intp),
        env_pairs=np.array([[2, 3]], dtype=np.intp),
    )


@pytest.fixture(scope="session")
def tiny_world():
    """4 characters x 4 environments in 16 dims, linear, light noise."""
    return build_world(WorldSpec(n_characters=4, n_environments=4, dim=16, seed=7))


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collector the acceptance tests append their one-line verdicts to."""
    lines: list[str] = []
    request.config._acceptance_lines = lines
    return lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
