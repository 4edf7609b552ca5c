import pytest

from mcptta.config import load_run_config, load_synth_spec
from mcptta.synth import synth_stream


@pytest.fixture(scope="session")
def benchmark_stream(tmp_path_factory):
    spec = load_synth_spec("configs/benchmark_stream.cfg")
    path = str(tmp_path_factory.mktemp("bench") / "benchmark.mcpe")
    synth_stream(path, spec)
    return path


@pytest.fixture(scope="session")
def benchmark_config():
    return load_run_config("configs/benchmark_run.cfg")
