import numpy as np
import pytest

from auxmtl.scenegen import SceneDistribution, SplitSpec, generate_dataset, spatial_split, write_split


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """300 full-size scenes in a 600 m square, split with 10 test bins."""
    root = tmp_path_factory.mktemp("small")
    data = root / "data"
    manifest = generate_dataset(300, 5, SceneDistribution(world_extent_m=600.0), data)
    spec = SplitSpec(n_test_bins=10, rng_seed=1)
    train, test, buffer = spatial_split(manifest, spec)
    write_split(data / "split", train, test, buffer, spec, data)
    return data


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; assert on FAIL."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _CRITERIA[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
