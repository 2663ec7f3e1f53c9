import numpy as np
import pytest

from jointdudo.geometry import build_default_geometry
from jointdudo.projector import cached_operator


@pytest.fixture(scope="session")
def geometry():
    return build_default_geometry()


@pytest.fixture(scope="session")
def op(geometry):
    return cached_operator(geometry)


@pytest.fixture(scope="session")
def small_geometry():
    return build_default_geometry((8, 8, 8), (8, 8))


@pytest.fixture(scope="session")
def small_op(small_geometry):
    return cached_operator(small_geometry)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**changes):
    from jointdudo.config import ExperimentConfig
    from jointdudo.nets import ModelVariant

    cfg = ExperimentConfig(
        image_size=(8, 8, 8),
        detector_bins=(8, 8),
        voxel_size_mm=16.0,
        splits=(4, 2, 2),
        total_counts=20_000,
        mlem_iterations=5,
        epochs=3,
        variant=ModelVariant(iterations=2, width=4, depth=1, img_width=4, adc_growth=2, se_hidden=2),
    )
    return cfg.with_(**changes)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_manifest(tiny_cfg, tmp_path_factory):
    from jointdudo.dataset import build_dataset

    return build_dataset(tiny_cfg, tmp_path_factory.mktemp("tiny") / "data")


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance_record():
    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
