import pytest

from vkd.datamodel import load_dataset_root
from vkd.evaluation import load_stores
from vkd.synthetic import SynthConfig, generate_synthetic


SMALL = SynthConfig(num_identities=8, num_cameras=3, tracklets_per_id_camera=2, frames_per_tracklet=4,
                    image_size=16, seed=5)


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    generate_synthetic(SMALL, root)
    return root


@pytest.fixture(scope="session")
def small_data(small_root):
    return load_dataset_root(small_root)


@pytest.fixture(scope="session")
def small_stores(small_data):
    return load_stores(small_data)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


_CRITERIA = {}


def record_criterion(number, ok, detail):
    _CRITERIA[number] = (ok, detail)
    print(f"CRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'} | {detail}")
