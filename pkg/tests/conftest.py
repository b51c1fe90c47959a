import numpy as np
import pytest

from aupretrain.synthgen import SynthSpec, generate_dataset


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """12 subjects x 4 images, 5 labels, written to disk once per session."""
    out = tmp_path_factory.mktemp("synth")
    manifest = generate_dataset(SynthSpec(n_subjects=12, images_per_subject=4, n_labels=5, seed=3), out)
    return out, manifest


def manifest_text(rows, au=("AU01", "AU02")):
    lines = ["image_path,subject_id,gender,region," + ",".join(au)]
    lines += [",".join(str(c) for c in r) for r in rows]
    return "\n".join(lines) + "\n"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record_criterion(name, passed, detail):
    ACCEPTANCE[name] = (passed, detail)
    print(f"{name} {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda n: int(n[1:])):
        passed, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if passed else 'FAIL'} {detail}")
