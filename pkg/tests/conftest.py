import numpy as np
import pytest

from skewbench import datagen


@pytest.fixture
def small_synth():
    cfg = datagen.SyntheticConfig(train_per_class=60, val_per_class=10, test_per_class=20)
    return datagen.build_synthetic(cfg, datagen.SkewSpec.half_split(0.95, 10), seed=3)


def write_fake_cifar(root, n_records=20, seed=0, labels=None):
    """Tiny CIFAR-style batch files (n_records per file)."""
    rng = np.random.default_rng(seed)
    for name in datagen.CIFAR_TRAIN_FILES + (datagen.CIFAR_TEST_FILE,):
        lab = np.arange(n_records) % 10 if labels is None else np.asarray(labels)
        rec = np.empty((n_records, datagen.CIFAR_RECORD), dtype=np.uint8)
        rec[:, 0] = lab
        rec[:, 1:] = rng.integers(0, 256, size=(n_records, datagen.IMAGE_DIM))
        rec.tofile(root / name)
    return root


@pytest.fixture
def fake_cifar(tmp_path):
    return write_fake_cifar(tmp_path)


# one line per acceptance criterion, printed after the run
CRITERIA = []


@pytest.fixture
def criterion():
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'SKIP' if ok is None else 'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
