import numpy as np
import pytest

from remix.bagstore import SynthConfig, generate_synthetic_dataset
from remix.reducer import ReduceConfig, reduce_dataset

# acceptance results, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Tiny separable dataset plus its K=4 full-covariance reduction."""
    root = tmp_path_factory.mktemp("small")
    cfg = SynthConfig(classes=2, dim=8, bags_per_class=10, test_bags_per_class=5,
                      n_min=20, n_max=60, seed=3)
    train_m, test_m = generate_synthetic_dataset(cfg, root / "data")
    rcfg = ReduceConfig(k=4, cov_mode="full", seed=3)
    red_train = reduce_dataset(train_m, rcfg, root / "red")
    red_test = reduce_dataset(test_m, rcfg, root / "red")
    return {"root": root, "cfg": cfg, "train": train_m, "test": test_m,
            "red_train": red_train, "red_test": red_test}


@pytest.fixture(scope="session")
def oracle_dataset(tmp_path_factory):
    """Separable d=32 dataset, large enough for 50-epoch training to converge."""
    root = tmp_path_factory.mktemp("oracle")
    cfg = SynthConfig(classes=2, dim=32, bags_per_class=50, test_bags_per_class=25,
                      n_min=20, n_max=60, seed=5)
    train_m, test_m = generate_synthetic_dataset(cfg, root / "data")
    rcfg = ReduceConfig(k=8, cov_mode="full", seed=5)
    return {"root": root, "cfg": cfg, "train": train_m, "test": test_m,
            "red_train": reduce_dataset(train_m, rcfg, root / "red"),
            "red_test": reduce_dataset(test_m, rcfg, root / "red")}
