import numpy as np
import pytest

from memdyn import data, nn, optim, trainer


def finite_difference_grad(params, x, y, h=1e-6):
    """Central differences of -log p_y over every parameter."""
    g = np.empty_like(params.flat)
    for k in range(len(g)):
        e = np.zeros_like(g)
        e[k] = h
        lp = nn.loss_and_grad(params, x[None], [y], flat=params.flat + e)[0]
        lm = nn.loss_and_grad(params, x[None], [y], flat=params.flat - e)[0]
        g[k] = (lp - lm) / (2 * h)
    return g


@pytest.fixture(scope="session")
def tiny_population():
    """A small trained population shared by several test modules."""
    spec = data.DatasetSpec(n_samples=120, n_classes=3, dim=4, class_separation=2.0,
                            label_noise_rate=0.1, seed=5)
    pool = data.generate(spec)
    plan = data.plan_membership(pool.n_samples, 6, seed=5)
    cfg = trainer.TrainConfig(widths=(8,), epochs=6, checkpoint_interval=2, batch_size=16,
                              optimizer=optim.OptimizerConfig("adamw", lr=0.01))
    runs, log = trainer.train_population(pool, plan, cfg, master_seed=5)
    return pool, plan, cfg, runs, log


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record the PASS/FAIL line for one acceptance criterion."""
    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
