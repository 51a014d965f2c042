"""Shared fixtures; the replicate study is session-scoped because three
test modules consume its result table."""

import numpy as np
import pytest

from wsmgp.experiments import SyntheticConfig, run_benchmark
from wsmgp.model import ModelConfig
from wsmgp.trainer import OptimizerConfig


@pytest.fixture(scope="session")
def imbalanced_replicates():
    """Ten seeded replicates of the (gamma, l) = (0.2, 0.2) comparison.

    Returns {model: array of shape (10, 3)} with columns
    (rmse source 1, rmse source 2, label accuracy).
    """
    cfg = ModelConfig(M=2, Q=30, alpha0=0.3, use_dirichlet=True)
    opt = OptimizerConfig(seed=0, restarts=3, max_iter=200, optimize_alpha0=False)
    synth = SyntheticConfig(M=2, bias=2.0, seed=1000)
    results = run_benchmark(
        [0.2], [0.2], ["wsmgp", "omgp", "omgp-ws", "scmgp"], 10, cfg, opt, synth
    )
    table = {}
    for r in results:
        assert r.status == "ok", r.status
        table.setdefault(r.model, []).append([r.rmse[0], r.rmse[1], r.label_acc])
    return {k: np.asarray(v) for k, v in table.items()}
