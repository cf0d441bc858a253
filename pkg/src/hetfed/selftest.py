"""Fast invariant checks runnable from an installed package (no test framework)."""
from __future__ import annotations

import numpy as np

from .config import DatasetConfig, RunConfig
from .losses import ce_loss_grad
from .nn import backward, finite_diff_gradient, forward, init_mlp
from .projection import QpProblem, project, qp_dual_numeric
from .protocol import TeachingSignal, run_synchronous, signal_wire_size
from .baselines import run_centralized_local


def check_projection(trials: int = 200) -> bool:
    rng = np.random.default_rng(0)
    for _ in range(trials):
        g_pub, g_loc = rng.standard_normal((2, int(rng.integers(10, 200))))
        r = project(g_pub, g_loc)
        v = qp_dual_numeric(QpProblem.for_projection(g_pub, g_loc))
        if abs(v - r.v_star) > 1e-8 or not r.satisfies_constraint():
            return False
    return True


def check_gradients() -> bool:
    rng = np.random.default_rng(1)
    p = init_mlp([4, 8, 3], 0)
    x, y = rng.standard_normal((5, 4)), rng.integers(0, 3, 5)
    logits, cache = forward(p, x)
    g = backward(p, cache, ce_loss_grad(logits, y)[1])
    fd = finite_diff_gradient(lambda m: ce_loss_grad(forward(m, x)[0], y)[0], p, 1e-5)
    rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
    return bool(rel.max() < 1e-4)


def check_wire() -> bool:
    probs = np.random.default_rng(2).dirichlet(np.ones(10), 32).astype(np.float32)
    raw = TeachingSignal(1, np.arange(32), probs, 0.5, 3).encode()
    back = TeachingSignal.decode(raw)
    return len(raw) == signal_wire_size(32, 10) and back.soft_labels.tobytes() == probs.tobytes()


def check_reduction() -> bool:
    cfg = RunConfig(nodes=1, rounds=40, eval_every=20, hidden=[8], export_pca=False,
                    dataset=DatasetConfig(n_per_domain=200)).validate()
    return run_synchronous(cfg, trace=True).trace == run_centralized_local("ind", cfg, trace=True).trace


CHECKS = {
    "projection matches numeric dual": check_projection,
    "backward matches finite differences": check_gradients,
    "signal wire round trip": check_wire,
    "single node reduces to IND": check_reduction,
}


def run_selftest(out=print) -> int:
    failed = 0
    for name, fn in CHECKS.items():
        ok = fn()
        failed += not ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}")
    return 1 if failed else 0
