"""Central finite-difference verification of the analytic model gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import DirectedGraph, random_one_directional
from .rdgcn import PairBatch, RdModel
from .sirgcn import SirModel, SirSamples

# Relative errors use max(|analytic|, |numeric|, FLOOR) as the denominator so
# coordinates whose gradient is exactly zero compare on an absolute scale.
FLOOR = 1e-8


@dataclass
class GradcheckResult:
    model: str
    instance: int
    n: int
    num_params: int
    worst_error: float
    worst_coordinate: int
    passed: bool


def relative_errors(analytic, numeric, floor: float = FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=float)
    f = np.asarray(numeric, dtype=float)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


def numeric_gradient(loss_fn, flat: np.ndarray, step: float) -> np.ndarray:
    g = np.empty_like(flat)
    for k in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[k] += step
        dn[k] -= step
        g[k] = (loss_fn(up) - loss_fn(dn)) / (2.0 * step)
    return g


def check_model(model, flat, samples, step: float = 1e-5, loss_kind: str = "mse", corrupt: float = 0.0):
    """``(worst_relative_error, coordinate)`` of the analytic gradient at ``flat``.

    ``corrupt`` is added to the first analytic coordinate (a test hook).
    """
    _, analytic = model.loss_and_grad(flat, samples, loss_kind)
    analytic = np.array(analytic, dtype=float)
    if corrupt and analytic.size:
        analytic[0] += corrupt
    numeric = numeric_gradient(lambda v: model.loss(v, samples, loss_kind), np.asarray(flat, float), step)
    if analytic.size == 0:
        return 0.0, -1
    err = relative_errors(analytic, numeric)
    k = int(np.argmax(err))
    return float(err[k]), k


def _graph(rng: np.random.Generator, n: int) -> DirectedGraph:
    if n == 1:
        return DirectedGraph.from_edges(1, [])
    m = int(rng.integers(n - 1, n * (n - 1) // 2 + 1))
    return random_one_directional(n, m, rng)


def random_rd_instance(rng: np.random.Generator, n: int, batch: int = 6):
    g = _graph(rng, n)
    model = RdModel(g)
    flat = rng.normal(0.0, 0.3, model.num_params)
    x = rng.uniform(-2.0, 2.0, (batch, n))
    y = rng.uniform(-2.0, 2.0, (batch, n))
    mx = rng.random((batch, n)) < 0.9
    my = rng.random((batch, n)) < 0.9
    mx[0] = my[0] = True  # at least one valid entry
    return model, flat, PairBatch(x, y, mx, my)


def random_sir_instance(rng: np.random.Generator, n: int, batch: int = 4, single_beta: bool = False):
    g = _graph(rng, n)
    model = SirModel(g, single_beta=single_beta)
    flat = rng.normal(0.0, 0.5, model.num_params)
    N = rng.uniform(1e3, 1e4, (batch, n))
    I = rng.uniform(1.0, 100.0, (batch, n))
    R0 = rng.uniform(0.0, 0.3, (batch, n)) * N
    cum_I = rng.uniform(0.0, 200.0, (batch, n))
    y = I * rng.uniform(0.8, 1.3, (batch, n))
    mask = np.ones((batch, n), bool)
    return model, flat, SirSamples(N, R0, cum_I, I, y, mask, mask)


def run_gradcheck(instances: int = 100, max_n: int = 8, step: float = 1e-5, tolerance: float = 1e-5,
                  seed: int = 0, corrupt: float = 0.0, models=("rd", "sir")) -> list:
    """Check ``instances`` random problems per model family with ``1 <= n <= max_n``."""
    rng = np.random.default_rng(seed)
    out = []
    for kind in models:
        for i in range(instances):
            n = int(rng.integers(1, max_n + 1))
            if kind == "rd":
                model, flat, smp = random_rd_instance(rng, n)
            else:
                model, flat, smp = random_sir_instance(rng, n, single_beta=bool(rng.integers(2)))
            err, k = check_model(model, flat, smp, step, "mse", corrupt)
            out.append(GradcheckResult(kind, i, n, model.num_params, err, k, err <= tolerance))
    return out
