"""Reaction-diffusion graph model for traffic speed.

One-step prediction on a directed road graph::

    x(t+1) = x(t) + (L_d x(t) + b_d) + tanh(L_r x(t) + b_r)

``L_d`` sums ``rho_ij (x_j - x_i)`` over outgoing edges (the road direction)
and ``L_r`` sums ``sigma (x_j - x_i)`` over the reversed edges. Diffusion edge
``e = (i, j)`` and reaction edge ``e' = (j, i)`` share the edge index ``e``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .graph import DirectedGraph, GraphError, scatter_sum

LOSS_KINDS = ("mae", "mse")


def _loss_kind(kind: str) -> str:
    kind = str(kind).lower()
    if kind not in LOSS_KINDS:
        raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {kind!r}")
    return kind


@dataclass
class RdParams:
    rho: np.ndarray
    sigma: np.ndarray
    b_d: np.ndarray
    b_r: np.ndarray

    def __post_init__(self):
        for name in ("rho", "sigma", "b_d", "b_r"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    def validate(self, g: DirectedGraph) -> None:
        m, n = g.num_edges, g.n
        shapes = {"rho": (m,), "sigma": (m,), "b_d": (n,), "b_r": (n,)}
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise GraphError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.rho, self.sigma, self.b_d, self.b_r])

    @classmethod
    def unflatten(cls, flat, g: DirectedGraph) -> "RdParams":
        m, n = g.num_edges, g.n
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (2 * m + 2 * n,):
            raise GraphError(f"flat vector has shape {flat.shape}, expected {(2 * m + 2 * n,)}")
        return cls(flat[:m].copy(), flat[m:2 * m].copy(),
                   flat[2 * m:2 * m + n].copy(), flat[2 * m + n:].copy())

    @classmethod
    def zeros(cls, g: DirectedGraph) -> "RdParams":
        return cls(np.zeros(g.num_edges), np.zeros(g.num_edges), np.zeros(g.n), np.zeros(g.n))

    @classmethod
    def initial(cls, g: DirectedGraph, rng: np.random.Generator) -> "RdParams":
        """Edge weights uniform in (-0.1, 0.1), zero biases."""
        return cls(rng.uniform(-0.1, 0.1, g.num_edges), rng.uniform(-0.1, 0.1, g.num_edges),
                   np.zeros(g.n), np.zeros(g.n))


def rd_param_count(g: DirectedGraph) -> int:
    return 2 * g.num_edges + 2 * g.n


@dataclass
class PairBatch:
    """Consecutive-step pairs ``(x_t, x_{t+1})`` with observation masks.

    ``mask_x`` marks observed inputs, ``mask_y`` observed targets; a vertex
    prediction counts toward the loss only when both are set.
    """

    x: np.ndarray
    y: np.ndarray
    mask_x: np.ndarray
    mask_y: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        self.mask_x = np.atleast_2d(np.asarray(self.mask_x, dtype=bool))
        self.mask_y = np.atleast_2d(np.asarray(self.mask_y, dtype=bool))
        if not (self.x.shape == self.y.shape == self.mask_x.shape == self.mask_y.shape):
            raise GraphError("pair arrays must share one shape")

    @classmethod
    def from_pairs(cls, pairs) -> "PairBatch":
        """Build from ``(x_t, x_next)``, ``(x_t, x_next, mask)`` or ``(x_t, x_next, mask_x, mask_y)``.

        A single mask applies to the targets; inputs are then taken as observed.
        """
        xs, ys, mxs, mys = [], [], [], []
        for item in pairs:
            if len(item) == 2:
                x, y = item
                mx = my = np.ones(np.shape(x), dtype=bool)
            elif len(item) == 3:
                x, y, my = item
                mx = np.ones(np.shape(x), dtype=bool)
            else:
                x, y, mx, my = item
            xs.append(x)
            ys.append(y)
            mxs.append(mx)
            mys.append(my)
        if not xs:
            raise ValueError("empty batch")
        return cls(np.array(xs), np.array(ys), np.array(mxs), np.array(mys))

    @classmethod
    def concat(cls, batches) -> "PairBatch":
        batches = list(batches)
        return cls(np.concatenate([b.x for b in batches]), np.concatenate([b.y for b in batches]),
                   np.concatenate([b.mask_x for b in batches]), np.concatenate([b.mask_y for b in batches]))

    def __len__(self):
        return self.x.shape[0]

    def take(self, idx) -> "PairBatch":
        return PairBatch(self.x[idx], self.y[idx], self.mask_x[idx], self.mask_y[idx])

    @property
    def valid(self) -> np.ndarray:
        return self.mask_x & self.mask_y


def _forward(p: RdParams, g: DirectedGraph, x: np.ndarray, mask_x=None):
    diff = x[..., g.dst] - x[..., g.src]
    emask = None
    if mask_x is not None:
        emask = mask_x[..., g.dst] & mask_x[..., g.src]
        diff = np.where(emask, diff, 0.0)
    diffusion = scatter_sum(diff * p.rho, g.src, g.n) + p.b_d
    # reaction edge e runs dst -> src, so its difference is -diff
    reaction = np.tanh(scatter_sum(-diff * p.sigma, g.dst, g.n) + p.b_r)
    return x + diffusion + reaction, diff, reaction


def rd_forward(p: RdParams, g: DirectedGraph, x_t, mask_x=None) -> np.ndarray:
    """One forward-Euler step of the reaction-diffusion model.

    Accepts a single state ``(n,)`` or a batch ``(B, n)``. Unobserved inputs
    (``mask_x`` false) are dropped from every neighbor difference they touch.
    """
    p.validate(g)
    x = np.asarray(x_t, dtype=float)
    if x.ndim == 0 or x.shape[-1] != g.n:
        raise GraphError(f"state has shape {x.shape}, expected trailing dimension {g.n}")
    if mask_x is not None:
        mask_x = np.asarray(mask_x, dtype=bool)
    return _forward(p, g, x, mask_x)[0]


def _as_batch(batch) -> PairBatch:
    if isinstance(batch, PairBatch):
        return batch
    return PairBatch.from_pairs(batch)


def loss_from_residual(r: np.ndarray, valid: np.ndarray, loss_kind: str):
    """Masked mean loss and its derivative with respect to the prediction."""
    count = int(valid.sum())
    if count == 0:
        raise ValueError("every target in the batch is masked")
    r = np.where(valid, r, 0.0)
    if loss_kind == "mse":
        return float(np.sum(r * r) / count), 2.0 * r / count
    # subgradient of |r| at 0 is taken as 0
    return float(np.sum(np.abs(r)) / count), np.sign(r) / count


def rd_loss_and_grad(p: RdParams, g: DirectedGraph, batch, loss_kind: str = "mse"):
    """Masked mean loss over a batch of pairs and its analytic gradient.

    Returns ``(loss, grad)`` where ``grad`` is an :class:`RdParams` holding
    the partial derivatives for each parameter array.
    """
    loss_kind = _loss_kind(loss_kind)
    batch = _as_batch(batch)
    if len(batch) == 0:
        raise ValueError("empty batch")
    p.validate(g)
    pred, diff, tanh_r = _forward(p, g, batch.x, batch.mask_x)
    loss, dpred = loss_from_residual(pred - batch.y, batch.valid, loss_kind)
    dreact = dpred * (1.0 - tanh_r * tanh_r)
    grad = RdParams(
        rho=np.sum(dpred[:, g.src] * diff, axis=0),
        sigma=np.sum(dreact[:, g.dst] * -diff, axis=0),
        b_d=dpred.sum(axis=0),
        b_r=dreact.sum(axis=0),
    )
    return loss, grad


def rd_residuals(p: RdParams, g: DirectedGraph, series) -> np.ndarray:
    """Observed-minus-predicted one-step residuals, shape ``(T-1, n)``.

    ``series`` needs ``values`` and ``mask`` arrays of shape ``(T, n)``.
    Entries whose target or input is unobserved are NaN.
    """
    values = np.asarray(series.values, dtype=float)
    mask = np.asarray(series.mask, dtype=bool)
    if values.shape[0] < 2:
        raise ValueError("need at least two time steps for residuals")
    pred = rd_forward(p, g, values[:-1], mask[:-1])
    res = values[1:] - pred
    return np.where(mask[:-1] & mask[1:], res, np.nan)


class RdModel:
    """Adapter exposing the RD model to the optimizer over a flat parameter vector."""

    kind = "rd"

    def __init__(self, graph: DirectedGraph, loss_kind: str = "mse"):
        self.graph = graph
        self.loss_kind = _loss_kind(loss_kind)

    @property
    def num_params(self) -> int:
        return rd_param_count(self.graph)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return RdParams.initial(self.graph, rng).flatten()

    def unpack(self, flat) -> RdParams:
        return RdParams.unflatten(flat, self.graph)

    def loss_and_grad(self, flat, batch, loss_kind=None):
        loss, grad = rd_loss_and_grad(self.unpack(flat), self.graph, batch, loss_kind or self.loss_kind)
        return loss, grad.flatten()

    def loss(self, flat, batch, loss_kind=None) -> float:
        batch = _as_batch(batch)
        pred = self.predict(flat, batch)
        return loss_from_residual(pred - batch.y, batch.valid, _loss_kind(loss_kind or self.loss_kind))[0]

    def predict(self, flat, batch) -> np.ndarray:
        batch = _as_batch(batch)
        return rd_forward(self.unpack(flat), self.graph, batch.x, batch.mask_x)

    def save(self, path, flat, meta=None) -> None:
        p = self.unpack(flat)
        save_checkpoint(path, self.kind, self.graph,
                        {"rho": p.rho, "sigma": p.sigma, "b_d": p.b_d, "b_r": p.b_r}, meta)

    def load(self, path) -> np.ndarray:
        ck = load_checkpoint(path, self.graph)
        if ck["model"] != self.kind:
            raise ValueError(f"{path}: checkpoint holds a {ck['model']!r} model")
        a = ck["arrays"]
        return RdParams(a["rho"], a["sigma"], a["b_d"], a["b_r"]).flatten()
