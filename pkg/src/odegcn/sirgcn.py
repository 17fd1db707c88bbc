"""SIR-network model for infectious-case forecasting.

Residents of vertex ``i`` spend a fraction ``phi_ij`` of their time at
destination ``j`` (``j = i`` included). Infection at ``j`` happens at rate
``beta_j`` among the population present there, ``Np_j = sum_k phi_kj N_k``.
The one-step predictor is::

    I(t+1) = I(t) + K I(t) - gamma I(t)
    K_ik   = S_i sum_j beta_j phi_ij phi_kj / Np_j

with ``S = N - I - R`` and ``R(t) = R(t0) + gamma * sum_{s=t0}^{t-1} I(s)``.

Travel fractions are parametrized by one logit per edge. Each row is
normalized together with a fixed self-logit, so rows sum to one and the
self-fraction costs no parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .checkpoint import load_checkpoint, save_checkpoint
from .graph import DirectedGraph, GraphError, scatter_sum
from .rdgcn import _loss_kind, loss_from_residual

SELF_LOGIT = 1.0


class DegeneratePopulationError(ValueError):
    """A destination has zero visiting population, so its contact rate is undefined."""


def sigmoid(z):
    return expit(np.asarray(z, dtype=float))


@dataclass
class SirParams:
    phi_raw: np.ndarray
    beta_raw: np.ndarray
    gamma_raw: float
    single_beta: bool = False

    def __post_init__(self):
        self.phi_raw = np.asarray(self.phi_raw, dtype=float).reshape(-1)
        self.beta_raw = np.asarray(self.beta_raw, dtype=float).reshape(-1)
        self.gamma_raw = float(self.gamma_raw)

    def validate(self, g: DirectedGraph) -> None:
        if self.phi_raw.shape != (g.num_edges,):
            raise GraphError(f"phi_raw has shape {self.phi_raw.shape}, expected ({g.num_edges},)")
        nb = 1 if self.single_beta else g.n
        if self.beta_raw.shape != (nb,):
            raise GraphError(f"beta_raw has shape {self.beta_raw.shape}, expected ({nb},)")

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.phi_raw, self.beta_raw, [self.gamma_raw]])

    @classmethod
    def unflatten(cls, flat, g: DirectedGraph, single_beta: bool = False) -> "SirParams":
        flat = np.asarray(flat, dtype=float)
        m = g.num_edges
        nb = 1 if single_beta else g.n
        if flat.shape != (m + nb + 1,):
            raise GraphError(f"flat vector has shape {flat.shape}, expected ({m + nb + 1},)")
        return cls(flat[:m].copy(), flat[m:m + nb].copy(), float(flat[-1]), single_beta)

    @classmethod
    def initial(cls, g: DirectedGraph, rng: np.random.Generator, single_beta: bool = False) -> "SirParams":
        return cls(rng.uniform(-0.1, 0.1, g.num_edges), np.zeros(1 if single_beta else g.n), 0.0, single_beta)


def sir_param_count(g: DirectedGraph, single_beta: bool = False) -> int:
    return g.num_edges + (1 if single_beta else g.n) + 1


@dataclass
class Materialized:
    """Constrained parameters: travel fractions, infection and recovery rates."""

    phi_edge: np.ndarray
    phi_self: np.ndarray
    beta: np.ndarray
    gamma: float
    # unnormalized row weights, kept for the backward pass
    w_edge: np.ndarray
    row_total: np.ndarray

    def travel_entries(self, g: DirectedGraph):
        """Sparse travel matrix as ``(rows, cols, values)``, edges first, then the diagonal."""
        diag = np.arange(g.n)
        return (np.concatenate([g.src, diag]), np.concatenate([g.dst, diag]),
                np.concatenate([self.phi_edge, self.phi_self]))

    def dense_phi(self, g: DirectedGraph) -> np.ndarray:
        phi = np.diag(self.phi_self)
        phi[g.src, g.dst] = self.phi_edge
        return phi


def materialize_constraints(p: SirParams, g: DirectedGraph) -> Materialized:
    p.validate(g)
    w_edge = sigmoid(p.phi_raw)
    w_self = float(sigmoid(SELF_LOGIT))
    total = w_self + scatter_sum(w_edge, g.src, g.n)
    beta = sigmoid(p.beta_raw)
    if p.single_beta:
        beta = np.full(g.n, beta[0])
    return Materialized(
        phi_edge=w_edge / total[g.src],
        phi_self=w_self / total,
        beta=beta,
        gamma=float(sigmoid(p.gamma_raw)),
        w_edge=w_edge,
        row_total=total,
    )


@dataclass
class SirState:
    """Epidemic bookkeeping at time ``t`` for one vertex set.

    ``cum_I`` is the sum of infectious counts from ``t0`` up to ``t - 1``,
    so recovered counts follow the forward-Euler accumulation for any gamma.
    """

    N: np.ndarray
    R0: np.ndarray
    cum_I: np.ndarray
    t0: int = 0

    def __post_init__(self):
        self.N = np.asarray(self.N, dtype=float)
        self.R0 = np.asarray(self.R0, dtype=float)
        self.cum_I = np.asarray(self.cum_I, dtype=float)

    @classmethod
    def from_history(cls, N, I_history, R0, t0: int = 0) -> "SirState":
        """State at the last row of ``I_history`` (rows ``t0 .. t``)."""
        hist = np.atleast_2d(np.asarray(I_history, dtype=float))
        return cls(N, R0, hist[:-1].sum(axis=0), t0)

    def recovered(self, gamma: float) -> np.ndarray:
        return self.R0 + gamma * self.cum_I

    def susceptible(self, gamma: float, I_t) -> tuple[np.ndarray, int]:
        """Susceptible counts clamped at zero, with the number of clamped entries."""
        s = self.N - np.asarray(I_t, dtype=float) - self.recovered(gamma)
        overshoot = int(np.sum(s < 0))
        return np.maximum(s, 0.0), overshoot


def _visiting_population(rows, cols, vals, N, n) -> np.ndarray:
    Np = scatter_sum(vals * N[..., rows], cols, n)
    if np.any(Np <= 0):
        raise DegeneratePopulationError("a destination has zero visiting population")
    return Np


def build_K(p: SirParams, g: DirectedGraph, state: SirState, I_t) -> np.ndarray:
    """Dense transformation matrix mapping ``I(t)`` to new infections."""
    m = materialize_constraints(p, g)
    S, _ = state.susceptible(m.gamma, I_t)
    phi = m.dense_phi(g)
    rows, cols, vals = m.travel_entries(g)
    Np = _visiting_population(rows, cols, vals, state.N, g.n)
    return S[:, None] * ((phi * (m.beta / Np)) @ phi.T)


def _contact(rows, cols, vals, beta, Np, I, n):
    """Per-vertex new-infection rate per susceptible, plus intermediates."""
    a = scatter_sum(vals * I[..., rows], cols, n)
    c = beta * a / Np
    b = scatter_sum(vals * c[..., cols], rows, n)
    return b, a, c


def sir_forward(p: SirParams, g: DirectedGraph, state: SirState, I_t) -> np.ndarray:
    """One forward-Euler step ``I + K I - gamma I``."""
    m = materialize_constraints(p, g)
    I = np.asarray(I_t, dtype=float)
    if I.shape[-1] != g.n:
        raise GraphError(f"I has shape {I.shape}, expected trailing dimension {g.n}")
    S, _ = state.susceptible(m.gamma, I)
    rows, cols, vals = m.travel_entries(g)
    Np = _visiting_population(rows, cols, vals, state.N, g.n)
    b, _, _ = _contact(rows, cols, vals, m.beta, Np, I, g.n)
    return I + S * b - m.gamma * I


def sir_rhs(p: SirParams, g: DirectedGraph, S, I, R, N):
    """Right-hand sides ``(dS/dt, dI/dt, dR/dt)`` of the continuous SIR-network system."""
    m = materialize_constraints(p, g)
    rows, cols, vals = m.travel_entries(g)
    Np = _visiting_population(rows, cols, vals, np.asarray(N, dtype=float), g.n)
    b, _, _ = _contact(rows, cols, vals, m.beta, Np, np.asarray(I, dtype=float), g.n)
    new = np.asarray(S, dtype=float) * b
    recover = m.gamma * np.asarray(I, dtype=float)
    return -new, new - recover, recover


@dataclass
class SirSamples:
    """Batched one-step SIR training samples (one row per ``(episode, t)``)."""

    N: np.ndarray
    R0: np.ndarray
    cum_I: np.ndarray
    I: np.ndarray
    y: np.ndarray
    mask_x: np.ndarray
    mask_y: np.ndarray

    def __post_init__(self):
        for name in ("N", "R0", "cum_I", "I", "y"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        for name in ("mask_x", "mask_y"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=bool)))

    def __len__(self):
        return self.I.shape[0]

    def take(self, idx) -> "SirSamples":
        return SirSamples(self.N[idx], self.R0[idx], self.cum_I[idx], self.I[idx], self.y[idx],
                          self.mask_x[idx], self.mask_y[idx])

    @property
    def valid(self) -> np.ndarray:
        return self.mask_x & self.mask_y

    @classmethod
    def concat(cls, parts) -> "SirSamples":
        parts = list(parts)
        return cls(*(np.concatenate([getattr(s, f) for s in parts])
                     for f in ("N", "R0", "cum_I", "I", "y", "mask_x", "mask_y")))

    @classmethod
    def from_episodes(cls, episodes) -> "SirSamples":
        """Build samples from ``(state, I_t, I_next)`` triples or :class:`SirEpisode` objects."""
        parts = []
        for ep in episodes:
            if isinstance(ep, SirEpisode):
                parts.append(ep.samples())
            else:
                state, I_t, I_next = ep
                I_t = np.asarray(I_t, dtype=float)
                I_next = np.asarray(I_next, dtype=float)
                parts.append(cls(state.N, state.R0, state.cum_I, I_t, I_next,
                                 np.ones(I_t.shape, bool), np.ones(I_t.shape, bool)))
        if not parts:
            raise ValueError("empty episode list")
        return cls.concat(parts)


@dataclass
class SirEpisode:
    """Infectious counts for one epidemic period starting at ``t0``.

    ``I`` has shape ``(T, n)``; ``R0`` is the recovered (immune) count at ``t0``.
    ``mask`` marks observed cells (all observed when omitted).
    """

    N: np.ndarray
    R0: np.ndarray
    I: np.ndarray
    t0: int = 0
    mask: np.ndarray | None = None

    def samples(self) -> SirSamples:
        I = np.asarray(self.I, dtype=float)
        T, n = I.shape
        mask = np.ones_like(I, bool) if self.mask is None else np.asarray(self.mask, bool)
        cum = np.vstack([np.zeros(n), np.cumsum(I, axis=0)[:-1]])
        k = T - 1
        N = np.broadcast_to(np.asarray(self.N, float), (k, n))
        R0 = np.broadcast_to(np.asarray(self.R0, float), (k, n))
        return SirSamples(N, R0, cum[:-1], I[:-1], I[1:], mask[:-1], mask[1:])

    def state_at(self, t: int) -> SirState:
        return SirState.from_history(self.N, np.asarray(self.I)[:t + 1], self.R0, self.t0)


def _sir_batch_forward(m: Materialized, g: DirectedGraph, s: SirSamples):
    rows, cols, vals = m.travel_entries(g)
    S_raw = s.N - s.I - s.R0 - m.gamma * s.cum_I
    S = np.maximum(S_raw, 0.0)
    Np = _visiting_population(rows, cols, vals, s.N, g.n)
    b, a, c = _contact(rows, cols, vals, m.beta, Np, s.I, g.n)
    pred = s.I + S * b - m.gamma * s.I
    return pred, (rows, cols, vals, S_raw, S, Np, a, b, c)


def _as_samples(episodes) -> SirSamples:
    if isinstance(episodes, SirSamples):
        return episodes
    return SirSamples.from_episodes(episodes)


def sir_loss_and_grad(p: SirParams, g: DirectedGraph, episodes, loss_kind: str = "mse"):
    """Masked mean loss and its gradient with respect to the raw parameters.

    The backward pass runs through the susceptible count (which depends on
    gamma), the visiting populations, and the row normalization of the
    travel fractions.
    """
    loss_kind = _loss_kind(loss_kind)
    s = _as_samples(episodes)
    if len(s) == 0:
        raise ValueError("empty episode list")
    m = materialize_constraints(p, g)
    pred, (rows, cols, vals, S_raw, S, Np, a, b, c) = _sir_batch_forward(m, g, s)
    loss, dpred = loss_from_residual(pred - s.y, s.valid, loss_kind)

    dS = np.where(S_raw > 0, dpred * b, 0.0)
    dgamma = -np.sum(dpred * s.I) - np.sum(dS * s.cum_I)
    db = dpred * S
    dvals = np.sum(db[:, rows] * c[:, cols], axis=0)
    dc = scatter_sum(db[:, rows] * vals, cols, g.n)
    dbeta = np.sum(dc * a / Np, axis=0)
    da = dc * m.beta / Np
    dNp = -dc * m.beta * a / (Np * Np)
    dvals += np.sum(da[:, cols] * s.I[:, rows] + dNp[:, cols] * s.N[:, rows], axis=0)

    # back through the row normalization phi = w / sum(w)
    rowdot = scatter_sum(dvals * vals, rows, g.n)
    dw = (dvals - rowdot[rows]) / m.row_total[rows]
    dphi_raw = dw[:g.num_edges] * m.w_edge * (1.0 - m.w_edge)

    beta_raw_s = sigmoid(p.beta_raw)
    if p.single_beta:
        dbeta_raw = np.array([dbeta.sum() * beta_raw_s[0] * (1.0 - beta_raw_s[0])])
    else:
        dbeta_raw = dbeta * beta_raw_s * (1.0 - beta_raw_s)
    dgamma_raw = dgamma * m.gamma * (1.0 - m.gamma)
    return loss, SirParams(dphi_raw, dbeta_raw, dgamma_raw, p.single_beta)


class SirModel:
    """Optimizer adapter for the SIR-network model (``single_beta`` selects the one-rate variant)."""

    kind = "sir"

    def __init__(self, graph: DirectedGraph, loss_kind: str = "mse", single_beta: bool = False):
        self.graph = graph
        self.loss_kind = _loss_kind(loss_kind)
        self.single_beta = single_beta

    @property
    def num_params(self) -> int:
        return sir_param_count(self.graph, self.single_beta)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return SirParams.initial(self.graph, rng, self.single_beta).flatten()

    def unpack(self, flat) -> SirParams:
        return SirParams.unflatten(flat, self.graph, self.single_beta)

    def loss_and_grad(self, flat, samples, loss_kind=None):
        loss, grad = sir_loss_and_grad(self.unpack(flat), self.graph, samples, loss_kind or self.loss_kind)
        return loss, grad.flatten()

    def predict(self, flat, samples) -> np.ndarray:
        m = materialize_constraints(self.unpack(flat), self.graph)
        return _sir_batch_forward(m, self.graph, _as_samples(samples))[0]

    def loss(self, flat, samples, loss_kind=None) -> float:
        s = _as_samples(samples)
        return loss_from_residual(self.predict(flat, s) - s.y, s.valid, _loss_kind(loss_kind or self.loss_kind))[0]

    def overshoot(self, flat, samples) -> int:
        """Number of sample entries whose susceptible count had to be clamped at zero."""
        m = materialize_constraints(self.unpack(flat), self.graph)
        s = _as_samples(samples)
        return int(np.sum(s.N - s.I - s.R0 - m.gamma * s.cum_I < 0))

    def save(self, path, flat, meta=None) -> None:
        p = self.unpack(flat)
        meta = dict(meta or {}, single_beta=self.single_beta)
        save_checkpoint(path, self.kind, self.graph,
                        {"phi_raw": p.phi_raw, "beta_raw": p.beta_raw, "gamma_raw": [p.gamma_raw]}, meta)

    def load(self, path) -> np.ndarray:
        ck = load_checkpoint(path, self.graph)
        if ck["model"] != self.kind:
            raise ValueError(f"{path}: checkpoint holds a {ck['model']!r} model")
        a = ck["arrays"]
        single = bool(ck["meta"].get("single_beta", False))
        if single != self.single_beta:
            raise ValueError(f"{path}: single_beta={single} does not match the model")
        return SirParams(a["phi_raw"], a["beta_raw"], a["gamma_raw"][0], single).flatten()
