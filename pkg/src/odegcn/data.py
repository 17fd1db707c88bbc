"""Time-series ingestion, calendar splits and synthetic generators.

Zero-valued cells are treated as missing everywhere, as in the public
traffic and ILI datasets. Timestamps are read as naive local times; no
timezone conversion is applied.
"""

from __future__ import annotations

import calendar
import csv
import datetime as dt
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .graph import DirectedGraph, GraphError, random_one_directional, ring_graph
from .rdgcn import PairBatch, RdParams, rd_forward
from .sirgcn import SirEpisode, SirParams, SirSamples, materialize_constraints, sigmoid
from .sirgcn import _contact, _visiting_population

WEEK = 7 * 86400
_ISO_WEEK = re.compile(r"^(\d{4})-W(\d{2})$")

TOPOLOGIES = ("ring", "random-one-directional")
PATTERNS = ("none", "symmetric-periodic", "shifted-periodic")
SPLIT_MODES = ("traffic-weekday-weekend", "ili-season")


class DataError(ValueError):
    pass


class TrajectoryDivergedError(RuntimeError):
    pass


@dataclass
class TimeSeriesTable:
    """Uniformly sampled per-vertex series.

    ``timestamps`` are integer epoch seconds (for weekly data, the Monday of
    each ISO week). ``mask`` is True where a value was observed.
    """

    timestamps: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    resolution: int
    time_kind: str = "epoch"
    columns: list = field(default_factory=list)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.mask.shape:
            raise DataError("values and mask must be matching 2-D arrays")
        if self.timestamps.shape != (self.values.shape[0],):
            raise DataError("one timestamp per row required")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise DataError("observed values must be finite")
        steps = np.diff(self.timestamps)
        if steps.size and (np.any(steps <= 0) or np.any(steps != steps[0])):
            raise DataError("timestamps must be strictly increasing and uniformly spaced")
        if not self.columns:
            prefix = "region_" if self.time_kind == "week" else "v"
            self.columns = [f"{prefix}{i}" for i in range(self.n)]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]


def _utc(ts) -> dt.datetime:
    return dt.datetime.fromtimestamp(int(ts), dt.timezone.utc)


def _parse_week(label: str) -> int:
    m = _ISO_WEEK.match(label.strip())
    if not m:
        raise DataError(f"bad ISO week label {label!r}")
    monday = dt.date.fromisocalendar(int(m.group(1)), int(m.group(2)), 1)
    return calendar.timegm(monday.timetuple())


def _week_label(ts: int) -> str:
    year, week, _ = _utc(ts).date().isocalendar()
    return f"{year}-W{week:02d}"


def load_series(path) -> TimeSeriesTable:
    """Read ``timestamp,v0,...`` (epoch seconds) or ``week,region_0,...`` (ISO weeks)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"series file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[0] not in ("timestamp", "week") or len(header) < 2:
        raise DataError(f"{path}: first column must be 'timestamp' or 'week'")
    kind = "week" if header[0] == "week" else "epoch"
    width = len(header)
    stamps, vals = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
        try:
            stamps.append(_parse_week(row[0]) if kind == "week" else int(row[0]))
            vals.append([float(c) if c.strip() else 0.0 for c in row[1:]])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not vals:
        raise DataError(f"{path}: no data rows")
    values = np.array(vals)
    if np.any(np.isinf(values)):
        raise DataError(f"{path}: infinite values")
    mask = np.isfinite(values) & (values != 0.0)
    values = np.where(mask, values, 0.0)
    stamps = np.array(stamps, dtype=np.int64)
    if np.any(np.diff(stamps) <= 0):
        raise DataError(f"{path}: timestamps are not strictly increasing")
    resolution = int(stamps[1] - stamps[0]) if stamps.size > 1 else (WEEK if kind == "week" else 300)
    return TimeSeriesTable(stamps, values, mask, resolution, kind, header[1:])


def write_series(path, table: TimeSeriesTable) -> None:
    """Write a table in the loader's format; unobserved cells become 0."""
    first = "week" if table.time_kind == "week" else "timestamp"
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([first, *table.columns])
        for ts, row, m in zip(table.timestamps, table.values, table.mask):
            stamp = _week_label(ts) if table.time_kind == "week" else str(int(ts))
            w.writerow([stamp, *(repr(float(v)) if ok else "0" for v, ok in zip(row, m))])


def load_populations(path, columns=None) -> np.ndarray:
    """Read ``region,N``; regions are column names or zero-based indices."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"population file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != ["region", "N"]:
        raise DataError(f"{path}: expected header 'region,N'")
    lookup = {name: i for i, name in enumerate(columns or [])}
    entries = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"{path}:{lineno}: expected 2 columns")
        key = row[0].strip()
        idx = lookup[key] if key in lookup else int(key)
        entries[idx] = float(row[1])
    n = len(columns) if columns else len(entries)
    if sorted(entries) != list(range(n)):
        raise DataError(f"{path}: populations must cover regions 0..{n - 1} exactly once")
    N = np.array([entries[i] for i in range(n)])
    if np.any(N <= 0):
        raise DataError(f"{path}: populations must be positive")
    return N


def write_populations(path, N, columns) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "N"])
        for name, v in zip(columns, N):
            w.writerow([name, repr(float(v))])


def estimate_populations(table: TimeSeriesTable) -> np.ndarray:
    """Ten times the average annual sum of observed infectious counts."""
    years = np.array([_utc(int(t) + 3 * 86400).year for t in table.timestamps])
    obs = np.where(table.mask, table.values, 0.0)
    sums = np.array([obs[years == y].sum(axis=0) for y in np.unique(years)])
    N = 10.0 * sums.mean(axis=0)
    if np.any(N <= 0):
        raise DataError("a region has no observed cases; supply a populations file")
    return N


# --------------------------------------------------------------------- splits


@dataclass
class SplitSpec:
    mode: str = "traffic-weekday-weekend"
    train_window: tuple = (8.0, 12.0)
    test_window: tuple = (13.0, 14.0)
    train_days: int | None = 12
    ratios: tuple | None = None
    seed: int = 0
    block: int = 0
    n_blocks: int = 5
    s0_fraction: float = 0.1

    def __post_init__(self):
        if self.mode not in SPLIT_MODES:
            raise ValueError(f"split mode must be one of {SPLIT_MODES}, got {self.mode!r}")
        if self.ratios is None:
            self.ratios = (3, 1) if self.mode == "traffic-weekday-weekend" else (5, 2)
        self.train_window = tuple(float(v) for v in self.train_window)
        self.test_window = tuple(float(v) for v in self.test_window)


class Split(NamedTuple):
    train: object
    val: object
    test: object
    train_index: np.ndarray
    val_index: np.ndarray
    test_index: np.ndarray


def _ratio_cut(k: int, ratios) -> int:
    a, b = ratios
    return int(round(k * a / (a + b)))


def weekday_blocks(days: np.ndarray, length: int | None, count: int, seed: int) -> list:
    """Random blocks of ``length`` consecutive weekdays drawn from ``days``."""
    if length is None:
        return [days]
    starts = len(days) - length + 1
    if length < 1 or starts < 1:
        raise DataError(f"need {length} weekdays, table has {len(days)}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(starts, size=min(count, starts), replace=False)
    return [days[s:s + length] for s in picks]


def _traffic_pair_index(table: TimeSeriesTable, spec: SplitSpec):
    ts = table.timestamps
    day = ts // 86400
    weekday = (day + 3) % 7  # 1970-01-01 was a Thursday
    hour = (ts % 86400) / 3600.0
    same_day = day[:-1] == day[1:]

    def in_window(win):
        lo, hi = win
        w = (hour >= lo) & (hour < hi)
        return w[:-1] & w[1:] & same_day

    weekdays = np.unique(day[weekday < 5])
    blocks = weekday_blocks(weekdays, spec.train_days, spec.n_blocks, spec.seed)
    if not 0 <= spec.block < len(blocks):
        raise DataError(f"block {spec.block} out of range ({len(blocks)} blocks)")
    chosen = np.isin(day[:-1], blocks[spec.block])
    train_idx = np.flatnonzero(in_window(spec.train_window) & chosen & (weekday[:-1] < 5))
    test_idx = np.flatnonzero(in_window(spec.test_window) & (weekday[:-1] >= 5))
    return train_idx, test_idx


def _pairs(table: TimeSeriesTable, idx: np.ndarray) -> PairBatch:
    v, m = table.values, table.mask
    return PairBatch(v[idx], v[idx + 1], m[idx], m[idx + 1])


def _drop_unobserved(table, idx):
    ok = (table.mask[idx] & table.mask[idx + 1]).any(axis=1)
    return idx[ok]


def season_of(ts) -> np.ndarray:
    """0=winter, 1=spring, 2=summer, 3=fall, from the Thursday of each ISO week."""
    months = np.array([_utc(int(t) + 3 * 86400).month for t in np.atleast_1d(ts)])
    return (months % 12) // 3


def season_runs(table: TimeSeriesTable) -> list:
    """Maximal runs of consecutive rows in the same season, as ``(start, stop)``."""
    s = season_of(table.timestamps)
    cuts = np.flatnonzero(np.diff(s) != 0) + 1
    bounds = np.concatenate([[0], cuts, [len(s)]])
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def ili_episodes(table: TimeSeriesTable, N, s0_fraction: float = 0.1) -> list:
    """One :class:`SirEpisode` per season run; susceptibles restart at ``s0_fraction * N``."""
    N = np.asarray(N, dtype=float)
    eps = []
    for a, b in season_runs(table):
        I = np.where(table.mask[a:b], table.values[a:b], 0.0)
        R0 = N - s0_fraction * N - I[0]
        eps.append((a, SirEpisode(N, R0, I, t0=a, mask=table.mask[a:b])))
    return eps


def _ili_split(table: TimeSeriesTable, spec: SplitSpec, N):
    s = season_of(table.timestamps)
    parts = {"train": [], "test": []}
    index = {"train": [], "test": []}
    for a, ep in ili_episodes(table, N, spec.s0_fraction):
        if ep.I.shape[0] < 2:
            continue
        regime = "train" if s[a] in (0, 2) else "test"
        smp = ep.samples()
        rows = np.arange(a, a + len(smp))
        keep = smp.valid.any(axis=1)
        parts[regime].append(smp.take(np.flatnonzero(keep)))
        index[regime].append(rows[keep])
    if not parts["train"] or not parts["test"]:
        raise DataError("table does not cover both Winter/Summer and Spring/Fall weeks")
    train_all = SirSamples.concat(parts["train"])
    test = SirSamples.concat(parts["test"])
    tr_idx = np.concatenate(index["train"])
    te_idx = np.concatenate(index["test"])
    cut = _ratio_cut(len(train_all), spec.ratios)
    k = len(train_all)
    return Split(train_all.take(np.arange(cut)), train_all.take(np.arange(cut, k)), test,
                 tr_idx[:cut], tr_idx[cut:], te_idx)


def build_split(table: TimeSeriesTable, spec: SplitSpec, populations=None) -> Split:
    """Mismatched train/val/test pairs.

    Traffic mode trains on weekday ``train_window`` pairs from one block of
    ``train_days`` consecutive weekdays (``None`` = every weekday) and tests
    on weekend ``test_window`` pairs. ILI mode trains on Winter and Summer
    weeks and tests on Spring and Fall. The train part is cut
    chronologically into train and validation by ``spec.ratios``. Pairs with
    no vertex observed at both ends are dropped; the rest carry masks.
    """
    if spec.mode == "ili-season":
        N = estimate_populations(table) if populations is None else np.asarray(populations, float)
        return _ili_split(table, spec, N)
    train_idx, test_idx = _traffic_pair_index(table, spec)
    train_idx = _drop_unobserved(table, train_idx)
    test_idx = _drop_unobserved(table, test_idx)
    if train_idx.size < 2 or test_idx.size == 0:
        raise DataError(f"split is infeasible: {train_idx.size} train pairs, {test_idx.size} test pairs")
    cut = _ratio_cut(train_idx.size, spec.ratios)
    tr, va = train_idx[:cut], train_idx[cut:]
    return Split(_pairs(table, tr), _pairs(table, va), _pairs(table, test_idx), tr, va, test_idx)


def consecutive_pairs(table: TimeSeriesTable) -> PairBatch:
    """All observed ``(t, t+1)`` pairs of a table, in order."""
    idx = _drop_unobserved(table, np.arange(len(table) - 1))
    return _pairs(table, idx)


# ----------------------------------------------------------------- synthetic


@dataclass
class SynthConfig:
    """Synthetic dataset recipe.

    The pattern term added at step ``t`` and vertex ``i`` is
    ``g_amplitude * sin(2 pi t / g_period + phase_i [+ g_shift]) + g_offset``
    (the shift only for ``shifted-periodic``), plus Gaussian noise of
    standard deviation ``noise_sd``. Phases are uniform on ``[0, 2 pi)``.
    """

    model: str = "rd"
    n: int = 20
    topology: str = "random-one-directional"
    num_edges: int | None = None
    horizon: int = 2000
    episode_length: int = 50
    g_pattern: str = "none"
    g_amplitude: float = 1.0
    g_period: float = 24.0
    g_shift: float = math.pi
    g_offset: float = 0.0
    noise_sd: float = 0.0
    seed: int = 0
    start: str = "2012-03-05"
    resolution: int = 300
    speed_low: float = 30.0
    speed_high: float = 70.0
    # SIR generator
    beta_low: float = 0.2
    beta_high: float = 0.8
    gamma: float = 0.03
    pop_low: float = 2e4
    pop_high: float = 2e5
    s0_fraction: float = 0.1
    rd_params: RdParams | None = None
    sir_params: SirParams | None = None

    def __post_init__(self):
        if self.model not in ("rd", "sir"):
            raise ValueError(f"model must be 'rd' or 'sir', got {self.model!r}")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}, got {self.topology!r}")
        if self.g_pattern not in PATTERNS:
            raise ValueError(f"g_pattern must be one of {PATTERNS}, got {self.g_pattern!r}")
        if self.n < 1 or self.horizon < 2 or self.episode_length < 2:
            raise ValueError("n >= 1, horizon >= 2 and episode_length >= 2 required")


def _streams(seed: int):
    graph_ss, param_ss, phase_ss, traj_ss = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(graph_ss), np.random.default_rng(param_ss),
            np.random.default_rng(phase_ss), np.random.default_rng(traj_ss))


def make_graph(cfg: SynthConfig, rng: np.random.Generator) -> DirectedGraph:
    if cfg.topology == "ring":
        return ring_graph(cfg.n)
    if cfg.n == 1:
        return DirectedGraph.from_edges(1, [])
    m = cfg.num_edges if cfg.num_edges is not None else max(cfg.n - 1, int(round(1.15 * cfg.n)))
    m = min(m, cfg.n * (cfg.n - 1) // 2)
    return random_one_directional(cfg.n, m, rng)


def random_rd_params(g: DirectedGraph, rng: np.random.Generator, budget: float = 0.9) -> RdParams:
    """Positive edge weights scaled so each vertex's total coupling is at most ``budget``."""
    rho = rng.uniform(0.05, 0.3, g.num_edges)
    sigma = rng.uniform(0.02, 0.15, g.num_edges)
    load = np.bincount(g.src, rho, minlength=g.n) + np.bincount(g.dst, sigma, minlength=g.n)
    scale = min(1.0, budget / load.max()) if load.size and load.max() > 0 else 1.0
    return RdParams(rho * scale, sigma * scale, rng.uniform(-0.05, 0.05, g.n), rng.uniform(-0.2, 0.2, g.n))


def linearized_spectral_radius(p: RdParams, g: DirectedGraph) -> float:
    """Spectral radius of the Jacobian of the RD step at a uniform state with zero reaction bias."""
    J = np.eye(g.n)
    np.add.at(J, (g.src, g.dst), p.rho)
    np.add.at(J, (g.src, g.src), -p.rho)
    np.add.at(J, (g.dst, g.src), p.sigma)
    np.add.at(J, (g.dst, g.dst), -p.sigma)
    return float(np.max(np.abs(np.linalg.eigvals(J))))


def pattern_values(kind, steps, phases, amplitude, period, shift=0.0, offset=0.0) -> np.ndarray:
    steps = np.asarray(steps, dtype=float)[:, None]
    if kind == "none":
        return np.zeros((steps.shape[0], len(phases))) + offset
    arg = 2.0 * math.pi * steps / period + phases[None, :]
    if kind == "shifted-periodic":
        arg = arg + shift
    return amplitude * np.sin(arg) + offset


@dataclass
class RdDomain:
    """Shared ground truth of one synthetic traffic domain family."""

    graph: DirectedGraph
    params: RdParams
    phases: np.ndarray


def make_rd_domain(cfg: SynthConfig) -> RdDomain:
    g_rng, p_rng, ph_rng, _ = _streams(cfg.seed)
    g = make_graph(cfg, g_rng)
    params = cfg.rd_params if cfg.rd_params is not None else random_rd_params(g, p_rng)
    params.validate(g)
    if linearized_spectral_radius(params, g) > 1.0 + 1e-9:
        raise TrajectoryDivergedError("RD parameters have an expanding linear part; trajectories would diverge")
    return RdDomain(g, params, ph_rng.uniform(0.0, 2.0 * math.pi, g.n))


def _start_ts(cfg: SynthConfig) -> int:
    d = dt.date.fromisoformat(cfg.start)
    return calendar.timegm(d.timetuple())


class RdDataset(NamedTuple):
    graph: DirectedGraph
    table: TimeSeriesTable
    params: RdParams
    injected: np.ndarray  # (T-1, n) pattern+noise added at each transition; NaN across episode gaps


def simulate_rd(domain: RdDomain, cfg: SynthConfig, rng: np.random.Generator) -> RdDataset:
    """Forward-Euler episodes ``x(t+1) = x + F(x) + G(t) + noise`` separated by one missing row."""
    g, p = domain.graph, domain.params
    T = cfg.horizon
    values = np.zeros((T, g.n))
    mask = np.zeros((T, g.n), dtype=bool)
    injected = np.full((T - 1, g.n), np.nan)
    G = pattern_values(cfg.g_pattern, np.arange(T), domain.phases, cfg.g_amplitude,
                       cfg.g_period, cfg.g_shift, cfg.g_offset)
    t = 0
    while t < T:
        x = rng.uniform(cfg.speed_low, cfg.speed_high, g.n)
        values[t], mask[t] = x, True
        stop = min(t + cfg.episode_length, T)
        for k in range(t, stop - 1):
            inj = G[k] + (rng.normal(0.0, cfg.noise_sd, g.n) if cfg.noise_sd > 0 else 0.0)
            x = rd_forward(p, g, x) + inj
            if not np.all(np.abs(x) < 1e6):
                raise TrajectoryDivergedError(f"trajectory left the magnitude guard at step {k + 1}")
            values[k + 1], mask[k + 1] = x, True
            injected[k] = inj
        t = stop + 1  # one unobserved row between episodes
    if np.any(values[mask] == 0.0):
        raise DataError("simulated an exact zero, which the CSV format reads as missing")
    stamps = _start_ts(cfg) + cfg.resolution * np.arange(T, dtype=np.int64)
    table = TimeSeriesTable(stamps, values, mask, cfg.resolution, "epoch")
    return RdDataset(g, table, p, injected)


def synth_rd(cfg: SynthConfig) -> RdDataset:
    """Synthetic traffic series with known reaction-diffusion ground truth."""
    domain = make_rd_domain(cfg)
    return simulate_rd(domain, cfg, _streams(cfg.seed)[3])


class SirDataset(NamedTuple):
    graph: DirectedGraph
    episodes: list
    params: SirParams
    table: TimeSeriesTable
    N: np.ndarray
    S: np.ndarray
    R: np.ndarray


def _logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def random_sir_params(g: DirectedGraph, cfg: SynthConfig, rng: np.random.Generator, single_beta=False) -> SirParams:
    phi_raw = rng.uniform(-3.0, 0.0, g.num_edges)
    if single_beta:
        beta = np.array([0.5 * (cfg.beta_low + cfg.beta_high)])
    else:
        beta = rng.uniform(cfg.beta_low, cfg.beta_high, g.n)
    return SirParams(phi_raw, _logit(beta), float(_logit(cfg.gamma)), single_beta)


def synth_sir(cfg: SynthConfig) -> SirDataset:
    """Weekly SIR-network series; each season run is one epidemic episode.

    At every season start the susceptible pool is reset to
    ``s0_fraction * N`` and a few infections are imported, matching how
    :func:`ili_episodes` reconstructs state from observed counts.
    """
    g_rng, p_rng, _, t_rng = _streams(cfg.seed)
    g = make_graph(cfg, g_rng)
    params = cfg.sir_params if cfg.sir_params is not None else random_sir_params(g, cfg, p_rng)
    m = materialize_constraints(params, g)
    rows, cols, vals = m.travel_entries(g)
    N = t_rng.uniform(cfg.pop_low, cfg.pop_high, g.n)
    Np = _visiting_population(rows, cols, vals, N, g.n)

    d = dt.date.fromisoformat(cfg.start)
    monday = d - dt.timedelta(days=d.weekday())
    stamps = calendar.timegm(monday.timetuple()) + WEEK * np.arange(cfg.horizon, dtype=np.int64)
    table_stub = TimeSeriesTable(stamps, np.ones((cfg.horizon, g.n)), np.ones((cfg.horizon, g.n), bool), WEEK, "week")

    I_all = np.zeros((cfg.horizon, g.n))
    S_all = np.zeros_like(I_all)
    R_all = np.zeros_like(I_all)
    episodes = []
    I = np.zeros(g.n)
    for a, b in season_runs(table_stub):
        I = I + t_rng.uniform(5.0, 50.0, g.n)
        S = cfg.s0_fraction * N
        R = N - S - I
        R0 = R.copy()
        for t in range(a, b):
            I_all[t], S_all[t], R_all[t] = I, S, R
            if t == b - 1:
                break
            bvec, _, _ = _contact(rows, cols, vals, m.beta, Np, I, g.n)
            new = S * bvec
            rec = m.gamma * I
            S, I, R = S - new, I + new - rec, R + rec
        episodes.append(SirEpisode(N, R0, I_all[a:b].copy(), t0=a))
    if np.any(I_all <= 0):
        raise DataError("simulated a non-positive infectious count")
    table = TimeSeriesTable(stamps, I_all, np.ones_like(I_all, bool), WEEK, "week")
    return SirDataset(g, episodes, params, table, N, S_all, R_all)


def sir_samples(episodes) -> SirSamples:
    return SirSamples.from_episodes(episodes)
