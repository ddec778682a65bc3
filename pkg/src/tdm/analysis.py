"""Retweet time series, breakout detection and CP-factor user clustering."""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .decomp import CPResult, cp_als
from .dimension import NULL, Dimension, KeyType, format_timestamp
from .errors import (
    EmptyInput,
    KTooLarge,
    SchemaError,
    SeriesTooShort,
    ShapeMismatch,
    TypeMismatch,
    UnknownDimension,
    WindowNotMultiple,
)
from .query import DimCondition, select
from .tensor import TypedTensor, ValueType

__all__ = [
    "TimeSeries",
    "Clustering",
    "StabilityResult",
    "PipelineConfig",
    "PipelineReport",
    "time_series",
    "breakout_statistic",
    "detect_breakouts",
    "kmeans",
    "adjusted_rand_index",
    "rank_by_cluster_stability",
    "bot_pipeline",
    "run_pipeline",
    "planted_groups_tensor",
]

logger = logging.getLogger(__name__)


# time series ------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeSeries:
    """Counts per ``window``-second bucket; ``timestamps`` are bucket starts."""

    timestamps: np.ndarray
    counts: np.ndarray
    window: int

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        cs = np.asarray(self.counts, dtype=np.float64)
        if ts.shape != cs.shape or ts.ndim != 1:
            raise ShapeMismatch("timestamps and counts must be 1-d with equal length")
        if len(ts) > 1 and np.any(np.diff(ts) != self.window):
            raise ShapeMismatch("timestamps must be uniformly spaced by the window")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "counts", cs)

    def __len__(self):
        return len(self.counts)

    def total(self) -> float:
        return math.fsum(self.counts)


def time_series(
    t: TypedTensor,
    time_mode: int | str,
    window: int,
    conds: Sequence[DimCondition] = (),
) -> TimeSeries:
    """Total of ``select(t, conds)`` per time bucket of ``window`` seconds.

    Buckets are aligned to multiples of ``window`` since the epoch and span
    every key of the time dimension; empty buckets are zero.  Cells whose
    time key is the null sentinel are dropped.
    """
    try:
        mode = t.mode_of(time_mode)
    except Exception as exc:
        raise UnknownDimension(f"no time mode {time_mode!r} in tensor {t.name!r}") from exc
    dim = t.dims[mode]
    if dim.key_type is not KeyType.TIMESTAMP:
        raise TypeMismatch(f"dimension {dim.name!r} is not a timestamp dimension")
    if not t.value_type.numeric and t.value_type is not ValueType.BOOLEAN:
        raise TypeMismatch("time_series needs numeric values")
    window = int(window)
    if window <= 0 or window % dim.granularity:
        raise WindowNotMultiple(
            f"window {window}s is not a positive multiple of the granularity {dim.granularity}s"
        )
    keys = [k for k in dim.keys if k is not NULL]
    if not keys:
        return TimeSeries(np.zeros(0, np.int64), np.zeros(0), window)
    start = min(keys) // window * window
    n_bins = (max(keys) // window * window - start) // window + 1
    sel = select(t, conds)

    per_slice = math.prod(t.shape) // t.shape[mode]
    stored = np.zeros(t.shape[mode], dtype=np.int64)
    sums: dict[int, list] = {}
    for c, v in sel._data.items():
        sums.setdefault(c[mode], []).append(float(v))
        stored[c[mode]] += 1
    default = float(sel.default)
    counts = [[] for _ in range(n_bins)]
    for i, key in enumerate(dim.keys):
        if key is NULL:
            continue
        b = (key - start) // window
        counts[b].extend(sums.get(i, ()))
        if default:
            counts[b].append(default * (per_slice - stored[i]))
    values = np.array([math.fsum(c) for c in counts])
    stamps = start + window * np.arange(n_bins, dtype=np.int64)
    return TimeSeries(stamps, values, window)


# breakout detection ----------------------------------------------------------------


def _running_medians(x: Sequence[float]) -> np.ndarray:
    """``out[i]`` is the median of ``x[:i + 1]``."""
    out = np.empty(len(x))
    buf: list[float] = []
    for i, v in enumerate(x):
        bisect.insort(buf, v)
        m = len(buf)
        out[i] = buf[m // 2] if m % 2 else 0.5 * (buf[m // 2 - 1] + buf[m // 2])
    return out


def breakout_statistic(x: Sequence[float], min_segment: int) -> np.ndarray:
    """Median-energy statistic for every split ``tau`` of ``x``.

    ``Q[tau] = tau * (n - tau) / n * |median(x[:tau]) - median(x[tau:])|``
    for ``min_segment <= tau <= n - min_segment``; other entries are ``nan``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    q = np.full(n + 1, np.nan)
    if n < 2 * min_segment:
        return q
    left = _running_medians(x)  # left[tau - 1] = median(x[:tau])
    right = _running_medians(x[::-1])[::-1]  # right[tau] = median(x[tau:])
    tau = np.arange(min_segment, n - min_segment + 1)
    q[tau] = tau * (n - tau) / n * np.abs(left[tau - 1] - right[tau])
    return q


_REL_TOL = 1e-9


def _best_split(x: np.ndarray, min_segment: int) -> tuple[int, float]:
    q = breakout_statistic(x, min_segment)
    best = np.nanmax(q)
    # first split within rounding distance of the maximum
    tau = int(np.flatnonzero(q >= best * (1 - _REL_TOL))[0])
    return tau, float(best)


def detect_breakouts(
    s: TimeSeries | Sequence[float],
    min_segment: int = 24,
    n_permutations: int = 199,
    alpha: float = 0.05,
    seed: int = 0,
) -> list[int]:
    """Change points by binary segmentation on the median-energy statistic.

    Parameters
    ----------
    s : TimeSeries or sequence of float
        Series to segment.
    min_segment : int
        Minimum number of points on each side of a split.
    n_permutations : int
        Permutations per candidate split.
    alpha : float
        A split is kept when its permutation p-value
        ``(1 + #{perm > observed}) / (n_permutations + 1)`` is at most ``alpha``.
        Exceedance is strict: on discrete series many permutations tie the
        observed maximum, which would otherwise mask clean steps.
    seed : int
        Seed of the single generator consumed in depth-first segment order.

    Returns
    -------
    list of int
        Sorted 1-based positions of the first point of each new segment.
    """
    x = np.asarray(s.counts if isinstance(s, TimeSeries) else s, dtype=np.float64)
    if min_segment < 1:
        raise ValueError("min_segment must be at least 1")
    if len(x) < 2 * min_segment:
        raise SeriesTooShort(f"series of length {len(x)} needs at least {2 * min_segment} points")
    rng = np.random.default_rng(seed)
    found: list[int] = []

    def segment(lo: int, hi: int) -> None:
        seg = x[lo:hi]
        if hi - lo < 2 * min_segment:
            return
        tau, obs = _best_split(seg, min_segment)
        if obs <= 0:
            return
        hits = 0
        for _ in range(n_permutations):
            perm_stat = np.nanmax(breakout_statistic(rng.permutation(seg), min_segment))
            if perm_stat > obs * (1 + _REL_TOL):
                hits += 1
        p = (1 + hits) / (n_permutations + 1)
        logger.debug("segment [%d, %d): split %d stat %.6g p %.4f", lo, hi, lo + tau, obs, p)
        if p > alpha:
            return
        found.append(lo + tau + 1)
        segment(lo, lo + tau)
        segment(lo + tau, hi)

    segment(0, len(x))
    return sorted(found)


# clustering ------------------------------------------------------------------------


@dataclass
class Clustering:
    """Hard assignment of points to clusters ``1..k``."""

    k: int
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int = 0
    converged: bool = True
    history: list[float] = field(default_factory=list)
    labels: tuple | None = None

    def groups(self) -> dict[int, list]:
        names = self.labels if self.labels is not None else range(1, len(self.assignments) + 1)
        out: dict[int, list] = {}
        for name, c in zip(names, self.assignments):
            out.setdefault(int(c), []).append(name)
        return out

    def sizes(self) -> dict[int, int]:
        return {c: len(m) for c, m in sorted(self.groups().items())}


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            i = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            i = int(rng.choice(rest))
        chosen.append(i)
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int):
    k = len(centers)
    history = []
    assign = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centers)
        new = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(x)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            converged = True
            break
        assign = new
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its centroid
                far = int(d2[np.arange(len(x)), assign].argmax())
                centers[j] = x[far]
    return assign, centers, history, it, converged


def _relabel(assign: np.ndarray, centers: np.ndarray):
    order = list(dict.fromkeys(assign.tolist()))
    order += [j for j in range(len(centers)) if j not in order]
    lookup = np.empty(len(centers), dtype=np.int64)
    lookup[order] = np.arange(1, len(centers) + 1)
    return lookup[assign], centers[order]


def kmeans(
    points,
    k: int,
    max_iter: int = 300,
    n_restarts: int = 10,
    seed: int = 0,
    labels: Sequence | None = None,
) -> Clustering:
    """Lloyd's algorithm with k-means++ seeding, best of ``n_restarts``.

    Cluster ids are 1-based and numbered by first appearance in point order.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ShapeMismatch("points must form a 2-d array")
    n = len(x)
    if n == 0:
        raise EmptyInput("kmeans needs at least one point")
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n:
        raise KTooLarge(f"k={k} exceeds the number of points ({n})")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_restarts)):
        assign, centers, history, it, conv = _lloyd(x, _plus_plus(x, k, rng), max_iter)
        inertia = float(((x - centers[assign]) ** 2).sum())
        if best is None or inertia < best[0]:
            best = (inertia, assign, centers, history, it, conv)
    inertia, assign, centers, history, it, conv = best
    ids, centers = _relabel(assign, centers)
    return Clustering(
        k=k,
        assignments=ids,
        centroids=centers,
        inertia=inertia,
        iterations=it,
        converged=conv,
        history=history,
        labels=None if labels is None else tuple(labels),
    )


def adjusted_rand_index(a: Sequence, b: Sequence) -> float:
    """Adjusted Rand index between two labelings of the same points."""
    a, b = list(a), list(b)
    if len(a) != len(b):
        raise ShapeMismatch("labelings differ in length")
    n = len(a)
    _, ia = np.unique(np.asarray(a, dtype=object).astype(str), return_inverse=True)
    _, ib = np.unique(np.asarray(b, dtype=object).astype(str), return_inverse=True)
    table = np.zeros((ia.max() + 1 if n else 0, ib.max() + 1 if n else 0), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    # pair-confusion form, in exact integers
    rows = table.sum(axis=1)
    cols = table.sum(axis=0)
    sq = int((table.astype(object) ** 2).sum())
    c01 = int((table.astype(object) @ cols.astype(object)).sum()) - sq
    c10 = int((table.T.astype(object) @ rows.astype(object)).sum()) - sq
    c11 = sq - n
    c00 = n * n - c01 - c10 - sq
    tn, fp, fn, tp = c00, c01, c10, c11
    if fn == 0 and fp == 0:
        return 1.0
    return 2.0 * (tp * tn - fn * fp) / ((tp + fn) * (fn + tn) + (tp + fp) * (fp + tn))


# pipeline --------------------------------------------------------------------------


@dataclass
class StabilityResult:
    """Outcome of a rank sweep; ``rank`` is the chosen rank."""

    rank: int
    stabilized: bool
    clusterings: dict[int, Clustering]
    agreement: dict[int, float]
    fits: dict[int, float]

    def __int__(self):
        return self.rank


def _embed_and_cluster(t: TypedTensor, user_mode, rank: int, k: int, seed: int, n_restarts: int = 10,
                       max_iters: int = 500, tol: float = 1e-8) -> tuple[CPResult, Clustering]:
    mode = t.mode_of(user_mode)
    users = t.dims[mode]
    cp = cp_als(t, rank, max_iters=max_iters, tol=tol, seed=seed)
    points = cp.factors[mode]
    k_eff = min(k, len(points))
    if k_eff < k:
        logger.warning("k=%d clamped to the %d users present", k, k_eff)
    clustering = kmeans(points, k_eff, n_restarts=n_restarts, seed=seed, labels=users.keys)
    return cp, clustering


def rank_by_cluster_stability(
    t: TypedTensor,
    user_mode,
    k: int,
    rank_range: Sequence[int],
    seed: int = 0,
    threshold: float = 1.0,
    n_restarts: int = 10,
) -> StabilityResult:
    """Smallest rank whose user clustering agrees with the next rank's.

    Agreement is the adjusted Rand index; ranks are swept in order and the
    sweep stops at the first pair reaching ``threshold``.  Without such a
    pair the largest rank is returned with ``stabilized=False``.
    """
    ranks = list(rank_range)
    if not ranks:
        raise EmptyInput("rank_range is empty")
    if any(b <= a for a, b in zip(ranks, ranks[1:])):
        raise ValueError("rank_range must be strictly ascending")
    clusterings: dict[int, Clustering] = {}
    agreement: dict[int, float] = {}
    fits: dict[int, float] = {}
    prev = None
    for r in ranks:
        cp, cl = _embed_and_cluster(t, user_mode, r, k, seed, n_restarts)
        clusterings[r], fits[r] = cl, cp.final_fit
        if prev is not None:
            agreement[prev] = adjusted_rand_index(clusterings[prev].assignments, cl.assignments)
            logger.info("rank %d vs %d: ARI %.6f", prev, r, agreement[prev])
            if agreement[prev] >= threshold:
                return StabilityResult(prev, True, clusterings, agreement, fits)
        prev = r
    return StabilityResult(ranks[-1], False, clusterings, agreement, fits)


def bot_pipeline(t: TypedTensor, user_mode, rank: int, k: int, seed: int = 0, n_restarts: int = 10) -> Clustering:
    """CP-decompose ``t`` and cluster the user-factor rows into ``k`` groups.

    The rows are used unscaled (weights are not folded in).  ``k`` is clamped
    to the number of users.  The clustering is labeled by user keys.
    """
    return _embed_and_cluster(t, user_mode, rank, k, seed, n_restarts)[1]


@dataclass(frozen=True)
class PipelineConfig:
    """One entry of the ``pipelines`` section of a schema file."""

    name: str
    tensor: str
    user_mode: Any
    k: int
    rank: int | None = None
    rank_range: tuple[int, ...] | None = None
    seed: int = 0
    n_restarts: int = 10
    threshold: float = 1.0
    breakout: Mapping[str, Any] | None = None
    truth: str | None = None

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> PipelineConfig:
        allowed = {"name", "tensor", "user_mode", "k", "rank", "rank_range", "seed",
                   "n_restarts", "threshold", "breakout", "truth"}
        extra = set(raw) - allowed
        if extra:
            raise SchemaError(f"unknown pipeline keys: {sorted(extra)}")
        for key in ("name", "tensor", "user_mode", "k"):
            if key not in raw:
                raise SchemaError(f"pipeline needs {key!r}")
        if ("rank" in raw) == ("rank_range" in raw):
            raise SchemaError("pipeline needs exactly one of 'rank' or 'rank_range'")
        rank_range = raw.get("rank_range")
        if rank_range is not None:
            if isinstance(rank_range, Mapping):
                rank_range = range(rank_range["min"], rank_range["max"] + 1)
            rank_range = tuple(int(r) for r in rank_range)
            if not rank_range or min(rank_range) < 1:
                raise SchemaError("rank_range must hold positive ranks")
        if "rank" in raw and int(raw["rank"]) < 1:
            raise SchemaError("rank must be positive")
        if int(raw["k"]) < 1:
            raise SchemaError("k must be positive")
        breakout = raw.get("breakout")
        if breakout is not None and ("time_mode" not in breakout or "window" not in breakout):
            raise SchemaError("breakout settings need 'time_mode' and 'window'")
        return cls(
            name=raw["name"],
            tensor=raw["tensor"],
            user_mode=raw["user_mode"],
            k=int(raw["k"]),
            rank=None if raw.get("rank") is None else int(raw["rank"]),
            rank_range=rank_range,
            seed=int(raw.get("seed", 0)),
            n_restarts=int(raw.get("n_restarts", 10)),
            threshold=float(raw.get("threshold", 1.0)),
            breakout=breakout,
            truth=raw.get("truth"),
        )


@dataclass
class PipelineReport:
    cp: CPResult
    clustering: Clustering
    stability: StabilityResult | None
    series: TimeSeries | None
    change_points: list[int]
    ari: float | None

    def summary(self) -> dict[str, Any]:
        out = {
            "rank": self.cp.rank,
            "fit": round(float(self.cp.final_fit), 12),
            "inertia": round(float(self.clustering.inertia), 12),
            "k": self.clustering.k,
            "cluster_sizes": {str(c): n for c, n in self.clustering.sizes().items()},
            "change_points": list(self.change_points),
        }
        if self.series is not None:
            out["change_point_times"] = [
                format_timestamp(int(self.series.timestamps[i - 1])) for i in self.change_points
            ]
        if self.stability is not None:
            out["stabilized"] = self.stability.stabilized
            out["rank_agreement"] = {str(r): round(a, 12) for r, a in self.stability.agreement.items()}
        if self.ari is not None:
            out["ari"] = round(self.ari, 12)
        return out


def run_pipeline(t: TypedTensor, config: PipelineConfig, truth: Mapping[Any, Any] | None = None,
                 seed: int | None = None) -> PipelineReport:
    """Rank choice, clustering, optional breakouts and optional truth scoring."""
    seed = config.seed if seed is None else seed
    stability = None
    if config.rank_range is not None:
        stability = rank_by_cluster_stability(
            t, config.user_mode, config.k, config.rank_range, seed=seed,
            threshold=config.threshold, n_restarts=config.n_restarts,
        )
        rank = stability.rank
    else:
        rank = config.rank
    cp, clustering = _embed_and_cluster(t, config.user_mode, rank, config.k, seed, config.n_restarts)
    series, change_points = None, []
    if config.breakout:
        b = config.breakout
        series = time_series(t, b["time_mode"], int(b["window"]))
        min_segment = int(b.get("min_segment", 24))
        if len(series) >= 2 * min_segment:
            change_points = detect_breakouts(
                series, min_segment, int(b.get("n_permutations", 199)),
                float(b.get("alpha", 0.05)), seed,
            )
        else:
            logger.warning("series of %d buckets is too short for breakout detection", len(series))
    ari = None
    if truth is not None:
        users = clustering.labels
        missing = [u for u in users if u not in truth]
        if missing:
            raise SchemaError(f"truth labels missing for users {missing[:5]}")
        ari = adjusted_rand_index([truth[u] for u in users], clustering.assignments)
    return PipelineReport(cp, clustering, stability, series, change_points, ari)


# synthetic data --------------------------------------------------------------------

SYNTH_EPOCH = 1519603200  # 2018-02-26T00:00:00Z


def planted_groups_tensor(
    n_users: int = 200,
    n_hashtags: int = 50,
    n_hours: int = 168,
    n_groups: int = 3,
    events_per_user: float = 120.0,
    noise_events: float = 4.0,
    seed: int = 0,
    name: str = "retweets",
) -> tuple[TypedTensor, np.ndarray]:
    """Users x hashtags x hours counts with planted behavioral groups.

    Each group owns a disjoint block of hashtags and a distinct burst of
    active hours; users also emit a few uniform background events.

    Returns
    -------
    tensor : TypedTensor
        Integer counts, default 0.
    truth : ndarray of int
        1-based group of each user, in user order.
    """
    rng = np.random.default_rng(seed)
    truth = np.sort(rng.integers(1, n_groups + 1, size=n_users))
    truth = rng.permutation(truth)
    blocks = np.array_split(np.arange(n_hashtags), n_groups)
    hours = np.arange(n_hours)
    profiles_h = np.zeros((n_groups, n_hashtags))
    profiles_t = np.zeros((n_groups, n_hours))
    for g in range(n_groups):
        profiles_h[g, blocks[g]] = rng.uniform(0.5, 1.5, size=len(blocks[g]))
        centre = (g + 0.5) * n_hours / n_groups
        width = n_hours / (4.0 * n_groups)
        profiles_t[g] = np.exp(-0.5 * ((hours - centre) / width) ** 2)
    profiles_h /= profiles_h.sum(axis=1, keepdims=True)
    profiles_t /= profiles_t.sum(axis=1, keepdims=True)
    activity = rng.uniform(0.7, 1.3, size=n_users)

    data: dict[tuple, int] = {}
    cells = n_hashtags * n_hours
    for u in range(n_users):
        g = truth[u] - 1
        lam = activity[u] * events_per_user * np.outer(profiles_h[g], profiles_t[g]).ravel()
        lam += noise_events / cells
        counts = rng.poisson(lam)
        for flat in np.flatnonzero(counts):
            h, tt = divmod(int(flat), n_hours)
            data[(u, h, tt)] = int(counts[flat])
    width_u = len(str(n_users))
    width_h = len(str(n_hashtags))
    dims = [
        Dimension("user", KeyType.STRING, [f"u{i:0{width_u}d}" for i in range(1, n_users + 1)], alias="U"),
        Dimension("hashtag", KeyType.STRING, [f"h{i:0{width_h}d}" for i in range(1, n_hashtags + 1)], alias="H"),
        Dimension("time", KeyType.TIMESTAMP, [SYNTH_EPOCH + 3600 * i for i in range(n_hours)], alias="T"),
    ]
    return TypedTensor._trusted(name, dims, ValueType.INTEGER, 0, data), truth
