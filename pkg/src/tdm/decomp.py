"""CP decomposition by alternating least squares and truncated HOSVD.

Both operators work on :class:`~tdm.tensor.TypedTensor` inputs and return
plain result records holding numpy factor matrices.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from .algebra import khatri_rao_all, n_mode_product_dense
from .dimension import Dimension
from .errors import NonNumericValueType, RankOutOfRange, ShapeMismatch, TypeMismatch
from .tensor import (
    TypedTensor,
    ValueType,
    fold_array,
    frobenius_norm,
    from_dense,
    index_dimension,
    unfold_array,
    write_coo,
)

__all__ = [
    "CPResult",
    "TuckerResult",
    "cp_als",
    "hosvd",
    "reconstruct_cp",
    "reconstruct_tucker",
    "fit",
    "mttkrp",
    "write_cp",
    "write_tucker",
]

logger = logging.getLogger(__name__)

PINV_RCOND = 1e-12
# above this many cells the ALS fit uses the norm expansion instead of a dense residual
EXACT_FIT_CELLS = 1 << 20


@dataclass
class CPResult:
    """Weighted sum of rank-1 terms ``sum_r weights[r] * a1[:, r] ∘ ... ∘ aN[:, r]``.

    Factor columns have unit 2-norm; weights are sorted in descending order.
    """

    rank: int
    weights: np.ndarray
    factors: list[np.ndarray]
    iterations: int
    final_fit: float
    fit_history: list[float] = field(default_factory=list)
    converged: bool = False
    singular: bool = False
    dims: tuple[Dimension, ...] = ()


@dataclass
class TuckerResult:
    """``core ×_1 factors[0] ×_2 ... ×_N factors[N-1]`` with orthonormal factors."""

    core: TypedTensor
    factors: list[np.ndarray]
    dims: tuple[Dimension, ...] = ()

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(f.shape[1] for f in self.factors)


def _check_numeric(t: TypedTensor, op: str) -> None:
    if not t.value_type.numeric:
        raise NonNumericValueType(f"{op} requires a numeric tensor")


def _mode_matrices(subs: np.ndarray, vals: np.ndarray, shape) -> list[sparse.csr_matrix]:
    nnz = len(vals)
    cols = np.arange(nnz)
    return [
        sparse.csr_matrix((vals, (subs[:, n], cols)), shape=(shape[n], nnz))
        for n in range(len(shape))
    ]


def _mttkrp(scatter: sparse.csr_matrix, subs: np.ndarray, factors, n: int) -> np.ndarray:
    rank = factors[0].shape[1]
    prod = np.ones((subs.shape[0], rank))
    for k, a in enumerate(factors):
        if k != n:
            prod *= a[subs[:, k]]
    return np.asarray(scatter @ prod)


def mttkrp(t: TypedTensor, factors: Sequence[np.ndarray], mode: int) -> np.ndarray:
    """Sparse ``unfold(t, mode) @ khatri_rao(other factors, reverse mode order)``.

    ``mode`` is 1-based; requires a zero default.
    """
    _check_numeric(t, "mttkrp")
    if t.default != 0:
        raise TypeMismatch("mttkrp requires a tensor with default 0")
    n = t.mode_of(mode)
    subs, vals = t.coo()
    scatter = _mode_matrices(subs, vals.astype(np.float64), t.shape)[n]
    return _mttkrp(scatter, subs, [np.asarray(f, dtype=np.float64) for f in factors], n)


def _cp_dense(weights: np.ndarray, factors: Sequence[np.ndarray], shape) -> np.ndarray:
    if len(weights) == 0:
        return np.zeros(shape)
    if len(factors) == 1:
        return factors[0] @ weights
    kr = khatri_rao_all(list(reversed(factors[1:])))
    return fold_array((factors[0] * weights) @ kr.T, 0, shape)


def _leading_vectors(subs: np.ndarray, vals: np.ndarray, shape, n: int, r: int) -> np.ndarray:
    # eigenvectors of X_(n) X_(n)^T, from the stored entries only
    other = [k for k in range(len(shape)) if k != n]
    col = np.zeros(len(vals), dtype=np.int64)
    stride = 1
    for k in other:
        col += subs[:, k] * stride
        stride *= shape[k]
    x = sparse.csr_matrix((vals, (subs[:, n], col)), shape=(shape[n], stride))
    w, v = np.linalg.eigh((x @ x.T).toarray())
    return _fix_signs(v[:, np.argsort(-w, kind="stable")[:r]])


def _canonical_order(weights: np.ndarray, factors: Sequence[np.ndarray]) -> list[int]:
    stacked = np.concatenate(factors, axis=0)
    return sorted(range(len(weights)), key=lambda r: (-weights[r], tuple(stacked[:, r])))


def cp_als(
    t: TypedTensor,
    rank: int,
    max_iters: int = 500,
    tol: float = 1e-8,
    seed: int = 0,
    init: str = "random",
) -> CPResult:
    """Fit a rank-``rank`` CP model by alternating least squares.

    Parameters
    ----------
    t : TypedTensor
        Numeric tensor of order >= 2 with default 0.
    rank : int
        Number of rank-1 components.
    max_iters : int
        Maximum number of sweeps over all modes.
    tol : float
        Stop once the fit changes by less than ``tol`` between sweeps.
    seed : int
        Seed for the uniform [0, 1) factor initialization.
    init : {"random", "svd"}
        ``"svd"`` starts each factor from the leading left singular vectors
        of its unfolding (uniform columns pad any rank beyond the mode size).
        It escapes the local optima that random starts sometimes hit on
        well-conditioned low-rank data.

    Returns
    -------
    CPResult
        ``fit = 1 - ||t - approx||_F / ||t||_F``.  ``singular`` is set when a
        Gram product was rank deficient and the pseudo-inverse cutoff applied.

    Notes
    -----
    Each mode update solves ``A_n = X_(n) (A_N ⊙ ... ⊙ A_1 without A_n)
    pinv(*_{k != n} A_k^T A_k)``.  The matricized product is evaluated from the
    stored entries only.
    """
    _check_numeric(t, "cp_als")
    if t.default != 0:
        raise TypeMismatch("cp_als requires a tensor with default 0")
    if t.order < 2:
        raise ShapeMismatch("cp_als requires order >= 2")
    if isinstance(rank, bool) or not isinstance(rank, (int, np.integer)) or rank < 1:
        raise RankOutOfRange(f"rank must be a positive integer, got {rank!r}")
    if init not in ("random", "svd"):
        raise ValueError(f"unknown init {init!r}")

    shape = t.shape
    norm_x = frobenius_norm(t)
    if norm_x == 0:
        factors = [np.zeros((s, 0)) for s in shape]
        return CPResult(0, np.zeros(0), factors, 0, 1.0, [1.0], True, False, t.dims)

    rng = np.random.default_rng(seed)
    factors = [rng.random((s, rank)) for s in shape]
    subs, vals = t.coo()
    vals = vals.astype(np.float64)
    scatter = _mode_matrices(subs, vals, shape)
    if init == "svd":
        for n in range(t.order):
            lead = _leading_vectors(subs, vals, shape, n, min(rank, shape[n]))
            factors[n][:, : lead.shape[1]] = lead
    dense_x = t.to_dense().astype(np.float64) if math.prod(shape) <= EXACT_FIT_CELLS else None

    weights = np.ones(rank)
    history: list[float] = []
    singular = False
    converged = False
    last = t.order - 1
    it = 0
    m = None
    for it in range(1, max_iters + 1):
        for n in range(t.order):
            gram = np.ones((rank, rank))
            for k, a in enumerate(factors):
                if k != n:
                    gram *= a.T @ a
            sv = np.linalg.svd(gram, compute_uv=False)
            if sv[-1] <= PINV_RCOND * sv[0]:
                singular = True
            m = _mttkrp(scatter[n], subs, factors, n)
            a_n = m @ np.linalg.pinv(gram, rcond=PINV_RCOND)
            norms = np.linalg.norm(a_n, axis=0)
            weights = norms.copy()
            norms[norms == 0] = 1.0
            factors[n] = a_n / norms

        if dense_x is not None:
            resid = np.linalg.norm(dense_x - _cp_dense(weights, factors, shape))
        else:
            gram = np.ones((rank, rank))
            for a in factors:
                gram *= a.T @ a
            approx_sq = float(weights @ gram @ weights)
            inner = float(np.sum(weights * np.sum(m * factors[last], axis=0)))
            resid = math.sqrt(max(norm_x**2 + approx_sq - 2 * inner, 0.0))
        fit_value = 1.0 - resid / norm_x
        history.append(fit_value)
        logger.debug("cp_als iter %d fit %.12f", it, fit_value)
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol:
            converged = True
            break

    order = _canonical_order(weights, factors)
    weights = weights[order]
    factors = [a[:, order] for a in factors]
    return CPResult(
        rank=rank,
        weights=weights,
        factors=factors,
        iterations=it,
        final_fit=history[-1],
        fit_history=history,
        converged=converged,
        singular=singular,
        dims=t.dims,
    )


def _fix_signs(u: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def hosvd(t: TypedTensor, ranks: Sequence[int] | None = None) -> TuckerResult:
    """Truncated higher-order SVD.

    ``factors[n]`` holds the leading ``ranks[n]`` left singular vectors of the
    mode-n unfolding, each column signed so its largest-magnitude entry is
    positive.  The core is ``t ×_1 U_1^T ... ×_N U_N^T``.  ``ranks=None`` keeps
    every mode at full size.
    """
    _check_numeric(t, "hosvd")
    shape = t.shape
    if ranks is None:
        ranks = shape
    ranks = list(ranks)
    if len(ranks) != t.order:
        raise RankOutOfRange(f"expected {t.order} ranks, got {len(ranks)}")
    for r, s in zip(ranks, shape):
        if isinstance(r, bool) or not isinstance(r, (int, np.integer)) or not 1 <= r <= s:
            raise RankOutOfRange(f"rank {r!r} outside 1..{s}")
    x = t.to_dense().astype(np.float64)
    factors = []
    for n, r in enumerate(ranks):
        unfolded = unfold_array(x, n)
        u, _, _ = np.linalg.svd(unfolded, full_matrices=r > min(unfolded.shape))
        factors.append(_fix_signs(u[:, :r]))
    core = x
    for n, u in enumerate(factors):
        core = n_mode_product_dense(core, u.T, n)
    core_dims = [index_dimension(f"{d.name}_proj", r) for d, r in zip(t.dims, ranks)]
    core_t = from_dense(f"{t.name}_core", core_dims, core, value_type=ValueType.REAL, default=0.0)
    return TuckerResult(core_t, factors, t.dims)


def reconstruct_cp(r: CPResult, dims: Sequence[Dimension] | None = None, name: str = "cp") -> TypedTensor:
    """Dense sum of the weighted rank-1 terms, re-sparsified."""
    dims = tuple(r.dims if dims is None else dims)
    if len(dims) != len(r.factors) or any(
        f.shape != (d.size, len(r.weights)) for f, d in zip(r.factors, dims)
    ):
        raise ShapeMismatch("factor shapes do not match dimensions")
    dense = _cp_dense(np.asarray(r.weights, dtype=np.float64), r.factors, tuple(d.size for d in dims))
    return from_dense(name, dims, dense, value_type=ValueType.REAL, default=0.0)


def reconstruct_tucker(r: TuckerResult, dims: Sequence[Dimension] | None = None, name: str = "tucker") -> TypedTensor:
    dims = tuple(r.dims if dims is None else dims)
    if len(dims) != len(r.factors) or any(
        f.shape != (d.size, c) for f, d, c in zip(r.factors, dims, r.core.shape)
    ):
        raise ShapeMismatch("factor shapes do not match dimensions")
    x = r.core.to_dense().astype(np.float64)
    for n, u in enumerate(r.factors):
        x = n_mode_product_dense(x, u, n)
    return from_dense(name, dims, x, value_type=ValueType.REAL, default=0.0)


def _diff_norm(t: TypedTensor, approx: TypedTensor) -> float:
    if t.default == 0 and approx.default == 0:
        a, b = t._data, approx._data
        total = math.fsum(
            (float(a.get(c, 0)) - float(b.get(c, 0))) ** 2 for c in a.keys() | b.keys()
        )
        return math.sqrt(total)
    diff = t.to_dense().astype(np.float64) - approx.to_dense().astype(np.float64)
    return float(np.linalg.norm(diff))


def fit(t: TypedTensor, approx: TypedTensor) -> float:
    """``1 - ||t - approx|| / ||t||``; 1 when both are zero, -inf when only ``t`` is."""
    if t.shape != approx.shape:
        raise ShapeMismatch(f"shapes differ: {t.shape} vs {approx.shape}")
    _check_numeric(t, "fit")
    _check_numeric(approx, "fit")
    norm_t = frobenius_norm(t)
    diff = _diff_norm(t, approx)
    if norm_t == 0:
        return 1.0 if diff == 0 else -math.inf
    return 1.0 - diff / norm_t


# exports --------------------------------------------------------------------------


def _write_factor(path: Path, factor: np.ndarray, dim: Dimension | None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key"] + [f"c{r + 1}" for r in range(factor.shape[1])])
        for i, row in enumerate(factor):
            key = dim.render_key(dim.key_of(i + 1)) if dim is not None else str(i + 1)
            w.writerow([key] + [repr(float(v)) for v in row])


def write_cp(r: CPResult, out_dir: str | os.PathLike, prefix: str) -> list[Path]:
    """Write ``<prefix>.factor<n>.csv`` per mode and ``<prefix>.weights.csv``."""
    out_dir = Path(out_dir)
    paths = []
    dims = r.dims or (None,) * len(r.factors)
    for n, (f, d) in enumerate(zip(r.factors, dims), start=1):
        p = out_dir / f"{prefix}.factor{n}.csv"
        _write_factor(p, f, d)
        paths.append(p)
    p = out_dir / f"{prefix}.weights.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        fh.write("weight\n")
        for v in r.weights:
            fh.write(repr(float(v)) + "\n")
    paths.append(p)
    return paths


def write_tucker(r: TuckerResult, out_dir: str | os.PathLike, prefix: str) -> list[Path]:
    """Write ``<prefix>.factor<n>.csv`` per mode and the core as ``<prefix>.core.coo``."""
    out_dir = Path(out_dir)
    paths = []
    dims = r.dims or (None,) * len(r.factors)
    for n, (f, d) in enumerate(zip(r.factors, dims), start=1):
        p = out_dir / f"{prefix}.factor{n}.csv"
        _write_factor(p, f, d)
        paths.append(p)
    p = out_dir / f"{prefix}.core.coo"
    write_coo(r.core, p)
    paths.append(p)
    return paths
