"""PARAFAC tensor arithmetic.

Flat-index convention used everywhere in the package: tensors are stored
row-major, so the last listed mode varies fastest.  With this convention the
vectorized tensor equals ``khatri_rao(factors) @ ones`` literally.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fhtensor.errors import CapacityError, DegenerateFactorError, ShapeError

#: Largest dense tensor ``reconstruct_full`` will allocate (number of doubles).
MAX_DENSE_ELEMENTS = 200_000_000


class FactorSet:
    """The factor matrices ``Q_1 ... Q_D`` of a rank-``K`` PARAFAC model.

    All factors live in one contiguous buffer (``data``) so the compiled
    kernels can update them in place; ``factors`` holds reshaped views into
    it.  When ``pinned_time_row`` is true the last row of the last factor
    is the structural zero row of a finite-horizon value tensor and is kept
    at zero by every solver.
    """

    __slots__ = ("dims", "rank", "data", "offsets", "factors", "pinned_time_row")

    def __init__(self, factors: Sequence[np.ndarray], pinned_time_row: bool = False):
        factors = [np.asarray(f, dtype=float) for f in factors]
        if not factors:
            raise ShapeError("a FactorSet needs at least one factor")
        for f in factors:
            if f.ndim != 2:
                raise ShapeError(f"factor matrices must be 2-D, got shape {f.shape}")
        ks = {f.shape[1] for f in factors}
        if len(ks) != 1:
            raise ShapeError(f"factors disagree on the rank: {sorted(ks)}")
        self.rank = ks.pop()
        if self.rank < 1:
            raise ShapeError("rank must be positive")
        self.dims = tuple(int(f.shape[0]) for f in factors)
        if min(self.dims) < 1:
            raise ShapeError("every mode needs at least one row")
        sizes = [n * self.rank for n in self.dims]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.data = np.concatenate([f.ravel() for f in factors])
        self.pinned_time_row = bool(pinned_time_row)
        self._make_views()
        if self.pinned_time_row:
            self.factors[-1][-1, :] = 0.0

    def _make_views(self):
        self.factors = [
            self.data[self.offsets[d]:self.offsets[d + 1]].reshape(n, self.rank)
            for d, n in enumerate(self.dims)
        ]

    @classmethod
    def random(cls, dims, rank, rng=None, scale=None, pinned_time_row=False):
        """Entries i.i.d. uniform on ``[0, scale]``; ``scale`` defaults to ``1/sqrt(rank)``."""
        rng = np.random.default_rng(rng)
        if scale is None:
            scale = 1.0 / math.sqrt(rank)
        return cls([rng.uniform(0.0, scale, size=(n, rank)) for n in dims],
                   pinned_time_row=pinned_time_row)

    @classmethod
    def zeros(cls, dims, rank, pinned_time_row=False):
        return cls([np.zeros((n, rank)) for n in dims], pinned_time_row=pinned_time_row)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def param_count(self) -> int:
        return int(sum(self.dims) * self.rank)

    def copy(self) -> "FactorSet":
        return FactorSet([f.copy() for f in self.factors], self.pinned_time_row)

    def norms(self) -> np.ndarray:
        return np.array([np.linalg.norm(f) for f in self.factors])

    def set_factor(self, d: int, value: np.ndarray):
        """Overwrite factor ``d`` in place (keeps the pinned row at zero)."""
        self.factors[d][...] = value
        if self.pinned_time_row and d == self.ndim - 1:
            self.factors[d][-1, :] = 0.0

    def to_json(self) -> str:
        doc = {
            "dims": list(self.dims),
            "rank": self.rank,
            "factors": [f.tolist() for f in self.factors],
            "pinned_time_row": self.pinned_time_row,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "FactorSet":
        doc = json.loads(text)
        fs = cls([np.array(f, dtype=float).reshape(n, doc["rank"])
                  for f, n in zip(doc["factors"], doc["dims"])],
                 pinned_time_row=doc.get("pinned_time_row", False))
        if list(fs.dims) != list(doc["dims"]):
            raise ShapeError("factor shapes do not match the declared dims")
        return fs

    def __repr__(self):
        return f"FactorSet(dims={self.dims}, rank={self.rank})"


@dataclass
class DenseTensor:
    """A dense tensor stored as a flat row-major array."""

    dims: tuple
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size != math.prod(self.dims):
            raise ShapeError(
                f"{self.values.size} values cannot fill a tensor of dims {self.dims}")

    @classmethod
    def from_array(cls, arr) -> "DenseTensor":
        arr = np.asarray(arr, dtype=float)
        return cls(arr.shape, arr.ravel())

    @property
    def array(self) -> np.ndarray:
        return self.values.reshape(self.dims)


def _as_array(t) -> np.ndarray:
    if isinstance(t, DenseTensor):
        return t.array
    return np.asarray(t, dtype=float)


def reconstruct_entry(f: FactorSet, idx) -> float:
    """Entry ``sum_k prod_d Q_d(idx[d], k)`` (0-based indices)."""
    if len(idx) != f.ndim:
        raise IndexError(f"expected {f.ndim} indices, got {len(idx)}")
    prod = np.ones(f.rank)
    for d, (i, n) in enumerate(zip(idx, f.dims)):
        if not 0 <= i < n:
            raise IndexError(f"index {i} out of range for mode {d} of size {n}")
        prod *= f.factors[d][i]
    return float(prod.sum())


def khatri_rao(ms: Sequence[np.ndarray]) -> np.ndarray:
    """Column-wise Kronecker product; the last matrix's row index varies fastest."""
    ms = [np.asarray(m, dtype=float) for m in ms]
    if not ms:
        raise ShapeError("khatri_rao needs at least one matrix")
    k = ms[0].shape[1]
    if any(m.ndim != 2 or m.shape[1] != k for m in ms):
        raise ShapeError("all matrices must be 2-D with the same column count")
    out = ms[0]
    for m in ms[1:]:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, k)
    return out


def reconstruct_full(f: FactorSet) -> DenseTensor:
    n = math.prod(f.dims)
    if n > MAX_DENSE_ELEMENTS:
        raise CapacityError(f"dense tensor would need {n} elements", requested=n)
    return DenseTensor(f.dims, khatri_rao(f.factors).sum(axis=1))


def mode_permutation(dims, d: int) -> np.ndarray:
    """Flat-index map realizing the mode-``d`` reordering.

    ``perm[p]`` is the position of row-major entry ``p`` in the ordering where
    index ``d`` varies slowest and the other indices keep their row-major
    order.
    """
    dims = tuple(int(n) for n in dims)
    if not 0 <= d < len(dims):
        raise IndexError(f"mode {d} out of range for {len(dims)} modes")
    positions = np.arange(math.prod(dims)).reshape((dims[d],) + dims[:d] + dims[d + 1:])
    # positions[j_d, rest...] is the moded position; move mode d back into place
    return np.moveaxis(positions, 0, d).ravel()


def normalize_factors(f: FactorSet) -> FactorSet:
    """Rescale every factor to the geometric mean of the factor norms."""
    out = f.copy()
    normalize_inplace(out)
    return out


def normalize_inplace(f: FactorSet) -> float:
    norms = f.norms()
    if np.any(norms == 0.0):
        raise DegenerateFactorError(f"zero-norm factor(s) at modes {np.flatnonzero(norms == 0).tolist()}")
    target = math.exp(np.mean(np.log(norms)))
    for fac, nrm in zip(f.factors, norms):
        fac *= target / nrm
    return target


def nfe(estimate, reference) -> float:
    """Normalized Frobenius error ``||estimate - reference|| / ||reference||``."""
    est = _as_array(estimate)
    ref = _as_array(reference)
    if est.shape != ref.shape:
        raise ShapeError(f"shape mismatch {est.shape} vs {ref.shape}")
    denom = np.linalg.norm(ref)
    if denom == 0.0:
        raise ZeroDivisionError("reference tensor is identically zero")
    return float(np.linalg.norm(est - ref) / denom)


@dataclass
class CPResult:
    factors: FactorSet
    fit_errors: list
    ridge_used: bool = False

    @property
    def nfe(self) -> float:
        return self.fit_errors[-1]


def _unfold(arr: np.ndarray, d: int) -> np.ndarray:
    return np.moveaxis(arr, d, 0).reshape(arr.shape[d], -1)


def cp_als(t, rank: int, iters: int = 500, seed=None, tol: float = 1e-10,
           init: FactorSet | None = None, pinned_last_row: bool = False) -> CPResult:
    """Rank-``rank`` CP decomposition by alternating least squares.

    ``fit_errors`` holds the normalized error after each full sweep (entry 0
    is the error of the initial factors).  Each mode solve is exact, so the
    sequence is non-increasing.  When a mode Gram matrix has condition number
    above 1e12 a ``1e-10 * I`` ridge is added and ``ridge_used`` is set.
    With ``pinned_last_row`` the last row of the last factor stays zero.
    """
    if rank < 1 or iters < 1:
        raise ValueError("rank and iters must be positive")
    arr = _as_array(t)
    dims = arr.shape
    ref_norm = np.linalg.norm(arr)
    if ref_norm == 0.0:
        raise ZeroDivisionError("cannot decompose an all-zero tensor")
    if init is None:
        f = FactorSet.random(dims, rank, rng=seed, pinned_time_row=pinned_last_row)
    else:
        if init.dims != tuple(dims) or init.rank != rank:
            raise ShapeError("initial factors do not match tensor dims / rank")
        f = init.copy()
        f.pinned_time_row = pinned_last_row
        if pinned_last_row:
            f.factors[-1][-1] = 0.0
    D = len(dims)
    unfoldings = [_unfold(arr, d) for d in range(D)]
    ridge_used = False

    def fit():
        return float(np.linalg.norm(arr.ravel() - khatri_rao(f.factors).sum(axis=1)) / ref_norm)

    errors = [fit()]
    for _ in range(iters):
        for d in range(D):
            others = [f.factors[i] for i in range(D) if i != d]
            gram = np.ones((rank, rank))
            for q in others:
                gram *= q.T @ q
            mttkrp = unfoldings[d] @ khatri_rao(others)
            rows = slice(None)
            if pinned_last_row and d == D - 1:
                rows = slice(0, dims[d] - 1)
            evals = np.linalg.eigvalsh(gram)
            if evals[0] <= 0 or evals[-1] / evals[0] > 1e12:
                gram = gram + 1e-10 * np.eye(rank)
                ridge_used = True
            sol = np.linalg.solve(gram, mttkrp[rows].T).T
            f.factors[d][rows] = sol
        normalize_or_skip(f)
        errors.append(fit())
        # stop once a sweep no longer improves the fit (also catches the roundoff floor)
        if errors[-2] - errors[-1] <= tol * errors[-2] or errors[-1] < 1e-13:
            break
    if ridge_used:
        warnings.warn("cp_als: ill-conditioned mode Gram matrix, ridge applied", RuntimeWarning)
    return CPResult(f, errors, ridge_used)


def normalize_or_skip(f: FactorSet):
    """Normalize unless some factor is exactly zero (possible for zero slices)."""
    if np.all(f.norms() > 0):
        normalize_inplace(f)
