"""Basis-filter factorization of slice kernel banks, W ~ C B.

B (M x K) holds M basis filters, C (C_out x M) mixes them. A factorized slice
runs as a strided convolution with B followed by a 1x1 mixing with C; its
adjoint reverses the two stages with the same weights.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
import scipy.linalg

from errors import FactorizationError, ShapeError
from rng_streams import derive_rng, derive_seed
from slice_model import (SliceConvModel, SliceKernel, _CubeModelMixin, ImagingSetup,
                         strided_conv, strided_conv_transpose)

logger = logging.getLogger(__name__)

METHODS = ("omp", "svd", "random")
RANDOM_SCHEMES = ("xavier", "kaiming", "orthogonal")
DEGENERATE_RTOL = 1e-12
DEFAULT_RESIDUAL_RTOL = 1e-6


@dataclass
class Factorization:
    basis: np.ndarray                                  # M x K
    mixing: np.ndarray                                 # C_out x M
    selected_rows: List[int] = field(default_factory=list)
    method: str = "omp"
    degenerate: bool = False


@dataclass
class FactorizationReport:
    residual_history: List[float]
    final_error: float
    compression_ratio: float
    rank_deficient: bool = False
    note: str = ""


@dataclass
class FactorizedKernel:
    basis: np.ndarray
    mixing: np.ndarray
    stride: int
    padding: int
    input_len: int
    output_len: int
    slice_offset: int = 0
    selected_rows: List[int] = field(default_factory=list)
    method: str = "omp"
    degenerate: bool = False

    def __post_init__(self):
        self.basis = np.asarray(self.basis, dtype=np.float64)
        self.mixing = np.asarray(self.mixing, dtype=np.float64)
        if self.basis.ndim != 2 or self.mixing.ndim != 2 or self.mixing.shape[1] != self.basis.shape[0]:
            raise ShapeError(f"incompatible factor shapes B{self.basis.shape} C{self.mixing.shape}")
        if self.method not in METHODS:
            raise ValueError(f"unknown factorization method {self.method!r}")

    @classmethod
    def from_slice(cls, kernel: SliceKernel, fac: Factorization) -> "FactorizedKernel":
        return cls(fac.basis, fac.mixing, kernel.stride, kernel.padding, kernel.input_len,
                   kernel.output_len, kernel.slice_offset, list(fac.selected_rows), fac.method,
                   fac.degenerate)

    @property
    def num_basis(self) -> int:
        return self.basis.shape[0]

    @property
    def out_channels(self) -> int:
        return self.mixing.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.basis.shape[1]

    @property
    def multiplicity(self) -> int:
        return 1 if self.slice_offset == 0 else 2

    def num_params(self) -> int:
        return self.basis.size + self.mixing.size


def compression_ratio(out_channels: int, kernel_size: int, num_basis: int) -> float:
    return (out_channels * kernel_size) / (num_basis * (kernel_size + out_channels))


def factorization_error(W: np.ndarray, B: np.ndarray, C: np.ndarray) -> float:
    W, B, C = (np.asarray(a, dtype=np.float64) for a in (W, B, C))
    if C.shape != (W.shape[0], B.shape[0]) or B.shape[1] != W.shape[1]:
        raise ShapeError(f"shape mismatch: W{W.shape} C{C.shape} B{B.shape}")
    return float(np.linalg.norm(W - C @ B, "fro"))


def _mixing_with_rank(W: np.ndarray, B: np.ndarray) -> Tuple[np.ndarray, int]:
    # min ||W - C B||_F  <=>  B^T C^T = W^T in the least-squares sense
    sol, _, rank, _ = scipy.linalg.lstsq(B.T, W.T, lapack_driver="gelsd")
    return np.ascontiguousarray(sol.T), int(rank)


def least_squares_mixing(W: np.ndarray, B: np.ndarray) -> np.ndarray:
    """C = W B^T (B B^T)^-1, solved by a rank-revealing least-squares method."""
    W = np.asarray(W, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if W.ndim != 2 or B.ndim != 2 or B.shape[1] != W.shape[1]:
        raise ShapeError(f"shape mismatch: W{W.shape} B{B.shape}")
    if not B.any():
        raise ShapeError("basis must be nonzero")
    return _mixing_with_rank(W, B)[0]


def _check_budget(W: np.ndarray, num_basis: int):
    if W.ndim != 2 or 0 in W.shape:
        raise ShapeError(f"kernel bank must be a non-empty matrix, got shape {W.shape}")
    if not 1 <= num_basis <= W.shape[0]:
        raise ValueError(f"basis budget must lie in [1, {W.shape[0]}] (got {num_basis})")


def omp_select_basis(W: np.ndarray, max_basis: int, residual_tol: float = None
                     ) -> Tuple[Factorization, FactorizationReport]:
    """Greedy row selection by correlation energy E_j = sum_i <R_i, W_j>^2."""
    W = np.asarray(W, dtype=np.float64)
    _check_budget(W, max_basis)
    norm_w = float(np.linalg.norm(W, "fro"))
    if norm_w == 0.0:
        raise FactorizationError("kernel bank is all zero")
    tol = DEFAULT_RESIDUAL_RTOL * norm_w if residual_tol is None else float(residual_tol)

    selected: List[int] = []
    skipped = np.zeros(W.shape[0], dtype=bool)
    R = W.copy()
    C = np.zeros((W.shape[0], 0))
    history: List[float] = []
    rank_deficient = False
    note = ""
    while len(selected) < max_basis:
        energy = ((R @ W.T) ** 2).sum(axis=0)
        blocked = skipped.copy()
        blocked[selected] = True
        if selected:
            q, _ = np.linalg.qr(W[selected].T)
            outside = np.linalg.norm(W - (W @ q) @ q.T, axis=1)
        else:
            outside = np.linalg.norm(W, axis=1)
        pick = None
        # stable sort: lowest index wins ties
        for j in np.argsort(-energy, kind="stable"):
            if blocked[j]:
                continue
            if outside[j] < DEGENERATE_RTOL * norm_w:
                skipped[j] = True
                continue
            pick = int(j)
            break
        if pick is None:
            note = "all remaining rows lie in the span of the basis"
            logger.warning("OMP stopped at %d of %d basis filters: %s", len(selected), max_basis, note)
            break
        selected.append(pick)
        B = W[selected]
        C, rank = _mixing_with_rank(W, B)
        rank_deficient = rank_deficient or rank < len(selected)
        R = W - C @ B
        history.append(float(np.linalg.norm(R, "fro")))
        if history[-1] <= tol:
            break

    B = W[selected].copy()
    fac = Factorization(B, C, selected, "omp", degenerate=rank_deficient)
    report = FactorizationReport(history, history[-1], compression_ratio(W.shape[0], W.shape[1], len(selected)),
                                 rank_deficient=rank_deficient, note=note)
    return fac, report


def svd_factorize(W: np.ndarray, num_basis: int) -> Tuple[Factorization, FactorizationReport]:
    """Truncated SVD with singular values absorbed into C (rows of B orthonormal)."""
    W = np.asarray(W, dtype=np.float64)
    _check_budget(W, num_basis)
    U, s, Vt = scipy.linalg.svd(W, full_matrices=False)
    m = min(num_basis, s.size)
    B = np.zeros((num_basis, W.shape[1]))
    C = np.zeros((W.shape[0], num_basis))
    B[:m] = Vt[:m]
    C[:, :m] = U[:, :m] * s[:m]
    tail = np.sqrt(np.maximum(np.cumsum((s ** 2)[::-1])[::-1], 0.0))   # tail[j] = sqrt(sum s[j:]^2)
    history = [float(tail[j]) if j < s.size else 0.0 for j in range(1, num_basis + 1)]
    numeric_rank = int(np.sum(s > DEGENERATE_RTOL * (s[0] if s.size else 0.0)))
    note = ""
    degenerate = num_basis > s.size
    if num_basis > numeric_rank:
        note = f"basis budget {num_basis} exceeds rank {numeric_rank}; factorization is exact"
        if degenerate:
            note += ", extra filters zero-padded"
        logger.warning("SVD: %s", note)
    final = factorization_error(W, B, C)
    report = FactorizationReport(history, final, compression_ratio(W.shape[0], W.shape[1], num_basis),
                                 rank_deficient=degenerate, note=note)
    return Factorization(B, C, [], "svd", degenerate=degenerate), report


def init_matrix(shape: Tuple[int, int], scheme: str, rng: np.random.Generator) -> np.ndarray:
    """Random matrix with fan_in = columns, fan_out = rows."""
    rows, cols = shape
    if scheme == "xavier":
        return rng.normal(0.0, np.sqrt(2.0 / (rows + cols)), size=shape)
    if scheme == "kaiming":
        return rng.normal(0.0, np.sqrt(2.0 / cols), size=shape)
    if scheme == "orthogonal":
        a = rng.standard_normal((max(rows, cols), min(rows, cols)))
        q, r = np.linalg.qr(a)
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        return q.T.copy() if rows < cols else q
    raise ValueError(f"unknown random init scheme {scheme!r} (choose from {', '.join(RANDOM_SCHEMES)})")


def random_factorize(shape: Tuple[int, int], num_basis: int, seed: int = 0,
                     scheme: str = "xavier") -> Factorization:
    if scheme not in RANDOM_SCHEMES:
        raise ValueError(f"unknown random init scheme {scheme!r} (choose from {', '.join(RANDOM_SCHEMES)})")
    out_channels, kernel_size = shape
    rng = derive_rng(seed, "init")
    B = init_matrix((num_basis, kernel_size), scheme, rng)
    C = init_matrix((out_channels, num_basis), scheme, rng)
    return Factorization(B, C, [], "random")


# ---------- Two-stage convolution ----------
def decomposed_forward(fk: FactorizedKernel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (fk.input_len,):
        raise ShapeError(f"input must end in length {fk.input_len}, got shape {x.shape}")
    z = strided_conv(fk.basis, x, fk.stride, fk.padding, fk.output_len)   # basis responses
    return fk.mixing @ z


def decomposed_adjoint(fk: FactorizedKernel, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-2:] != (fk.out_channels, fk.output_len):
        raise ShapeError(f"output must end in shape {(fk.out_channels, fk.output_len)}, got {y.shape}")
    return strided_conv_transpose(fk.basis, fk.mixing.T @ y, fk.stride, fk.padding, fk.input_len)


def recompose(fk: FactorizedKernel) -> SliceKernel:
    return SliceKernel(fk.mixing @ fk.basis, fk.stride, fk.padding, fk.input_len, fk.output_len,
                       slice_offset=fk.slice_offset)


@dataclass
class CompressedModel(_CubeModelMixin):
    setup: ImagingSetup
    factors: List[FactorizedKernel]
    reports: List[FactorizationReport] = field(default_factory=list)
    method: str = "omp"
    basis: int = 16

    def _slice_outputs(self, x):
        return [decomposed_forward(f, x) for f in self.factors]

    def _slice_adjoints(self, parts):
        acc = decomposed_adjoint(self.factors[0], parts[0])
        for f, p in zip(self.factors[1:], parts[1:]):
            acc = acc + decomposed_adjoint(f, p)
        return acc

    def num_params(self) -> int:
        return sum(f.num_params() for f in self.factors)

    def params_before(self) -> int:
        return sum(f.out_channels * f.kernel_size for f in self.factors)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "basis": self.basis,
            "params_before": self.params_before(),
            "params_after": self.num_params(),
            "slices": [
                {"slice": f.slice_offset, "num_basis": f.num_basis, "selected_rows": list(f.selected_rows),
                 "final_error": r.final_error, "compression_ratio": r.compression_ratio,
                 "residual_history": list(r.residual_history), "note": r.note}
                for f, r in zip(self.factors, self.reports)
            ],
        }


def compress_model(model: SliceConvModel, method: str = "omp", num_basis: int = 16,
                   tol: float = DEFAULT_RESIDUAL_RTOL, seed: int = 0,
                   scheme: str = "xavier") -> CompressedModel:
    """Factorize every unique slice independently; tol is relative to each ||W||_F."""
    if method not in METHODS:
        raise ValueError(f"unknown compression method {method!r} (choose from {', '.join(METHODS)})")
    factors, reports = [], []
    for s in model.slices:
        W = s.weights
        if method == "omp":
            fac, rep = omp_select_basis(W, num_basis, tol * float(np.linalg.norm(W, "fro")))
        elif method == "svd":
            fac, rep = svd_factorize(W, num_basis)
        else:
            fac = random_factorize(W.shape, num_basis, derive_seed(seed, "init", s.slice_offset), scheme)
            err = factorization_error(W, fac.basis, fac.mixing)
            rep = FactorizationReport([err], err, compression_ratio(W.shape[0], W.shape[1], num_basis),
                                      note=f"random {scheme} init")
        factors.append(FactorizedKernel.from_slice(s, fac))
        reports.append(rep)
        logger.info("slice %d: %s M=%d error=%.3e (||W||=%.3e)", s.slice_offset, method,
                    fac.basis.shape[0], rep.final_error, np.linalg.norm(W, "fro"))
    cm = CompressedModel(model.setup, factors, reports, method, num_basis)
    logger.info("compressed %d -> %d parameters", cm.params_before(), cm.num_params())
    return cm
