"""Slice-wise convolutional forward model of a full-matrix-capture linear array.

The data cube Y[t, rx, tx] of an N_c element array is split into N_c unique
diagonal slices (offset d = tx - rx up to reciprocity). Each slice is a
strided 1-D convolution of the vectorized reflectivity map:

    y[i, tau] = sum_k w[i, k] * x[tau * S - k + P]

with out-of-range reads taken as zero. The adjoint is the transposed
convolution with the same weights.
"""
import functools
import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from errors import ConfigError, NumericalError, ShapeError
from pulse import GaussianPulse
from rng_streams import derive_rng

logger = logging.getLogger(__name__)

DENSE_CAP_ENV = "CBC_DENSE_CAP_BYTES"
DEFAULT_DENSE_CAP_BYTES = 1 << 30
LIPSCHITZ_SAFETY = 1.01


# ---------- Physics ----------
@dataclass(frozen=True)
class ImagingSetup:
    num_elements: int = 4
    element_pitch: float = 1.0e-3
    grid_nz: int = 16
    grid_nx: int = 16
    grid_pitch_z: float = 0.5e-3
    grid_pitch_x: float = 0.5e-3
    grid_origin: float = -2.25e-3      # lateral offset of pixel column 0 w.r.t. element 0
    sound_speed: float = 1500.0
    sampling_rate: float = 4.0e6
    pulse_center_freq: float = 1.0e6
    pulse_sigma: float = 0.4e-6
    num_samples: int = 64
    grid_depth_offset: float = 2.0e-3  # depth of pixel row 0 below the array

    def __post_init__(self):
        for name in ("num_elements", "grid_nz", "grid_nx", "num_samples"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 1:
                raise ConfigError(f"setup.{name} must be an integer >= 1 (got {v!r})")
        for name in ("element_pitch", "grid_pitch_z", "grid_pitch_x", "sound_speed",
                     "sampling_rate", "pulse_center_freq", "pulse_sigma"):
            v = float(getattr(self, name))
            if not (v > 0.0 and math.isfinite(v)):
                raise ConfigError(f"setup.{name} must be strictly positive (got {v!r})")
        if not math.isfinite(self.grid_origin):
            raise ConfigError("setup.grid_origin must be finite")
        if not (self.grid_depth_offset >= 0.0 and math.isfinite(self.grid_depth_offset)):
            raise ConfigError("setup.grid_depth_offset must be >= 0")
        ratio = self.element_pitch / self.grid_pitch_x
        q = round(ratio)
        if q < 1 or abs(ratio - q) > 1e-9 * ratio:
            raise ConfigError(
                f"element_pitch / grid_pitch_x must be a positive integer (got {ratio:.12g})")

    @property
    def lateral_factor(self) -> int:
        """q = element_pitch / grid_pitch_x."""
        return int(round(self.element_pitch / self.grid_pitch_x))

    @property
    def num_pixels(self) -> int:
        return self.grid_nz * self.grid_nx

    @property
    def num_data(self) -> int:
        return self.num_samples * self.num_elements * self.num_elements

    @property
    def cube_shape(self):
        return (self.num_samples, self.num_elements, self.num_elements)

    def pulse(self) -> GaussianPulse:
        return GaussianPulse(self.pulse_center_freq, self.pulse_sigma)

    def element_x(self) -> np.ndarray:
        return np.arange(self.num_elements, dtype=np.float64) * self.element_pitch

    def pixel_x(self) -> np.ndarray:
        return self.grid_origin + np.arange(self.grid_nx, dtype=np.float64) * self.grid_pitch_x

    def pixel_z(self) -> np.ndarray:
        return self.grid_depth_offset + np.arange(self.grid_nz, dtype=np.float64) * self.grid_pitch_z

    def round_trip_delay(self, tx: int, rx: int, z: int, x_col: int) -> float:
        """Delay of pixel (z, x_col) for transmitter tx and receiver rx (seconds)."""
        px, pz = self.pixel_x()[x_col], self.pixel_z()[z]
        ex = self.element_x()
        return (math.hypot(px - ex[tx], pz) + math.hypot(px - ex[rx], pz)) / self.sound_speed


@dataclass
class ReflectivityMap:
    """values[z, x_col]; the flat view puts z fastest (index x_col * grid_nz + z)."""
    values: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64).reshape(-1, order="F")

    @classmethod
    def from_vector(cls, x: np.ndarray, grid_nz: int, grid_nx: int) -> "ReflectivityMap":
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (grid_nz * grid_nx,):
            raise ShapeError(f"expected vector of length {grid_nz * grid_nx}, got shape {x.shape}")
        return cls(x.reshape((grid_nz, grid_nx), order="F"))


@dataclass
class DataCube:
    """values[t, rx, tx]; the flat view is C order."""
    values: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64).reshape(-1)

    @classmethod
    def from_vector(cls, y: np.ndarray, setup: ImagingSetup) -> "DataCube":
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (setup.num_data,):
            raise ShapeError(f"expected vector of length {setup.num_data}, got shape {y.shape}")
        return cls(y.reshape(setup.cube_shape))


# ---------- Strided convolution ----------
@functools.lru_cache(maxsize=256)
def gather_matrix(stride: int, padding: int, kernel_size: int, input_len: int,
                  output_len: int) -> scipy.sparse.csr_matrix:
    """0/1 matrix G of shape (output_len * kernel_size, input_len) with (G x)[tau * K + k] = x[tau*S - k + P]."""
    tau = np.arange(output_len)[:, None]
    k = np.arange(kernel_size)[None, :]
    idx = (tau * stride - k + padding).reshape(-1)
    rows = np.arange(output_len * kernel_size)
    valid = (idx >= 0) & (idx < input_len)
    g = scipy.sparse.csr_matrix(
        (np.ones(int(valid.sum())), (rows[valid], idx[valid])),
        shape=(output_len * kernel_size, input_len))
    return g


def _as_batch(a: np.ndarray, tail_ndim: int):
    a = np.asarray(a, dtype=np.float64)
    lead = a.shape[:a.ndim - tail_ndim]
    return a.reshape((-1,) + a.shape[a.ndim - tail_ndim:]), lead


def gather_input(x: np.ndarray, stride: int, padding: int, kernel_size: int,
                 output_len: int) -> np.ndarray:
    """Windows X[..., tau, k] = x[..., tau*S - k + P] (zero outside the input)."""
    xb, lead = _as_batch(x, 1)
    g = gather_matrix(stride, padding, kernel_size, xb.shape[-1], output_len)
    windows = np.asarray(g @ xb.T).T
    return windows.reshape(lead + (output_len, kernel_size))


def scatter_input(windows: np.ndarray, stride: int, padding: int, input_len: int) -> np.ndarray:
    """Adjoint of gather_input: accumulate windows[..., tau, k] into x[tau*S - k + P]."""
    wb, lead = _as_batch(windows, 2)
    output_len, kernel_size = wb.shape[-2:]
    g = gather_matrix(stride, padding, kernel_size, input_len, output_len)
    x = np.asarray(g.T @ wb.reshape(wb.shape[0], -1).T).T
    return x.reshape(lead + (input_len,))


def strided_conv(weights: np.ndarray, x: np.ndarray, stride: int, padding: int,
                 output_len: int) -> np.ndarray:
    """(..., N_in) -> (..., C_out, T_out)."""
    windows = gather_input(x, stride, padding, weights.shape[1], output_len)
    return np.swapaxes(windows @ weights.T, -1, -2)


def strided_conv_transpose(weights: np.ndarray, y: np.ndarray, stride: int, padding: int,
                           input_len: int) -> np.ndarray:
    """(..., C_out, T_out) -> (..., N_in); exact adjoint of strided_conv."""
    windows = np.swapaxes(np.asarray(y, dtype=np.float64), -1, -2) @ weights
    return scatter_input(windows, stride, padding, input_len)


# ---------- Slices ----------
@dataclass
class SliceKernel:
    weights: np.ndarray            # C_out x K
    stride: int
    padding: int
    input_len: int
    output_len: int
    slice_offset: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or 0 in self.weights.shape:
            raise ShapeError(f"kernel weights must be a non-empty matrix, got shape {self.weights.shape}")
        if self.stride < 1 or self.padding < 0 or self.input_len < 1 or self.output_len < 1:
            raise ShapeError("stride, input_len and output_len must be >= 1 and padding >= 0")
        if self.slice_offset < 0:
            raise ShapeError("slice_offset must be >= 0")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[1]

    @property
    def multiplicity(self) -> int:
        return 1 if self.slice_offset == 0 else 2


def slice_forward(kernel: SliceKernel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (kernel.input_len,):
        raise ShapeError(f"slice input must end in length {kernel.input_len}, got shape {x.shape}")
    return strided_conv(kernel.weights, x, kernel.stride, kernel.padding, kernel.output_len)


def slice_adjoint(kernel: SliceKernel, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-2:] != (kernel.out_channels, kernel.output_len):
        raise ShapeError(
            f"slice output must end in shape {(kernel.out_channels, kernel.output_len)}, got {y.shape}")
    return strided_conv_transpose(kernel.weights, y, kernel.stride, kernel.padding, kernel.input_len)


# ---------- Slice placement in the cube ----------
def place_slices(outputs: Sequence[np.ndarray], num_elements: int) -> np.ndarray:
    """Per-slice outputs (..., N_t, N_c - d) -> cube (..., N_t, N_c, N_c), mirrored by reciprocity."""
    first = np.asarray(outputs[0])
    cube = np.zeros(first.shape[:-1] + (num_elements, num_elements))
    for d, out in enumerate(outputs):
        r = np.arange(num_elements - d)
        cube[..., r, r + d] = out
        if d:
            cube[..., r + d, r] = out
    return cube


def gather_slices(cube: np.ndarray, num_elements: int) -> List[np.ndarray]:
    """Adjoint of place_slices."""
    res = []
    for d in range(num_elements):
        r = np.arange(num_elements - d)
        part = cube[..., r, r + d]
        if d:
            part = part + cube[..., r + d, r]
        res.append(part)
    return res


class ModelOperator(LinearOperator):
    """scipy view of any model exposing forward_flat/adjoint_flat."""

    def __init__(self, model):
        self.model = model
        super().__init__(dtype=np.float64, shape=(model.setup.num_data, model.setup.num_pixels))

    def _matvec(self, x):
        return self.model.forward_flat(np.ravel(x))

    def _rmatvec(self, y):
        return self.model.adjoint_flat(np.ravel(y))

    def _matmat(self, X):
        return self.model.forward_flat(np.asarray(X).T).T

    def _rmatmat(self, Y):
        return self.model.adjoint_flat(np.asarray(Y).T).T


class _CubeModelMixin:
    """Flat batched forward/adjoint built from per-slice outputs."""

    def _slice_outputs(self, x: np.ndarray) -> List[np.ndarray]:
        raise NotImplementedError

    def _slice_adjoints(self, parts: List[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def forward_flat(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1:] != (self.setup.num_pixels,):
            raise ShapeError(f"expected reflectivity vectors of length {self.setup.num_pixels}, got {x.shape}")
        cube = place_slices(self._slice_outputs(x), self.setup.num_elements)
        return cube.reshape(x.shape[:-1] + (self.setup.num_data,))

    def adjoint_flat(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape[-1:] != (self.setup.num_data,):
            raise ShapeError(f"expected data vectors of length {self.setup.num_data}, got {y.shape}")
        cube = y.reshape(y.shape[:-1] + self.setup.cube_shape)
        return self._slice_adjoints(gather_slices(cube, self.setup.num_elements))

    def operator(self) -> LinearOperator:
        return ModelOperator(self)


@dataclass
class SliceConvModel(_CubeModelMixin):
    setup: ImagingSetup
    slices: List[SliceKernel] = field(default_factory=list)

    def __post_init__(self):
        if len(self.slices) != self.setup.num_elements:
            raise ShapeError(f"model needs {self.setup.num_elements} slices, got {len(self.slices)}")
        for d, s in enumerate(self.slices):
            if s.slice_offset != d or s.output_len != self.setup.num_elements - d \
                    or s.out_channels != self.setup.num_samples or s.input_len != self.setup.num_pixels:
                raise ShapeError(f"slice {d} metadata does not match the setup")

    def _slice_outputs(self, x):
        return [slice_forward(s, x) for s in self.slices]

    def _slice_adjoints(self, parts):
        # fixed reduction order over slices
        acc = slice_adjoint(self.slices[0], parts[0])
        for s, p in zip(self.slices[1:], parts[1:]):
            acc = acc + slice_adjoint(s, p)
        return acc

    def num_params(self) -> int:
        return sum(s.weights.size for s in self.slices)


# ---------- Construction ----------
def slice_geometry(setup: ImagingSetup, d: int):
    """(stride, padding, kernel_size, output_len) of slice d."""
    q = setup.lateral_factor
    nz, nx = setup.grid_nz, setup.grid_nx
    lateral = nx + (setup.num_elements - 1 - d) * q
    return q * nz, nz * nx - 1, lateral * nz, setup.num_elements - d


def _check_observable(setup: ImagingSetup):
    px, pz = np.meshgrid(setup.pixel_x(), setup.pixel_z())       # (nz, nx)
    ex = setup.element_x()
    dist = np.hypot(px[None] - ex[:, None, None], pz[None])       # (N_c, nz, nx)
    min_delay = 2.0 * dist.min(axis=0) / setup.sound_speed
    window = setup.num_samples / setup.sampling_rate
    late = np.argwhere(min_delay > window)
    if late.size:
        z, x_col = late[0]
        raise ConfigError(
            f"pixel (z={z}, x={x_col}) has round-trip delay {min_delay[z, x_col]:.3e}s beyond the "
            f"record window {window:.3e}s for every pair ({len(late)} such pixels); "
            "increase num_samples or shrink the grid")


def build_slice_kernels(setup: ImagingSetup) -> SliceConvModel:
    """Analytic kernels: w[i, k] = pulse(i/fs - delay of the pixel at relative offset k)."""
    _check_observable(setup)
    pulse = setup.pulse()
    nz, nx, q = setup.grid_nz, setup.grid_nx, setup.lateral_factor
    depth = setup.pixel_z()[::-1]                        # k % nz = nz - 1 - z
    slices = []
    for d in range(setup.num_elements):
        stride, padding, ksize, out_len = slice_geometry(setup, d)
        n_lat = ksize // nz
        ell = (nx - 1) - np.arange(n_lat)                 # k // nz = nx - 1 - ell
        lat = setup.grid_origin + ell * setup.grid_pitch_x
        to_tx = np.hypot(lat[:, None], depth[None, :])
        to_rx = np.hypot(lat[:, None] - d * setup.element_pitch, depth[None, :])
        delays = ((to_tx + to_rx) / setup.sound_speed).reshape(-1)
        w = pulse.sample_delayed(setup.num_samples, setup.sampling_rate, delays)
        slices.append(SliceKernel(w, stride, padding, setup.num_pixels, out_len, slice_offset=d))
        logger.debug("slice %d: K=%d S=%d P=%d T_out=%d", d, ksize, stride, padding, out_len)
    logger.info("built %d slice kernels (%d weights)", len(slices), sum(s.weights.size for s in slices))
    return SliceConvModel(setup, slices)


# ---------- Public operators ----------
def forward_apply(model, x: ReflectivityMap) -> DataCube:
    values = np.asarray(x.values, dtype=np.float64)
    if values.shape != (model.setup.grid_nz, model.setup.grid_nx):
        raise ShapeError(f"reflectivity map must be {(model.setup.grid_nz, model.setup.grid_nx)}, "
                         f"got {values.shape}")
    return DataCube.from_vector(model.forward_flat(x.vector), model.setup)


def adjoint_apply(model, Y: DataCube) -> ReflectivityMap:
    values = np.asarray(Y.values, dtype=np.float64)
    if values.shape != model.setup.cube_shape:
        raise ShapeError(f"data cube must be {model.setup.cube_shape}, got {values.shape}")
    return ReflectivityMap.from_vector(model.adjoint_flat(Y.vector),
                                       model.setup.grid_nz, model.setup.grid_nx)


def resolve_dense_cap(cap_bytes: Optional[int] = None) -> int:
    if cap_bytes is not None:
        return int(cap_bytes)
    env = os.environ.get(DENSE_CAP_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{DENSE_CAP_ENV} must be an integer byte count (got {env!r})")
    return DEFAULT_DENSE_CAP_BYTES


def check_dense_cap(rows: int, cols: int, cap_bytes: Optional[int] = None):
    cap = resolve_dense_cap(cap_bytes)
    need = rows * cols * 8
    if need > cap:
        raise ConfigError(f"dense {rows}x{cols} matrix needs {need} bytes, above the cap of {cap} bytes "
                          f"(raise it with {DENSE_CAP_ENV})")


def dense_operator(model, cap_bytes: Optional[int] = None) -> np.ndarray:
    """Column j is vec(forward_apply(model, e_j)); desk scale only."""
    n_s, n_d = model.setup.num_pixels, model.setup.num_data
    check_dense_cap(n_d, n_s, cap_bytes)
    return np.ascontiguousarray(model.forward_flat(np.eye(n_s)).T)


# ---------- Lipschitz constant ----------
@dataclass
class LipschitzEstimate:
    value: float        # rayleigh * safety
    rayleigh: float
    iterations: int
    converged: bool


def estimate_lipschitz(op, max_iters: int = 500, tol: float = 1e-8, seed: int = 0,
                       safety: float = LIPSCHITZ_SAFETY) -> LipschitzEstimate:
    """Power iteration on A^T A from a seeded random start."""
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if isinstance(op, np.ndarray):
        op = aslinearoperator(op)
    v = derive_rng(seed, "power").standard_normal(op.shape[1])
    v /= np.linalg.norm(v)
    lam_old = None
    lam = 0.0
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        w = op.rmatvec(op.matvec(v))
        lam = float(v @ w)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            raise NumericalError("operator maps the iterate to zero; Lipschitz constant undefined")
        v = w / nw
        if lam_old is not None and abs(lam - lam_old) <= tol * abs(lam):
            converged = True
            break
        lam_old = lam
    if not converged:
        logger.warning("power iteration not converged after %d iterations (estimate %.6g)", it, lam)
    return LipschitzEstimate(value=safety * lam, rayleigh=lam, iterations=it, converged=converged)


def spectral_norm_sq(A: np.ndarray) -> float:
    """Largest eigenvalue of A^T A by a full symmetric eigensolve (dense oracle)."""
    return float(scipy.linalg.eigvalsh(A.T @ A)[-1])
