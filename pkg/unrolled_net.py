"""Unrolled ISTA networks: mlp (dense LISTA), alista, bc and cbc.

Every block computes

    u   = x - step * Bop(Fop(x) - y)        (mlp: u = W1 x + W2 y)
    x'  = soft_threshold(u, theta_k)

Fop/Bop run per unique slice: full kernel banks (bc, alista) or basis plus
mixing pairs (cbc). Forward-path and transposed-path parameters are separate
arrays. Gradients of the MSE loss are computed by hand in reverse order over
the blocks; shared operator parameters accumulate over blocks.

Parameter keys:
    "<scope>.fwd.slice<d>.weights|basis|mixing"   forward path
    "<scope>.bwd.slice<d>.weights|basis|mixing"   transposed path
    "<scope>.w1", "<scope>.w2"                    mlp
    "thresholds"                                  one per block
where scope is "shared" or "block<k>".
"""
import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

from compress import CompressedModel, RANDOM_SCHEMES, init_matrix, random_factorize, recompose
from errors import ConfigError, ShapeError
from ista import soft_threshold
from rng_streams import derive_rng, derive_seed
from slice_model import (ImagingSetup, SliceConvModel, check_dense_cap, dense_operator, estimate_lipschitz,
                         gather_input, gather_slices, slice_geometry, strided_conv, strided_conv_transpose)

logger = logging.getLogger(__name__)

ARCHS = ("mlp", "alista", "bc", "cbc")
GROUPS = ("forward", "transposed", "threshold")
INITS = ("analytic",) + RANDOM_SCHEMES
THRESHOLDS = "thresholds"


@dataclass(frozen=True)
class SliceLayout:
    slice_offset: int
    stride: int
    padding: int
    input_len: int
    output_len: int

    @property
    def multiplicity(self) -> int:
        return 1 if self.slice_offset == 0 else 2


def layout_of(setup: ImagingSetup) -> List[SliceLayout]:
    out = []
    for d in range(setup.num_elements):
        stride, padding, _, out_len = slice_geometry(setup, d)
        out.append(SliceLayout(d, stride, padding, setup.num_pixels, out_len))
    return out


def group_of(key: str) -> str:
    if key == THRESHOLDS:
        return "threshold"
    if ".fwd." in key or key.endswith(".w1"):
        return "forward"
    if ".bwd." in key or key.endswith(".w2"):
        return "transposed"
    raise KeyError(f"not a network parameter key: {key!r}")


@dataclass
class UnrolledNet:
    arch: str
    num_blocks: int
    setup: ImagingSetup
    params: Dict[str, np.ndarray]
    step: float = 1.0
    trainable: Dict[str, bool] = field(default_factory=lambda: dict.fromkeys(GROUPS, True))
    shared: bool = True
    provenance: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown architecture {self.arch!r} (choose from {', '.join(ARCHS)})")
        if self.num_blocks < 0:
            raise ConfigError("num_blocks must be >= 0")
        if set(self.trainable) != set(GROUPS):
            raise ConfigError(f"trainability flags must name exactly {', '.join(GROUPS)}")
        if self.arch == "alista" and (self.trainable["forward"] or self.trainable["transposed"]):
            raise ConfigError("alista keeps both operator paths frozen")
        self.params = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in self.params.items()}
        th = self.params.get(THRESHOLDS)
        if th is None or th.shape != (self.num_blocks,):
            raise ShapeError(f"expected {self.num_blocks} thresholds")
        if np.any(th < 0):
            raise ConfigError("thresholds must be non-negative")
        self._layout = layout_of(self.setup)

    @property
    def layout(self) -> List[SliceLayout]:
        return self._layout

    @property
    def thresholds(self) -> np.ndarray:
        return self.params[THRESHOLDS]

    def scope(self, k: int) -> str:
        return "shared" if self.shared else f"block{k}"

    def slice_params(self, k: int, path: str, d: int) -> Dict[str, np.ndarray]:
        prefix = f"{self.scope(k)}.{path}.slice{d}."
        return {key[len(prefix):]: v for key, v in self.params.items() if key.startswith(prefix)}

    def trainable_keys(self) -> List[str]:
        return [k for k in self.params if self.trainable[group_of(k)]]

    def copy(self) -> "UnrolledNet":
        return copy.deepcopy(self)


@dataclass
class BlockTrace:
    x_in: np.ndarray
    u: np.ndarray                               # pre-activation
    residuals: Optional[List[np.ndarray]] = None  # per-slice Fop(x) - y


@dataclass
class ForwardTrace:
    y: np.ndarray
    x_hat: np.ndarray
    blocks: List[BlockTrace] = field(default_factory=list)


# ---------- Slice path kernels ----------
def _ksize(p: Dict[str, np.ndarray]) -> int:
    return (p["weights"] if "weights" in p else p["basis"]).shape[1]


def _bsum(a: np.ndarray) -> np.ndarray:
    return a.reshape((-1,) + a.shape[-2:]).sum(axis=0)


def _path_forward(p, lay: SliceLayout, x):
    if "weights" in p:
        return strided_conv(p["weights"], x, lay.stride, lay.padding, lay.output_len)
    return p["mixing"] @ strided_conv(p["basis"], x, lay.stride, lay.padding, lay.output_len)


def _path_transpose(p, lay: SliceLayout, e):
    if "weights" in p:
        return strided_conv_transpose(p["weights"], e, lay.stride, lay.padding, lay.input_len)
    return strided_conv_transpose(p["basis"], p["mixing"].T @ e, lay.stride, lay.padding, lay.input_len)


def _path_forward_grads(p, lay: SliceLayout, x, g, need: bool):
    """Gradients of <g, path_forward(x)> w.r.t. the path weights (if need) and x."""
    grads = {}
    if "weights" in p:
        if need:
            X = gather_input(x, lay.stride, lay.padding, _ksize(p), lay.output_len)
            grads["weights"] = _bsum(g @ X)
        return grads, strided_conv_transpose(p["weights"], g, lay.stride, lay.padding, lay.input_len)
    gz = p["mixing"].T @ g
    if need:
        z = strided_conv(p["basis"], x, lay.stride, lay.padding, lay.output_len)
        X = gather_input(x, lay.stride, lay.padding, _ksize(p), lay.output_len)
        grads["basis"] = _bsum(gz @ X)
        grads["mixing"] = _bsum(g @ np.swapaxes(z, -1, -2))
    return grads, strided_conv_transpose(p["basis"], gz, lay.stride, lay.padding, lay.input_len)


def _path_transpose_grads(p, lay: SliceLayout, e, a, need: bool):
    """Gradients of <a, path_transpose(e)> w.r.t. the path weights (if need) and e."""
    grads = {}
    if "weights" in p:
        if need:
            Xa = gather_input(a, lay.stride, lay.padding, _ksize(p), lay.output_len)
            grads["weights"] = _bsum(e @ Xa)
        return grads, strided_conv(p["weights"], a, lay.stride, lay.padding, lay.output_len)
    za = strided_conv(p["basis"], a, lay.stride, lay.padding, lay.output_len)
    if need:
        Xa = gather_input(a, lay.stride, lay.padding, _ksize(p), lay.output_len)
        grads["basis"] = _bsum((p["mixing"].T @ e) @ Xa)
        grads["mixing"] = _bsum(e @ np.swapaxes(za, -1, -2))
    return grads, p["mixing"] @ za


def _acc(grads: Dict[str, np.ndarray], key: str, g: np.ndarray):
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


# ---------- Forward / backward ----------
def _data_parts(net: UnrolledNet, y: np.ndarray) -> List[np.ndarray]:
    cube = y.reshape(y.shape[:-1] + net.setup.cube_shape)
    return gather_slices(cube, net.setup.num_elements)


def _operator_block(net: UnrolledNet, k: int, x, y_parts):
    s = None
    res = []
    for lay in net.layout:
        d = lay.slice_offset
        e = lay.multiplicity * _path_forward(net.slice_params(k, "fwd", d), lay, x) - y_parts[d]
        t = _path_transpose(net.slice_params(k, "bwd", d), lay, e)
        s = t if s is None else s + t
        res.append(e)
    return x - net.step * s, res


def network_forward(net: UnrolledNet, y, keep_trace: bool = False):
    """x0 = 0, then num_blocks shrinkage steps. y is (..., N_d); returns (x_hat, trace or None)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1:] != (net.setup.num_data,):
        raise ShapeError(f"expected data vectors of length {net.setup.num_data}, got shape {y.shape}")
    x = np.zeros(y.shape[:-1] + (net.setup.num_pixels,))
    trace = ForwardTrace(y, x) if keep_trace else None
    y_parts = None if net.arch == "mlp" else _data_parts(net, y)
    for k in range(net.num_blocks):
        res = None
        if net.arch == "mlp":
            sc = net.scope(k)
            u = x @ net.params[f"{sc}.w1"].T + y @ net.params[f"{sc}.w2"].T
        else:
            u, res = _operator_block(net, k, x, y_parts)
        x_new = soft_threshold(u, net.thresholds[k])
        if keep_trace:
            trace.blocks.append(BlockTrace(x, u, res))
        x = x_new
    if keep_trace:
        trace.x_hat = x
    return x, trace


def network_backward(net: UnrolledNet, trace: Optional[ForwardTrace], x_true) -> Dict[str, np.ndarray]:
    """d MSE / d p for every trainable parameter p; frozen groups get no entries."""
    if trace is None:
        raise ValueError("network_backward needs the trace of network_forward(..., keep_trace=True)")
    if len(trace.blocks) != net.num_blocks:
        raise ValueError(f"trace has {len(trace.blocks)} blocks, network has {net.num_blocks}")
    x_true = np.asarray(x_true, dtype=np.float64)
    if x_true.shape != trace.x_hat.shape:
        raise ShapeError(f"x_true shape {x_true.shape} does not match output shape {trace.x_hat.shape}")
    want = net.trainable
    n_s = net.setup.num_pixels
    g = 2.0 * (trace.x_hat - x_true) / trace.x_hat.size
    grads: Dict[str, np.ndarray] = {}
    theta_grad = np.zeros(net.num_blocks)
    for k in reversed(range(net.num_blocks)):
        bt = trace.blocks[k]
        # subgradient 0 at |u| == theta
        active = np.abs(bt.u) > net.thresholds[k]
        gu = np.where(active, g, 0.0)
        theta_grad[k] = -np.sum(np.sign(bt.u) * gu)
        sc = net.scope(k)
        if net.arch == "mlp":
            gu2 = gu.reshape(-1, n_s)
            if want["forward"]:
                _acc(grads, f"{sc}.w1", gu2.T @ bt.x_in.reshape(-1, n_s))
            if want["transposed"]:
                _acc(grads, f"{sc}.w2", gu2.T @ trace.y.reshape(-1, net.setup.num_data))
            g = gu @ net.params[f"{sc}.w1"]
            continue
        a = -net.step * gu
        gx = gu
        for lay, e in zip(net.layout, bt.residuals):
            d = lay.slice_offset
            gb, h = _path_transpose_grads(net.slice_params(k, "bwd", d), lay, e, a, want["transposed"])
            for name, v in gb.items():
                _acc(grads, f"{sc}.bwd.slice{d}.{name}", v)
            gf, gxd = _path_forward_grads(net.slice_params(k, "fwd", d), lay, bt.x_in,
                                          lay.multiplicity * h, want["forward"])
            for name, v in gf.items():
                _acc(grads, f"{sc}.fwd.slice{d}.{name}", v)
            gx = gx + gxd
        g = gx
    if want["threshold"] and net.num_blocks:
        grads[THRESHOLDS] = theta_grad
    return grads


def loss_and_grad(net: UnrolledNet, y, x_true):
    x_hat, trace = network_forward(net, y, keep_trace=True)
    loss = float(np.mean((x_hat - np.asarray(x_true, dtype=np.float64)) ** 2))
    return loss, network_backward(net, trace, x_true)


# ---------- Construction ----------
def _source_slices(source, arch: str) -> List[Dict[str, np.ndarray]]:
    if isinstance(source, CompressedModel):
        if arch == "bc":
            return [{"weights": recompose(f).weights} for f in source.factors]
        return [{"basis": f.basis.copy(), "mixing": f.mixing.copy()} for f in source.factors]
    if arch == "cbc":
        raise ConfigError("cbc analytic init needs a compressed model (omp or svd)")
    return [{"weights": s.weights.copy()} for s in source.slices]


def _random_slices(source, arch: str, init: str, seed: int, basis: Optional[int]):
    out = []
    setup = source.setup
    for d in range(setup.num_elements):
        _, _, ksize, _ = slice_geometry(setup, d)
        shape = (setup.num_samples, ksize)
        if arch == "cbc":
            m = basis
            if isinstance(source, CompressedModel):
                m = source.factors[d].num_basis
            if not m:
                raise ConfigError("cbc random init needs a basis size")
            fac = random_factorize(shape, m, derive_seed(seed, "init", d), init)
            out.append({"basis": fac.basis, "mixing": fac.mixing})
        else:
            out.append({"weights": init_matrix(shape, init, derive_rng(seed, "init", d))})
    return out


def build_network(arch: str, num_blocks: int, source: Union[SliceConvModel, CompressedModel, None],
                  lam: float, L: Optional[float] = None, init: str = "analytic",
                  trainable: Optional[Dict[str, bool]] = None, shared: bool = True,
                  basis: Optional[int] = None, seed: int = 0,
                  cap_bytes: Optional[int] = None) -> UnrolledNet:
    """Network whose blocks start as ISTA steps on ``source`` (analytic) or from a random scheme.

    Thresholds start at lam / L and the step at 1 / L in both cases; L defaults to
    the power-iteration estimate on the source operator.
    """
    if arch not in ARCHS:
        raise ConfigError(f"unknown architecture {arch!r} (choose from {', '.join(ARCHS)})")
    if init not in INITS:
        raise ConfigError(f"unknown init {init!r} (choose from {', '.join(INITS)})")
    if source is None:
        raise ConfigError(f"{init} init requires a model")
    if lam is None or lam < 0:
        raise ConfigError("lam must be a non-negative number")
    if L is None:
        L = estimate_lipschitz(source.operator(), seed=seed).value
    if not L > 0.0:
        raise ValueError("Lipschitz constant must be positive")
    flags = dict.fromkeys(GROUPS, True)
    flags.update(trainable or {})
    if arch == "alista":
        if init != "analytic":
            raise ConfigError("alista freezes its operators, so only analytic init makes sense")
        flags["forward"] = flags["transposed"] = False

    setup = source.setup
    scopes = ["shared"] if shared else [f"block{k}" for k in range(num_blocks)]
    params: Dict[str, np.ndarray] = {}
    if arch == "mlp":
        n_s, n_d = setup.num_pixels, setup.num_data
        check_dense_cap(n_s, n_s, cap_bytes)
        if init == "analytic":
            A = dense_operator(source, cap_bytes)
            w1 = np.eye(n_s) - (A.T @ A) / L
            w2 = A.T / L
        else:
            check_dense_cap(n_s, n_d, cap_bytes)
            rng = derive_rng(seed, "init")
            w1 = init_matrix((n_s, n_s), init, rng)
            w2 = init_matrix((n_s, n_d), init, rng)
        for sc in scopes:
            params[f"{sc}.w1"] = w1.copy()
            params[f"{sc}.w2"] = w2.copy()
    else:
        if init == "analytic":
            per_slice = _source_slices(source, arch)
        else:
            per_slice = _random_slices(source, arch, init, seed, basis)
        for sc in scopes:
            for path in ("fwd", "bwd"):
                for d, p in enumerate(per_slice):
                    for name, v in p.items():
                        params[f"{sc}.{path}.slice{d}.{name}"] = v.copy()
    params[THRESHOLDS] = np.full(num_blocks, lam / L)

    provenance = {"init": init, "lam": float(lam), "lipschitz": float(L), "seed": int(seed),
                  "source": "compressed" if isinstance(source, CompressedModel) else "model"}
    if isinstance(source, CompressedModel):
        provenance.update(method=source.method, basis=source.basis)
    elif basis:
        provenance["basis"] = basis
    net = UnrolledNet(arch, num_blocks, setup, params, 1.0 / L, flags, shared, provenance)
    logger.info("built %s net: %d blocks, init=%s, shared=%s, theta=%.4g, step=%.4g",
                arch, num_blocks, init, shared, lam / L, 1.0 / L)
    return net


# ---------- Gradient check ----------
@dataclass
class GradCheckResult:
    max_deviation: float
    checked: int
    vacuous: bool = False
    worst_key: str = ""
    passed: bool = True


def gradient_check(net: UnrolledNet, y, x_true, h: float = 1e-6, tol: float = 1e-5,
                   max_entries: int = 256, seed: int = 0,
                   grads: Optional[Dict[str, np.ndarray]] = None) -> GradCheckResult:
    """Compare analytic gradients with central differences.

    Deviation per scalar is |g - g_fd| / max(|g|, |g_fd|, floor), the floor being
    1e-4 of the largest gradient magnitude seen. Parameters with more than
    max_entries scalars are checked on a seeded random subset.
    """
    keys = [k for k in net.trainable_keys() if net.params[k].size]
    if not keys:
        logger.info("gradient check: no trainable parameters, nothing to compare")
        return GradCheckResult(0.0, 0, vacuous=True)
    x_true = np.asarray(x_true, dtype=np.float64)
    if grads is None:
        _, grads = loss_and_grad(net, y, x_true)
    work = net.copy()
    rng = derive_rng(seed, "check")

    def loss() -> float:
        x_hat, _ = network_forward(work, y)
        return float(np.mean((x_hat - x_true) ** 2))

    rows = []
    for key in keys:
        flat = work.params[key].reshape(-1)
        if flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        g_an = np.asarray(grads.get(key, np.zeros(flat.size)), dtype=np.float64).reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            lp = loss()
            if key == THRESHOLDS and old < h:
                # one-sided: theta stays >= 0
                flat[i] = old
                fd = (lp - loss()) / h
            else:
                flat[i] = old - h
                fd = (lp - loss()) / (2.0 * h)
            flat[i] = old
            rows.append((key, float(g_an[i]), float(fd)))

    scale = max(max(abs(a), abs(f)) for _, a, f in rows)
    floor = max(1e-4 * scale, np.finfo(np.float64).tiny)
    worst, worst_key = 0.0, ""
    for key, a, f in rows:
        dev = abs(a - f) / max(abs(a), abs(f), floor)
        if dev > worst:
            worst, worst_key = dev, key
    res = GradCheckResult(worst, len(rows), False, worst_key, worst <= tol)
    log = logger.info if res.passed else logger.warning
    log("gradient check: %d scalars, max deviation %.3e (%s)", len(rows), worst, worst_key or "-")
    return res


def count_trainable(net: UnrolledNet) -> int:
    return int(sum(net.params[k].size for k in net.trainable_keys()))


