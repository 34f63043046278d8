"""Synthetic pairs, noise, loss, Adam, the training loop and the ablation runner."""
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from compress import compress_model
from config_manager import CompressCfg, NetworkCfg, TrainConfig
from errors import ConfigError, NumericalError, ShapeError, TrainingDivergedError
from ista import default_lambda
from rng_streams import derive_rng, derive_seed
from slice_model import ReflectivityMap, SliceConvModel, estimate_lipschitz
from unrolled_net import THRESHOLDS, UnrolledNet, build_network, loss_and_grad, network_forward

logger = logging.getLogger(__name__)

STOP_EARLY = "early"
STOP_MAX_EPOCHS = "max_epochs"
STOP_DIVERGED = "diverged"
COMPRESSED_INITS = ("omp", "svd")


# ---------- Data ----------
def sample_reflectivity(rng: np.random.Generator, grid_nz: int, grid_nx: int,
                        cfg: TrainConfig) -> ReflectivityMap:
    n_pix = grid_nz * grid_nx
    if cfg.scatterers_max > n_pix:
        raise ConfigError(f"cannot place up to {cfg.scatterers_max} scatterers on {n_pix} pixels")
    n = int(rng.integers(cfg.scatterers_min, cfg.scatterers_max + 1))
    idx = rng.choice(n_pix, size=n, replace=False)
    x = np.zeros(n_pix)
    x[idx] = rng.normal(cfg.amplitude_mean, math.sqrt(cfg.amplitude_variance), size=n)
    return ReflectivityMap.from_vector(x, grid_nz, grid_nx)


def add_awgn(y, snr_db: Optional[float], rng: np.random.Generator) -> np.ndarray:
    """Noise variance mean(y^2) / 10^(snr/10), per row for a batch; None means noiseless."""
    y = np.asarray(y, dtype=np.float64)
    if snr_db is None:
        return y.copy()
    power = np.mean(y * y, axis=-1, keepdims=True)
    if np.any(power == 0.0):
        raise NumericalError("signal power is zero; SNR is undefined")
    sigma = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    return y + sigma * rng.standard_normal(y.shape)


def synthesize_pair(rng: np.random.Generator, model, cfg: TrainConfig,
                    noise_rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """(x, y) vectors with y = A x (+ noise at cfg.snr_db)."""
    s = model.setup
    x = sample_reflectivity(rng, s.grid_nz, s.grid_nx, cfg).vector
    y = model.forward_flat(x)
    return x, add_awgn(y, cfg.snr_db, noise_rng if noise_rng is not None else rng)


def synthesize_batch(data_rng, noise_rng, model, cfg: TrainConfig, n: int,
                     snr_db: Optional[float] = None, noisy: bool = True):
    """n pairs as rows; x from data_rng, noise from noise_rng."""
    s = model.setup
    X = np.stack([sample_reflectivity(data_rng, s.grid_nz, s.grid_nx, cfg).vector for _ in range(n)])
    Y = model.forward_flat(X)
    if noisy:
        Y = add_awgn(Y, cfg.snr_db if snr_db is None else snr_db, noise_rng)
    return X, Y


def mse_loss(x_hat, x) -> float:
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ShapeError(f"shape mismatch {x_hat.shape} vs {x.shape}")
    return float(np.mean((x_hat - x) ** 2))


# ---------- Optimizer ----------
@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def optimizer_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
                   cfg: TrainConfig) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam on the keys present in grads; thresholds clamped to >= 0.

    Operator weights step with cfg.learning_rate, thresholds with cfg.threshold_lr.
    """
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for key, g in grads.items():
        lr = cfg.threshold_lr if key == THRESHOLDS else cfg.learning_rate
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(params[key])
            state.v[key] = np.zeros_like(params[key])
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[key] -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if key == THRESHOLDS:
            np.maximum(params[key], 0.0, out=params[key])
    return params, state


# ---------- Early stopping ----------
class EarlyStopper:
    """Counts consecutive epochs whose relative validation change is below gamma."""

    def __init__(self, gamma: float, patience: int, mode: str = "signed"):
        self.gamma = gamma
        self.patience = patience
        self.mode = mode
        self.prev: Optional[float] = None
        self.count = 0

    def update(self, val_loss: float) -> bool:
        if self.prev is not None:
            if self.prev == 0.0:
                delta = 0.0 if val_loss == 0.0 else math.inf
            else:
                delta = (val_loss - self.prev) / self.prev
            if self.mode == "absolute":
                delta = abs(delta)
            self.count = self.count + 1 if delta < self.gamma else 0
        self.prev = val_loss
        return self.count >= self.patience


# ---------- Records ----------
@dataclass
class TrainRecord:
    model_id: str = ""
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    wall_ms: List[float] = field(default_factory=list)
    stop_reason: str = STOP_MAX_EPOCHS
    initial_val_loss: Optional[float] = None
    best_epoch: int = 0
    config: Dict[str, object] = field(default_factory=dict)
    note: str = ""

    @property
    def epochs(self) -> int:
        return len(self.val_loss)

    @property
    def best_val_loss(self) -> Optional[float]:
        return self.val_loss[self.best_epoch - 1] if self.best_epoch else self.initial_val_loss

    def to_csv(self, path: str, timings: bool = True):
        """Per-epoch curve; timings=False drops wall_ms, the only column that varies between reruns."""
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"] + (["wall_ms"] if timings else []))
            for i, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                row = [i, repr(tl), repr(vl)]
                if timings:
                    row.append(f"{self.wall_ms[i - 1]:.3f}" if i <= len(self.wall_ms) else "")
                w.writerow(row)

    def summary(self) -> dict:
        d = asdict(self)
        d["epochs"] = self.epochs
        d["best_val_loss"] = self.best_val_loss
        return d

    def to_json(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRecord":
        names = {"model_id", "train_loss", "val_loss", "wall_ms", "stop_reason", "initial_val_loss",
                 "best_epoch", "config", "note"}
        return cls(**{k: v for k, v in d.items() if k in names})

    @classmethod
    def from_json(cls, path: str) -> "TrainRecord":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


# ---------- Training ----------
def validation_set(model, cfg: TrainConfig):
    """Fixed validation pairs from the validation streams of cfg.seed."""
    return synthesize_batch(derive_rng(cfg.seed, "validation", 0), derive_rng(cfg.seed, "validation", 1),
                            model, cfg, cfg.validation_set_size)


def _val_loss(net: UnrolledNet, X, Y) -> float:
    x_hat, _ = network_forward(net, Y)
    return mse_loss(x_hat, X)


def train_network(net: UnrolledNet, model, cfg: TrainConfig, model_id: str = "",
                  log: Optional[Callable[[str], None]] = None,
                  validation: Optional[Tuple[np.ndarray, np.ndarray]] = None
                  ) -> Tuple[UnrolledNet, TrainRecord]:
    """Adam on freshly synthesized batches; returns the best-validation parameters."""
    log = log or logger.info
    if net.setup != model.setup:
        raise ShapeError("network and model were built for different setups")
    net = net.copy()
    record = TrainRecord(model_id=model_id or net.arch,
                         config={**asdict(cfg), "threshold_lr": cfg.threshold_lr})
    X_val, Y_val = validation if validation is not None else validation_set(model, cfg)
    record.initial_val_loss = _val_loss(net, X_val, Y_val)
    if cfg.max_epochs == 0:
        log(f"{record.model_id}: max_epochs = 0, network returned unchanged")
        return net, record

    data_rng = derive_rng(cfg.seed, "data")
    noise_rng = derive_rng(cfg.seed, "noise")
    state = AdamState()
    stopper = EarlyStopper(cfg.early_stop_gamma, cfg.early_stop_patience, cfg.early_stop_mode)
    best_params = {k: v.copy() for k, v in net.params.items()}
    best_val = record.initial_val_loss
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        for it in range(1, cfg.iters_per_epoch + 1):
            X, Y = synthesize_batch(data_rng, noise_rng, model, cfg, cfg.batch_size)
            loss, grads = loss_and_grad(net, Y, X)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                record.stop_reason = STOP_DIVERGED
                record.note = f"non-finite loss at epoch {epoch}, iteration {it}"
                raise TrainingDivergedError(f"{record.model_id}: {record.note}", epoch, it, record)
            optimizer_step(net.params, grads, state, cfg)
            total += loss
        val = _val_loss(net, X_val, Y_val)
        if not math.isfinite(val):
            record.stop_reason = STOP_DIVERGED
            record.note = f"non-finite validation loss at epoch {epoch}"
            raise TrainingDivergedError(f"{record.model_id}: {record.note}", epoch, cfg.iters_per_epoch, record)
        record.train_loss.append(total / cfg.iters_per_epoch)
        record.val_loss.append(val)
        record.wall_ms.append((time.perf_counter() - t0) * 1000.0)
        if val < best_val:
            best_val = val
            record.best_epoch = epoch
            best_params = {k: v.copy() for k, v in net.params.items()}
        log(f"{record.model_id}: epoch {epoch:3d}  train {record.train_loss[-1]:.6g}  val {val:.6g}")
        if stopper.update(val):
            record.stop_reason = STOP_EARLY
            log(f"{record.model_id}: early stop after epoch {epoch} (patience {cfg.early_stop_patience})")
            break
    net.params = best_params
    return net, record


def reference_lambda(model, cfg: TrainConfig, factor: float) -> float:
    """factor * ||A^T y||_inf of the first validation pair."""
    _, Y = synthesize_batch(derive_rng(cfg.seed, "validation", 0), derive_rng(cfg.seed, "validation", 1),
                            model, cfg, 1)
    return float(default_lambda(Y[0], model.operator(), factor))


def prepare_network(model: SliceConvModel, ncfg: NetworkCfg, ccfg: CompressCfg, tcfg: TrainConfig,
                    init_seed: int, L: Optional[float] = None, cap_bytes: Optional[int] = None) -> UnrolledNet:
    """Turn a NetworkCfg into a network.

    Only cbc runs on a compressed operator: its analytic init factorizes the slice
    kernels with ``init`` (omp/svd) or, for init "analytic", with ``ccfg.method``.
    mlp, alista and bc start from the full analytic kernels.
    """
    source, init = model, ncfg.init
    if init in COMPRESSED_INITS and ncfg.arch != "cbc":
        raise ConfigError(f"init {init!r} compresses the operator and only applies to cbc; "
                          f"use 'analytic' for {ncfg.arch}")
    lam = ncfg.lam if ncfg.lam is not None else reference_lambda(model, tcfg, ncfg.lam_factor)
    flags = {"forward": ncfg.train_forward, "transposed": ncfg.train_transposed,
             "threshold": ncfg.train_threshold}
    if ncfg.arch == "cbc" and init in COMPRESSED_INITS + ("analytic",):
        method = ccfg.method if init == "analytic" else init
        source = compress_model(model, method, ncfg.basis, ccfg.residual_rtol, init_seed, ccfg.random_scheme)
        init = "analytic"
    if L is None:
        L = estimate_lipschitz(source.operator(), seed=init_seed).value
    return build_network(ncfg.arch, ncfg.blocks, source, lam, L, init, flags, ncfg.shared,
                         basis=ncfg.basis, seed=init_seed, cap_bytes=cap_bytes)


# ---------- Ablation ----------
@dataclass
class AblationCell:
    name: str
    blocks: int = 10
    init: str = "omp"
    forward_frozen: bool = False


@dataclass
class AblationPlan:
    name: str = "ablation"
    arch: str = "cbc"
    basis: int = 32
    cells: List[AblationCell] = field(default_factory=list)


def expand_matrix(blocks: Sequence[int], inits: Sequence[str], forward_frozen: Sequence[bool]
                  ) -> List[AblationCell]:
    return [AblationCell(f"b{b}-{i}-{'frozen' if f else 'trained'}", b, i, f)
            for b, i, f in product(blocks, inits, forward_frozen)]


def load_ablation(path: str) -> AblationPlan:
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - {"name", "arch", "basis", "cells", "matrix"}
    if unknown:
        raise ConfigError(f"{path}: unknown key {sorted(unknown)[0]!r}")
    plan = AblationPlan(raw.get("name", "ablation"), raw.get("arch", "cbc"), int(raw.get("basis", 32)))
    try:
        for c in raw.get("cells", []):
            plan.cells.append(AblationCell(**c))
        if "matrix" in raw:
            m = raw["matrix"]
            plan.cells.extend(expand_matrix(m.get("blocks", [10]), m.get("init", ["omp"]),
                                            m.get("forward_frozen", [False])))
    except TypeError as e:
        raise ConfigError(f"{path}: bad ablation cell: {e}")
    if not plan.cells:
        raise ConfigError(f"{path}: ablation has no cells")
    return plan


@dataclass
class AblationResult:
    records: List[TrainRecord]
    rows: List[dict]

    def to_csv(self, path: str):
        cols = ["cell", "blocks", "init", "forward_frozen", "epochs", "stop_reason",
                "initial_val_loss", "best_val_loss", "final_val_loss"]
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def run_ablation(plan: AblationPlan, model: SliceConvModel, ncfg: NetworkCfg, ccfg: CompressCfg,
                 tcfg: TrainConfig, log: Optional[Callable[[str], None]] = None,
                 cap_bytes: Optional[int] = None) -> AblationResult:
    """Train every cell on the same data and validation streams; init seeds differ per cell.

    A cell that diverges is recorded with stop_reason 'diverged' and the run goes on.
    """
    log = log or logger.info
    validation = validation_set(model, tcfg)
    records, rows = [], []
    for i, cell in enumerate(plan.cells):
        cfg = NetworkCfg(**{**asdict(ncfg), "arch": plan.arch, "basis": plan.basis, "blocks": cell.blocks,
                            "init": cell.init, "train_forward": not cell.forward_frozen})
        init_seed = derive_seed(tcfg.seed, "init", i)
        log(f"ablation {plan.name}: cell {i + 1}/{len(plan.cells)} {cell.name}")
        try:
            net = prepare_network(model, cfg, ccfg, tcfg, init_seed, cap_bytes=cap_bytes)
            _, rec = train_network(net, model, tcfg, model_id=cell.name, log=log, validation=validation)
        except TrainingDivergedError as e:
            rec = e.record or TrainRecord(model_id=cell.name, stop_reason=STOP_DIVERGED)
            logger.warning("cell %s diverged: %s", cell.name, e)
        rec.config = {**rec.config, "cell": asdict(cell), "init_seed": init_seed, "arch": plan.arch,
                      "basis": plan.basis}
        records.append(rec)
        rows.append({
            "cell": cell.name, "blocks": cell.blocks, "init": cell.init,
            "forward_frozen": cell.forward_frozen, "epochs": rec.epochs, "stop_reason": rec.stop_reason,
            "initial_val_loss": rec.initial_val_loss, "best_val_loss": rec.best_val_loss,
            "final_val_loss": rec.val_loss[-1] if rec.val_loss else rec.initial_val_loss,
        })
    return AblationResult(records, rows)
