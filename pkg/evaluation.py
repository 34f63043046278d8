"""Reconstruction metrics, parameter/storage accounting and the benchmark harness."""
import csv
import json
import logging
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional

import numpy as np

from artifact_io import model_storage_bytes, network_header_size
from config_manager import EvalConfig, TrainConfig, condition_label
from errors import ShapeError
from ista import default_lambda, ista_solve
from rng_streams import derive_rng
from slice_model import estimate_lipschitz
from training import add_awgn, synthesize_batch
from unrolled_net import UnrolledNet, count_trainable, network_forward

logger = logging.getLogger(__name__)

CSV_HEADER = ["model", "params", "storage_bytes", "condition", "pae_percent", "se_mean", "eval_n", "seed"]
DEFAULT_MU = 1250.0


def pae(x_hat, x, mu: float = DEFAULT_MU) -> float:
    """sqrt(MSE) / mu in percent."""
    if not mu > 0.0:
        raise ValueError("mu must be positive")
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ShapeError(f"shape mismatch {x_hat.shape} vs {x.shape}")
    return float(np.sqrt(np.mean((x_hat - x) ** 2)) / mu * 100.0)


def se(x_hat, x) -> int:
    """Pixels where exactly one of x_hat, x is nonzero (no tolerance)."""
    x_hat = np.asarray(x_hat)
    x = np.asarray(x)
    if x_hat.shape != x.shape:
        raise ShapeError(f"shape mismatch {x_hat.shape} vs {x.shape}")
    return int(np.count_nonzero((np.abs(x_hat) > 0) ^ (np.abs(x) > 0)))


def count_params(net: UnrolledNet) -> int:
    return count_trainable(net)


def storage_bytes(net: UnrolledNet, precision: int = 8) -> int:
    """Container header plus every persisted scalar at `precision` bytes.

    alista counts its dense analytic operator (N_d x N_s) instead of the slice kernels.
    """
    if precision not in (4, 8):
        raise ValueError("precision must be 4 or 8 bytes")
    if net.arch == "alista":
        scalars = net.setup.num_data * net.setup.num_pixels + net.num_blocks
    else:
        scalars = sum(v.size for v in net.params.values())
    return network_header_size(net) + precision * int(scalars)


@dataclass
class MetricsRecord:
    model: str
    condition: str
    pae_percent: float
    se_mean: float
    params: int
    storage_bytes: int
    eval_n: int
    seed: int
    mse: float = 0.0


@dataclass
class BenchmarkEntry:
    """A network to evaluate, or an ISTA baseline (net None) running `ista_iters` on `operator_model`."""
    name: str
    net: Optional[UnrolledNet] = None
    operator_model: object = None
    ista_iters: int = 0
    lam_factor: float = 0.1

    def predict(self, Y: np.ndarray, L: Optional[float] = None) -> np.ndarray:
        if self.net is not None:
            x_hat, _ = network_forward(self.net, Y)
            return x_hat
        op = self.operator_model.operator()
        x_hat, _ = ista_solve(Y, op, default_lambda(Y, op, self.lam_factor), L, self.ista_iters)
        return x_hat

    def counts(self, precision: int):
        if self.net is not None:
            return count_params(self.net), storage_bytes(self.net, precision)
        return 0, model_storage_bytes(self.operator_model, precision)


def run_benchmark(entries: List[BenchmarkEntry], model, ecfg: EvalConfig, tcfg: TrainConfig,
                  log: Optional[Callable[[str], None]] = None) -> List[MetricsRecord]:
    """One eval set of x maps shared by all conditions; noise drawn per condition."""
    log = log or logger.info
    if ecfg.set_size < 1:
        raise ValueError("eval set size must be >= 1")
    for e in entries:
        other = e.net.setup if e.net is not None else e.operator_model.setup
        if other != model.setup:
            raise ShapeError(f"model {e.name!r} was built for a different setup")
    X, Y_clean = synthesize_batch(derive_rng(ecfg.seed, "eval", 0), None, model, tcfg, ecfg.set_size,
                                  noisy=False)
    lipschitz = {}
    records = []
    for ci, cond in enumerate(ecfg.conditions):
        Y = add_awgn(Y_clean, cond, derive_rng(ecfg.seed, "eval", 1 + ci))
        label = condition_label(cond)
        for e in entries:
            L = None
            if e.net is None:
                key = id(e.operator_model)
                if key not in lipschitz:
                    lipschitz[key] = estimate_lipschitz(e.operator_model.operator(), seed=ecfg.seed).value
                L = lipschitz[key]
            x_hat = e.predict(Y, L)
            per_pae = [pae(xh, x, ecfg.mu) for xh, x in zip(x_hat, X)]
            per_se = [se(xh, x) for xh, x in zip(x_hat, X)]
            params, storage = e.counts(ecfg.precision_bytes)
            rec = MetricsRecord(e.name, label, float(np.mean(per_pae)), float(np.mean(per_se)), params,
                                storage, ecfg.set_size, ecfg.seed, float(np.mean((x_hat - X) ** 2)))
            records.append(rec)
            log(f"{e.name:>12s} {label:>10s}  PAE {rec.pae_percent:8.4f}%  SE {rec.se_mean:8.3f}")
    return records


def write_benchmark_csv(records: List[MetricsRecord], path: str):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.model, r.params, r.storage_bytes, r.condition, repr(r.pae_percent),
                        repr(r.se_mean), r.eval_n, r.seed])


def write_benchmark_wide(records: List[MetricsRecord], path: str):
    """One row per model with PAE/SE columns per condition."""
    conds = list(dict.fromkeys(r.condition for r in records))
    models = list(dict.fromkeys(r.model for r in records))
    by = {(r.model, r.condition): r for r in records}
    header = ["model", "params", "storage_bytes"]
    for c in conds:
        header += [f"pae_percent[{c}]", f"se_mean[{c}]"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for m in models:
            first = next(r for r in records if r.model == m)
            row = [m, first.params, first.storage_bytes]
            for c in conds:
                r = by.get((m, c))
                row += [repr(r.pae_percent), repr(r.se_mean)] if r else ["", ""]
            w.writerow(row)


def write_benchmark_json(records: List[MetricsRecord], path: str):
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"columns": CSV_HEADER + ["mse"], "records": [asdict(r) for r in records]}, f,
                  indent=2, sort_keys=True)
        f.write("\n")
