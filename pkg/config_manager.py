import json
import math
import typing
from dataclasses import dataclass, field, fields, asdict
from typing import List, Optional

from errors import ConfigError
from slice_model import ImagingSetup, DEFAULT_DENSE_CAP_BYTES

NOISELESS = "noiseless"
BASIS_PRESETS = (16, 32, 64)
SNR_PRESETS_DB = (5.0, 10.0, 15.0, 20.0)
ISTA_PRESETS = {"ista-200": 200, "ista-500": 500}


@dataclass
class CompressCfg:
    method: str = "omp"              # omp | svd | random
    basis: int = 16
    residual_rtol: float = 1e-6      # stop when ||W - CB||_F <= rtol * ||W||_F
    random_scheme: str = "xavier"    # used by method=random

@dataclass
class SolverCfg:
    algo: str = "ista"
    iters: int = 200
    lam: Optional[float] = None      # None -> lam_factor * ||A^T y||_inf per problem
    lam_factor: float = 0.1
    stop_tol: float = 0.0
    lipschitz_iters: int = 500
    lipschitz_tol: float = 1e-8

@dataclass
class NetworkCfg:
    arch: str = "cbc"                # mlp | alista | bc | cbc
    blocks: int = 10
    init: str = "analytic"           # analytic | omp | svd (cbc only) | xavier | kaiming | orthogonal
    basis: int = 16
    shared: bool = True
    train_forward: bool = True
    train_transposed: bool = True
    train_threshold: bool = True
    lam: Optional[float] = None
    lam_factor: float = 0.1

@dataclass
class TrainConfig:
    max_epochs: int = 400
    iters_per_epoch: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-3
    threshold_learning_rate: Optional[float] = None   # None -> learning_rate * amplitude_mean
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    snr_db: Optional[float] = None   # None = noiseless
    early_stop_gamma: float = 1e-6
    early_stop_patience: int = 5
    early_stop_mode: str = "signed"  # signed | absolute
    validation_set_size: int = 64
    seed: int = 0
    scatterers_min: int = 5
    scatterers_max: int = 10
    amplitude_mean: float = 1250.0
    amplitude_variance: float = 250.0

    def __post_init__(self):
        if self.max_epochs < 0 or self.iters_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("train: max_epochs >= 0, iters_per_epoch >= 1 and batch_size >= 1 required")
        if not self.early_stop_gamma > 0.0 or self.early_stop_patience < 1:
            raise ConfigError("train: early_stop_gamma > 0 and early_stop_patience >= 1 required")
        if self.early_stop_mode not in ("signed", "absolute"):
            raise ConfigError(f"train.early_stop_mode must be signed|absolute (got {self.early_stop_mode!r})")
        if self.optimizer != "adam":
            raise ConfigError(f"train.optimizer: only 'adam' is available (got {self.optimizer!r})")
        if not 1 <= self.scatterers_min <= self.scatterers_max:
            raise ConfigError("train: 1 <= scatterers_min <= scatterers_max required")
        if self.amplitude_variance < 0.0 or self.validation_set_size < 1:
            raise ConfigError("train: amplitude_variance >= 0 and validation_set_size >= 1 required")
        if self.learning_rate <= 0.0:
            raise ConfigError("train.learning_rate must be positive")
        if self.threshold_learning_rate is not None and not self.threshold_learning_rate > 0.0:
            raise ConfigError("train.threshold_learning_rate must be positive (or null)")

    @property
    def threshold_lr(self) -> float:
        """Thresholds are in amplitude units, so their default rate scales with the amplitude mean."""
        if self.threshold_learning_rate is not None:
            return self.threshold_learning_rate
        return self.learning_rate * (abs(self.amplitude_mean) or 1.0)

@dataclass
class EvalConfig:
    set_size: int = 640
    conditions: List[Optional[float]] = field(default_factory=lambda: [None, 20.0, 5.0])
    seed: int = 0
    mu: float = 1250.0
    precision_bytes: int = 8
    ista_iters: List[int] = field(default_factory=list)

@dataclass
class RuntimeCfg:
    seed: int = 0
    dense_cap_bytes: int = DEFAULT_DENSE_CAP_BYTES

@dataclass
class AppConfig:
    setup: ImagingSetup = field(default_factory=ImagingSetup)
    compress: CompressCfg = field(default_factory=CompressCfg)
    solver: SolverCfg = field(default_factory=SolverCfg)
    network: NetworkCfg = field(default_factory=NetworkCfg)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    runtime: RuntimeCfg = field(default_factory=RuntimeCfg)


SECTIONS = {
    "setup": ImagingSetup,
    "compress": CompressCfg,
    "solver": SolverCfg,
    "network": NetworkCfg,
    "train": TrainConfig,
    "eval": EvalConfig,
    "runtime": RuntimeCfg,
}


def parse_snr(value) -> Optional[float]:
    """'noiseless' / None -> None, numbers (or numeric strings, optional 'dB') -> float."""
    if value is None:
        return None
    if isinstance(value, str):
        s = value.strip().lower()
        if s == NOISELESS:
            return None
        if s.endswith("db"):
            s = s[:-2]
        try:
            value = float(s)
        except ValueError:
            raise ConfigError(f"SNR must be a number or '{NOISELESS}' (got {value!r})")
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"SNR must be a finite number or '{NOISELESS}' (got {value!r})")
    return float(value)


def condition_label(snr_db: Optional[float]) -> str:
    return NOISELESS if snr_db is None else f"{snr_db:g}dB"


def _line_of(text: str, key: str) -> int:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    return 0


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, where)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        return [_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true/false (got {value!r})")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer (got {value!r})")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number (got {value!r})")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string (got {value!r})")
        return value
    return value


class ConfigManager:
    @staticmethod
    def loads(text: str, source: str = "<config>") -> AppConfig:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{source}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}")
        if not isinstance(raw, dict):
            raise ConfigError(f"{source}: top level must be an object of sections")
        unknown = sorted(set(raw) - set(SECTIONS) - {"seed"})
        if unknown:
            raise ConfigError(f"{source}:{_line_of(text, unknown[0])}: unknown section {unknown[0]!r}")
        parts = {}
        for name, cls in SECTIONS.items():
            if not isinstance(raw.get(name) or {}, dict):
                raise ConfigError(f"{source}:{_line_of(text, name)}: section {name!r} must be an object")
            sec = dict(raw.get(name) or {})
            if name == "train" and "amplitude_sigma" in sec:
                sigma = sec.pop("amplitude_sigma")
                sec["amplitude_variance"] = float(sigma) ** 2
            if name == "eval" and "conditions" in sec:
                sec["conditions"] = [parse_snr(c) for c in sec["conditions"]]
            if name == "train" and "snr_db" in sec:
                sec["snr_db"] = parse_snr(sec["snr_db"])
            hints = typing.get_type_hints(cls)
            names = {f.name for f in fields(cls)}
            kwargs = {}
            for key, value in sec.items():
                if key not in names:
                    raise ConfigError(f"{source}:{_line_of(text, key)}: unknown key {name}.{key}")
                try:
                    kwargs[key] = _coerce(value, hints[key], f"{name}.{key}")
                except ConfigError as e:
                    raise ConfigError(f"{source}:{_line_of(text, key)}: {e}")
            try:
                parts[name] = cls(**kwargs)
            except ConfigError as e:
                line = _line_of(text, name)
                raise ConfigError(f"{source}:{line}: {e}")
        cfg = AppConfig(**parts)
        if "seed" in raw:
            seed = _coerce(raw["seed"], int, "seed")
            cfg.runtime.seed = seed
        # a section without an explicit seed follows the top-level one
        for name in ("train", "eval"):
            if "seed" not in (raw.get(name) or {}):
                getattr(cfg, name).seed = cfg.runtime.seed
        return cfg

    @staticmethod
    def load(path: str) -> AppConfig:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
        return ConfigManager.loads(text, source=str(path))

    @staticmethod
    def to_dict(cfg: AppConfig) -> dict:
        out = {name: asdict(getattr(cfg, name)) for name in SECTIONS}
        out["train"]["snr_db"] = NOISELESS if cfg.train.snr_db is None else cfg.train.snr_db
        out["eval"]["conditions"] = [NOISELESS if c is None else c for c in cfg.eval.conditions]
        return out

    @staticmethod
    def save(path: str, cfg: AppConfig):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(ConfigManager.to_dict(cfg), f, indent=2, sort_keys=True)
            f.write("\n")
