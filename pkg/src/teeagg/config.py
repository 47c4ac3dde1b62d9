"""Job configuration: dataclasses, JSON round trip, validation, templates."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .models import Hyperparams, ModelKind
from .tensors import Domain, FixedPointConfig

MODES = ("mask", "tree", "mask_ssp")
DOMAINS = {"fixed64": Domain.FIXED64, "float32": Domain.FLOAT32}


class ConfigError(ValueError):
    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{f}: {m}" for f, m in problems))


@dataclass
class ModelConfig:
    kind: str = "logistic"
    hidden: int = 32
    n_samples: int = 2000
    n_features: int = 20
    margin: float = 0.5
    base_lr: float = 0.5
    decay_factor: float = 0.5
    decay_every: int = 100
    clip_norm: float = 10.0


@dataclass
class LatencyConfig:
    per_message_latency: float = 0.25
    bandwidth: float = 65536.0  # bytes per time unit
    control_latency: float = 0.0

    def t_net(self, size: int) -> float:
        return self.per_message_latency + size / self.bandwidth


@dataclass
class OpCosts:
    t_train: float = 10.0
    t_mask: float = 0.125
    t_apply: float = 2.0
    enc_base: float = 0.25
    enc_per_byte: float = 0.0
    dec_base: float = 0.25
    dec_per_byte: float = 0.0
    agg_base: float = 0.0
    agg_per_update: float = 1.0

    def t_enc(self, size: int) -> float:
        return self.enc_base + self.enc_per_byte * size

    def t_dec(self, size: int) -> float:
        return self.dec_base + self.dec_per_byte * size

    def t_agg(self, k: int) -> float:
        return self.agg_base + self.agg_per_update * k


@dataclass
class FaultSpec:
    target: str  # "training:<i>" | "aggregator" | "admin"
    iteration: int
    action: str = "crash"  # crash | delay
    delay: float = 0.0


@dataclass
class JobConfig:
    n_training: int = 4
    mode: str = "mask"
    children_c: int = 2
    model: ModelConfig = field(default_factory=ModelConfig)
    domain: str = "fixed64"
    frac_bits: int = 24
    clamp_abs: float = 1024.0
    epochs: int = 50
    batches_per_epoch: int = 4
    seed: int = 0
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    costs: OpCosts = field(default_factory=OpCosts)
    faults: list[FaultSpec] = field(default_factory=list)
    mask_pool_size: int | None = None
    straggler_timeout: float | None = None
    aggregation_timeout: float | None = None
    min_participants: int = 1
    restart_delay: float = 1.0
    model_retry_backoff: float = 1.0
    debug_labels: bool = True
    canary: str = "CANARY:plaintext-must-never-reach-storage"

    @property
    def total_iterations(self) -> int:
        return self.epochs * self.batches_per_epoch

    @property
    def domain_enum(self) -> Domain:
        return DOMAINS[self.domain]

    @property
    def fixed_point(self) -> FixedPointConfig:
        return FixedPointConfig(self.frac_bits, self.clamp_abs)

    @property
    def hyperparams(self) -> Hyperparams:
        m = self.model
        return Hyperparams(
            batch_size=self.model.n_samples // max(1, self.n_training * self.batches_per_epoch),
            base_lr=m.base_lr,
            decay_factor=m.decay_factor,
            decay_every=m.decay_every,
            clip_norm=m.clip_norm,
        )

    @property
    def effective_pool_size(self) -> int:
        if self.mask_pool_size is not None:
            return self.mask_pool_size
        return self.total_iterations + len(self.faults) + 4

    @property
    def effective_straggler_timeout(self) -> float:
        if self.straggler_timeout is not None:
            return self.straggler_timeout
        # every enclave shares t_train, so it is also the median training time
        return 5.0 * self.costs.t_train

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> JobConfig:
        return _build(cls, raw, "")

    @classmethod
    def load(cls, path) -> JobConfig:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([("<file>", f"not valid JSON: {exc}")]) from exc
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


_NESTED = {"model": ModelConfig, "latency": LatencyConfig, "costs": OpCosts}


def _build(cls, raw, prefix):
    if not isinstance(raw, dict):
        raise ConfigError([(prefix or "<root>", "expected an object")])
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError([(f"{prefix}{k}", "unknown field") for k in unknown])
    kwargs = {}
    for name, value in raw.items():
        if cls is JobConfig and name in _NESTED:
            kwargs[name] = _build(_NESTED[name], value, f"{prefix}{name}.")
        elif name == "faults":
            if not isinstance(value, list):
                raise ConfigError([(f"{prefix}faults", "expected a list")])
            kwargs[name] = [_build(FaultSpec, v, f"{prefix}faults[{i}].") for i, v in enumerate(value)]
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError([(prefix or "<root>", str(exc))]) from exc


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def validate(cfg: JobConfig) -> None:
    """Raise :class:`ConfigError` listing every offending field."""
    bad: list[tuple[str, str]] = []
    if not isinstance(cfg.n_training, int) or cfg.n_training < 1:
        bad.append(("n_training", "must be an integer >= 1"))
    if cfg.mode not in MODES:
        bad.append(("mode", f"must be one of {MODES}"))
    if not isinstance(cfg.children_c, int) or cfg.children_c < 2:
        if cfg.mode == "tree":
            bad.append(("children_c", "tree aggregation needs children_c >= 2"))
    if cfg.domain not in DOMAINS:
        bad.append(("domain", f"must be one of {sorted(DOMAINS)}"))
    if not isinstance(cfg.frac_bits, int) or not 1 <= cfg.frac_bits <= 52:
        bad.append(("frac_bits", "must be an integer in [1, 52]"))
    elif not _is_num(cfg.clamp_abs) or cfg.clamp_abs <= 0:
        bad.append(("clamp_abs", "must be positive"))
    elif cfg.domain == "fixed64" and isinstance(cfg.n_training, int) and cfg.n_training >= 1:
        try:
            cfg.fixed_point.check_capacity(cfg.n_training)
        except ValueError as exc:
            bad.append(("clamp_abs", str(exc)))
    for name in ("epochs", "batches_per_epoch"):
        v = getattr(cfg, name)
        if not isinstance(v, int) or v < 1:
            bad.append((name, "must be an integer >= 1"))
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        bad.append(("seed", "must be a non-negative integer"))
    m = cfg.model
    try:
        ModelKind(m.kind)
    except ValueError:
        bad.append(("model.kind", f"must be one of {[k.value for k in ModelKind]}"))
    if m.clip_norm <= 0:
        bad.append(("model.clip_norm", "must be positive"))
    if not isinstance(m.decay_every, int) or m.decay_every < 1:
        bad.append(("model.decay_every", "must be an integer >= 1"))
    if isinstance(cfg.n_training, int) and isinstance(cfg.batches_per_epoch, int) and cfg.n_training >= 1:
        n_train = m.n_samples - int(round(m.n_samples * 0.2))
        if n_train // cfg.n_training < max(1, cfg.batches_per_epoch):
            bad.append(("model.n_samples", "too few samples for n_training x batches_per_epoch"))
    lat = cfg.latency
    for name in ("per_message_latency", "control_latency"):
        if not _is_num(getattr(lat, name)) or getattr(lat, name) < 0:
            bad.append((f"latency.{name}", "must be >= 0"))
    if not _is_num(lat.bandwidth) or lat.bandwidth <= 0:
        bad.append(("latency.bandwidth", "must be > 0"))
    for f in fields(OpCosts):
        v = getattr(cfg.costs, f.name)
        if not _is_num(v) or v < 0:
            bad.append((f"costs.{f.name}", "must be a finite number >= 0"))
    for i, fault in enumerate(cfg.faults):
        where = f"faults[{i}]"
        ok_target = fault.target in ("aggregator", "admin")
        if fault.target.startswith("training:"):
            try:
                ok_target = 0 <= int(fault.target.split(":", 1)[1]) < cfg.n_training
            except ValueError:
                ok_target = False
        if not ok_target:
            bad.append((f"{where}.target", f"unknown target {fault.target!r}"))
        if fault.action not in ("crash", "delay"):
            bad.append((f"{where}.action", "must be crash or delay"))
        if fault.action == "delay" and (not _is_num(fault.delay) or fault.delay < 0):
            bad.append((f"{where}.delay", "must be >= 0"))
        if fault.action == "delay" and not fault.target.startswith("training:"):
            bad.append((f"{where}.target", "delays apply to training enclaves"))
        if not isinstance(fault.iteration, int) or fault.iteration < 0:
            bad.append((f"{where}.iteration", "must be an integer >= 0"))
    if cfg.mode != "tree" and isinstance(cfg.epochs, int) and isinstance(cfg.batches_per_epoch, int):
        if cfg.effective_pool_size < cfg.total_iterations:
            bad.append(("mask_pool_size", "must cover every iteration"))
    if isinstance(cfg.n_training, int) and not 1 <= cfg.min_participants <= max(1, cfg.n_training):
        bad.append(("min_participants", "must be in [1, n_training]"))
    if cfg.straggler_timeout is not None and (not _is_num(cfg.straggler_timeout) or cfg.straggler_timeout <= 0):
        bad.append(("straggler_timeout", "must be > 0"))
    if cfg.aggregation_timeout is not None and (not _is_num(cfg.aggregation_timeout) or cfg.aggregation_timeout <= 0):
        bad.append(("aggregation_timeout", "must be > 0"))
    if not _is_num(cfg.restart_delay) or cfg.restart_delay < 0:
        bad.append(("restart_delay", "must be >= 0"))
    if not _is_num(cfg.model_retry_backoff) or cfg.model_retry_backoff <= 0:
        bad.append(("model_retry_backoff", "must be > 0"))
    if bad:
        raise ConfigError(bad)


def template(name: str) -> JobConfig:
    if name == "mask":
        return JobConfig(mode="mask")
    if name == "tree":
        return JobConfig(mode="tree", children_c=2)
    if name == "ssp":
        return JobConfig(
            mode="mask_ssp",
            min_participants=3,
            faults=[FaultSpec("training:3", 2, "delay", 100.0)],
        )
    raise ValueError(f"unknown template {name!r}; choose mask, tree or ssp")
