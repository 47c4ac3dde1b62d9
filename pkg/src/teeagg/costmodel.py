"""Closed-form iteration-time estimates for masked and tree aggregation."""
from __future__ import annotations

import enum
from dataclasses import dataclass

from .aggregation import ceil_log
from .config import JobConfig
from .enclaves import mask_blob_size, update_frame_size
from .models import ModelKind, ModelSpec
from .tensors import Domain


class Mode(str, enum.Enum):
    MASK = "mask"
    TREE = "tree"


@dataclass(frozen=True)
class Affine:
    base: float = 0.0
    slope: float = 0.0

    def __call__(self, x) -> float:
        return self.base + self.slope * x


@dataclass(frozen=True)
class Link:
    """Per-message latency plus size over bandwidth."""

    latency: float
    bandwidth: float

    def __post_init__(self):
        if self.latency < 0 or self.bandwidth <= 0:
            raise ValueError("latency must be >= 0 and bandwidth > 0")

    def __call__(self, size) -> float:
        return self.latency + size / self.bandwidth


@dataclass(frozen=True)
class CostParams:
    t_net: Link
    t_enc: Affine
    t_dec: Affine
    t_agg: Affine
    t_mask: float
    t_train: float
    t_apply: float
    mask_bytes: int
    update_bytes: int

    def __post_init__(self):
        for name in ("t_enc", "t_dec", "t_agg"):
            a = getattr(self, name)
            if a.base < 0 or a.slope < 0:
                raise ValueError(f"{name} must be nonnegative and nondecreasing")
        for name in ("t_mask", "t_train", "t_apply", "mask_bytes", "update_bytes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def from_config(cls, cfg: JobConfig) -> CostParams:
        """Map a job's latency and per-op costs one to one, with exact wire sizes."""
        m = cfg.model
        dims = (m.n_features, m.hidden, 1) if ModelKind(m.kind) is ModelKind.MLP else (m.n_features, 1)
        shape = ModelSpec(ModelKind(m.kind), dims).param_shape()
        domain = Domain(cfg.domain_enum)
        lat, c = cfg.latency, cfg.costs
        return cls(
            t_net=Link(lat.per_message_latency, lat.bandwidth),
            t_enc=Affine(c.enc_base, c.enc_per_byte),
            t_dec=Affine(c.dec_base, c.dec_per_byte),
            t_agg=Affine(c.agg_base, c.agg_per_update),
            t_mask=c.t_mask,
            t_train=c.t_train,
            t_apply=c.t_apply,
            mask_bytes=mask_blob_size(shape, domain),
            update_bytes=update_frame_size(shape, domain, cfg.debug_labels),
        )


def estimate_mask(p: CostParams, n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    m, g = p.mask_bytes, p.update_bytes
    return (
        p.t_train
        + p.t_net(m)
        + p.t_dec(m)
        + p.t_mask
        + p.t_enc(g)
        + p.t_net(g)
        + p.t_dec(g)
        + p.t_agg(n)
        + p.t_apply
    )


def tree_rounds(n: int, c: int) -> int:
    return ceil_log(n, c) + 1


def estimate_tree(p: CostParams, n: int, c: int) -> float:
    if n < 1 or c < 2:
        raise ValueError("need n >= 1 and c >= 2")
    g = p.update_bytes
    per_round = p.t_enc(g) + p.t_dec(g) + p.t_agg(c) + p.t_net(g)
    return per_round * tree_rounds(n, c) + p.t_train + p.t_apply


def recommend_mode(p: CostParams, n: int, c: int) -> Mode:
    return Mode.MASK if estimate_mask(p, n) <= estimate_tree(p, n, c) else Mode.TREE


def sweep(p: CostParams, ns, cs):
    """Rows ``(n, c, t_mask, t_tree, recommended)``."""
    return [
        (n, c, estimate_mask(p, n), estimate_tree(p, n, c), recommend_mode(p, n, c).value)
        for n in ns
        for c in cs
    ]


def crossover(p: CostParams, c: int, n_max: int = 256) -> int | None:
    """Smallest n in 1..n_max where tree aggregation is recommended."""
    for n in range(1, n_max + 1):
        if recommend_mode(p, n, c) is Mode.TREE:
            return n
    return None
