"""Toy models and the aggregator-side update pipeline.

Gradients are computed in float64 and only converted to a transport domain
(Float32 or Fixed64) at the boundary.  Model weights are always Float32.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .tensors import (
    Domain,
    FixedPointConfig,
    GradVector,
    ShapeMismatchError,
    from_floats,
    to_domain,
)


class ModelKind(str, enum.Enum):
    LINEAR = "linear"
    LOGISTIC = "logistic"
    MLP = "mlp"


@dataclass(frozen=True)
class Hyperparams:
    batch_size: int = 100
    base_lr: float = 0.5
    decay_factor: float = 0.5
    decay_every: int = 100
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    layer_dims: tuple[int, ...]
    init_seed: int = 0
    hyperparams: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        want = 3 if self.kind is ModelKind.MLP else 2
        if len(self.layer_dims) != want or self.layer_dims[-1] != 1:
            raise ValueError(f"{self.kind.value} expects layer_dims of length {want} ending in 1")

    @property
    def n_features(self) -> int:
        return self.layer_dims[0]

    def param_shape(self) -> tuple[int, ...]:
        if self.kind is ModelKind.MLP:
            d, h, _ = self.layer_dims
            return (d * h, h, h, 1)
        return (self.layer_dims[0], 1)

    @property
    def n_params(self) -> int:
        return sum(self.param_shape())


@dataclass(frozen=True)
class ModelState:
    weights: GradVector
    epoch: int = 0
    batch_index: int = 0
    step: int = 0

    @property
    def version(self) -> tuple[int, int]:
        return (self.epoch, self.batch_index)


@dataclass(frozen=True, eq=False)
class Batch:
    features: np.ndarray
    labels: np.ndarray
    owner_id: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.size:
            raise ShapeMismatchError(f"features {x.shape} and labels {y.shape} disagree")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.size

    _HEAD = struct.Struct("<4sIIIH")

    def to_bytes(self, canary: bytes = b"") -> bytes:
        rows, cols = self.features.shape
        head = self._HEAD.pack(b"CBAT", self.owner_id, rows, cols, len(canary))
        return (
            head
            + canary
            + self.features.astype("<f8").tobytes()
            + self.labels.astype("<f8").tobytes()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> Batch:
        magic, owner, rows, cols, clen = cls._HEAD.unpack_from(data)
        if magic != b"CBAT":
            raise ValueError(f"bad batch magic {magic!r}")
        off = cls._HEAD.size + clen
        x = np.frombuffer(data, "<f8", rows * cols, off).reshape(rows, cols)
        y = np.frombuffer(data, "<f8", rows, off + 8 * rows * cols)
        return cls(x.copy(), y.copy(), owner)


def concat_batches(batches: list[Batch], owner_id: int = -1) -> Batch:
    return Batch(
        np.vstack([b.features for b in batches]),
        np.concatenate([b.labels for b in batches]),
        owner_id,
    )


def init_state(spec: ModelSpec) -> ModelState:
    rng = np.random.default_rng(spec.init_seed)
    if spec.kind is ModelKind.MLP:
        d, h, _ = spec.layer_dims
        w1 = rng.normal(0.0, 1.0 / np.sqrt(d), d * h)
        w2 = rng.normal(0.0, 1.0 / np.sqrt(h), h)
        w = np.concatenate([w1, np.zeros(h), w2, np.zeros(1)])
    else:
        w = rng.normal(0.0, 0.01, spec.n_params)
    return ModelState(from_floats(w, spec.param_shape()))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _unpack_mlp(spec: ModelSpec, w: np.ndarray):
    d, h, _ = spec.layer_dims
    w1 = w[: d * h].reshape(d, h)
    b1 = w[d * h : d * h + h]
    w2 = w[d * h + h : d * h + 2 * h]
    b2 = w[-1]
    return w1, b1, w2, b2


def _forward(spec: ModelSpec, w: np.ndarray, x: np.ndarray):
    if spec.kind is ModelKind.MLP:
        w1, b1, w2, b2 = _unpack_mlp(spec, w)
        hidden = np.tanh(x @ w1 + b1)
        return hidden @ w2 + b2, hidden
    return x @ w[:-1] + w[-1], None


def loss(spec: ModelSpec, w: np.ndarray, batch: Batch) -> float:
    out, _ = _forward(spec, np.asarray(w, dtype=np.float64), batch.features)
    y = batch.labels
    if spec.kind is ModelKind.LINEAR:
        return float(np.mean((out - y) ** 2))
    # binary cross-entropy on logits, written stably
    return float(np.mean(np.logaddexp(0.0, out) - y * out))


def loss_grad(spec: ModelSpec, w: np.ndarray, batch: Batch) -> np.ndarray:
    """Analytic mean-loss gradient in float64."""
    w = np.asarray(w, dtype=np.float64)
    x, y = batch.features, batch.labels
    if x.shape[1] != spec.n_features or w.size != spec.n_params:
        raise ShapeMismatchError(
            f"batch has {x.shape[1]} features / weights {w.size}; model expects "
            f"{spec.n_features} / {spec.n_params}"
        )
    n = y.size
    out, hidden = _forward(spec, w, x)
    if spec.kind is ModelKind.LINEAR:
        dout = 2.0 * (out - y) / n
    else:
        dout = (_sigmoid(out) - y) / n
    if spec.kind is ModelKind.MLP:
        _, _, w2, _ = _unpack_mlp(spec, w)
        g_w2 = hidden.T @ dout
        g_b2 = dout.sum()
        dpre = np.outer(dout, w2) * (1.0 - hidden**2)
        g_w1 = x.T @ dpre
        g_b1 = dpre.sum(axis=0)
        return np.concatenate([g_w1.reshape(-1), g_b1, g_w2, [g_b2]])
    return np.concatenate([x.T @ dout, [dout.sum()]])


def compute_gradients(
    spec: ModelSpec,
    state: ModelState,
    batch: Batch,
    domain: Domain = Domain.FLOAT32,
    cfg: FixedPointConfig | None = None,
) -> GradVector:
    g = loss_grad(spec, state.weights.to_float64(), batch)
    return to_domain(g, domain, cfg, spec.param_shape())


def clip_array(g: np.ndarray, clip_norm: float) -> np.ndarray:
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    norm = float(np.sqrt(np.dot(g, g)))
    if norm <= clip_norm:
        return g
    return g * (clip_norm / norm)


def clip_gradients(g: GradVector, clip_norm: float) -> GradVector:
    if g.domain is not Domain.FLOAT32:
        raise TypeError("clip_gradients operates on Float32 vectors; decode Fixed64 first")
    x = g.values.astype(np.float64)
    clipped = clip_array(x, clip_norm)
    if clipped is x:
        return g
    return from_floats(clipped, g.shape)


def lr_at(hp: Hyperparams, step: int) -> float:
    return hp.base_lr * hp.decay_factor ** (step // hp.decay_every)


def next_version(epoch: int, batch_index: int, batches_per_epoch: int) -> tuple[int, int]:
    if batch_index + 1 >= batches_per_epoch:
        return epoch + 1, 0
    return epoch, batch_index + 1


def apply_update(
    spec: ModelSpec, state: ModelState, agg: GradVector, k: int, batches_per_epoch: int
) -> ModelState:
    """One SGD step from the SUM of ``k`` participants' gradients."""
    if agg.shape != state.weights.shape:
        raise ShapeMismatchError(f"aggregate shape {agg.shape} vs weights {state.weights.shape}")
    if k < 1:
        raise ValueError("participant count must be >= 1")
    hp = spec.hyperparams
    mean = agg.to_float64() / k
    step = clip_array(mean, hp.clip_norm)
    w = state.weights.to_float64() - lr_at(hp, state.step) * step
    e, t = next_version(state.epoch, state.batch_index, batches_per_epoch)
    return ModelState(from_floats(w, state.weights.shape), e, t, state.step + 1)


def predict(spec: ModelSpec, weights: GradVector, x: np.ndarray) -> np.ndarray:
    out, _ = _forward(spec, weights.to_float64(), np.asarray(x, dtype=np.float64))
    return out


def accuracy(spec: ModelSpec, weights: GradVector, batch: Batch) -> float:
    out = predict(spec, weights, batch.features)
    if spec.kind is ModelKind.LINEAR:
        pred = out > 0.5
    else:
        pred = out > 0.0
    return float(np.mean(pred == (batch.labels > 0.5)))


@dataclass(frozen=True, eq=False)
class ToyTask:
    shards: list[list[Batch]]
    spec: ModelSpec
    eval_set: Batch

    @property
    def n_owners(self) -> int:
        return len(self.shards)

    @property
    def batches_per_epoch(self) -> int:
        return len(self.shards[0])


def make_toy_task(
    seed: int,
    n_owners: int = 4,
    batches_per_epoch: int = 4,
    n_samples: int = 2000,
    n_features: int = 20,
    margin: float = 0.5,
    eval_fraction: float = 0.2,
    kind: ModelKind = ModelKind.LOGISTIC,
    hidden: int = 32,
    hyperparams: Hyperparams | None = None,
) -> ToyTask:
    """Linearly separable two-class data split by owner, then by batch."""
    rng = np.random.default_rng(seed)
    w_star = rng.normal(size=n_features)
    w_star /= np.linalg.norm(w_star)
    x = rng.normal(size=(n_samples, n_features))
    z = x @ w_star
    side = np.where(z >= 0, 1.0, -1.0)
    x = x + np.outer(side * margin, w_star)
    y = (side > 0).astype(np.float64)

    n_eval = int(round(n_samples * eval_fraction))
    n_train = n_samples - n_eval
    per_owner = n_train // n_owners
    if per_owner < batches_per_epoch:
        raise ValueError("not enough samples for the requested owners and batches")
    shards = []
    for owner in range(n_owners):
        lo = owner * per_owner
        idx = np.array_split(np.arange(lo, lo + per_owner), batches_per_epoch)
        shards.append([Batch(x[i], y[i], owner) for i in idx])
    eval_set = Batch(x[n_train:], y[n_train:], -1)

    dims = (n_features, hidden, 1) if ModelKind(kind) is ModelKind.MLP else (n_features, 1)
    hp = hyperparams or Hyperparams(batch_size=per_owner // batches_per_epoch)
    spec = ModelSpec(kind, dims, init_seed=seed, hyperparams=hp)
    return ToyTask(shards, spec, eval_set)


def with_hyperparams(spec: ModelSpec, **kw) -> ModelSpec:
    return replace(spec, hyperparams=replace(spec.hyperparams, **kw))
