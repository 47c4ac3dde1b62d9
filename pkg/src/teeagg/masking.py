"""Zero-sum mask sets, the offline mask pool and straggler residuals."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .crypto import KeyTag, NonceLog, SymmetricKey, encrypt, keygen
from .storage import BlobConflictError, BlobKey, BlobStore
from .tensors import Domain, GradVector, fold, negate, serialize, zeros


class PoolExhaustedError(RuntimeError):
    pass


class MaskClaimError(PermissionError):
    pass


@dataclass
class MaskSet:
    set_index: int
    masks: list[GradVector]
    keys: list[SymmetricKey] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.masks)


def _sample(shape, domain: Domain, frac_bits: int, rng: np.random.Generator) -> GradVector:
    size = sum(shape)
    if domain is Domain.FIXED64:
        lanes = rng.integers(0, 2**64, size=size, dtype=np.uint64)
        return GradVector(domain, lanes, shape, frac_bits)
    # float32 in [0, 1) scaled by 2 and shifted stays exactly in [-1, 1)
    lanes = rng.random(size, dtype=np.float32) * np.float32(2) - np.float32(1)
    return GradVector(domain, lanes, shape)


def generate_mask_set(
    n: int,
    shape: Sequence[int],
    domain: Domain,
    rng: np.random.Generator,
    frac_bits: int = 24,
    set_index: int = 0,
) -> MaskSet:
    if n < 1:
        raise ValueError("a mask set needs n >= 1")
    domain = Domain(domain)
    fb = frac_bits if domain is Domain.FIXED64 else 0
    masks = [_sample(shape, domain, fb, rng) for _ in range(n - 1)]
    total = fold(masks) if masks else zeros(shape, domain, fb)
    masks.append(negate(total))
    return MaskSet(set_index, masks)


def residual_mask(mask_set: MaskSet, participants: Sequence[int]) -> GradVector:
    """Mask for the last participant so the K participating masks sum to zero.

    It is that participant's own mask plus every non-participant's mask.
    """
    return fold(residual_parts(mask_set, participants))


def residual_parts(mask_set: MaskSet, participants: Sequence[int]) -> list[GradVector]:
    parts = list(participants)
    if not parts:
        raise ValueError("participants must be non-empty")
    if len(set(parts)) != len(parts):
        raise ValueError("participants must be distinct")
    if len(parts) > mask_set.n or any(not 0 <= p < mask_set.n for p in parts):
        raise ValueError(f"participants {parts} out of range for n={mask_set.n}")
    chosen = set(parts)
    others = [mask_set.masks[j] for j in range(mask_set.n) if j not in chosen]
    return [mask_set.masks[parts[-1]], *others]


@dataclass(frozen=True)
class MaskGrant:
    """Where to fetch mask blobs and which CAS secrets unlock them."""

    set_index: int
    enclave_index: int
    entries: tuple[tuple[BlobKey, str], ...]

    @property
    def residual(self) -> bool:
        return len(self.entries) > 1

    def to_json(self) -> str:
        return json.dumps(
            {
                "set": self.set_index,
                "index": self.enclave_index,
                "entries": [[k.to_str(), sid] for k, sid in self.entries],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> MaskGrant:
        raw = json.loads(text)
        entries = tuple((BlobKey.from_str(k), sid) for k, sid in raw["entries"])
        return cls(raw["set"], raw["index"], entries)


@dataclass
class MaskPool:
    first_set: int
    size: int
    n: int
    cursor: int = 0
    assignments: dict = field(default_factory=dict)
    claims: dict = field(default_factory=dict)
    grants: dict = field(default_factory=dict)
    on_claim: Callable[[int], None] | None = None

    @property
    def end(self) -> int:
        return self.first_set + self.size

    def set_for(self, iteration) -> int:
        """Set assigned to ``iteration``; the cursor only moves forward."""
        if iteration in self.assignments:
            return self.assignments[iteration]
        s = self.first_set + self.cursor
        if s >= self.end:
            raise PoolExhaustedError(
                f"mask pool of {self.size} sets exhausted at iteration {iteration!r}"
            )
        if self.on_claim is not None:
            self.on_claim(s)
        self.cursor += 1
        self.assignments[iteration] = s
        return s


def pregenerate(
    pool_size: int,
    n: int,
    shape: Sequence[int],
    domain: Domain,
    rng: np.random.Generator,
    store: BlobStore,
    register_keys: Callable[[list[SymmetricKey]], None] | None = None,
    frac_bits: int = 24,
    first_set: int = 0,
    nonce_log: NonceLog | None = None,
) -> MaskPool:
    """Generate ``pool_size`` sets, encrypt each mask under its own key, upload."""
    keys: list[SymmetricKey] = []
    for s in range(first_set, first_set + pool_size):
        ms = generate_mask_set(n, shape, domain, rng, frac_bits, set_index=s)
        for i, m in enumerate(ms.masks):
            key = keygen(KeyTag.mask(s, i), rng)
            blob = encrypt(key, serialize(m), rng, nonce_log)
            try:
                store.put(BlobKey.mask(s, i), blob)
            except BlobConflictError as exc:
                raise ValueError(f"mask slot ({s}, {i}) already occupied") from exc
            keys.append(key)
    if register_keys is not None:
        register_keys(keys)
    return MaskPool(first_set, pool_size, n)


def serve_mask_request(pool: MaskPool, iteration, enclave_index: int, requester: str | None = None) -> MaskGrant:
    if not 0 <= enclave_index < pool.n:
        raise MaskClaimError(f"enclave index {enclave_index} outside 0..{pool.n - 1}")
    s = pool.set_for(iteration)
    who = requester if requester is not None else f"training-{enclave_index}"
    holder = pool.claims.setdefault((s, enclave_index), who)
    if holder != who:
        raise MaskClaimError(f"mask ({s}, {enclave_index}) already claimed by {holder}")
    grant = pool.grants.get((s, enclave_index))
    if grant is None:
        grant = MaskGrant(s, enclave_index, ((BlobKey.mask(s, enclave_index), str(KeyTag.mask(s, enclave_index))),))
        pool.grants[(s, enclave_index)] = grant
    return grant


def residual_grant(
    pool: MaskPool,
    iteration,
    participants: Sequence[int],
    designate: Callable[[str, int], None] | None = None,
    requester: str | None = None,
) -> MaskGrant:
    """Grant for the last participant: its own mask plus all stragglers' masks."""
    parts = list(participants)
    if not parts:
        raise ValueError("participants must be non-empty")
    s = pool.set_for(iteration)
    last = parts[-1]
    stragglers = [j for j in range(pool.n) if j not in set(parts)]
    who = requester if requester is not None else f"training-{last}"
    for j in [last, *stragglers]:
        holder = pool.claims.setdefault((s, j), who)
        if holder != who:
            raise MaskClaimError(f"mask ({s}, {j}) already claimed by {holder}")
    if designate is not None:
        for j in stragglers:
            designate(str(KeyTag.mask(s, j)), last)
    entries = tuple((BlobKey.mask(s, j), str(KeyTag.mask(s, j))) for j in [last, *stragglers])
    grant = MaskGrant(s, last, entries)
    pool.grants[(s, last)] = grant
    return grant
