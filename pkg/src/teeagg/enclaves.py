"""Training, aggregator and admin enclave actors.

Each actor is a single-threaded state machine driven by the simulator: its
``iteration`` method is a simpy process body that yields timeouts and message
receipts.  Secrets are obtained only from the CAS after attestation, and every
message an actor emits is sealed under a per-pair session key.

The runtime ``rt`` passed to the actors provides ``env``, ``net``, ``cas``,
``store``, ``cfg``, ``spec``, ``costs``, ``latency``, ``plan``, ``directory``,
``rng``, ``nonce_log`` and ``tamper``; see :class:`teeagg.simnet.Job`.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field

from .aggregation import AGGREGATOR
from .cas import CAS, CodeMeasurement, EnclaveRecord, Role, code_identity
from .crypto import EncryptedBlob, KeyTag, SymmetricKey, decrypt, encrypt, sealed_size
from .masking import (
    MaskGrant,
    MaskPool,
    residual_grant,
    serve_mask_request,
)
from .models import Batch, Hyperparams, ModelKind, ModelSpec, ModelState, apply_update, compute_gradients
from .storage import BlobKey, BlobStore
from .taint import LabelKind, PrivacyViolation, TaintLabel, combine, promote
from .tensors import GradVector, deserialize, fold, payload_size, serialize

FRAME_MAGIC = b"CMSG"
CODE_VERSION = "1.0"


class MsgType(enum.IntEnum):
    MASK_REQ = 0
    MASK_GRANT = 1
    UPDATE = 2
    PARTIAL = 3
    MODEL_READY = 4
    CONTROL = 5


CONTROL_TYPES = frozenset({MsgType.MASK_REQ, MsgType.MASK_GRANT, MsgType.MODEL_READY, MsgType.CONTROL})


class FrameFormatError(ValueError):
    pass


class EnclaveCrashed(Exception):
    pass


@dataclass(frozen=True)
class Frame:
    mtype: MsgType
    label: LabelKind | None
    blob: EncryptedBlob

    def encode(self, with_label: bool = True) -> bytes:
        body = self.blob.to_bytes()
        head = FRAME_MAGIC + bytes([int(self.mtype)])
        if with_label:
            head += bytes([int(self.label if self.label is not None else LabelKind.CONTROL)])
        return head + struct.pack("<Q", len(body)) + body

    @classmethod
    def decode(cls, data: bytes, with_label: bool = True) -> Frame:
        data = bytes(data)
        head = 6 if with_label else 5
        if len(data) < head + 8 or data[:4] != FRAME_MAGIC:
            raise FrameFormatError("not a message frame")
        try:
            mtype = MsgType(data[4])
            label = LabelKind(data[5]) if with_label else None
        except ValueError as exc:
            raise FrameFormatError(str(exc)) from exc
        (length,) = struct.unpack_from("<Q", data, head)
        body = data[head + 8 :]
        if len(body) != length:
            raise FrameFormatError(f"frame declares {length} body bytes, carries {len(body)}")
        return cls(mtype, label, EncryptedBlob.from_bytes(body))


def frame_size(plaintext_len: int, with_label: bool = True) -> int:
    return (14 if with_label else 13) + sealed_size(plaintext_len)


def update_frame_size(shape, domain, with_label: bool = True) -> int:
    return frame_size(payload_size(shape, domain), with_label)


def mask_blob_size(shape, domain) -> int:
    return sealed_size(payload_size(shape, domain))


# model checkpoints ---------------------------------------------------------

_CKPT = struct.Struct("<4sIIQ")


def encode_checkpoint(spec: ModelSpec, state: ModelState, canary: bytes = b"") -> bytes:
    arch = json.dumps({"kind": spec.kind.value, "layer_dims": list(spec.layer_dims)}).encode()
    return (
        _CKPT.pack(b"CMDL", state.epoch, state.batch_index, state.step)
        + struct.pack("<H", len(arch))
        + arch
        + struct.pack("<H", len(canary))
        + canary
        + serialize(state.weights)
    )


def decode_checkpoint(data: bytes) -> tuple[ModelSpec, ModelState]:
    magic, e, t, step = _CKPT.unpack_from(data)
    if magic != b"CMDL":
        raise ValueError(f"bad checkpoint magic {magic!r}")
    off = _CKPT.size
    (alen,) = struct.unpack_from("<H", data, off)
    arch = json.loads(data[off + 2 : off + 2 + alen])
    off += 2 + alen
    (clen,) = struct.unpack_from("<H", data, off)
    off += 2 + clen
    spec = ModelSpec(ModelKind(arch["kind"]), tuple(arch["layer_dims"]))
    return spec, ModelState(deserialize(data[off:]), e, t, step)


# enclave state -------------------------------------------------------------


@dataclass
class EnclaveState:
    role: Role
    iteration: tuple[int, int] = (0, 0)
    held_secrets: set[str] = field(default_factory=set)
    inbox: int = 0
    outbox: int = 0


@dataclass
class Labeled:
    value: GradVector
    label: TaintLabel


class Enclave:
    role_kind = ""
    placeholders: tuple[str, ...] = ()

    def __init__(self, logical_id: str, role: Role, instance: int = 0, code_version: str = CODE_VERSION, env=None):
        self.logical_id = logical_id
        self.enclave_id = f"{logical_id}#{instance}"
        self.code_version = code_version
        self.record = EnclaveRecord(self.enclave_id, role, CodeMeasurement.of(self.identity(code_version)))
        self.state = EnclaveState(role)
        self.env_vars = dict(env or {})
        self._keys: dict[str, SymmetricKey] = {}
        self._sessions: dict[str, SymmetricKey] = {}
        self.alive = True
        self.round_id: tuple[int, int] | None = None

    @classmethod
    def identity(cls, code_version: str = CODE_VERSION) -> str:
        return code_identity(cls.role_kind, code_version, cls.placeholders)

    @classmethod
    def measurement(cls, code_version: str = CODE_VERSION) -> CodeMeasurement:
        return CodeMeasurement.of(cls.identity(code_version))

    @property
    def role(self) -> Role:
        return self.record.role

    def attest(self, cas: CAS) -> bool:
        return cas.attest(self.record)

    def acquire(self, cas: CAS, secret_id: str) -> SymmetricKey:
        key = self._keys.get(secret_id)
        if key is None:
            key = cas.provision(self.enclave_id, secret_id)
            self._keys[secret_id] = key
            self.state.held_secrets.add(secret_id)
        return key

    def resolve(self, **values) -> None:
        """Fill placeholders after attestation; values never touch the measurement."""
        unknown = set(values) - set(self.placeholders)
        if unknown:
            raise KeyError(f"no placeholders named {sorted(unknown)}")
        self.env_vars.update(values)

    def session(self, cas: CAS, peer_enclave_id: str) -> SymmetricKey:
        key = self._sessions.get(peer_enclave_id)
        if key is None:
            key = cas.session_key(self.enclave_id, peer_enclave_id)
            self._sessions[peer_enclave_id] = key
            self.state.held_secrets.add(key.secret_id)
        return key

    def seal(self, rt, peer: Enclave, mtype: MsgType, label: TaintLabel, payload: bytes) -> bytes:
        if rt.payload_log is not None:
            rt.payload_log.append((self.round_id, self.logical_id, peer.logical_id, mtype, bytes(payload)))
        key = self.session(rt.cas, peer.enclave_id)
        blob = encrypt(key, payload, rt.rng, rt.nonce_log)
        return Frame(mtype, label.kind, blob).encode(rt.cfg.debug_labels)

    def open(self, rt, msg) -> tuple[Frame, bytes]:
        frame = Frame.decode(msg.data, rt.cfg.debug_labels)
        key = self.session(rt.cas, msg.src_instance)
        return frame, decrypt(key, frame.blob)

    def send(self, rt, ctx, dst_logical: str, mtype: MsgType, label: TaintLabel, payload: bytes, **meta):
        peer = rt.directory[dst_logical]
        data = self.seal(rt, peer, mtype, label, payload)
        self.state.outbox += 1
        rt.net.send(self, dst_logical, ctx, mtype, label, data, **meta)
        return data

    def recv(self, rt, ctx, types, **match):
        return rt.net.recv(self.logical_id, ctx, types, **match)

    def crash(self, rt, ctx):
        self.alive = False
        ctx.report_crash(self.logical_id)
        raise EnclaveCrashed(self.logical_id)


def _control(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode()


class TrainingEnclave(Enclave):
    """Data-handling code: open to data owners, secrets arrive as placeholders."""

    role_kind = "training"
    placeholders = ("BATCH_SIZE", "DATA_KEY", "MODEL_KEY")

    def __init__(self, index: int, instance: int = 0, code_version: str = CODE_VERSION, env=None):
        super().__init__(f"training-{index}", Role.training(index), instance, code_version, env)
        self.index = index

    def provision(self, cas: CAS) -> None:
        self.acquire(cas, str(KeyTag.data_owner(self.index)))
        self.acquire(cas, str(KeyTag.model_owner()))

    def load_model(self, cas: CAS, store: BlobStore) -> tuple[BlobKey, ModelSpec, ModelState]:
        key, blob = store.latest_model()
        spec, state = decode_checkpoint(decrypt(self.acquire(cas, "model"), blob))
        return key, spec, state

    def load_batch(self, cas: CAS, store: BlobStore, batch_index: int) -> Batch:
        blob = store.get(BlobKey.data(self.index, batch_index))
        batch = Batch.from_bytes(decrypt(self.acquire(cas, str(KeyTag.data_owner(self.index))), blob))
        if batch.owner_id != self.index:
            raise PermissionError(f"shard owned by {batch.owner_id}, expected {self.index}")
        return batch

    def local_update(self, cas, store, version, domain, fixed) -> Labeled:
        """Gradient for ``version`` from store contents alone (the stateless path)."""
        key, spec, state = self.load_model(cas, store)
        if key.version != tuple(version):
            raise LookupError(f"model {key.version} is not {tuple(version)}")
        batch = self.load_batch(cas, store, version[1])
        g = compute_gradients(spec, state, batch, domain, fixed)
        return Labeled(g, TaintLabel.raw_gradient(self.index))

    def iteration(self, rt, ctx):
        env, cfg, costs = rt.env, rt.cfg, rt.costs
        ctx.clock(self.logical_id).switch("training", env.now)
        self.state.iteration = ctx.version
        self.round_id = ctx.round_id
        fault = ctx.fault_for(self.logical_id)
        for _ in range(100):
            key, _ = rt.store.latest_model()
            if key.version == tuple(ctx.version):
                break
            yield env.timeout(cfg.model_retry_backoff)
        else:
            raise LookupError(f"model version {ctx.version} never appeared")
        mine = self.local_update(rt.cas, rt.store, ctx.version, cfg.domain_enum, cfg.fixed_point)
        if fault is not None and fault.action == "crash":
            yield env.timeout(costs.t_train / 2)
            self.crash(rt, ctx)
        delay = fault.delay if fault is not None and fault.action == "delay" else 0.0
        yield env.timeout(costs.t_train + delay)
        if cfg.mode == "tree":
            yield from self._tree_rounds(rt, ctx, mine)
        else:
            yield from self._masked_send(rt, ctx, mine)
        yield self.recv(rt, ctx, {MsgType.MODEL_READY})

    def _masked_send(self, rt, ctx, mine: Labeled):
        env, costs, lat = rt.env, rt.costs, rt.latency
        clock = ctx.clock(self.logical_id)
        clock.switch("masking", env.now)
        self.send(rt, ctx, "admin", MsgType.MASK_REQ, TaintLabel.control(), _control({"index": self.index}))
        msg = yield self.recv(rt, ctx, {MsgType.MASK_GRANT, MsgType.CONTROL})
        frame, payload = self.open(rt, msg)
        if frame.mtype is MsgType.CONTROL:
            # excluded straggler: the iteration goes on without this update
            clock.switch("aggregation", env.now)
            return
        grant = MaskGrant.from_json(payload.decode())
        parts = []
        for blob_key, secret_id in grant.entries:
            key = self.acquire(rt.cas, secret_id)
            raw = rt.store.get_bytes(blob_key)
            yield env.timeout(lat.t_net(len(raw)))
            yield env.timeout(costs.t_dec(len(raw)))
            parts.append(deserialize(decrypt(key, EncryptedBlob.from_bytes(raw))))
        mask = Labeled(fold(parts), TaintLabel.mask())
        yield env.timeout(costs.t_mask)
        out = Labeled(mine.value + mask.value, combine(mine.label, mask.label))
        if rt.tamper.get("unmasked_sender") == self.index:
            out = mine
        data = self.seal(rt, rt.directory["aggregator"], MsgType.UPDATE, out.label, serialize(out.value))
        yield env.timeout(costs.t_enc(len(data)))
        self.state.outbox += 1
        rt.net.send(self, "aggregator", ctx, MsgType.UPDATE, out.label, data)
        clock.switch("aggregation", env.now)

    def _tree_rounds(self, rt, ctx, mine: Labeled):
        env, costs, plan = rt.env, rt.costs, rt.plan
        ctx.clock(self.logical_id).switch("recursive", env.now)
        everyone = range(plan.n)
        acc = mine
        for r in range(plan.n_rounds):
            role, arg = plan.role_in_round(self.index, r)
            if role == "send":
                to_agg = arg == AGGREGATOR
                dst = "aggregator" if to_agg else f"training-{arg}"
                mtype = MsgType.UPDATE if to_agg else MsgType.PARTIAL
                label = promote(acc.label, everyone) if to_agg else acc.label
                data = self.seal(rt, rt.directory[dst], mtype, label, serialize(acc.value))
                yield env.timeout(costs.t_enc(len(data)))
                self.state.outbox += 1
                rt.net.send(self, dst, ctx, mtype, label, data, tree_round=r)
                return
            if role == "recv":
                msgs = []
                for _ in arg:
                    msgs.append((yield self.recv(rt, ctx, {MsgType.PARTIAL}, tree_round=r)))
                ready = max(m.arrived_at + costs.t_dec(len(m.data)) for m in msgs)
                yield env.timeout(max(0.0, ready - env.now))
                arrivals = []
                for m in sorted(msgs, key=lambda m: int(m.src.split("-")[1])):
                    frame, payload = self.open(rt, m)
                    arrivals.append(Labeled(deserialize(payload), m.label))
                label = acc.label
                for a in arrivals:
                    label = combine(label, a.label)
                acc = Labeled(fold([acc.value, *(a.value for a in arrivals)]), label)
                yield env.timeout(costs.t_agg(len(arrivals) + 1))


class AggregatorEnclave(Enclave):
    """Model-handling code: private to the model owner."""

    role_kind = "aggregator"
    placeholders = ("CLIP_NORM", "LEARNING_RATE_SCHEDULE", "MODEL_KEY")

    def __init__(self, instance: int = 0, code_version: str = CODE_VERSION, env=None):
        super().__init__("aggregator", Role.aggregator(), instance, code_version, env)

    def provision(self, cas: CAS) -> None:
        self.acquire(cas, "model")

    def hyperparams(self) -> Hyperparams:
        schedule = self.env_vars["LEARNING_RATE_SCHEDULE"]
        return Hyperparams(
            base_lr=schedule["base_lr"],
            decay_factor=schedule["decay_factor"],
            decay_every=schedule["decay_every"],
            clip_norm=self.env_vars["CLIP_NORM"],
        )

    def _check(self, msg):
        if msg.label is not None and msg.label.is_raw:
            raise PrivacyViolation(
                f"aggregator received {msg.label} from {msg.src} in round {msg.round_id}"
            )

    def iteration(self, rt, ctx):
        env, cfg, costs = rt.env, rt.cfg, rt.costs
        clock = ctx.clock(self.logical_id)
        clock.switch("training", env.now)
        self.state.iteration = ctx.version
        self.round_id = ctx.round_id
        n = cfg.n_training
        participants = list(range(n))
        expected = 1 if cfg.mode == "tree" else n
        if cfg.mode == "mask_ssp":
            msg = yield self.recv(rt, ctx, {MsgType.CONTROL})
            _, payload = self.open(rt, msg)
            participants = json.loads(payload)["participants"]
            expected = len(participants)
        fault = ctx.fault_for(self.logical_id)
        msgs = []
        while len(msgs) < expected:
            req = self.recv(rt, ctx, {MsgType.UPDATE})
            if cfg.aggregation_timeout is not None:
                got = yield req | env.timeout(cfg.aggregation_timeout)
                if req not in got:
                    req.cancel()
                    ctx.abort(f"aggregator collected {len(msgs)}/{expected} updates")
                    return
                msg = got[req]
            else:
                msg = yield req
            if not msgs:
                clock.switch("aggregation", env.now)
            self._check(msg)
            self.state.inbox += 1
            msgs.append(msg)
            if fault is not None and fault.action == "crash":
                self.crash(rt, ctx)
        # one TLS endpoint per channel: decryption overlaps across senders
        ready = max(m.arrived_at + costs.t_dec(len(m.data)) for m in msgs)
        yield env.timeout(max(0.0, ready - env.now))
        values, label = [], None
        for m in sorted(msgs, key=lambda m: int(m.src.split("-")[1])):
            _, payload = self.open(rt, m)
            values.append(deserialize(payload))
            label = m.label if label is None else combine(label, m.label)
        if label is not None:
            label = promote(label, participants)
            if label.kind is not LabelKind.FULL_AGGREGATE:
                raise PrivacyViolation(f"aggregate label {label} does not cover {participants}")
        agg = fold(values)
        yield env.timeout(costs.t_agg(len(msgs)))

        model_key = self.acquire(rt.cas, "model")
        key, blob = rt.store.latest_model()
        arch, state = decode_checkpoint(decrypt(model_key, blob))
        if key.version != tuple(ctx.version):
            raise LookupError(f"aggregator expected model {ctx.version}, found {key.version}")
        spec = ModelSpec(arch.kind, arch.layer_dims, hyperparams=self.hyperparams())
        new_state = apply_update(spec, state, agg, len(participants), cfg.batches_per_epoch)
        yield env.timeout(costs.t_apply)
        ckpt = encode_checkpoint(spec, new_state, cfg.canary.encode())
        rt.store.put(BlobKey.model(*new_state.version), encrypt(model_key, ckpt, rt.rng, rt.nonce_log))
        ctx.record_aggregate(tuple(participants), agg, new_state)
        for i in range(n):
            self.send(rt, ctx, f"training-{i}", MsgType.MODEL_READY, TaintLabel.control(),
                      _control({"version": list(new_state.version)}))
        ctx.aggregator_done()


class AdminEnclave(Enclave):
    """Mask generator and scheduler: open code, attested by every owner."""

    role_kind = "admin"
    placeholders = ("MASK_POOL_SIZE", "N_TRAINING")

    def __init__(self, instance: int = 0, code_version: str = CODE_VERSION, env=None):
        super().__init__("admin", Role.admin(), instance, code_version, env)
        self.pool: MaskPool | None = None

    def register_keys(self, cas: CAS):
        return lambda keys: cas.register_mask_keys(self.enclave_id, keys)

    def adopt_pool(self, cas: CAS, pool: MaskPool) -> None:
        pool.on_claim = lambda s: cas.claim_mask_set(self.enclave_id, s)
        self.pool = pool

    def recover_pool(self, cas: CAS, n: int, size: int, first_set: int = 0) -> None:
        """Rebuild the pool cursor after a restart from what CAS saw claimed."""
        pool = MaskPool(first_set, size, n, cursor=cas.next_unclaimed_set() - first_set)
        self.adopt_pool(cas, pool)

    def _check(self, msg):
        if msg.label is not None and msg.label.kind is not LabelKind.CONTROL:
            raise PrivacyViolation(f"admin received {msg.label} from {msg.src}")

    def _grant(self, rt, ctx, msg, grant):
        self.send(rt, ctx, msg.src, MsgType.MASK_GRANT, TaintLabel.control(), grant.to_json().encode())

    def iteration(self, rt, ctx):
        env, cfg = rt.env, rt.cfg
        clock = ctx.clock(self.logical_id)
        clock.switch("masking", env.now)
        self.state.iteration = ctx.version
        self.round_id = ctx.round_id
        fault = ctx.fault_for(self.logical_id)
        n = cfg.n_training
        if cfg.mode == "mask":
            for _ in range(n):
                msg = yield self.recv(rt, ctx, {MsgType.MASK_REQ})
                self._check(msg)
                self.state.inbox += 1
                if fault is not None and fault.action == "crash":
                    self.crash(rt, ctx)
                idx = json.loads(self.open(rt, msg)[1])["index"]
                grant = serve_mask_request(self.pool, ctx.round_id, idx, msg.src_instance)
                self._grant(rt, ctx, msg, grant)
            return

        deadline = ctx.start + cfg.effective_straggler_timeout
        arrivals = []
        while len(arrivals) < n:
            remaining = deadline - env.now
            if remaining <= 0:
                break
            req = self.recv(rt, ctx, {MsgType.MASK_REQ})
            got = yield req | env.timeout(remaining)
            if req not in got:
                req.cancel()
                break
            msg = got[req]
            self._check(msg)
            self.state.inbox += 1
            if fault is not None and fault.action == "crash":
                self.crash(rt, ctx)
            arrivals.append(msg)
        if len(arrivals) < max(1, cfg.min_participants):
            ctx.abort(f"only {len(arrivals)} training enclaves before the straggler timeout")
            return
        indices = [json.loads(self.open(rt, m)[1])["index"] for m in arrivals]
        for m, idx in zip(arrivals[:-1], indices[:-1]):
            self._grant(rt, ctx, m, serve_mask_request(self.pool, ctx.round_id, idx, m.src_instance))
        last = arrivals[-1]
        grant = residual_grant(
            self.pool,
            ctx.round_id,
            indices,
            designate=lambda sid, r: rt.cas.designate_residual(self.enclave_id, sid, r),
            requester=last.src_instance,
        )
        self._grant(rt, ctx, last, grant)
        ctx.participants = indices
        self.send(rt, ctx, "aggregator", MsgType.CONTROL, TaintLabel.control(),
                  _control({"participants": indices}))
        while True:
            late = yield self.recv(rt, ctx, {MsgType.MASK_REQ})
            self._check(late)
            self.send(rt, ctx, late.src, MsgType.CONTROL, TaintLabel.control(), _control({"excluded": True}))
