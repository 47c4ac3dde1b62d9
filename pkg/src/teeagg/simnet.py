"""Deterministic discrete-event simulation of a training job.

simpy supplies the event queue (ties broken by insertion order, so the trace
is a pure function of config and seed).  :class:`Job` wires owners, CAS,
storage and the three enclave roles together and drives the iterations;
:func:`run_job` is the one-call entry point.
"""
from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import simpy

from .aggregation import TreePlan, build_tree_plan
from .cas import CAS, MODEL_OWNER, SecretRule, audit, data_owner, Role
from .config import FaultSpec, JobConfig, LatencyConfig, validate
from .crypto import KeyTag, NonceLog, decrypt, encrypt, keygen
from .enclaves import (
    CONTROL_TYPES,
    AdminEnclave,
    AggregatorEnclave,
    EnclaveCrashed,
    MsgType,
    TrainingEnclave,
    decode_checkpoint,
    encode_checkpoint,
)
from .masking import pregenerate
from .models import ModelKind, ModelSpec, ModelState, accuracy, init_state, make_toy_task
from .storage import BlobKey, BlobStore, MemoryStore, Namespace
from .taint import PrivacyViolation, TaintLabel
from .tensors import GradVector, serialize

LatencyModel = LatencyConfig
PHASES = ("training", "masking", "aggregation", "recursive")
CSV_HEADER = ("iteration", "enclave_id", "phase", "duration", "bytes_sent", "bytes_recv", "messages")


class JobAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    enclave_id: str
    phase: str
    duration: float
    bytes_sent: int
    bytes_recv: int
    messages: int

    def row(self) -> list:
        return [self.iteration, self.enclave_id, self.phase, repr(float(self.duration)),
                self.bytes_sent, self.bytes_recv, self.messages]


def metrics_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sorted(records, key=lambda r: (r.iteration, r.enclave_id, r.phase)):
        w.writerow(r.row())
    return buf.getvalue()


def emit_metrics(records, path) -> None:
    Path(path).write_text(metrics_csv(records))


class PhaseClock:
    """Partitions one enclave's iteration span into named phases."""

    def __init__(self, start: float, phase: str = "training"):
        self.start = start
        self.phase = phase
        self.since = start
        self.duration: Counter = Counter()
        self.sent: Counter = Counter()
        self.recv: Counter = Counter()
        self.messages: Counter = Counter()
        self.closed_at: float | None = None

    def switch(self, phase: str, at: float) -> None:
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        if at < self.since:
            raise ValueError("phase switches must move forward in time")
        if phase == self.phase:
            return
        self.duration[self.phase] += at - self.since
        self.phase, self.since = phase, at

    def close(self, at: float) -> None:
        self.duration[self.phase] += at - self.since
        self.since = at
        self.closed_at = at

    def records(self, iteration: int, enclave_id: str) -> list[MetricsRecord]:
        phases = set(self.duration) | set(self.sent) | set(self.recv) | set(self.messages)
        return [
            MetricsRecord(iteration, enclave_id, p, float(self.duration[p]),
                          self.sent[p], self.recv[p], self.messages[p])
            for p in sorted(phases)
            if self.duration[p] or self.sent[p] or self.recv[p] or self.messages[p]
        ]


@dataclass
class Message:
    src: str
    src_instance: str
    dst: str
    mtype: MsgType
    label: TaintLabel | None
    data: bytes
    round_id: tuple[int, int]
    sent_at: float
    tree_round: int | None = None
    arrived_at: float | None = None


@dataclass(frozen=True)
class TraceEntry:
    sent_at: float
    arrived_at: float
    src: str
    dst: str
    mtype: str
    size: int
    round_id: tuple[int, int]
    delivered: bool


@dataclass(frozen=True)
class TaintRecord:
    time: float
    round_id: tuple[int, int]
    src: str
    dst: str
    mtype: str
    label: str
    kind: str


class Network:
    """Per-channel FIFO links with latency + size/bandwidth delay."""

    def __init__(self, env: simpy.Environment, latency: LatencyConfig, on_send=None, on_deliver=None):
        self.env = env
        self.latency = latency
        self.on_send = on_send
        self.on_deliver = on_deliver
        self.round_id: tuple[int, int] | None = None
        self.mail: dict[str, simpy.FilterStore] = {}
        self._last: dict[tuple[str, str], float] = {}
        self.in_flight = 0
        self._drained: list[simpy.Event] = []

    def delay(self, mtype: MsgType, size: int) -> float:
        if mtype in CONTROL_TYPES:
            return self.latency.control_latency
        return self.latency.t_net(size)

    def begin_round(self, round_id, endpoints) -> None:
        self.round_id = round_id
        self.mail = {e: simpy.FilterStore(self.env) for e in endpoints}

    def send(self, sender, dst: str, ctx, mtype: MsgType, label: TaintLabel, data: bytes, tree_round=None):
        now = self.env.now
        msg = Message(sender.logical_id, sender.enclave_id, dst, MsgType(mtype), label, bytes(data),
                      ctx.round_id, now, tree_round)
        chan = (msg.src, dst)
        at = max(now + self.delay(msg.mtype, len(msg.data)), self._last.get(chan, now))
        self._last[chan] = at
        self.in_flight += 1
        if self.on_send is not None:
            self.on_send(msg)
        ev = self.env.timeout(at - now)
        ev.callbacks.append(lambda _ev, m=msg: self._arrive(m))
        return msg

    def _arrive(self, msg: Message) -> None:
        msg.arrived_at = self.env.now
        self.in_flight -= 1
        current = msg.round_id == self.round_id and msg.dst in self.mail
        if self.on_deliver is not None:
            self.on_deliver(msg, current)
        if current:
            self.mail[msg.dst].put(msg)
        if self.in_flight == 0:
            waiting, self._drained = self._drained, []
            for ev in waiting:
                ev.succeed()

    def recv(self, dst: str, ctx, types, **match):
        types = frozenset(types)

        def accept(m: Message) -> bool:
            return m.mtype in types and all(getattr(m, k) == v for k, v in match.items())

        return self.mail[dst].get(accept)

    def drained(self) -> simpy.Event:
        ev = self.env.event()
        if self.in_flight == 0:
            ev.succeed()
        else:
            self._drained.append(ev)
        return ev


def _logical(target: str) -> str:
    return target.replace("training:", "training-")


class IterationContext:
    """Shared view of one attempt at one iteration."""

    def __init__(self, job: Job, step: int, attempt: int):
        self.job = job
        self.step = step
        self.attempt = attempt
        self.round_id = (step, attempt)
        bpe = job.cfg.batches_per_epoch
        self.version = (step // bpe, step % bpe)
        self.start = job.env.now
        self.finished = job.env.event()
        self.crashed: set[str] = set()
        self.outcome = None
        self.agg_done = False
        self.pending_ready = 0
        self.participants = None
        self.result = None

    def clock(self, logical_id: str) -> PhaseClock:
        return self.job.clocks[logical_id]

    def fault_for(self, logical_id: str) -> FaultSpec | None:
        for j, f in enumerate(self.job.cfg.faults):
            if f.iteration == self.step and _logical(f.target) == logical_id and j not in self.job.fired:
                self.job.fired.add(j)
                self.job.fault_log.append((self.job.env.now, self.round_id, f.target, f.action))
                return f
        return None

    def _finish(self, outcome) -> None:
        if not self.finished.triggered:
            self.outcome = outcome
            self.finished.succeed(outcome)

    def report_crash(self, logical_id: str) -> None:
        self.crashed.add(logical_id)
        self._finish(("crash", logical_id))

    def abort(self, reason: str) -> None:
        self._finish(("abort", reason))

    def fail(self, exc: BaseException) -> None:
        self._finish(("error", exc))

    def record_aggregate(self, participants, agg: GradVector, state: ModelState) -> None:
        self.result = (tuple(participants), agg, state)

    def aggregator_done(self) -> None:
        self.agg_done = True
        self._maybe_done()

    def ready_sent(self) -> None:
        self.pending_ready += 1

    def ready_delivered(self) -> None:
        self.pending_ready -= 1
        self._maybe_done()

    def _maybe_done(self) -> None:
        if self.agg_done and self.pending_ready == 0:
            self._finish(("ok", None))


@dataclass
class JobResult:
    config: JobConfig
    spec: ModelSpec
    final_state: ModelState
    final_weights: bytes
    final_model_blob: bytes
    metrics: list[MetricsRecord]
    release_log: list
    attestation_log: list
    taint_log: list[TaintRecord]
    trace: list[TraceEntry]
    aggregates: dict[int, tuple[tuple[int, ...], GradVector]]
    iteration_spans: dict[int, tuple[float, float]]
    eval_accuracy: float
    store: BlobStore
    cas: CAS
    fault_log: list = field(default_factory=list)
    restarts: list = field(default_factory=list)

    @property
    def total_time(self) -> float:
        return max((end for _, end in self.iteration_spans.values()), default=0.0)

    def metrics_csv(self) -> str:
        return metrics_csv(self.metrics)

    def provisioning_log(self) -> str:
        lines = [f"{r.seq}\t{r.enclave_id}\t{r.role}\t{r.secret_id}" for r in self.release_log]
        return "\n".join(["seq\tenclave\trole\tsecret", *lines]) + "\n"

    def taint_log_text(self) -> str:
        lines = [f"{t.time!r}\t{t.round_id[0]}.{t.round_id[1]}\t{t.src}\t{t.dst}\t{t.mtype}\t{t.label}"
                 for t in self.taint_log]
        return "\n".join(["time\tround\tsrc\tdst\ttype\tlabel", *lines]) + "\n"

    def model_versions(self) -> list[tuple[int, int]]:
        return [k.version for k in self.store.list(Namespace.MODEL)]


class Job:
    """One configured job: owners, CAS, storage, enclaves and the event loop.

    ``tamper`` is a test hook: ``{"unmasked_sender": i}`` makes training
    enclave ``i`` skip masking; ``{"training_code": {i: "version"}}`` runs
    training enclave ``i`` from modified code.
    """

    def __init__(self, cfg: JobConfig, tamper: dict | None = None, store: BlobStore | None = None,
                 record_payloads: bool = False):
        validate(cfg)
        self.cfg = cfg
        self.tamper = dict(tamper or {})
        self.payload_log: list | None = [] if record_payloads else None
        n = cfg.n_training
        m = cfg.model
        self.task = make_toy_task(
            cfg.seed, n_owners=n, batches_per_epoch=cfg.batches_per_epoch, n_samples=m.n_samples,
            n_features=m.n_features, margin=m.margin, kind=ModelKind(m.kind), hidden=m.hidden,
            hyperparams=cfg.hyperparams,
        )
        self.spec = self.task.spec
        owner_ss, cas_ss, admin_ss, enclave_ss = np.random.SeedSequence(cfg.seed).spawn(4)
        self.owner_rng = np.random.default_rng(owner_ss)
        self.admin_rng = np.random.default_rng(admin_ss)
        self.rng = np.random.default_rng(enclave_ss)
        self.env = simpy.Environment()
        self.store = store if store is not None else MemoryStore()
        self.cas = CAS(np.random.default_rng(cas_ss), n_data_owners=n)
        self.nonce_log = NonceLog()
        self.latency = cfg.latency
        self.costs = cfg.costs
        self.plan: TreePlan | None = build_tree_plan(n, cfg.children_c) if cfg.mode == "tree" else None
        self.net = Network(self.env, cfg.latency, self._on_send, self._on_deliver)
        self.directory: dict = {}
        self.instances: Counter = Counter()
        self.clocks: dict[str, PhaseClock] = {}
        self.metrics: list[MetricsRecord] = []
        self.taint_log: list[TaintRecord] = []
        self.trace: list[TraceEntry] = []
        self.aggregates: dict = {}
        self.spans: dict[int, tuple[float, float]] = {}
        self.fired: set[int] = set()
        self.fault_log: list = []
        self.restarts: list = []
        self.ctx: IterationContext | None = None
        self.pool = None
        self._set_up = False

    # wiring -------------------------------------------------------------

    @property
    def logical_ids(self) -> list[str]:
        ids = [f"training-{i}" for i in range(self.cfg.n_training)] + ["aggregator"]
        return ids + (["admin"] if self.cfg.mode != "tree" else [])

    def _measurements(self):
        return (TrainingEnclave.measurement().hex, AggregatorEnclave.measurement().hex,
                AdminEnclave.measurement().hex)

    def register_owners(self) -> None:
        """Step one: each owner sends CAS its keys, release rules and approvals, once."""
        t_m, a_m, d_m = self._measurements()
        model_key = keygen(KeyTag.model_owner(), self.owner_rng)
        self.model_key = model_key
        self.cas.register_owner(
            MODEL_OWNER,
            [model_key],
            [SecretRule("model", Role.training(), t_m, frozenset({MODEL_OWNER})),
             SecretRule("model", Role.aggregator(), a_m, frozenset({MODEL_OWNER}))],
            {("training", t_m), ("aggregator", a_m), ("admin", d_m)},
        )
        self.data_keys = []
        for i in range(self.cfg.n_training):
            key = keygen(KeyTag.data_owner(i), self.owner_rng)
            self.data_keys.append(key)
            self.cas.register_owner(
                data_owner(i),
                [key],
                [SecretRule(key.secret_id, Role.training(i), t_m, frozenset({data_owner(i), MODEL_OWNER}))],
                {("training", t_m), ("admin", d_m)},
            )

    def upload(self) -> None:
        """Step two: encrypted data shards and the initial model go to storage."""
        canary = self.cfg.canary.encode()
        for i, shard in enumerate(self.task.shards):
            for t, batch in enumerate(shard):
                blob = encrypt(self.data_keys[i], batch.to_bytes(canary), self.owner_rng, self.nonce_log)
                self.store.put(BlobKey.data(i, t), blob)
        ckpt = encode_checkpoint(self.spec, init_state(self.spec), canary)
        self.store.put(BlobKey.model(0, 0), encrypt(self.model_key, ckpt, self.owner_rng, self.nonce_log))

    def _launch(self, logical_id: str):
        inst = self.instances[logical_id]
        self.instances[logical_id] += 1
        cfg, hp = self.cfg, self.cfg.hyperparams
        if logical_id == "aggregator":
            enc = AggregatorEnclave(inst)
        elif logical_id == "admin":
            enc = AdminEnclave(inst)
        else:
            i = int(logical_id.split("-")[1])
            code = self.tamper.get("training_code", {}).get(i)
            enc = TrainingEnclave(i, inst, code) if code else TrainingEnclave(i, inst)
        if not enc.attest(self.cas):
            self.directory[logical_id] = enc
            raise JobAborted(f"{enc.enclave_id} failed attestation")
        if logical_id == "aggregator":
            enc.provision(self.cas)
            enc.resolve(
                MODEL_KEY="model",
                CLIP_NORM=hp.clip_norm,
                LEARNING_RATE_SCHEDULE={"base_lr": hp.base_lr, "decay_factor": hp.decay_factor,
                                        "decay_every": hp.decay_every},
            )
        elif logical_id == "admin":
            enc.resolve(N_TRAINING=cfg.n_training, MASK_POOL_SIZE=cfg.effective_pool_size)
            if self.pool is not None:
                enc.recover_pool(self.cas, cfg.n_training, cfg.effective_pool_size)
        else:
            enc.provision(self.cas)
            enc.resolve(BATCH_SIZE=hp.batch_size, DATA_KEY=f"data/{enc.index}", MODEL_KEY="model")
        self.directory[logical_id] = enc
        return enc

    def launch_enclaves(self) -> None:
        """Step three: CAS attests every enclave and provisions its secrets."""
        for lid in self.logical_ids:
            self._launch(lid)
        if self.cfg.mode != "tree":
            admin = self.directory["admin"]
            self.pool = pregenerate(
                self.cfg.effective_pool_size, self.cfg.n_training, self.spec.param_shape(),
                self.cfg.domain_enum, self.admin_rng, self.store, admin.register_keys(self.cas),
                self.cfg.frac_bits, nonce_log=self.nonce_log,
            )
            admin.adopt_pool(self.cas, self.pool)

    def setup(self) -> None:
        if self._set_up:
            return
        self._set_up = True
        self.register_owners()
        self.upload()
        self.launch_enclaves()

    def inject_fault(self, fault: FaultSpec) -> None:
        self.cfg.faults.append(fault)
        validate(self.cfg)

    def restart_enclave(self, logical_id: str):
        """Replace a crashed enclave with a fresh, re-attested instance."""
        old = self.directory.get(logical_id)
        if old is not None:
            old.alive = False
        enc = self._launch(logical_id)
        self.restarts.append((self.env.now, logical_id, enc.enclave_id))
        return enc

    # network hooks -------------------------------------------------------

    def _on_send(self, msg: Message) -> None:
        clock = self.clocks.get(msg.src)
        if clock is not None:
            clock.sent[clock.phase] += len(msg.data)
        if msg.mtype is MsgType.MODEL_READY and self.ctx is not None and msg.round_id == self.ctx.round_id:
            self.ctx.ready_sent()

    def _on_deliver(self, msg: Message, current: bool) -> None:
        clock = self.clocks.get(msg.dst)
        if clock is not None:
            clock.recv[clock.phase] += len(msg.data)
            clock.messages[clock.phase] += 1
        self.trace.append(TraceEntry(msg.sent_at, msg.arrived_at, msg.src, msg.dst, msg.mtype.name,
                                     len(msg.data), msg.round_id, current))
        if msg.label is not None:
            self.taint_log.append(TaintRecord(msg.arrived_at, msg.round_id, msg.src, msg.dst,
                                              msg.mtype.name, str(msg.label), msg.label.kind.name))
        if current and msg.mtype is MsgType.MODEL_READY and self.ctx is not None:
            self.ctx.ready_delivered()

    # event loop ----------------------------------------------------------

    def _guard(self, gen, ctx: IterationContext):
        try:
            yield from gen
        except simpy.Interrupt:
            return
        except EnclaveCrashed:
            return
        except BaseException as exc:  # surfaced by the orchestrator
            ctx.fail(exc)

    def _orchestrate(self):
        env, cfg = self.env, self.cfg
        step = 0
        while step < cfg.total_iterations:
            span_start = env.now
            self.clocks = {
                lid: PhaseClock(span_start, "masking" if lid == "admin" else "training")
                for lid in self.logical_ids
            }
            attempt = 0
            while True:
                attempt += 1
                ctx = IterationContext(self, step, attempt)
                self.ctx = ctx
                self.net.begin_round(ctx.round_id, self.logical_ids)
                procs = [env.process(self._guard(self.directory[lid].iteration(self, ctx), ctx))
                         for lid in self.logical_ids]
                kind, detail = yield ctx.finished
                for p in procs:
                    if p.is_alive:
                        p.interrupt("iteration over")
                yield self.net.drained()
                if kind == "ok":
                    break
                if kind == "error":
                    raise detail
                if attempt > 1 + len(cfg.faults) + 8:
                    raise JobAborted(f"iteration {step} kept failing: {detail}")
                yield env.timeout(cfg.restart_delay)
                if kind == "crash":
                    if ctx.crashed & {"aggregator", "admin"}:
                        # restart the cluster from the latest checkpoint
                        for lid in self.logical_ids:
                            self.restart_enclave(lid)
                    else:
                        for lid in sorted(ctx.crashed):
                            self.restart_enclave(lid)
                for lid, clock in self.clocks.items():
                    clock.switch("masking" if lid == "admin" else "training", env.now)
            end = env.now
            for lid, clock in self.clocks.items():
                clock.close(end)
                self.metrics.extend(clock.records(step, lid))
            participants, agg, _ = ctx.result
            self.aggregates[step] = (participants, agg)
            self.spans[step] = (span_start, end)
            step += 1

    def run(self) -> JobResult:
        self.setup()
        main = self.env.process(self._orchestrate())
        self.env.run(until=main)
        if not main.ok:
            raise main.value
        return self.result()

    def result(self) -> JobResult:
        key, blob = self.store.latest_model()
        _, state = decode_checkpoint(decrypt(self.model_key, blob))
        return JobResult(
            config=self.cfg,
            spec=self.spec,
            final_state=state,
            final_weights=serialize(state.weights),
            final_model_blob=self.store.get_bytes(key),
            metrics=list(self.metrics),
            release_log=list(self.cas.release_log),
            attestation_log=list(self.cas.attestation_log),
            taint_log=list(self.taint_log),
            trace=list(self.trace),
            aggregates=dict(self.aggregates),
            iteration_spans=dict(self.spans),
            eval_accuracy=accuracy(self.spec, state.weights, self.task.eval_set),
            store=self.store,
            cas=self.cas,
            fault_log=list(self.fault_log),
            restarts=list(self.restarts),
        )


def run_job(cfg: JobConfig, tamper: dict | None = None, store: BlobStore | None = None) -> JobResult:
    return Job(cfg, tamper, store).run()


def conservation_gap(result: JobResult) -> int:
    """Bytes sent minus bytes received over the whole job (zero after a clean shutdown)."""
    sent = sum(r.bytes_sent for r in result.metrics)
    recv = sum(r.bytes_recv for r in result.metrics)
    return sent - recv


def release_audit(result: JobResult) -> list[str]:
    return audit(result.cas)


__all__ = [
    "CSV_HEADER",
    "IterationContext",
    "Job",
    "JobAborted",
    "JobResult",
    "LatencyModel",
    "Message",
    "MetricsRecord",
    "Network",
    "PHASES",
    "PhaseClock",
    "PrivacyViolation",
    "TaintRecord",
    "TraceEntry",
    "conservation_gap",
    "emit_metrics",
    "metrics_csv",
    "release_audit",
    "run_job",
]
