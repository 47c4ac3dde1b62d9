"""Acceptance checks, one function per criterion.

Every check compares the implementation against a route that shares none of
its arithmetic: Python integers for Fixed64 sums, ``math.fsum`` for float
sums, ``fractions.Fraction`` for the cost formulas, and brute-force counting
for tree structure.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .aggregation import AGGREGATOR, build_tree_plan, flat_aggregate, run_tree_aggregation
from .cas import ProvisionDenied, audit
from .config import FaultSpec, JobConfig, LatencyConfig, OpCosts, template
from .costmodel import Affine, CostParams, Link, crossover, estimate_mask, recommend_mode
from .enclaves import MsgType
from .masking import generate_mask_set
from .oracle import run_oracle
from .simnet import Job, JobAborted, run_job
from .storage import Namespace
from .taint import PrivacyViolation
from .tensors import Domain, FixedPointConfig, GradVector, encode_fixed, from_floats

MOD = 1 << 64

# tolerances
FLOAT_ZERO_SUM_PER_N = 2.0**-20
FLOAT_BARRIER_REL = 1e-4
MIN_ACCURACY = 0.95

ZERO_SUM_NS = (1, 2, 3, 4, 8, 16, 32, 64)
TREE_CS = (2, 3, 4, 8)
TREE_NMAX = 64
BARRIER_SEEDS = 50
BARRIER_N = 8
COST_NS = (2, 4, 8)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    limit: float | None = None
    failures: list[str] = field(default_factory=list)

    @property
    def within_limit(self) -> bool:
        return self.limit is None or self.seconds <= self.limit

    def line(self) -> str:
        ok = self.passed and self.within_limit
        limit = f" (limit {self.limit:g}s)" if self.limit is not None else ""
        return f"[{'PASS' if ok else 'FAIL'}] {self.number}. {self.name}: {self.detail} [{self.seconds:.2f}s{limit}]"


def _timed(number: int, name: str, limit: float | None):
    def wrap(fn: Callable[[list[str]], str]):
        def run() -> CriterionResult:
            failures: list[str] = []
            t0 = time.perf_counter()
            try:
                detail = fn(failures)
            except Exception as exc:  # reported, never swallowed silently
                failures.append(f"{type(exc).__name__}: {exc}")
                detail = "raised"
            dt = time.perf_counter() - t0
            if failures:
                detail = f"{detail}; " + "; ".join(failures[:5])
            return CriterionResult(number, name, not failures, detail, dt, limit, failures)

        run.number = number
        run.criterion_name = name
        return run

    return wrap


def _lane_sum(vectors) -> list[int]:
    lanes = [0] * len(vectors[0])
    for v in vectors:
        for j, x in enumerate(v.lanes_as_ints()):
            lanes[j] += x
    return lanes


# 1 -----------------------------------------------------------------------


@_timed(1, "zero-sum exactness", 10.0)
def zero_sum(failures: list[str]) -> str:
    shape = (20, 1)
    worst = 0.0
    for n in ZERO_SUM_NS:
        for seed in range(3):
            rng = np.random.default_rng([n, seed])
            ms = generate_mask_set(n, shape, Domain.FIXED64, rng)
            if any(x % MOD for x in _lane_sum(ms.masks)):
                failures.append(f"fixed64 n={n} seed={seed} does not fold to zero")
            fs = generate_mask_set(n, shape, Domain.FLOAT32, rng)
            exact = [math.fsum(float(m.values[j]) for m in fs.masks) for j in range(sum(shape))]
            inf = max(abs(x) for x in exact)
            worst = max(worst, inf / n)
            if inf > n * FLOAT_ZERO_SUM_PER_N:
                failures.append(f"float32 n={n} |sum|inf={inf:.3g} > {n}*2^-20")
    return f"N in {list(ZERO_SUM_NS)}; worst float32 |sum|inf/N = {worst:.3g} (bound 2^-20)"


# 2 -----------------------------------------------------------------------


@_timed(2, "barrier equivalence", 30.0)
def barrier(failures: list[str]) -> str:
    cfg = FixedPointConfig()
    shape = (20, 1)
    worst = 0.0
    for seed in range(BARRIER_SEEDS):
        rng = np.random.default_rng(1000 + seed)
        raw = [rng.normal(scale=2.0, size=sum(shape)) for _ in range(BARRIER_N)]
        fixed = [encode_fixed(r, cfg, shape) for r in raw]
        ms = generate_mask_set(BARRIER_N, shape, Domain.FIXED64, rng)
        masked = flat_aggregate([g + m for g, m in zip(fixed, ms.masks)])
        if masked.lanes_as_ints() != [x % MOD for x in _lane_sum(fixed)]:
            failures.append(f"fixed64 seed {seed}: masked sum differs from plain sum")
        floats = [from_floats(r, shape) for r in raw]
        fms = generate_mask_set(BARRIER_N, shape, Domain.FLOAT32, rng)
        fmasked = flat_aggregate([g + m for g, m in zip(floats, fms.masks)])
        truth = np.array([math.fsum(float(v.values[j]) for v in floats) for j in range(sum(shape))])
        rel = float(np.max(np.abs(fmasked.to_float64() - truth)) / max(np.max(np.abs(truth)), 1e-30))
        worst = max(worst, rel)
        if rel > FLOAT_BARRIER_REL:
            failures.append(f"float32 seed {seed}: relative error {rel:.3g} > 1e-4")
    return f"{BARRIER_SEEDS} seeds at N={BARRIER_N}; fixed64 bit-exact, worst float32 rel err {worst:.3g}"


# 3 -----------------------------------------------------------------------


def _rounds_by_counting(n: int, c: int) -> int:
    """Repeatedly merge groups of c until one node is left, then hand off."""
    alive, rounds = n, 0
    while alive > 1:
        alive = -(-alive // c)
        rounds += 1
    return rounds + 1


@_timed(3, "tree equivalence and structure", 60.0)
def tree(failures: list[str]) -> str:
    checked = 0
    for c in TREE_CS:
        for n in range(1, TREE_NMAX + 1):
            rng = np.random.default_rng([n, c])
            updates = [
                GradVector(Domain.FIXED64, rng.integers(0, 2**64, size=8, dtype=np.uint64), (8,), 24)
                for _ in range(n)
            ]
            plan = build_tree_plan(n, c)
            sends: list[tuple[int, int, int]] = []
            got = run_tree_aggregation(plan, updates, lambda r, s, d, v: sends.append((r, s, d)))
            expect = [x % MOD for x in _lane_sum(updates)]
            if got.lanes_as_ints() != expect or got != flat_aggregate(updates):
                failures.append(f"n={n} c={c}: tree sum differs from flat sum")
            if plan.n_rounds != _rounds_by_counting(n, c):
                failures.append(f"n={n} c={c}: {plan.n_rounds} rounds, expected {_rounds_by_counting(n, c)}")
            senders = [s for _, s, _ in sends]
            if sorted(senders) != list(range(n)):
                failures.append(f"n={n} c={c}: senders {sorted(senders)} are not each participant once")
            if sum(1 for _, _, d in sends if d == AGGREGATOR) != 1:
                failures.append(f"n={n} c={c}: aggregator did not receive exactly one message")
            checked += 1
    # the simulated protocol must show the same law on the wire
    for n, c in ((1, 2), (5, 2), (9, 3)):
        res = run_job(JobConfig(n_training=n, mode="tree", children_c=c, epochs=1, batches_per_epoch=2))
        for step in range(2):
            inbound = [t for t in res.trace if t.dst == "aggregator" and t.round_id[0] == step
                       and t.mtype == MsgType.UPDATE.name]
            if len(inbound) != 1:
                failures.append(f"simulated n={n} c={c} step {step}: {len(inbound)} aggregator updates")
    return f"{checked} (n, c) pairs, n in 1..{TREE_NMAX}, c in {list(TREE_CS)}; plus 3 simulated jobs"


# 4 -----------------------------------------------------------------------


def e2e_config(mode: str, seed: int = 0) -> JobConfig:
    return JobConfig(n_training=4, mode=mode, domain="fixed64", epochs=50, batches_per_epoch=4, seed=seed)


@_timed(4, "end-to-end learning equivalence", 120.0)
def e2e(failures: list[str]) -> str:
    oracle = run_oracle(e2e_config("mask"))
    mask = run_job(e2e_config("mask"))
    tree_ = run_job(e2e_config("tree"))
    if mask.final_state.step != 200 or tree_.final_state.step != 200:
        failures.append("jobs did not run 200 iterations")
    if mask.final_weights != oracle.final_weights:
        failures.append("mask-mode model differs from the oracle")
    if tree_.final_weights != oracle.final_weights:
        failures.append("tree-mode model differs from the oracle")
    for name, acc in (("mask", mask.eval_accuracy), ("tree", tree_.eval_accuracy), ("oracle", oracle.eval_accuracy)):
        if acc < MIN_ACCURACY:
            failures.append(f"{name} eval accuracy {acc:.3f} < {MIN_ACCURACY}")
    return f"200 iterations, N=4; eval accuracy mask={mask.eval_accuracy:.3f} oracle={oracle.eval_accuracy:.3f}"


# 5 -----------------------------------------------------------------------

_GUARDED = ("aggregator", "admin")


def privacy_findings(res) -> list[str]:
    out = []
    for t in res.taint_log:
        if t.dst in _GUARDED and t.kind in ("RAW_GRADIENT", "RAW_DATA"):
            out.append(f"{t.kind} delivered to {t.dst} from {t.src} in round {t.round_id}")
        if t.dst == "admin" and t.kind != "CONTROL":
            out.append(f"admin received {t.kind} from {t.src}")
    for rel in res.release_log:
        if rel.role.kind in _GUARDED and rel.secret_id.startswith("data/"):
            out.append(f"data key {rel.secret_id} released to {rel.enclave_id}")
    canary = res.config.canary.encode()
    for key, blob in res.store.items():
        if canary in blob:
            out.append(f"plaintext sentinel found in stored blob {key}")
    out.extend(audit(res.cas))
    return out


def planted_violation_config() -> tuple[JobConfig, dict]:
    return JobConfig(n_training=4, mode="mask", epochs=1, batches_per_epoch=2), {"unmasked_sender": 2}


@_timed(5, "privacy invariants", 60.0)
def privacy(failures: list[str]) -> str:
    deliveries = 0
    for mode in ("mask", "tree", "mask_ssp"):
        cfg = template("ssp") if mode == "mask_ssp" else JobConfig(mode=mode)
        cfg.epochs = 5
        res = run_job(cfg)
        deliveries += sum(1 for t in res.taint_log if t.dst in _GUARDED)
        failures.extend(f"{mode}: {f}" for f in privacy_findings(res))
        if not any(t.kind in ("MASKED", "FULL_AGGREGATE") for t in res.taint_log if t.dst == "aggregator"):
            failures.append(f"{mode}: taint log recorded no aggregator deliveries")

    # tampered code measurement: attestation must fail and nothing is released
    job = Job(JobConfig(epochs=1), tamper={"training_code": {1: "1.0+exfiltrate"}})
    try:
        job.setup()
        failures.append("job with tampered training code started")
    except JobAborted:
        pass
    bad = job.directory["training-1"]
    if job.cas.held_by(bad.enclave_id) or any(r.enclave_id == bad.enclave_id for r in job.cas.release_log):
        failures.append("tampered enclave received secrets")
    for sid in ("data/1", "model", "data/0"):
        try:
            job.cas.provision(bad.enclave_id, sid)
            failures.append(f"tampered enclave was provisioned {sid}")
        except ProvisionDenied:
            pass

    # the detector must fire on a planted unmasked update
    cfg, tamper = planted_violation_config()
    try:
        run_job(cfg, tamper)
        failures.append("planted unmasked update went unnoticed")
    except PrivacyViolation:
        pass
    return f"3 modes, {deliveries} guarded deliveries clean; tampered enclave got 0 secrets; planted violation caught"


# 6 -----------------------------------------------------------------------


def ssp_config() -> JobConfig:
    cfg = template("ssp")
    cfg.epochs = 2
    return cfg


@_timed(6, "straggler (SSP) correctness", None)
def ssp(failures: list[str]) -> str:
    cfg = ssp_config()
    delayed = {(f.iteration, int(f.target.split(":")[1])) for f in cfg.faults if f.action == "delay"}

    def expected(step):
        return [i for i in range(cfg.n_training) if (step, i) not in delayed]

    oracle = run_oracle(cfg, expected)
    res = run_job(cfg)
    for step in range(cfg.total_iterations):
        parts, agg = res.aggregates[step]
        if list(parts) != expected(step):
            failures.append(f"step {step}: participants {list(parts)} != {expected(step)}")
        # oracle gradients are recomputed from the oracle's own model at that step
        if agg.lanes_as_ints() != oracle.sums[step].lanes_as_ints():
            failures.append(f"step {step}: aggregate differs from the oracle sum of participants")
    if res.final_state.step != cfg.total_iterations:
        failures.append("job did not complete")
    if res.final_weights != oracle.final_weights:
        failures.append("final model differs from the participant oracle")
    (step, who), = delayed
    return f"N=4, straggler training-{who} at iteration {step}; K={len(expected(step))}, aggregate exact"


# 7 -----------------------------------------------------------------------


def _dense(versions, total: int, bpe: int) -> bool:
    return list(versions) == [(s // bpe, s % bpe) for s in range(total + 1)]


@_timed(7, "fault tolerance", None)
def faults(failures: list[str]) -> str:
    cases = [
        ("mask", FaultSpec("training:1", 3)),
        ("tree", FaultSpec("training:1", 3)),
        ("mask", FaultSpec("aggregator", 5)),
        ("tree", FaultSpec("aggregator", 5)),
        ("mask", FaultSpec("admin", 2)),
    ]
    refs = {}
    for mode, fault in cases:
        base = JobConfig(mode=mode, epochs=2, seed=11)
        if mode not in refs:
            refs[mode] = run_job(base)
        cfg = JobConfig(mode=mode, epochs=2, seed=11, faults=[fault])
        res = run_job(cfg)
        tag = f"{mode}/{fault.target}@{fault.iteration}"
        if not res.restarts:
            failures.append(f"{tag}: fault never fired")
        if res.final_weights != refs[mode].final_weights:
            failures.append(f"{tag}: final model differs from the fault-free run")
        if not _dense(res.model_versions(), cfg.total_iterations, cfg.batches_per_epoch):
            failures.append(f"{tag}: checkpoint versions not dense: {res.model_versions()}")
    return f"{len(cases)} crash scenarios reproduce the fault-free model with dense checkpoints"


# 8 -----------------------------------------------------------------------


def serialized_config(n: int) -> JobConfig:
    """Dyadic costs, so every simulated timestamp is exact in binary floating point."""
    return JobConfig(
        n_training=n,
        mode="mask",
        epochs=1,
        batches_per_epoch=2,
        latency=LatencyConfig(per_message_latency=0.5, bandwidth=1024.0, control_latency=0.0),
        costs=OpCosts(t_train=10.0, t_mask=0.25, t_apply=2.0, enc_base=0.5, enc_per_byte=2.0**-12,
                      dec_base=0.5, dec_per_byte=2.0**-12, agg_base=0.125, agg_per_update=1.0),
    )


def _exact_mask(cfg: JobConfig, p: CostParams, n: int) -> Fraction:
    lat, c = cfg.latency, cfg.costs
    F = Fraction
    net = lambda s: F(lat.per_message_latency) + F(s) / F(lat.bandwidth)
    enc = lambda s: F(c.enc_base) + F(c.enc_per_byte) * s
    dec = lambda s: F(c.dec_base) + F(c.dec_per_byte) * s
    m, g = p.mask_bytes, p.update_bytes
    return (F(c.t_train) + net(m) + dec(m) + F(c.t_mask) + enc(g) + net(g) + dec(g)
            + F(c.agg_base) + F(c.agg_per_update) * n + F(c.t_apply))


def crossover_params() -> CostParams:
    # t_agg(k) = k; enc + dec + net = 3 + 0.5 + 0.5 = 4 per tree round
    return CostParams(Link(0.5, 2.0**40), Affine(3.0), Affine(0.5), Affine(0.0, 1.0),
                      t_mask=0.0, t_train=10.0, t_apply=2.0, mask_bytes=0, update_bytes=0)


def _exact_recommendations(c: int, n_max: int = 256) -> list[str]:
    """Mask/tree choice per n with the formulas written out by hand (train and apply cancel)."""
    out = []
    for n in range(1, n_max + 1):
        half = Fraction(1, 2)
        t_mask = half + half + 0 + 3 + half + half + n  # net(m) dec(m) mask enc(g) net(g) dec(g) agg(n)
        t_tree = (3 + half + c + half) * _rounds_by_counting(n, c)
        out.append("tree" if t_tree < t_mask else "mask")
    return out


@_timed(8, "cost-model consistency", None)
def costmodel(failures: list[str]) -> str:
    spans = []
    for n in COST_NS:
        cfg = serialized_config(n)
        p = CostParams.from_config(cfg)
        est = estimate_mask(p, n)
        if Fraction(est) != _exact_mask(cfg, p, n):
            failures.append(f"n={n}: estimate {est!r} is not the exact formula value")
        res = run_job(cfg)
        for step, (a, b) in res.iteration_spans.items():
            spans.append(b - a)
            if b - a != est:
                failures.append(f"n={n} step {step}: simulated span {b - a!r} != estimate {est!r}")
    p = crossover_params()
    found = {}
    for c in (2, 4):
        exact = _exact_recommendations(c)
        swept = [recommend_mode(p, n, c).value for n in range(1, 257)]
        if swept != exact:
            failures.append(f"c={c}: recommendations disagree with the hand-written formulas")
        got = crossover(p, c)
        found[c] = got
        # ceil(log_c n) is a staircase, so the choice may waver near the crossover
        settled = next((n for n in range(256, 0, -1) if swept[n - 1] == "mask"), 0) + 1
        if swept[0] != "mask" or got is None or settled > 256:
            failures.append(f"c={c}: no mask-to-tree crossover up to n=256")
        elif got != exact.index("tree") + 1:
            failures.append(f"c={c}: crossover {got} but exact sweep says {exact.index('tree') + 1}")
    return f"spans equal estimate_mask for N in {list(COST_NS)}; first tree win at n={found}"


# 9 -----------------------------------------------------------------------


def determinism_configs() -> list[JobConfig]:
    ssp_ = ssp_config()
    crash = JobConfig(mode="mask", epochs=2, seed=5, faults=[FaultSpec("training:2", 1)])
    return [JobConfig(epochs=3, seed=3), JobConfig(mode="tree", epochs=3, seed=3, children_c=3), ssp_, crash]


@_timed(9, "determinism", None)
def determinism(failures: list[str]) -> str:
    configs = determinism_configs()
    for cfg in configs:
        a = run_job(JobConfig.from_dict(cfg.to_dict()))
        b = run_job(JobConfig.from_dict(cfg.to_dict()))
        if a.metrics_csv().encode() != b.metrics_csv().encode():
            failures.append(f"{cfg.mode} seed {cfg.seed}: metrics CSV differs")
        if a.final_model_blob != b.final_model_blob:
            failures.append(f"{cfg.mode} seed {cfg.seed}: final model blob differs")
        if a.trace != b.trace:
            failures.append(f"{cfg.mode} seed {cfg.seed}: message trace differs")
        if [k for k in a.store.list(Namespace.MODEL)] != [k for k in b.store.list(Namespace.MODEL)]:
            failures.append(f"{cfg.mode} seed {cfg.seed}: checkpoint lists differ")
    return f"{len(configs)} configs run twice: identical CSV bytes, model blobs and traces"


CRITERIA = (zero_sum, barrier, tree, e2e, privacy, ssp, faults, costmodel, determinism)

SUITES: dict[str, tuple] = {
    "zero-sum": (zero_sum,),
    "barrier": (barrier,),
    "tree": (tree,),
    "e2e": (e2e,),
    "privacy": (privacy,),
    "ssp": (ssp,),
    "fault": (faults,),
    "costmodel": (costmodel,),
    "determinism": (determinism,),
    "all": CRITERIA,
}


@_timed(0, "planted taint violation", None)
def planted(failures: list[str]) -> str:
    """Runs the planted fixture as if it were a real job: must report a failure."""
    cfg, tamper = planted_violation_config()
    try:
        res = run_job(cfg, tamper)
    except PrivacyViolation as exc:
        failures.append(f"privacy violation: {exc}")
        return "fixture tripped the barrier"
    failures.extend(privacy_findings(res))
    return "fixture ran"


SUITES["planted-violation"] = (planted,)


def run_suite(name: str) -> list[CriterionResult]:
    if name not in SUITES:
        raise KeyError(name)
    return [check() for check in SUITES[name]]
