import math
from collections import defaultdict

import pytest

from teeagg.config import FaultSpec, JobConfig, LatencyConfig, template
from teeagg.enclaves import CONTROL_TYPES, MsgType
from teeagg.oracle import run_oracle
from teeagg.simnet import (
    CSV_HEADER,
    PHASES,
    Job,
    MetricsRecord,
    PhaseClock,
    conservation_gap,
    emit_metrics,
    metrics_csv,
    run_job,
)
from teeagg.storage import DirectoryStore


def small(**kw):
    base = dict(epochs=2, batches_per_epoch=2)
    base.update(kw)
    return JobConfig(**base)


CONFIGS = {
    "mask": small(),
    "tree": small(mode="tree", n_training=5, children_c=2),
    "ssp": template("ssp"),
    "crash": small(faults=[FaultSpec("training:0", 1)]),
    "agg-crash": small(mode="tree", faults=[FaultSpec("aggregator", 2)]),
}
CONFIGS["ssp"].epochs = 1


@pytest.fixture(scope="module", params=sorted(CONFIGS))
def result(request):
    return run_job(CONFIGS[request.param])


def test_csv_header_and_sorting(result, tmp_path):
    path = tmp_path / "m.csv"
    emit_metrics(result.metrics, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    keys = [(int(r.split(",")[0]), r.split(",")[1], r.split(",")[2]) for r in lines[1:]]
    assert keys == sorted(keys)


def test_empty_metrics_is_header_only(tmp_path):
    emit_metrics([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == ",".join(CSV_HEADER) + "\n"


def test_unwritable_metrics_path(tmp_path):
    with pytest.raises(OSError):
        emit_metrics([], tmp_path / "missing" / "m.csv")


def test_phases_partition_each_span(result):
    per = defaultdict(float)
    for r in result.metrics:
        assert r.phase in PHASES
        per[(r.iteration, r.enclave_id)] += r.duration
    for (step, _), total in per.items():
        a, b = result.iteration_spans[step]
        assert math.isclose(total, b - a, rel_tol=1e-12, abs_tol=1e-9)


def test_byte_counters_match_frames(result):
    sent = sum(r.bytes_sent for r in result.metrics)
    assert sent == sum(t.size for t in result.trace)
    assert conservation_gap(result) == 0
    assert sum(r.messages for r in result.metrics) == len(result.trace)


def test_fifo_and_latency_law(result):
    lat = result.config.latency
    last = {}
    for t in sorted(result.trace, key=lambda t: (t.sent_at, t.arrived_at)):
        chan = (t.src, t.dst)
        assert t.arrived_at >= last.get(chan, 0.0)
        last[chan] = t.arrived_at
        floor = lat.control_latency if MsgType[t.mtype] in CONTROL_TYPES else lat.t_net(t.size)
        assert t.arrived_at - t.sent_at >= floor - 1e-12


def test_checkpoints_are_dense(result):
    bpe = result.config.batches_per_epoch
    n = result.config.total_iterations
    assert result.model_versions() == [(s // bpe, s % bpe) for s in range(n + 1)]


def test_phase_clock_rules():
    c = PhaseClock(0.0)
    c.switch("masking", 1.0)
    with pytest.raises(ValueError):
        c.switch("training", 0.5)
    with pytest.raises(ValueError):
        c.switch("lunch", 2.0)
    c.close(3.0)
    assert [(r.phase, r.duration) for r in c.records(0, "x")] == [("masking", 2.0), ("training", 1.0)]


def test_record_row_formatting():
    csv = metrics_csv([MetricsRecord(1, "b", "training", 0.1, 2, 3, 4), MetricsRecord(0, "a", "masking", 1.0, 0, 0, 0)])
    assert csv.splitlines()[1:] == ["0,a,masking,1.0,0,0,0", "1,b,training,0.1,2,3,4"]


def test_mask_aggregation_phase_grows_with_n_and_tree_has_one_inbound():
    durations = []
    for n in (1, 2, 4, 8, 16):
        res = run_job(small(n_training=n, epochs=1))
        durations.append(max(r.duration for r in res.metrics
                             if r.enclave_id == "aggregator" and r.phase == "aggregation"))
        tree = run_job(small(n_training=n, epochs=1, mode="tree"))
        for step in range(2):
            assert sum(1 for t in tree.trace if t.dst == "aggregator" and t.mtype == "UPDATE"
                       and t.round_id[0] == step) == 1
    assert durations == sorted(durations)


def test_aggregator_crash_holds_back_the_next_version():
    job = Job(small(faults=[FaultSpec("aggregator", 2)]))
    seen = []
    original = job.restart_enclave

    def watch(lid):
        seen.append(job.store.latest_model()[0].version)
        return original(lid)

    job.restart_enclave = watch
    res = job.run()
    assert set(seen) == {(1, 0)}  # iteration 2 trains on (1, 0); (1, 1) is absent until restart
    assert res.model_versions() == [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0)]


def test_too_few_participants_restarts_the_iteration():
    cfg = template("ssp")
    cfg.epochs = 1
    cfg.min_participants = 4
    res = run_job(cfg)
    assert res.aggregates[2][0] == (0, 1, 2, 3)
    assert res.final_weights == run_oracle(cfg).final_weights


def test_directory_backend_gives_same_model(tmp_path):
    a = run_job(small(), store=DirectoryStore(tmp_path / "s"))
    b = run_job(small())
    assert a.final_weights == b.final_weights and a.final_model_blob == b.final_model_blob


def test_control_latency_changes_time_not_model():
    slow = small(latency=LatencyConfig(control_latency=0.5))
    a, b = run_job(slow), run_job(small())
    assert a.final_weights == b.final_weights
    assert a.total_time > b.total_time


def test_mlp_and_float32_jobs():
    mlp = small()
    mlp.model.kind, mlp.model.hidden = "mlp", 4
    assert run_job(mlp).final_weights == run_oracle(mlp).final_weights
    f32 = JobConfig(domain="float32", epochs=10)
    res = run_job(f32)
    assert res.eval_accuracy >= 0.95


def test_aggregation_timeout_aborts_and_retries():
    cfg = small(aggregation_timeout=20.0, faults=[FaultSpec("training:1", 1, "delay", 50.0)])
    res = run_job(cfg)
    assert [f[3] for f in res.fault_log] == ["delay"] and res.aggregates[1][0] == (0, 1, 2, 3)
    assert res.final_weights == run_oracle(small()).final_weights
