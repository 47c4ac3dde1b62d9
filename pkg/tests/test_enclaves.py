import json

import numpy as np
import pytest

from teeagg.config import FaultSpec, JobConfig
from teeagg.crypto import EncryptedBlob, KeyTag, decrypt, encrypt, keygen
from teeagg.enclaves import (
    Frame,
    FrameFormatError,
    MsgType,
    TrainingEnclave,
    decode_checkpoint,
    encode_checkpoint,
    frame_size,
    mask_blob_size,
)
from teeagg.models import ModelSpec, compute_gradients, init_state
from teeagg.simnet import Job, JobAborted, run_job
from teeagg.taint import LabelKind, PrivacyViolation
from teeagg.tensors import serialize


def small(**kw):
    base = dict(epochs=2, batches_per_epoch=2)
    base.update(kw)
    return JobConfig(**base)


@pytest.mark.parametrize("with_label", [True, False])
def test_frame_round_trip(with_label):
    key = keygen(KeyTag.session("a", "b"))
    blob = encrypt(key, b"payload")
    f = Frame(MsgType.UPDATE, LabelKind.MASKED, blob)
    raw = f.encode(with_label)
    assert raw[:4] == b"CMSG" and raw[4] == MsgType.UPDATE
    assert len(raw) == frame_size(7, with_label)
    back = Frame.decode(raw, with_label)
    assert back.blob == blob and back.mtype is MsgType.UPDATE
    assert back.label == (LabelKind.MASKED if with_label else None)


@pytest.mark.parametrize("mutate", [lambda r: b"XMSG" + r[4:], lambda r: r[:-1], lambda r: r[:4] + b"\x09" + r[5:]])
def test_frame_rejects_garbage(mutate):
    raw = Frame(MsgType.PARTIAL, LabelKind.PARTIAL_AGGREGATE, encrypt(keygen(KeyTag.model_owner()), b"x")).encode()
    with pytest.raises(FrameFormatError):
        Frame.decode(mutate(raw))


def test_checkpoint_round_trip():
    spec = ModelSpec("mlp", (3, 2, 1))
    state = init_state(spec)
    spec2, state2 = decode_checkpoint(encode_checkpoint(spec, state, b"CANARY"))
    assert spec2.layer_dims == spec.layer_dims and state2 == state


def _capture_frames(job):
    frames = []
    inner = job.net.on_send

    def hook(msg):
        frames.append(msg)
        inner(msg)

    job.net.on_send = hook
    return frames


@pytest.mark.parametrize("mode", ["mask", "tree", "mask_ssp"])
def test_sentinel_never_leaves_an_enclave_in_the_clear(mode):
    job = Job(small(mode=mode), record_payloads=True)
    frames = _capture_frames(job)
    res = job.run()
    canary = res.config.canary.encode()
    assert frames and not any(canary in m.data for m in frames)
    assert not any(canary in p for *_, p in job.payload_log)
    assert res.store.scan(canary) == []


def test_single_enclave_update_is_raw_gradient_labelled_masked():
    job = Job(small(n_training=1), record_payloads=True)
    res = job.run()
    updates = [p for r, src, dst, t, p in job.payload_log if t is MsgType.UPDATE and r == (0, 1)]
    g = compute_gradients(job.spec, init_state(job.spec), job.task.shards[0][0], job.cfg.domain_enum, job.cfg.fixed_point)
    assert updates == [serialize(g)]
    kinds = {t.kind for t in res.taint_log if t.dst == "aggregator"}
    assert kinds == {"MASKED"}


def test_admin_only_redirects():
    job = Job(small(n_training=4), record_payloads=True)
    res = job.run()
    admin_out = [(t, p) for _, src, _, t, p in job.payload_log if src == "admin"]
    assert len([1 for t, _ in admin_out if t is MsgType.MASK_GRANT]) == 4 * res.config.total_iterations
    for t, p in admin_out:
        assert t in (MsgType.MASK_GRANT, MsgType.CONTROL)
        json.loads(p)
    shape = job.spec.param_shape()
    assert max(len(p) for _, p in admin_out) < mask_blob_size(shape, job.cfg.domain_enum)
    assert {t.kind for t in res.taint_log if t.dst == "admin"} == {"CONTROL"}


def test_key_isolation_and_held_secrets():
    job = Job(small(mode="mask_ssp", n_training=3))
    res = job.run()
    for rel in res.release_log:
        if rel.role.kind in ("aggregator", "admin"):
            assert not rel.secret_id.startswith("data/")
        if rel.secret_id.startswith("data/"):
            assert rel.role.index == int(rel.secret_id.split("/")[1])
    for enc in job.directory.values():
        assert enc.state.held_secrets <= res.cas.held_by(enc.enclave_id)


def test_fresh_training_enclave_reproduces_the_update():
    job = Job(small())
    job.setup()
    old = job.directory["training-2"]
    fresh = job.restart_enclave("training-2")
    cfg = job.cfg
    a = old.local_update(job.cas, job.store, (0, 0), cfg.domain_enum, cfg.fixed_point)
    b = fresh.local_update(job.cas, job.store, (0, 0), cfg.domain_enum, cfg.fixed_point)
    assert a.value == b.value and a.label == b.label
    assert fresh.enclave_id != old.enclave_id
    with pytest.raises(LookupError):
        fresh.local_update(job.cas, job.store, (0, 1), cfg.domain_enum, cfg.fixed_point)


def test_restarted_tree_iteration_sends_identical_payloads():
    ref = Job(JobConfig(mode="tree", epochs=2, seed=4), record_payloads=True)
    ref.run()
    crash = Job(JobConfig(mode="tree", epochs=2, seed=4, faults=[FaultSpec("training:1", 3)]), record_payloads=True)
    crash.run()
    want = [(src, dst, t, p) for (s, a), src, dst, t, p in ref.payload_log if s == 3]
    final_attempt = max(a for (s, a), *_ in crash.payload_log if s == 3)
    got = [(src, dst, t, p) for (s, a), src, dst, t, p in crash.payload_log if (s, a) == (3, final_attempt)]
    assert final_attempt == 2 and got == want


def test_unmasked_update_trips_the_barrier():
    with pytest.raises(PrivacyViolation):
        run_job(small(), {"unmasked_sender": 0})


def test_modified_training_code_is_refused():
    job = Job(small(), tamper={"training_code": {0: "2.0-patched"}})
    with pytest.raises(JobAborted):
        job.setup()
    assert job.cas.held_by(job.directory["training-0"].enclave_id) == set()


def test_enclave_measurements_differ_by_role():
    from teeagg.enclaves import AdminEnclave, AggregatorEnclave

    ms = {TrainingEnclave.measurement(), AggregatorEnclave.measurement(), AdminEnclave.measurement()}
    assert len(ms) == 3
    assert np.all([len(m.digest) == 32 for m in ms])


def test_released_model_opens_with_the_owner_key():
    job = Job(small())
    res = job.run()
    spec, state = decode_checkpoint(decrypt(job.model_key, EncryptedBlob.from_bytes(res.final_model_blob)))
    assert serialize(state.weights) == res.final_weights
    assert state.version == (2, 0) and spec.layer_dims == job.spec.layer_dims


@pytest.mark.parametrize("faults", [[], [FaultSpec("training:1", 2)], [FaultSpec("admin", 3)]])
def test_one_time_secrets_and_single_owner_contact(faults):
    from collections import Counter

    job = Job(small(faults=faults))
    res = job.run()
    masks = Counter(r.secret_id for r in res.release_log if r.secret_id.startswith("mask/"))
    assert masks and max(masks.values()) == 1
    pairs = Counter((r.enclave_id, r.secret_id) for r in res.release_log)
    assert max(pairs.values()) == 1
    assert set(job.cas.owner_messages.values()) == {1}
    # the nonce log raises on reuse, so a finished job means every nonce was fresh
    assert len(job.nonce_log) > 0
