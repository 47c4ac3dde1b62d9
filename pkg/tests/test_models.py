import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from teeagg.models import (
    accuracy,
    Batch,
    Hyperparams,
    ModelKind,
    ModelSpec,
    ModelState,
    apply_update,
    clip_array,
    compute_gradients,
    init_state,
    loss,
    loss_grad,
    lr_at,
    make_toy_task,
    next_version,
)
from teeagg.tensors import Domain, FixedPointConfig, ShapeMismatchError, from_floats


def _central_diff(spec, w, batch, h=1e-6):
    g = np.zeros_like(w)
    for j in range(w.size):
        e = np.zeros_like(w)
        e[j] = h
        g[j] = (loss(spec, w + e, batch) - loss(spec, w - e, batch)) / (2 * h)
    return g


@pytest.mark.parametrize("kind,dims", [("linear", (5, 1)), ("logistic", (5, 1)), ("mlp", (4, 3, 1))])
def test_analytic_gradient_matches_finite_differences(kind, dims):
    rng = np.random.default_rng(3)
    spec = ModelSpec(kind, dims)
    batch = Batch(rng.normal(size=(17, dims[0])), (rng.random(17) > 0.5).astype(float), 0)
    w = rng.normal(size=spec.n_params)
    np.testing.assert_allclose(loss_grad(spec, w, batch), _central_diff(spec, w, batch), rtol=1e-5, atol=1e-7)


def test_param_shapes():
    assert ModelSpec("logistic", (20, 1)).param_shape() == (20, 1)
    assert ModelSpec("mlp", (20, 32, 1)).param_shape() == (640, 32, 32, 1)
    with pytest.raises(ValueError):
        ModelSpec("mlp", (20, 1))


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(0.01, 100))
def test_clipping_bounds_norm_and_preserves_direction(xs, c):
    g = np.array(xs)
    out = clip_array(g, c)
    assert np.linalg.norm(out) <= c * (1 + 1e-12)
    if np.linalg.norm(g) <= c:
        assert out is g
    else:
        np.testing.assert_allclose(out * np.linalg.norm(g) / c, g, rtol=1e-9, atol=1e-12)


def test_learning_rate_schedule():
    hp = Hyperparams(base_lr=0.5, decay_factor=0.5, decay_every=100)
    assert [lr_at(hp, s) for s in (0, 99, 100, 250)] == [0.5, 0.5, 0.25, 0.125]


def test_version_advance():
    assert next_version(0, 0, 4) == (0, 1)
    assert next_version(0, 3, 4) == (1, 0)
    assert next_version(2, 0, 1) == (3, 0)


def test_apply_update_divides_by_participants():
    spec = ModelSpec("linear", (2, 1), hyperparams=Hyperparams(base_lr=1.0, clip_norm=1e9))
    state = ModelState(from_floats([0.0, 0.0, 0.0], (2, 1)))
    agg = from_floats([3.0, -6.0, 9.0], (2, 1))
    new = apply_update(spec, state, agg, 3, 4)
    assert new.weights.values.tolist() == [-1.0, 2.0, -3.0]
    assert (new.epoch, new.batch_index, new.step) == (0, 1, 1)
    with pytest.raises(ValueError):
        apply_update(spec, state, agg, 0, 4)
    with pytest.raises(ShapeMismatchError):
        apply_update(spec, state, from_floats([1.0, 2.0]), 1, 4)


def test_fixed64_gradients_decode_to_float_gradients():
    task = make_toy_task(1, n_owners=2, batches_per_epoch=2, n_samples=200)
    state = init_state(task.spec)
    batch = task.shards[0][0]
    g32 = compute_gradients(task.spec, state, batch)
    g64 = compute_gradients(task.spec, state, batch, Domain.FIXED64, FixedPointConfig(24))
    assert np.max(np.abs(g64.to_float64() - g32.to_float64())) < 1e-6


def test_batch_bytes_round_trip_with_canary():
    rng = np.random.default_rng(0)
    b = Batch(rng.normal(size=(3, 2)), [1.0, 0.0, 1.0], 7)
    raw = b.to_bytes(b"SENTINEL")
    assert b"SENTINEL" in raw
    back = Batch.from_bytes(raw)
    assert back.owner_id == 7
    np.testing.assert_array_equal(back.features, b.features)
    np.testing.assert_array_equal(back.labels, b.labels)


def test_toy_task_is_deterministic_and_learnable():
    a = make_toy_task(5, n_owners=3, batches_per_epoch=2, n_samples=600)
    b = make_toy_task(5, n_owners=3, batches_per_epoch=2, n_samples=600)
    assert a.n_owners == 3 and a.batches_per_epoch == 2
    assert np.array_equal(a.shards[2][1].features, b.shards[2][1].features)
    spec, state = a.spec, init_state(a.spec)
    for step in range(40):
        t = step % 2
        grads = [compute_gradients(spec, state, a.shards[i][t]) for i in range(3)]
        total = from_floats(sum(g.to_float64() for g in grads), spec.param_shape())
        state = apply_update(spec, state, total, 3, 2)
    assert accuracy(spec, state.weights, a.eval_set) >= 0.95


def test_mlp_init_is_seeded():
    spec = ModelSpec(ModelKind.MLP, (4, 3, 1), init_seed=9)
    assert init_state(spec).weights == init_state(spec).weights
