import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from teeagg.masking import (
    MaskClaimError,
    MaskGrant,
    MaskPool,
    PoolExhaustedError,
    generate_mask_set,
    pregenerate,
    residual_grant,
    residual_mask,
    serve_mask_request,
)
from teeagg.storage import MemoryStore
from teeagg.tensors import Domain, fold

MOD = 1 << 64


@given(st.integers(1, 40), st.integers(0, 2**32))
def test_fixed64_mask_sets_sum_to_zero_as_integers(n, seed):
    ms = generate_mask_set(n, (3, 2), Domain.FIXED64, np.random.default_rng(seed))
    assert ms.n == n
    assert all(sum(col) % MOD == 0 for col in zip(*(m.lanes_as_ints() for m in ms.masks)))
    assert fold(ms.masks).is_zero()


@given(st.integers(2, 12), st.integers(0, 2**32), st.data())
def test_residual_restores_zero_sum_for_any_participant_set(n, seed, data):
    ms = generate_mask_set(n, (4,), Domain.FIXED64, np.random.default_rng(seed))
    parts = data.draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=n, unique=True))
    used = [ms.masks[p] for p in parts[:-1]] + [residual_mask(ms, parts)]
    assert fold(used).is_zero()


def test_masks_look_uniform():
    ms = generate_mask_set(3, (4000,), Domain.FIXED64, np.random.default_rng(1))
    top_bits = ms.masks[0].values >> np.uint64(63)
    assert 0.45 < top_bits.mean() < 0.55


def test_residual_argument_checks():
    ms = generate_mask_set(3, (2,), Domain.FIXED64, np.random.default_rng(0))
    for bad in ([], [0, 0], [0, 5]):
        with pytest.raises(ValueError):
            residual_mask(ms, bad)


def test_pool_cursor_is_monotone_and_exhausts():
    claimed = []
    pool = MaskPool(first_set=10, size=2, n=3, on_claim=claimed.append)
    assert pool.set_for("a") == 10 and pool.set_for("a") == 10
    assert pool.set_for("b") == 11
    with pytest.raises(PoolExhaustedError):
        pool.set_for("c")
    assert claimed == [10, 11]


def test_pregenerate_uploads_encrypted_masks_and_grants_redirect():
    store = MemoryStore()
    registered = []
    pool = pregenerate(2, 3, (2, 1), Domain.FIXED64, np.random.default_rng(0), store, registered.extend)
    assert len(store.list("mask")) == 6 and len(registered) == 6
    g = serve_mask_request(pool, (0, 1), 1)
    assert g == serve_mask_request(pool, (0, 1), 1)
    assert [sid for _, sid in g.entries] == ["mask/0/1"] and not g.residual
    assert MaskGrant.from_json(g.to_json()) == g
    with pytest.raises(MaskClaimError):
        serve_mask_request(pool, (0, 1), 1, requester="training-1#9")
    with pytest.raises(MaskClaimError):
        serve_mask_request(pool, (0, 1), 3)


def test_residual_grant_covers_stragglers():
    pool = MaskPool(0, 1, 4)
    designated = []
    g = residual_grant(pool, "it", [2, 0, 1], lambda sid, r: designated.append((sid, r)))
    assert [sid for _, sid in g.entries] == ["mask/0/1", "mask/0/3"] and g.residual
    assert designated == [("mask/0/3", 1)]
    with pytest.raises(MaskClaimError):
        serve_mask_request(pool, "it", 3, requester="training-3")
