import numpy as np
from hypothesis import given, strategies as st

from teeagg.config import JobConfig
from teeagg.oracle import bigint_sum, float_sum, run_oracle
from teeagg.tensors import Domain, GradVector

MOD = 1 << 64


@given(st.lists(st.lists(st.integers(0, MOD - 1), min_size=3, max_size=3), min_size=1, max_size=6))
def test_bigint_sum_is_lanewise_mod(rows):
    vecs = [GradVector(Domain.FIXED64, np.array(r, dtype=np.uint64), (3,), 16) for r in rows]
    got = bigint_sum(vecs).lanes_as_ints()
    assert list(got) == [sum(col) % MOD for col in zip(*rows)]


def test_float_sum_accumulates_in_double():
    vecs = [GradVector(Domain.FLOAT32, np.array([1e8, 1.0], dtype=np.float32), (2,)) for _ in range(3)]
    assert float_sum(vecs).values.tolist() == [3e8, 3.0]


def test_oracle_is_deterministic_and_learns():
    cfg = JobConfig(epochs=20)
    a, b = run_oracle(cfg), run_oracle(cfg)
    assert a.final_weights == b.final_weights
    assert len(a.states) == cfg.total_iterations + 1
    assert a.eval_accuracy >= 0.95


def test_participant_subsets_change_the_model():
    cfg = JobConfig(epochs=2)
    full = run_oracle(cfg)
    part = run_oracle(cfg, participants_at=lambda step: [0, 1, 2] if step == 1 else range(4))
    assert full.sums[0].lanes_as_ints() == part.sums[0].lanes_as_ints()
    assert full.final_weights != part.final_weights
