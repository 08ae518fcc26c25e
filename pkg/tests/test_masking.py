import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairseq.errors import PoolError
from pairseq.masking import (
    DATA_POSITIONS,
    MaskAction,
    MaskPlan,
    apply_mask,
    apply_masks,
    epoch_plans,
    plan_mask,
    sample_rng,
)
from pairseq.model import MSK_DIM


def _input(rng, d=8):
    x = rng.standard_normal((12, d))
    x[:, :3] = 0
    x[0, 0] = 1
    x[6, 1] = 1
    return x


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**63 - 1), st.integers(0, 50))
def test_plans_are_valid(seed, pool_size):
    plan = plan_mask(np.random.default_rng(seed), pool_size)
    assert 1 <= len(plan.positions) <= 2
    assert len(set(plan.positions)) == len(plan.positions)
    assert all(p in DATA_POSITIONS for p in plan.positions)
    for a, r in zip(plan.actions, plan.random_index):
        if a == MaskAction.RANDOM and pool_size:
            assert 0 <= r < pool_size
        else:
            assert r == -1


def test_plan_rejects_token_slots():
    with pytest.raises(ValueError):
        MaskPlan((0,), (MaskAction.MSK,), (-1,))
    with pytest.raises(ValueError):
        MaskPlan((6,), (MaskAction.MSK,), (-1,))
    with pytest.raises(ValueError):
        MaskPlan((1, 1), (MaskAction.MSK, MaskAction.MSK), (-1, -1))


def test_apply_actions(rng):
    x = _input(rng)
    pool = rng.standard_normal((4, 8))
    plan = MaskPlan((2, 9), (MaskAction.MSK, MaskAction.RANDOM), (-1, 3))
    out = apply_mask(x, plan, pool)
    assert out[2, MSK_DIM] == 1 and out[2].sum() == 1
    np.testing.assert_array_equal(out[9], pool[3])
    untouched = [i for i in range(12) if i not in (2, 9)]
    np.testing.assert_array_equal(out[untouched], x[untouched])
    np.testing.assert_array_equal(plan.targets(x), x[[2, 9]])
    keep = MaskPlan((4,), (MaskAction.KEEP,), (-1,))
    np.testing.assert_array_equal(apply_mask(x, keep), x)


def test_empty_pool_raises(rng):
    plan = MaskPlan((3,), (MaskAction.RANDOM,), (0,))
    with pytest.raises(PoolError):
        apply_mask(_input(rng), plan, np.zeros((0, 8)))
    with pytest.raises(PoolError):
        apply_mask(_input(rng), plan, None)


def test_batch_form_matches_single(rng):
    xs = np.stack([_input(rng) for _ in range(5)])
    pool = rng.standard_normal((6, 8))
    plans = epoch_plans(7, 0, 5, len(pool))
    out, rows, cols, targets = apply_masks(xs, plans, pool)
    for i, plan in enumerate(plans):
        np.testing.assert_array_equal(out[i], apply_mask(xs[i], plan, pool))
    assert len(rows) == sum(len(p.positions) for p in plans)
    np.testing.assert_array_equal(targets, xs[rows, cols])


def test_plans_keyed_on_seed_epoch_index():
    a = plan_mask(sample_rng(1, 2, 3), 10)
    assert a == plan_mask(sample_rng(1, 2, 3), 10)
    differ = {plan_mask(sample_rng(1, e, 3), 10) for e in range(20)}
    assert len(differ) > 1
