import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splatfit.density import (
    CLONE,
    KEEP,
    RESET_OPACITY,
    SPLIT,
    SPLIT_SCALE_DIVISOR,
    DensifyConfig,
    DensifyStats,
    DensityError,
    apply_densify,
    criterion_values,
    densify_decision,
    prune,
    prune_and_reset,
    record_view,
    record_views,
)
from splatfit.scene import logit, sigmoid
from tests.conftest import random_cloud


def stats_from(views):
    """views: list of (grad_norm, t) for a single Gaussian."""
    s = DensifyStats.zeros(1)
    for g, t in views:
        record_view(s, 0, (g, 0.0), t)
    return s


def test_heavier_view_carries_the_larger_gradient():
    s = stats_from([(0.1, 1.0), (0.3, 3.0)])
    assert criterion_values(s, "opacity_weighted")[0] == pytest.approx((1 * 0.1 + 3 * 0.3) / 4, rel=1e-15)
    assert criterion_values(s, "baseline")[0] == pytest.approx(0.2, rel=1e-15)
    big, small = np.array([1.0]), np.array([1e-4])
    for mode, want_big, want_small in (("opacity_weighted", SPLIT, CLONE), ("baseline", KEEP, KEEP)):
        cfg = DensifyConfig(tau_pos=0.22, mode=mode)
        assert densify_decision(s, big, cfg, 1.0)[0] == want_big
        assert densify_decision(s, small, cfg, 1.0)[0] == want_small


def test_worked_example_criteria_disagree():
    s = stats_from([(0.1, 0.8), (0.4, 0.4)])
    assert criterion_values(s, "baseline")[0] == pytest.approx(0.25)
    assert criterion_values(s, "opacity_weighted")[0] == pytest.approx(0.2)
    big = np.array([1.0])
    base = densify_decision(s, big, DensifyConfig(tau_pos=0.22, mode="baseline"), 1.0)
    opw = densify_decision(s, big, DensifyConfig(tau_pos=0.22, mode="opacity_weighted"), 1.0)
    assert base[0] == SPLIT and opw[0] == KEEP


def test_ndc_gradient_norm_is_euclidean():
    s = DensifyStats.zeros(1)
    record_view(s, 0, (3.0, 4.0), 1.0)
    assert s.grad_norm_sum[0] == 5.0


def test_invisible_view_is_ignored():
    s = DensifyStats.zeros(2)
    record_view(s, 1, (1.0, 0.0), 0.5, visible=False)
    assert s.view_count.sum() == 0


def test_negative_weight_rejected():
    with pytest.raises(DensityError):
        record_view(DensifyStats.zeros(1), 0, (1.0, 0.0), -1e-3)
    with pytest.raises(DensityError):
        record_views(DensifyStats.zeros(2), np.ones((2, 2)), np.array([0.1, -0.1]), np.ones(2, bool))


def test_zero_total_weight_keeps():
    s = stats_from([(5.0, 0.0), (7.0, 0.0)])
    assert math.isnan(criterion_values(s, "opacity_weighted")[0])
    d = densify_decision(s, np.array([1.0]), DensifyConfig(mode="opacity_weighted"), 1.0)
    assert d[0] == KEEP


def test_unseen_gaussian_keeps():
    s = DensifyStats.zeros(3)
    for mode in ("baseline", "opacity_weighted"):
        assert (densify_decision(s, np.ones(3), DensifyConfig(mode=mode), 1.0) == KEEP).all()


views_st = st.lists(st.tuples(st.floats(0, 10), st.floats(1e-3, 1)), min_size=1, max_size=12)


@given(views_st, st.floats(0.05, 1.0))
def test_equal_weights_reduce_to_baseline(views, t):
    s = stats_from([(g, t) for g, _ in views])
    a = criterion_values(s, "baseline")[0]
    b = criterion_values(s, "opacity_weighted")[0]
    assert b == pytest.approx(a, rel=1e-12, abs=1e-300)


@given(views_st, st.floats(0.01, 100))
def test_weight_scale_invariance(views, c):
    a = criterion_values(stats_from(views), "opacity_weighted")[0]
    b = criterion_values(stats_from([(g, c * t) for g, t in views]), "opacity_weighted")[0]
    assert b == pytest.approx(a, rel=1e-10, abs=1e-300)


@given(views_st, st.floats(0, 1))
def test_one_view_is_baseline(views, t):
    g = views[0][0]
    s = stats_from([(g, max(t, 1e-3))])
    assert criterion_values(s, "opacity_weighted")[0] == pytest.approx(g)
    assert criterion_values(s, "baseline")[0] == pytest.approx(g)


def test_monotone_in_weight_of_largest_gradient():
    base = [(0.1, 0.5), (0.9, 0.5), (0.4, 0.5)]
    prev = criterion_values(stats_from(base), "opacity_weighted")[0]
    for t in (0.6, 0.8, 1.0, 2.0):
        cur = criterion_values(stats_from([base[0], (0.9, t), base[2]]), "opacity_weighted")[0]
        assert cur > prev
        prev = cur


def test_decisions_match_brute_force_oracle():
    rng = np.random.default_rng(7)
    for _ in range(500):
        n_views = int(rng.integers(1, 8))
        grads = rng.exponential(0.0003, n_views)
        ts = rng.uniform(0, 1, n_views) * (rng.uniform() > 0.05)
        scale = rng.uniform(0, 0.03)
        extent = rng.uniform(0.5, 2.0)
        mode = ("baseline", "opacity_weighted")[int(rng.integers(2))]
        cfg = DensifyConfig(tau_pos=rng.uniform(1e-4, 4e-4), mode=mode)

        s = DensifyStats.zeros(1)
        for g, t in zip(grads, ts):
            record_view(s, 0, (g, 0.0), t)
        got = densify_decision(s, np.array([scale]), cfg, extent)[0]

        if mode == "baseline":
            value = sum(grads) / n_views
        else:
            tot = sum(ts)
            value = sum(t * g for g, t in zip(grads, ts)) / tot if tot > 0 else None
        if value is None or not value > cfg.tau_pos:
            want = KEEP
        elif scale > cfg.scale_split_fraction * extent:
            want = SPLIT
        else:
            want = CLONE
        assert got == want


def test_vectorized_matches_scalar(rng):
    a, b = DensifyStats.zeros(20), DensifyStats.zeros(20)
    for _ in range(5):
        g = rng.normal(size=(20, 2))
        t = rng.uniform(size=20)
        vis = rng.uniform(size=20) > 0.3
        record_views(a, g, t, vis)
        for i in range(20):
            record_view(b, i, g[i], t[i], bool(vis[i]))
    for field in ("grad_norm_sum", "weighted_grad_sum", "transmittance_sum", "view_count"):
        np.testing.assert_allclose(getattr(a, field), getattr(b, field), rtol=1e-14)


# -- clone / split --------------------------------------------------------


def test_densify_size_bookkeeping(rng):
    cloud = random_cloud(rng, n=12)
    d = np.array([KEEP, CLONE, SPLIT, KEEP, SPLIT, CLONE, CLONE, KEEP, KEEP, SPLIT, KEEP, KEEP])
    res = apply_densify(cloud, d, np.random.default_rng(0))
    assert (res.n_clone, res.n_split) == (3, 3)
    assert len(res.cloud) == 12 + 3 + 3
    survivors = np.flatnonzero(d != SPLIT)
    np.testing.assert_array_equal(res.origin[: len(survivors)], survivors)
    assert (res.origin[len(survivors):] == -1).all()
    np.testing.assert_array_equal(res.cloud.means[: len(survivors)], cloud.means[survivors])


def test_all_keep_is_noop(rng):
    cloud = random_cloud(rng, n=4)
    res = apply_densify(cloud, np.zeros(4, int), np.random.default_rng(0))
    assert res.cloud is cloud and res.n_clone == res.n_split == 0


def test_split_children(rng):
    cloud = random_cloud(rng, n=3)
    res = apply_densify(cloud, np.array([KEEP, SPLIT, KEEP]), np.random.default_rng(1))
    kids = res.cloud.select(np.arange(2, 4))
    np.testing.assert_allclose(kids.log_scales, cloud.log_scales[[1, 1]] - math.log(SPLIT_SCALE_DIVISOR))
    np.testing.assert_array_equal(kids.sh, cloud.sh[[1, 1]])
    np.testing.assert_array_equal(kids.opacity_logits, cloud.opacity_logits[[1, 1]])


def test_split_samples_follow_parent_density():
    one = random_cloud(np.random.default_rng(3), n=1)
    many = one.select(np.zeros(4000, dtype=int))
    res = apply_densify(many, np.full(4000, SPLIT), np.random.default_rng(5))
    from splatfit.scene import activate

    cov = activate(one).covariances[0]
    samples = res.cloud.means - one.means[0]
    np.testing.assert_allclose(samples.mean(0), 0, atol=4 * math.sqrt(cov.diagonal().max() / 8000))
    np.testing.assert_allclose(np.cov(samples.T), cov, rtol=0.1, atol=0.05 * np.abs(cov).max())


def test_clone_offset_applied(rng):
    cloud = random_cloud(rng, n=3)
    off = rng.normal(size=(3, 3))
    res = apply_densify(cloud, np.array([CLONE, KEEP, CLONE]), np.random.default_rng(0), clone_offset=off)
    np.testing.assert_allclose(res.cloud.means[3:], cloud.means[[0, 2]] + off[[0, 2]])


def test_densify_deterministic(rng):
    cloud = random_cloud(rng, n=8)
    d = np.array([SPLIT, CLONE] * 4)
    a = apply_densify(cloud, d, np.random.default_rng(11)).cloud
    b = apply_densify(cloud, d, np.random.default_rng(11)).cloud
    assert a.to_records().tobytes() == b.to_records().tobytes()


def test_misaligned_decisions_rejected(rng):
    with pytest.raises(DensityError):
        apply_densify(random_cloud(rng, n=3), np.zeros(4, int), np.random.default_rng(0))


# -- prune / reset --------------------------------------------------------


def test_prune_low_opacity(rng):
    cloud = random_cloud(rng, n=5)
    cloud.opacity_logits[[1, 3]] = logit(0.001)
    out, kept, reset = prune_and_reset(cloud, 100, DensifyConfig(), 1.0)
    np.testing.assert_array_equal(kept, [0, 2, 4])
    assert len(out) == 3 and not reset


def test_world_size_prune_waits_for_first_reset(rng):
    cloud = random_cloud(rng, n=4)
    cloud.log_scales[2] = math.log(2.0)
    cfg = DensifyConfig(opacity_reset_interval=3000)
    _, kept, _ = prune_and_reset(cloud.copy(), 1000, cfg, 10.0)
    assert 2 in kept
    _, kept, _ = prune_and_reset(cloud.copy(), 3100, cfg, 10.0)
    np.testing.assert_array_equal(kept, [0, 1, 3])


def test_opacity_reset_on_cadence(rng):
    cloud = random_cloud(rng, n=6)
    cloud.opacity_logits[:3] = logit(0.9)
    cloud.opacity_logits[3:] = logit(0.006)
    out, _, reset = prune_and_reset(cloud, 3000, DensifyConfig(), 10.0)
    assert reset
    op = sigmoid(out.opacity_logits)
    np.testing.assert_allclose(op[:3], RESET_OPACITY)
    np.testing.assert_allclose(op[3:], 0.006)


def test_prune_everything_is_error(rng):
    cloud = random_cloud(rng, n=2)
    with pytest.raises(DensityError):
        prune(cloud, np.ones(2, bool))


def test_config_validation():
    with pytest.raises(ValueError):
        DensifyConfig(tau_pos=0)
    with pytest.raises(ValueError):
        DensifyConfig(mode="other")
    with pytest.raises(ValueError):
        DensifyConfig(start_iter=10, stop_iter=5)
