import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxlift import numerics as nx
from voxlift.depthnet import DepthBins
from voxlift.geometry import project_point
from voxlift.lifting import (CHUNK, Aggregator, GeometryContextLifting, LiftedFeatureField, LiftingConfig,
                             aggregate_point, inter_view_fuse, intra_view_aggregate, sample_lifted)
from voxlift.numerics import ParameterStore, finite_diff_gradcheck


BINS = DepthBins(0.5, 5.0, 6)


def random_field(rng, h, w, D, C, view=None):
    depth = rng.random((h, w, D))
    depth /= depth.sum(-1, keepdims=True)
    return LiftedFeatureField(rng.standard_normal((h, w, C)), depth, view)


def randomized_store(lifting, seed=0, scale=0.3):
    """A store whose zero-initialized generators are replaced by random values."""
    store = ParameterStore(seed=seed)
    lifting.init_params(store)
    rng = np.random.default_rng(seed + 100)
    for name in store.names():
        if ".offset." in name or ".attn." in name:
            store.set(name, store[name].data + scale * rng.standard_normal(store[name].shape))
    return store


def test_lazy_lift_matches_materialized_field(rng):
    worst = 0.0
    for _ in range(50):
        h, w, D, C = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 7), rng.integers(1, 5)
        field = random_field(rng, h, w, D, C)
        coords = rng.uniform(-0.5, 1.0, (20, 3)) * np.array([w, h, D])
        lazy = sample_lifted(field, coords).data
        dense = nx.trilinear_sample(field.materialize(), coords).data
        worst = max(worst, float(np.abs(lazy - dense).max()))
    assert worst <= 1e-12


def test_sample_lifted_single_point(rng):
    field = random_field(rng, 4, 5, 3, 2)
    # at an integer lattice point the sample is feature times depth probability
    out = sample_lifted(field, np.array([2.0, 1.0, 2.0])).data
    np.testing.assert_allclose(out, field.feat2d.data[1, 2] * field.depth.data[1, 2, 2], atol=1e-15)


def test_sample_lifted_gradients(rng):
    field = random_field(rng, 3, 4, 3, 2)
    coords = np.array([[0.3, 1.6, 0.4], [2.7, 0.2, 1.5]])

    def op(f, d, c):
        return sample_lifted(LiftedFeatureField(f, d, None), c)

    assert finite_diff_gradcheck(op, [field.feat2d.data, field.depth.data, coords]) < 1e-4


def test_field_shape_mismatch():
    with pytest.raises(ValueError):
        LiftedFeatureField(np.zeros((2, 3, 4)), np.zeros((3, 3, 2)), None)


@pytest.mark.parametrize("mode,heads", [("deform3d", 1), ("deform3d", 2), ("deform2d", 1), ("single", 1)])
def test_intra_view_gradients(mode, heads, rng):
    lifting = GeometryContextLifting(LiftingConfig(4, points=3, heads=heads, mode=mode))
    store = randomized_store(lifting, scale=0.1)
    names = store.names()
    field = random_field(rng, 4, 5, 4, 4)
    base = np.array([1.4, 2.3, 1.6])

    def op(f, d, *params):
        local = ParameterStore()
        for n, p in zip(names, params):
            local.params[n] = p
        return intra_view_aggregate(LiftedFeatureField(f, d, None), base, local, lifting)

    err = finite_diff_gradcheck(op, [field.feat2d.data, field.depth.data] + [store[n].data for n in names])
    assert err < 1e-4


def test_zero_generators_give_stencil_average(rng):
    lifting = GeometryContextLifting(LiftingConfig(3, points=4))
    store = ParameterStore(seed=1)
    field = random_field(rng, 5, 6, 4, 3)
    base = np.array([2.2, 2.5, 1.3])
    out = intra_view_aggregate(field, base, store, lifting).data
    # zero weights: offsets equal the +-1 pixel stencil, attention is uniform
    stencil = base + np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]])
    pooled = sample_lifted(field, stencil).data.mean(0)
    np.testing.assert_allclose(out, store["lift.value.w"].data @ pooled, atol=1e-13)


def test_deform2d_ignores_depth_offsets(rng):
    lifting = GeometryContextLifting(LiftingConfig(3, points=2, mode="deform2d"))
    store = randomized_store(lifting)
    field = random_field(rng, 5, 6, 4, 3)
    base = np.array([2.2, 2.5, 1.3])
    a = intra_view_aggregate(field, base, store, lifting).data
    b_ = store["lift.offset.b"].data.copy()
    b_[2::3] += 0.7
    store.set("lift.offset.b", b_)
    assert np.array_equal(a, intra_view_aggregate(field, base, store, lifting).data)


def test_single_mode_is_plain_sample(rng):
    lifting = GeometryContextLifting(LiftingConfig(3, mode="single"))
    field = random_field(rng, 5, 6, 4, 3)
    base = np.array([2.2, 2.5, 1.3])
    out = intra_view_aggregate(field, base, ParameterStore(), lifting).data
    np.testing.assert_allclose(out, sample_lifted(field, base).data, atol=0)


def test_intra_rejects_invalid_point(rng):
    from voxlift.geometry import PixelSpacePoint
    lifting = GeometryContextLifting(LiftingConfig(3))
    with pytest.raises(ValueError):
        intra_view_aggregate(random_field(rng, 3, 3, 3, 3), PixelSpacePoint(0, 0, 0, False), ParameterStore(),
                             lifting)


def test_inter_view_gradients(rng):
    lifting = GeometryContextLifting(LiftingConfig(4))
    store = ParameterStore(seed=3)
    lifting.init_params(store)
    names = [n for n in store.names() if ".fuse." in n]

    def op(a, b, c, *params):
        local = ParameterStore()
        lifting.init_params(local)
        for n, p in zip(names, params):
            local.params[n] = p
        return inter_view_fuse([a, b, c], local, lifting)

    feats = [rng.standard_normal(4) for _ in range(3)]
    assert finite_diff_gradcheck(op, feats + [store[n].data for n in names]) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(0, 1000))
def test_inter_view_is_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    lifting = GeometryContextLifting(LiftingConfig(3))
    store = ParameterStore(seed=seed)
    feats = [rng.standard_normal(3) for _ in range(n)]
    ref = inter_view_fuse(feats, store, lifting).data
    for perm in itertools.islice(itertools.permutations(range(n)), 6):
        assert np.array_equal(inter_view_fuse([feats[i] for i in perm], store, lifting).data, ref)


def test_inter_view_edge_cases(rng):
    lifting = GeometryContextLifting(LiftingConfig(3))
    store = ParameterStore(seed=0)
    assert np.array_equal(inter_view_fuse([], store, lifting).data, np.zeros(3))
    f = rng.standard_normal(3)
    np.testing.assert_allclose(inter_view_fuse([f], store, lifting).data, store["lift.fuse.v.w"].data @ f,
                               atol=1e-14)
    plain = GeometryContextLifting(LiftingConfig(3, view_attention=False))
    g = rng.standard_normal(3)
    np.testing.assert_allclose(inter_view_fuse([f, g], store, plain).data, (f + g) / 2, atol=1e-15)


def test_lifting_config_validation():
    with pytest.raises(ValueError):
        LiftingConfig(4, mode="bogus")
    with pytest.raises(ValueError):
        LiftingConfig(5, heads=2)


# -- batched aggregation -----------------------------------------------------------

def _scene_fields(rng, views, C=4):
    feats = [rng.standard_normal((12, 16, C)) for _ in views]
    depths = []
    for _ in views:
        d = rng.random((12, 16, BINS.D))
        depths.append(d / d.sum(-1, keepdims=True))
    return feats, depths


def test_batched_aggregation_matches_per_point_loop(rng, views):
    feats, depths = _scene_fields(rng, views)
    lifting = GeometryContextLifting(LiftingConfig(4, points=3, heads=2))
    store = randomized_store(lifting, seed=4)
    points = rng.uniform([-2, -2, 0], [2, 2, 1.6], (25, 3))
    points[0] = [40.0, 40.0, 40.0]  # seen by no camera
    agg = Aggregator(feats, depths, views, BINS, store, lifting)
    batched = agg(points).data
    assert np.all(batched[0] == 0)

    fields = [LiftedFeatureField(f, d, v) for f, d, v in zip(feats, depths, views)]
    for p, row in zip(points[1:], batched[1:]):
        per_view = []
        for fld in fields:
            pp = project_point(p, fld.view)
            h, w = fld.view.feature_size
            if pp.valid and 0 <= pp.u <= w - 1 and 0 <= pp.v <= h - 1 and BINS.d_min <= pp.d <= BINS.d_max:
                per_view.append(intra_view_aggregate(fld, pp, store, lifting, bins=BINS))
        np.testing.assert_allclose(row, inter_view_fuse(per_view, store, lifting).data, atol=1e-12)
        np.testing.assert_allclose(aggregate_point(p, fields, store, lifting, BINS).data, row, atol=1e-12)


def test_counts_are_exact(rng, views):
    feats, depths = _scene_fields(rng, views)
    lifting = GeometryContextLifting(LiftingConfig(4, points=4))
    agg = Aggregator(feats, depths, views, BINS, ParameterStore(), lifting)
    pts = rng.uniform([-2, -2, 0], [2, 2, 1.6], (30, 3))
    agg(pts, stage="a")
    c = agg.counts["a"]
    assert c.points == 30
    assert c.deform_samples == 4 * c.view_pairs
    assert c.corner_fetches == 8 * c.view_pairs * 5
    assert 0 < c.view_pairs <= 30 * len(views)


def test_result_independent_of_threads(rng, views):
    feats, depths = _scene_fields(rng, views)
    lifting = GeometryContextLifting(LiftingConfig(4))
    store = randomized_store(lifting)
    pts = rng.uniform([-2, -2, 0], [2, 2, 1.6], (2 * CHUNK + 17, 3))
    outs, counts = [], []
    for threads in (1, 3):
        agg = Aggregator(feats, depths, views, BINS, store, lifting, threads=threads)
        with nx.no_grad():
            outs.append(agg(pts).data)
        counts.append(agg.total_counts().as_dict())
    assert np.array_equal(outs[0], outs[1])
    assert counts[0] == counts[1]
    # and equal to the graph-recording single pass
    agg = Aggregator(feats, depths, views, BINS, store, lifting)
    np.testing.assert_allclose(agg(pts).data, outs[0], atol=1e-12)


def test_aggregator_channel_check(rng, views):
    feats, depths = _scene_fields(rng, views, C=4)
    with pytest.raises(ValueError):
        Aggregator(feats, depths, views, BINS, ParameterStore(), GeometryContextLifting(LiftingConfig(6)))
