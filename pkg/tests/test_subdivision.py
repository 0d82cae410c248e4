import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxdiff.denoiser import OracleDenoiser
from voxdiff.grid import SemanticGrid, new_grid
from voxdiff.pyramid import (
    GenerateOptions,
    PyramidModels,
    ScenePyramid,
    downsample,
    generate,
    saf_upsample_labels,
)
from voxdiff.schedule import default_schedule
from voxdiff.subdivision import (
    Tile,
    TileLayout,
    canvas_layout,
    fuse,
    generate_infinite,
    generate_subdivided,
    make_layout,
    overlap_condition,
    split,
    tile_size,
)


def _random_grid(rng, dims, K):
    return SemanticGrid(rng.integers(0, K, size=dims), K)


def test_tile_dims_at_full_scale():
    layout = make_layout((256, 256, 16), 2, 2, 0.0625)
    assert all(t.dims == (136, 136, 16) for t in layout.tiles)
    assert tile_size(256, 2, 0.0625) == 136
    origins = sorted(t.origin for t in layout.tiles)
    assert origins == [(0, 0, 0), (0, 120, 0), (120, 0, 0), (120, 120, 0)]


def test_split_full_scale_crops():
    g = new_grid((256, 256, 16), 11, 0)
    parts = split(g, make_layout(g.dims))
    assert [p.dims for p in parts] == [(136, 136, 16)] * 4


def test_zero_overlap_gives_quadrants():
    layout = make_layout((8, 6, 2), 2, 2, 0.0)
    assert [t.origin for t in layout.tiles] == [(0, 0, 0), (0, 3, 0), (4, 0, 0), (4, 3, 0)]
    assert all(t.dims == (4, 3, 2) for t in layout.tiles)
    for i in range(4):
        assert not layout.predecessor_mask(i).any()


def test_layout_rejects_gaps():
    with pytest.raises(ValueError):
        TileLayout((4, 4, 1), (Tile((0, 0, 0), (2, 4, 1)),))
    with pytest.raises(ValueError):
        TileLayout((4, 4, 1), (Tile((3, 0, 0), (2, 4, 1)),))


def test_overlap_mask_only_inside_intersection():
    layout = make_layout((16, 16, 2), 2, 2, 0.25)  # tiles of 10, origins 0 and 6
    m = layout.overlap_mask(1, 0)  # tile 1 at (0, 6) vs tile 0 at (0, 0)
    assert m[:, :4].all() and not m[:, 4:].any()
    m = layout.overlap_mask(3, 0)  # diagonal neighbours share a 4x4 column
    assert m[:4, :4].all() and m.sum() == 4 * 4 * 2
    assert not layout.overlap_mask(0, 0).any()


def test_split_fuse_identity_many_scenes():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        delta = (0.0, 0.0625, 0.125)[trial % 3]
        dims = (int(rng.integers(2, 17)), int(rng.integers(2, 17)), int(rng.integers(1, 4)))
        K = int(rng.integers(2, 12))
        g = _random_grid(rng, dims, K)
        layout = make_layout(dims, 2, 2, delta)
        assert fuse(split(g, layout), layout) == g


@settings(max_examples=60, deadline=None)
@given(
    h=st.integers(1, 20), w=st.integers(1, 20), d=st.integers(1, 3),
    rows=st.integers(1, 3), cols=st.integers(1, 3),
    delta=st.sampled_from([0.0, 0.0625, 0.125, 0.3]),
    seed=st.integers(0, 2**31),
)
def test_split_fuse_identity_property(h, w, d, rows, cols, delta, seed):
    rows, cols = min(rows, h), min(cols, w)
    g = _random_grid(np.random.default_rng(seed), (h, w, d), 5)
    layout = make_layout((h, w, d), rows, cols, delta)
    assert fuse(split(g, layout), layout) == g


def test_fuse_unanimous_and_tie_break():
    layout = make_layout((4, 2, 1), 2, 1, 0.5)  # tiles of 3 rows at x=0 and x=1
    a = SemanticGrid(np.full((3, 2, 1), 1), 3)
    b = SemanticGrid(np.full((3, 2, 1), 2), 3)
    out = fuse([a, b], layout)
    assert (out.labels[0] == 1).all() and (out.labels[3] == 2).all()
    assert (out.labels[1:3] == 1).all()  # two-way tie goes to tile 0
    out = fuse([b, a], layout)
    assert (out.labels[1:3] == 2).all()
    assert fuse([a, a], layout) == SemanticGrid(np.full((4, 2, 1), 1), 3)


def test_fuse_majority_beats_order():
    layout = TileLayout((2, 1, 1), tuple(Tile((0, 0, 0), (2, 1, 1)) for _ in range(3)))
    tiles = [SemanticGrid(np.array([[[v]], [[0]]]), 4) for v in (1, 3, 3)]
    assert fuse(tiles, layout).labels[0, 0, 0] == 3


def test_fuse_is_order_stable_without_ties():
    rng = np.random.default_rng(3)
    g = _random_grid(rng, (10, 10, 2), 4)
    layout = make_layout(g.dims, 2, 2, 0.2)
    parts = split(g, layout)
    assert fuse(parts, layout) == fuse(parts, layout)


def test_fuse_rejects_bad_dims():
    layout = make_layout((4, 4, 1), 2, 2, 0.0)
    with pytest.raises(ValueError):
        fuse([new_grid((3, 2, 1), 2)] * 4, layout)
    with pytest.raises(ValueError):
        fuse([new_grid((2, 2, 1), 2)] * 3, layout)
    with pytest.raises(ValueError):
        split(new_grid((4, 5, 1), 2), layout)


def test_overlap_condition_contents():
    K = 3
    layout = make_layout((8, 8, 1), 2, 2, 0.25)  # tiles of 5, origins 0 and 3
    rng = np.random.default_rng(4)
    done = [rng.integers(0, K, size=(5, 5, 1)) for _ in range(3)]
    first = overlap_condition([], layout, 0, K)
    assert np.all(first == 1.0 / K)
    cond = overlap_condition(done[:1], layout, 1, K)  # tile 1 sits at (0, 3)
    np.testing.assert_array_equal(cond[:, :, :2], np.moveaxis(np.eye(K)[done[0][:, 3:]], -1, 0))
    assert np.all(cond[:, :, 2:] == 1.0 / K)
    np.testing.assert_allclose(cond.sum(axis=0), 1.0)


def _subdivision_setup(seed=5, dims=(8, 8, 2), K=4, delta=0.25):
    rng = np.random.default_rng(seed)
    truth = _random_grid(rng, dims, K)
    coarse = downsample(truth, (dims[0] // 2, dims[1] // 2, dims[2] // 2))
    layout = make_layout(dims, 2, 2, delta)
    model = OracleDenoiser(truth, condition_channels=2 * K)
    return truth, coarse, layout, model


def test_generate_subdivided_oracle_reproduces_scene():
    truth, coarse, layout, model = _subdivision_setup()
    out = generate_subdivided(model, default_schedule(6), coarse, layout, seed=3, deterministic=True)
    assert out == truth
    out = generate_subdivided(model, default_schedule(6), coarse, layout, seed=3)
    assert out == truth  # the oracle is sharp enough to survive sampling


def test_generate_subdivided_condition_assembly():
    truth, coarse, layout, model = _subdivision_setup(seed=6)
    K = truth.num_classes
    seen = []
    conds = []

    class Spy(OracleDenoiser):
        def predict(self, inp):
            conds.append(inp.condition[0].copy())
            return super().predict(inp)

    spy = Spy(truth, condition_channels=2 * K)
    sched = default_schedule(2)
    out = generate_subdivided(
        spy, sched, coarse, layout, seed=0, deterministic=True,
        trace=lambda i, ov, mask: seen.append((i, ov.copy(), mask.copy())),
    )
    assert out == truth
    assert [s[0] for s in seen] == [0, 1, 2, 3]
    assert np.all(seen[0][1] == 1.0 / K) and not seen[0][2].any()
    saf = saf_upsample_labels(coarse.labels, K, truth.dims)
    for i, ov, mask in seen:
        tile = layout.tiles[i]
        local = truth.labels[tile.slices()]
        onehot = np.moveaxis(np.eye(K)[local], -1, 0)
        np.testing.assert_array_equal(ov[:, mask], onehot[:, mask])
        assert np.all(ov[:, ~mask] == 1.0 / K)
        # both reverse steps of tile i see SAF crop followed by the overlap channels
        for step in range(sched.T):
            c = conds[i * sched.T + step]
            np.testing.assert_array_equal(c[:K], saf[(slice(None),) + tile.slices()])
            np.testing.assert_array_equal(c[K:], ov)


def test_generate_subdivided_errors():
    truth, coarse, layout, model = _subdivision_setup()
    with pytest.raises(ValueError):
        generate_subdivided(OracleDenoiser(truth, condition_channels=4), default_schedule(2), coarse, layout, 0)
    with pytest.raises(ValueError):
        generate_subdivided(model, default_schedule(2), None, layout, 0)
    with pytest.raises(ValueError):
        bad = np.zeros((4, 6, 6, 2))
        generate_subdivided(model, default_schedule(2), None, layout, 0, condition=bad)


def test_pyramid_generate_routes_through_subdivision():
    truth, coarse, layout, fine = _subdivision_setup(seed=7)
    p = ScenePyramid([coarse.dims, truth.dims])
    models = PyramidModels([OracleDenoiser(coarse), fine])
    out = generate(models, p, default_schedule(4), 1, GenerateOptions(deterministic=True, layout=layout))
    assert out == truth


def test_stochastic_subdivision_is_reproducible():
    rng = np.random.default_rng(8)
    K = 3
    truth = _random_grid(rng, (6, 6, 1), K)

    class Weak(OracleDenoiser):
        def predict(self, inp):
            return super().predict(inp) * 0.03

    model = Weak(truth, condition_channels=K)
    layout = make_layout(truth.dims, 2, 2, 1 / 3)
    a = generate_subdivided(model, default_schedule(5), None, layout, seed=11)
    b = generate_subdivided(model, default_schedule(5), None, layout, seed=11)
    c = generate_subdivided(model, default_schedule(5), None, layout, seed=12)
    assert a == b and a != c


# -- infinite scenes --------------------------------------------------------------


def test_canvas_layout_geometry():
    layout = canvas_layout((8, 8, 2), (2, 3), 0.25)
    assert layout.parent_dims == (14, 20, 2)
    assert [t.origin for t in layout.tiles][:4] == [(0, 0, 0), (0, 6, 0), (0, 12, 0), (6, 0, 0)]
    with pytest.raises(ValueError):
        canvas_layout((8, 8, 2), (1, 1), 0.1)  # 0.8 voxel strip
    with pytest.raises(ValueError):
        canvas_layout((8, 8, 2), (0, 1), 0.25)


def _periodic_models(K=3, period=4, seed=9):
    rng = np.random.default_rng(seed)
    motif = rng.integers(0, K, size=(period, period, 2))
    fine = SemanticGrid(np.tile(motif, (2, 2, 1)), K)  # period-aligned 8x8x2 canvas
    coarse = downsample(fine, (4, 4, 1))
    p = ScenePyramid([(4, 4, 1), (8, 8, 2)])
    models = PyramidModels([
        OracleDenoiser(coarse, condition_channels=K, periodic=True),
        OracleDenoiser(fine, condition_channels=2 * K, periodic=True),
    ])
    return p, models, fine, coarse


def test_infinite_one_tile_matches_generate():
    p, models, fine, coarse = _periodic_models()
    K = fine.num_classes
    out = generate_infinite(models, p, default_schedule(4), (1, 1), seed=2, overlap_ratio=0.25, deterministic=True)
    plain = PyramidModels([OracleDenoiser(coarse), OracleDenoiser(fine, condition_channels=K)])
    ref = generate(plain, p, default_schedule(4), 2, GenerateOptions(deterministic=True))
    assert out == ref == fine


def test_infinite_periodic_tiling():
    p, models, fine, coarse = _periodic_models()
    levels = generate_infinite(
        models, p, default_schedule(4), (2, 2), seed=3, overlap_ratio=0.5, keep_intermediates=True
    )
    assert levels[0].dims == (6, 6, 1) and levels[1].dims == (12, 12, 2)
    h, w, d = levels[1].dims
    expect = fine.labels[np.ix_(np.arange(h) % 8, np.arange(w) % 8, np.arange(d))]
    np.testing.assert_array_equal(levels[1].labels, expect)
    expect = coarse.labels[np.ix_(np.arange(6) % 4, np.arange(6) % 4, [0])]
    np.testing.assert_array_equal(levels[0].labels, expect)


def test_infinite_west_strip_matches_east_strip():
    p, models, fine, coarse = _periodic_models(seed=10)
    K = fine.num_classes
    record = {}
    tiles = {}

    class Recorder(OracleDenoiser):
        def predict(self, inp):
            out = super().predict(inp)
            tiles[(self.level, tuple(inp.origin[0]))] = out.argmax(axis=1)[0]
            return out

    rec = []
    for level, m in enumerate(models.models, start=1):
        r = Recorder(m.truth, m.condition_channels, periodic=True)
        r.level = level
        rec.append(r)
    generate_infinite(
        PyramidModels(rec), p, default_schedule(3), (1, 2), seed=4, overlap_ratio=0.25, deterministic=True,
        trace=lambda level, i, ov, mask: record.__setitem__((level, i), (ov.copy(), mask.copy())),
    )
    for level, (tw, strip) in ((1, (4, 1)), (2, (8, 2))):
        ov, mask = record[(level, 1)]
        east = tiles[(level, (0, 0, 0))][:, tw - strip:]
        np.testing.assert_array_equal(ov[:, :, :strip], np.moveaxis(np.eye(K)[east], -1, 0))
        assert mask[:, :strip].all() and not mask[:, strip:].any()
        ov0, mask0 = record[(level, 0)]
        assert np.all(ov0 == 1.0 / K) and not mask0.any()


def test_infinite_boundary_contract_with_noisy_model():
    """Every conditioned strip equals the neighbour's generated labels bit for bit."""
    K = 3
    rng = np.random.default_rng(12)
    canvas = SemanticGrid(rng.integers(0, K, size=(16, 16, 2)), K)

    class Soft(OracleDenoiser):
        def predict(self, inp):
            return super().predict(inp) * 0.2

    p = ScenePyramid([(4, 4, 1), (8, 8, 2)])
    models = PyramidModels([
        Soft(downsample(canvas, (8, 8, 1)), condition_channels=K, periodic=True),
        Soft(canvas, condition_channels=2 * K, periodic=True),
    ])
    seen = {}
    levels = generate_infinite(
        models, p, default_schedule(4), (2, 2), seed=5, overlap_ratio=0.25, keep_intermediates=True,
        trace=lambda level, i, ov, mask: seen.__setitem__((level, i), (ov.copy(), mask.copy())),
    )
    for level, scale in enumerate(p.scales, start=1):
        layout = canvas_layout(scale.dims, (2, 2), 0.25)
        final = levels[level - 1].labels
        for i, tile in enumerate(layout.tiles):
            ov, mask = seen[(level, i)]
            assert mask.any() == (i > 0)
            known = np.moveaxis(ov, 0, -1)[mask]
            assert np.all(known.max(axis=-1) == 1.0)
            assert np.all(ov[:, ~mask] == 1.0 / K)
        # the fused canvas keeps the earliest tile's label on every tie, so strips
        # seen by tile 1 agree with the final canvas where only tiles 0 and 1 overlap
        ov, mask = seen[(level, 1)]
        t1 = layout.tiles[1]
        sl = t1.slices()
        only01 = mask & ~layout.overlap_mask(1, 2) & ~layout.overlap_mask(1, 3)
        np.testing.assert_array_equal(np.argmax(ov, axis=0)[only01], final[sl][only01])
