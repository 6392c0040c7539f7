import math

import numpy as np
import pytest

from cpalign.featurizer import (
    BevSpec,
    MultiScaleFeatures,
    backbone_forward,
    bev_project,
    box_footprint_mask,
    boxes_to_aabbs,
    default_backbone_weights,
    default_bevproj_weights,
    pillar_encode,
)
from cpalign.numerics import ShapeError
from cpalign.pointcloud import OrientedBox


def pillar_oracle(cloud, spec):
    """Per-cell statistics via plain python dict accumulation."""
    h, w = spec.height, spec.width
    cells = {}
    for x, y, z, inten in cloud:
        c = math.floor((x - spec.origin_x) / spec.cell)
        r = math.floor((y - spec.origin_y) / spec.cell)
        if not (0 <= r < h and 0 <= c < w):
            continue
        ccx = spec.origin_x + (c + 0.5) * spec.cell
        ccy = spec.origin_y + (r + 0.5) * spec.cell
        cells.setdefault((r, c), []).append(
            (z, inten, math.hypot(x - ccx, y - ccy)))
    out = np.zeros((8, h, w))
    for (r, c), vals in cells.items():
        zs = [v[0] for v in vals]
        out[:, r, c] = [
            1.0,
            math.log1p(len(vals)),
            sum(zs) / len(vals),
            max(zs),
            min(zs),
            max(zs) - min(zs),
            sum(v[1] for v in vals) / len(vals),
            sum(v[2] for v in vals) / len(vals),
        ]
    return out


def test_pillar_encode_matches_oracle():
    rng = np.random.default_rng(21)
    spec = BevSpec.centered(8.0, 6.4, cell=0.4)
    cloud = np.empty((300, 4))
    cloud[:, 0] = rng.uniform(-5, 5, 300)   # some points out of range
    cloud[:, 1] = rng.uniform(-4, 4, 300)
    cloud[:, 2] = rng.normal(size=300)
    cloud[:, 3] = rng.uniform(size=300)
    got = pillar_encode(cloud, spec)
    np.testing.assert_allclose(got, pillar_oracle(cloud, spec), rtol=1e-12, atol=1e-12)


def test_pillar_encode_empty_and_out_of_range():
    spec = BevSpec.centered(3.2, 3.2, cell=0.4)
    assert pillar_encode(np.empty((0, 4)), spec).sum() == 0.0
    far = np.array([[100.0, 0.0, 1.0, 0.5]])
    assert pillar_encode(far, spec).sum() == 0.0
    # a point exactly on the max edge falls outside
    edge = np.array([[1.6, 0.0, 1.0, 0.5]])
    assert pillar_encode(edge, spec).sum() == 0.0
    inner_edge = np.array([[-1.6, 0.0, 1.0, 0.5]])
    enc = pillar_encode(inner_edge, spec)
    assert enc[0].sum() == 1.0 and enc[0, 4, 0] == 1.0


def test_pillar_single_point_channels():
    spec = BevSpec(4.0, 4.0, cell=1.0)
    cloud = np.array([[1.25, 2.25, 3.0, 0.5]])
    enc = pillar_encode(cloud, spec)
    col = enc[:, 2, 1]
    # offset from center (1.5, 2.5) is hypot(0.25, 0.25)
    np.testing.assert_allclose(
        col, [1.0, math.log(2.0), 3.0, 3.0, 3.0, 0.0, 0.5, math.hypot(0.25, 0.25)],
        rtol=1e-12)


def test_bev_spec_validation():
    with pytest.raises(ShapeError):
        BevSpec(4.1, 4.0, cell=0.4)        # non-integral extent
    with pytest.raises(ShapeError):
        BevSpec(2.0, 2.0, cell=1.0)        # 2x2 grid not divisible by 4
    with pytest.raises(ShapeError):
        BevSpec(4.0, 4.0, cell=-1.0)
    spec = BevSpec.centered(19.2, 19.2)
    assert (spec.height, spec.width) == (48, 48)
    assert spec.origin_x == -9.6


def test_backbone_shapes_and_zero_propagation():
    spec = BevSpec(4.8, 3.2, cell=0.4)  # 8 x 12
    ms = backbone_forward(np.zeros((8, spec.height, spec.width)))
    assert ms.large.shape == (64, 8, 12)
    assert ms.middle.shape == (128, 4, 6)
    assert ms.small.shape == (256, 2, 3)
    # zero input with zero bias stays exactly zero at every scale
    assert ms.large.sum() == 0.0 and ms.middle.sum() == 0.0 and ms.small.sum() == 0.0


def test_backbone_deterministic_and_seeded():
    rng = np.random.default_rng(2)
    pillars = rng.normal(size=(8, 8, 8))
    a = backbone_forward(pillars, seed=5)
    b = backbone_forward(pillars, seed=5)
    c = backbone_forward(pillars, seed=6)
    np.testing.assert_array_equal(a.large, b.large)
    assert not np.allclose(a.large, c.large)
    assert (a.large >= 0).all() and (a.small >= 0).all()  # relu outputs


def test_backbone_missing_weights_lists_names():
    w = default_backbone_weights()
    del w["backbone.conv2.weight"], w["backbone.conv3.bias"]
    with pytest.raises(KeyError, match="backbone.conv2.weight"):
        backbone_forward(np.zeros((8, 4, 4)), weights=w)
    with pytest.raises(KeyError, match="backbone.conv3.bias"):
        backbone_forward(np.zeros((8, 4, 4)), weights=w)


def test_backbone_rejects_bad_inputs():
    with pytest.raises(ShapeError):
        backbone_forward(np.zeros((7, 4, 4)))
    with pytest.raises(ShapeError):
        backbone_forward(np.zeros((8, 6, 4)))


def test_bev_project_shape_and_channel_blocks():
    rng = np.random.default_rng(3)
    h, w = 8, 12
    ms = MultiScaleFeatures(rng.normal(size=(64, h, w)),
                            rng.normal(size=(128, h // 2, w // 2)),
                            rng.normal(size=(256, h // 4, w // 4)))
    out = bev_project(ms)
    assert out.shape == (384, h, w)
    # zeroing one scale zeroes exactly its 128-channel block (zero biases)
    ms2 = MultiScaleFeatures(ms.large, np.zeros_like(ms.middle), ms.small)
    out2 = bev_project(ms2)
    np.testing.assert_array_equal(out2[128:256], np.zeros((128, h, w)))
    np.testing.assert_array_equal(out2[:128], out[:128])
    np.testing.assert_array_equal(out2[256:], out[256:])


def test_bev_project_is_linear():
    rng = np.random.default_rng(4)
    h, w = 8, 8

    def rand_ms():
        return MultiScaleFeatures(rng.normal(size=(64, h, w)),
                                  rng.normal(size=(128, h // 2, w // 2)),
                                  rng.normal(size=(256, h // 4, w // 4)))

    a, b = rand_ms(), rand_ms()
    combo = MultiScaleFeatures(2.0 * a.large - 3.0 * b.large,
                               2.0 * a.middle - 3.0 * b.middle,
                               2.0 * a.small - 3.0 * b.small)
    lhs = bev_project(combo)
    rhs = 2.0 * bev_project(a) - 3.0 * bev_project(b)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9)


def test_bev_project_weight_names_roundtrip():
    w = default_bevproj_weights(seed=1)
    del w["bevproj.small.weight"]
    rng = np.random.default_rng(5)
    ms = MultiScaleFeatures(rng.normal(size=(64, 4, 4)),
                            rng.normal(size=(128, 2, 2)),
                            rng.normal(size=(256, 1, 1)))
    with pytest.raises(KeyError, match="bevproj.small.weight"):
        bev_project(ms, weights=w)


def test_multiscale_validation():
    with pytest.raises(ShapeError):
        MultiScaleFeatures(np.zeros((64, 8, 8)), np.zeros((128, 4, 4)),
                           np.zeros((255, 2, 2)))
    with pytest.raises(ShapeError):
        MultiScaleFeatures(np.zeros((64, 8, 8)), np.zeros((128, 5, 4)),
                           np.zeros((256, 2, 2)))


def test_box_footprint_mask_axis_aligned_exact():
    spec = BevSpec.centered(4.0, 4.0, cell=0.5)
    box = OrientedBox(0.0, 0.0, 0.0, 2.0, 1.0, 1.0)
    mask = box_footprint_mask([box], spec)
    rows, cols = np.nonzero(mask)
    # footprint x in [-1, 1], y in [-0.5, 0.5]: centers at +-0.75, +-0.25 (x)
    assert sorted(set(cols)) == [2, 3, 4, 5]
    assert sorted(set(rows)) == [3, 4]
    assert mask.sum() == 8


def test_box_footprint_mask_rotation():
    spec = BevSpec.centered(6.0, 6.0, cell=0.5)
    long_x = box_footprint_mask([OrientedBox(0, 0, 0, 4.0, 1.0, 1.0, yaw=0.0)], spec)
    long_y = box_footprint_mask([OrientedBox(0, 0, 0, 4.0, 1.0, 1.0, yaw=math.pi / 2)], spec)
    np.testing.assert_array_equal(long_y, long_x.T)


def test_boxes_to_aabbs():
    box = OrientedBox(1.0, 2.0, 0.0, 2.0, 2.0, 1.0, yaw=math.pi / 4)
    aabb = boxes_to_aabbs([box])[0]
    r = math.sqrt(2.0)
    np.testing.assert_allclose(aabb, [1 - r, 2 - r, 1 + r, 2 + r], rtol=1e-12)
    assert boxes_to_aabbs([]).shape == (0, 4)
