import math

import numpy as np
import pytest

from cpalign.featurizer import BevSpec
from cpalign.instance_fusion import (
    StructKernels,
    VerificationSpec,
    aggregate_instance,
    channel_shuffle,
    default_aggregate_weights,
    default_fuse_weights,
    default_verification_weights,
    foreground_loss,
    fuse_agents,
    split_foreground,
    struct_conv,
    verification_weights,
    verified_blend,
)
from cpalign.numerics import ShapeError
from cpalign.pointcloud import OrientedBox


def test_split_foreground_partitions_features():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(6, 5, 5))
    m = rng.uniform(size=(1, 5, 5))
    fore, back = split_foreground(h, m)
    np.testing.assert_allclose(fore + back, h, rtol=1e-15)
    np.testing.assert_allclose(fore, h * m, rtol=1e-15)
    with pytest.raises(ShapeError):
        split_foreground(h, m * 2.0)


def test_struct_kernel_invariants():
    rng = np.random.default_rng(1)
    k = StructKernels(rng.normal(size=(8, 3, 3)))
    cs = k.center_surround()
    # center-surround rows sum to zero per channel
    np.testing.assert_allclose(cs.sum(axis=(1, 2)), np.zeros(8), atol=1e-12)
    np.testing.assert_array_equal(cs[:, 0, :], k.base[:, 0, :])
    hor = k.horizontal()
    np.testing.assert_array_equal(hor[:, :, 2], -hor[:, :, 0])
    np.testing.assert_array_equal(hor[:, :, 1], np.zeros((8, 3)))
    ver = k.vertical()
    np.testing.assert_array_equal(ver[:, 2, :], -ver[:, 0, :])
    np.testing.assert_array_equal(ver[:, 1, :], np.zeros((8, 3)))
    ang = k.angular()
    np.testing.assert_array_equal(
        ang, k.base - np.rot90(k.base, k=1, axes=(1, 2)))


def test_struct_conv_fused_equals_separate():
    rng = np.random.default_rng(2)
    k = StructKernels(rng.normal(size=(4, 3, 3)), rng.normal(size=(5, 4)))
    x = rng.normal(size=(4, 9, 9))
    fused = struct_conv(x, k, fused=True)
    separate = struct_conv(x, k, fused=False)
    np.testing.assert_allclose(fused, separate, rtol=1e-10, atol=1e-12)


def test_struct_conv_constant_input_reduces_to_vanilla_response():
    # on constant interior patches the four derived banks cancel exactly,
    # leaving only the vanilla depthwise response
    from cpalign.numerics import ConvSpec, conv2d

    c = 3
    rng = np.random.default_rng(3)
    k = StructKernels(rng.normal(size=(c, 3, 3)))
    x = np.full((c, 8, 8), 2.5)
    out = struct_conv(x, k)
    vanilla = conv2d(x, ConvSpec(c, c, 3, 3, k.base.reshape(c, 1, 3, 3),
                                 padding=1, groups=c))
    interior = np.s_[:, 1:-1, 1:-1]
    np.testing.assert_allclose(out[interior], vanilla[interior],
                               rtol=1e-10, atol=1e-12)


def test_channel_shuffle_roundtrip_and_order():
    x = np.arange(8, dtype=np.float64).reshape(8, 1, 1) * np.ones((8, 2, 2))
    s = channel_shuffle(x, 2)
    # groups (0..3), (4..7) interleave to 0,4,1,5,2,6,3,7
    assert [int(s[i, 0, 0]) for i in range(8)] == [0, 4, 1, 5, 2, 6, 3, 7]
    back = channel_shuffle(s, 4)
    np.testing.assert_array_equal(back, x)
    with pytest.raises(ShapeError):
        channel_shuffle(x, 3)


def test_verification_weights_range_and_zero_case():
    rng = np.random.default_rng(4)
    c = 8
    spec = VerificationSpec.default(c, seed=1)
    fore = rng.normal(size=(c, 6, 6))
    enh = rng.normal(size=(c, 6, 6))
    w = verification_weights(fore, enh, spec)
    assert w.shape == (c, 6, 6)
    assert (w > 0).all() and (w < 1).all()
    zero = {k: np.zeros_like(v) for k, v in default_verification_weights(c).items()}
    wz = verification_weights(fore, enh, VerificationSpec.from_weights(zero))
    np.testing.assert_array_equal(wz, np.full((c, 6, 6), 0.5))


def test_verification_group_independence_before_shuffle():
    # perturbing channels of input group 0 of the grouped conv leaves
    # output groups 1..3 untouched
    rng = np.random.default_rng(5)
    c = 8
    spec = VerificationSpec.default(c, seed=2)
    gc = spec.gconv
    z = rng.normal(size=(4 * c, 5, 5))
    from cpalign.numerics import conv2d
    base = conv2d(z, gc)
    z2 = z.copy()
    z2[:c] += rng.normal(size=(c, 5, 5))
    pert = conv2d(z2, gc)
    og = c // 4
    assert not np.allclose(base[:og], pert[:og])
    np.testing.assert_array_equal(base[og:], pert[og:])


def test_verified_blend_endpoints():
    rng = np.random.default_rng(6)
    fore = rng.normal(size=(4, 3, 3))
    enh = rng.normal(size=(4, 3, 3))
    np.testing.assert_array_equal(verified_blend(np.ones_like(fore), fore, enh), fore)
    np.testing.assert_array_equal(verified_blend(np.zeros_like(fore), fore, enh), enh)
    half = verified_blend(np.full_like(fore, 0.5), fore, enh)
    np.testing.assert_allclose(half, 0.5 * (fore + enh), rtol=1e-15)


def test_aggregate_instance_epsilon_background():
    rng = np.random.default_rng(7)
    c = 4
    fore = rng.normal(size=(c, 5, 5))
    enh = rng.normal(size=(c, 5, 5))
    back = rng.normal(size=(c, 5, 5))
    verif = rng.uniform(0.2, 0.8, size=(c, 5, 5))
    w = default_aggregate_weights(c, seed=3)
    out = aggregate_instance(fore, enh, back, verif, weights=w)
    out_noback = aggregate_instance(fore, enh, np.zeros_like(back), verif, weights=w)
    np.testing.assert_allclose(out - out_noback, 0.1 * back, rtol=1e-10, atol=1e-12)
    # epsilon comes from the stored weight entry
    w2 = dict(w)
    w2["ifam.eps"] = np.array([0.5])
    out2 = aggregate_instance(fore, enh, back, verif, weights=w2)
    np.testing.assert_allclose(out2 - out_noback, 0.5 * back, rtol=1e-10, atol=1e-12)


def test_aggregate_instance_concat_mode():
    rng = np.random.default_rng(8)
    c = 4
    fore, enh, back = rng.normal(size=(3, c, 4, 4))
    verif = rng.uniform(size=(c, 4, 4))
    w = default_aggregate_weights(c, seed=4, combine="concat")
    out = aggregate_instance(fore, enh, back, verif, weights=w, combine="concat")
    assert out.shape == (c, 4, 4)
    with pytest.raises(ShapeError):
        aggregate_instance(fore, enh, back, verif, combine="stack")


def test_fuse_agents_fold_and_identities():
    rng = np.random.default_rng(9)
    c = 6
    w = default_fuse_weights(c, seed=5)
    a, b, d = rng.normal(size=(3, c, 4, 4))
    single = fuse_agents([a], weights=w)
    np.testing.assert_array_equal(single, a)
    fused2 = fuse_agents([a, b], weights=w)
    from cpalign.numerics import ConvSpec, conv2d
    spec = ConvSpec(c, 2 * c, 1, 1, w["ifam.fuse.weight"], bias=w["ifam.fuse.bias"])
    np.testing.assert_allclose(fused2, conv2d(np.concatenate([a, b]), spec),
                               rtol=1e-12)
    fused3 = fuse_agents([a, b, d], weights=w)
    np.testing.assert_allclose(fused3, conv2d(np.concatenate([fused2, d]), spec),
                               rtol=1e-12)
    # fold order matters: ego first
    assert not np.allclose(fuse_agents([b, a], weights=w), fused2)
    with pytest.raises(ShapeError):
        fuse_agents([])
    with pytest.raises(ShapeError):
        fuse_agents([a, rng.normal(size=(c, 5, 4))], weights=w)


def test_foreground_loss_perfect_prediction_small():
    spec = BevSpec.centered(4.0, 4.0, cell=0.5)
    boxes = [OrientedBox(0, 0, 0, 2.0, 1.0, 1.0)]
    from cpalign.featurizer import box_footprint_mask
    y = box_footprint_mask(boxes, spec).astype(np.float64)[None]
    # confident correct predictions drive the loss toward zero
    p = np.clip(y, 1e-7, 1 - 1e-7)
    loss, grad = foreground_loss(p, boxes, spec)
    assert loss < 1e-4
    # totally wrong predictions cost far more
    loss_bad, _ = foreground_loss(np.clip(1 - y, 1e-7, 1 - 1e-7), boxes, spec)
    assert loss_bad > 1.0


def test_foreground_loss_weights_and_normalization():
    spec = BevSpec.centered(4.0, 4.0, cell=0.5)
    boxes = [OrientedBox(0, 0, 0, 2.0, 1.0, 1.0)]
    p = np.full((1, 8, 8), 0.4)
    loss, _ = foreground_loss(p, boxes, spec)
    # manual: 8 fg cells weight 2, 56 bg cells weight 1, norm by 8
    pos = 0.25 * (1 - 0.4) ** 2 * -math.log(0.4)
    neg = 0.75 * 0.4 ** 2 * -math.log(0.6)
    want = (8 * 2 * pos + 56 * 1 * neg) / 8
    assert loss == pytest.approx(want, rel=1e-12)
    # no boxes: normalizer clamps at 1, loss is pure background cost
    loss_nb, _ = foreground_loss(p, [], spec)
    assert loss_nb == pytest.approx(64 * neg, rel=1e-12)


def test_foreground_loss_gradient_matches_fd():
    rng = np.random.default_rng(10)
    spec = BevSpec.centered(4.0, 4.0, cell=1.0)
    boxes = [OrientedBox(0.5, -0.5, 0, 2.0, 2.0, 1.0, yaw=0.3)]
    p = rng.uniform(0.05, 0.95, size=(1, 4, 4))
    _, grad = foreground_loss(p, boxes, spec)
    fd = np.zeros_like(p)
    flat, fdf = p.ravel(), fd.ravel()
    for i in range(flat.size):
        h = 1e-7
        orig = flat[i]
        flat[i] = orig + h
        lp = foreground_loss(p, boxes, spec)[0]
        flat[i] = orig - h
        lm = foreground_loss(p, boxes, spec)[0]
        flat[i] = orig
        fdf[i] = (lp - lm) / (2 * h)
    np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-10)


def test_foreground_loss_saturated_predictions_finite():
    spec = BevSpec.centered(4.0, 4.0, cell=1.0)
    p = np.zeros((1, 4, 4))
    p[0, :2] = 1.0  # exactly saturated
    loss, grad = foreground_loss(p, [], spec)
    assert math.isfinite(loss) and np.isfinite(grad).all()
    # clamped flats carry no gradient
    assert np.all(grad[0, :2] == 0.0)
    with pytest.raises(ShapeError):
        foreground_loss(p - 0.5, [], spec)
