"""Instance-focused aggregation of fused BEV features.

Features are split into foreground and background by an observability map;
the foreground passes through a structure-sensitive depthwise convolution
(five 3x3 kernel banks derived from one learned bank), gets re-weighted by
learned verification weights, and is recombined with a small epsilon of
background before agents are folded together with a shared 1x1 fusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .featurizer import BevSpec, box_footprint_mask
from .numerics import (
    ConvSpec,
    ShapeError,
    conv2d,
    ensure_tensor3,
    he_normal,
    require_weights,
)

EPSILON_DEFAULT = 0.1
STRUCT_BANKS = ("vanilla", "center_surround", "horizontal", "vertical", "angular")


def split_foreground(features: np.ndarray, fg_map: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(foreground, background) = (H * M, H * (1 - M)); they sum back to H."""
    features = ensure_tensor3(features, "features")
    fg_map = ensure_tensor3(fg_map, "foreground map")
    if fg_map.shape != (1,) + features.shape[1:]:
        raise ShapeError(
            f"foreground map {fg_map.shape} must be (1, H, W) matching "
            f"{features.shape}"
        )
    if np.any(fg_map < 0.0) or np.any(fg_map > 1.0):
        raise ShapeError("foreground map values must lie in [0, 1]")
    fore = features * fg_map
    return fore, features - fore


@dataclass
class StructKernels:
    """One learned depthwise 3x3 bank plus four structure-derived banks.

    Derivations from the base bank B (per channel):
      center_surround: off-center taps copy B, the center tap is minus the
        sum of B's off-center taps, so constant patches map to zero;
      horizontal: left column copies B, right column is its negative,
        middle column zero (responds to horizontal gradients);
      vertical: top row copies B, bottom row its negative, middle row zero;
      angular: B minus B rotated a quarter turn, so rotationally symmetric
        kernels cancel.
    """

    base: np.ndarray     # (C, 3, 3)
    biases: np.ndarray | None = None  # (5, C), one row per bank

    def __post_init__(self):
        self.base = np.ascontiguousarray(self.base, dtype=np.float64)
        if self.base.ndim != 3 or self.base.shape[1:] != (3, 3):
            raise ShapeError(f"base bank must be (C, 3, 3), got {self.base.shape}")
        c = self.base.shape[0]
        if self.biases is None:
            self.biases = np.zeros((5, c))
        else:
            self.biases = np.ascontiguousarray(self.biases, dtype=np.float64)
            if self.biases.shape != (5, c):
                raise ShapeError(
                    f"bank biases must be (5, {c}), got {self.biases.shape}"
                )

    @property
    def channels(self) -> int:
        return self.base.shape[0]

    def center_surround(self) -> np.ndarray:
        k = self.base.copy()
        k[:, 1, 1] = -(self.base.sum(axis=(1, 2)) - self.base[:, 1, 1])
        return k

    def horizontal(self) -> np.ndarray:
        k = np.zeros_like(self.base)
        k[:, :, 0] = self.base[:, :, 0]
        k[:, :, 2] = -self.base[:, :, 0]
        return k

    def vertical(self) -> np.ndarray:
        k = np.zeros_like(self.base)
        k[:, 0, :] = self.base[:, 0, :]
        k[:, 2, :] = -self.base[:, 0, :]
        return k

    def angular(self) -> np.ndarray:
        return self.base - np.rot90(self.base, k=1, axes=(1, 2))

    def banks(self) -> list:
        return [self.base, self.center_surround(), self.horizontal(),
                self.vertical(), self.angular()]

    def fused_weight(self) -> np.ndarray:
        return sum(self.banks())

    def fused_bias(self) -> np.ndarray:
        return self.biases.sum(axis=0)


def _depthwise(x: np.ndarray, bank: np.ndarray, bias: np.ndarray) -> np.ndarray:
    c = x.shape[0]
    return conv2d(x, ConvSpec(c, c, 3, 3, bank.reshape(c, 1, 3, 3), bias=bias,
                              padding=1, groups=c))


def struct_conv(features: np.ndarray, kernels: StructKernels,
                fused: bool = True) -> np.ndarray:
    """Sum of the five depthwise bank responses.

    With ``fused=True`` the banks are collapsed into a single depthwise
    conv beforehand; both paths produce the same values to float64
    accumulation accuracy.
    """
    features = ensure_tensor3(features, "struct conv input")
    if features.shape[0] != kernels.channels:
        raise ShapeError(
            f"struct conv built for {kernels.channels} channels, got "
            f"{features.shape[0]}"
        )
    if fused:
        return _depthwise(features, kernels.fused_weight(), kernels.fused_bias())
    out = None
    for bank, bias in zip(kernels.banks(), kernels.biases):
        r = _depthwise(features, bank, bias)
        out = r if out is None else out + r
    return out


def channel_shuffle(x: np.ndarray, groups: int) -> np.ndarray:
    """Interleave channel groups: (g, c//g) -> transpose -> flatten."""
    x = ensure_tensor3(x, "shuffle input")
    c = x.shape[0]
    if groups < 1 or c % groups:
        raise ShapeError(f"groups={groups} must divide {c} channels")
    k = c // groups
    return np.ascontiguousarray(
        x.reshape(groups, k, *x.shape[1:]).swapaxes(0, 1).reshape(c, *x.shape[1:])
    )


# ---------------------------------------------------------------------------
# verification weights
# ---------------------------------------------------------------------------

VERIFICATION_WEIGHT_NAMES = (
    "ifam.verif.spatial.weight", "ifam.verif.spatial.bias",
    "ifam.verif.ca1.weight", "ifam.verif.ca1.bias",
    "ifam.verif.ca2.weight", "ifam.verif.ca2.bias",
    "ifam.verif.gconv.weight", "ifam.verif.gconv.bias",
)

VERIF_GROUPS = 4


@dataclass
class VerificationSpec:
    spatial: ConvSpec   # 2 -> 1, 3x3
    ca1: ConvSpec       # 2C -> 2C/4, 1x1
    ca2: ConvSpec       # 2C/4 -> 2C, 1x1
    gconv: ConvSpec     # 4C -> C grouped 1x1, sigmoid
    shuffle_groups: int = VERIF_GROUPS

    @property
    def channels(self) -> int:
        return self.gconv.out_channels

    @classmethod
    def default(cls, channels: int, seed: int = 0) -> "VerificationSpec":
        return cls.from_weights(default_verification_weights(channels, seed))

    @classmethod
    def from_weights(cls, weights: dict, groups: int = VERIF_GROUPS) -> "VerificationSpec":
        sw, sb, c1w, c1b, c2w, c2b, gw, gb = require_weights(
            weights, VERIFICATION_WEIGHT_NAMES, "verification weights")
        two_c = c1w.shape[1] if c1w.ndim == 4 else int(round(math.sqrt(c1w.size * 4)))
        red = c1w.size // two_c
        c = two_c // 2
        if 2 * c != two_c or c % groups:
            raise ShapeError(
                f"verification weights imply {two_c} concat channels, which "
                f"must be even with C divisible by groups={groups}"
            )
        return cls(
            spatial=ConvSpec(1, 2, 3, 3, sw, bias=sb, padding=1),
            ca1=ConvSpec(red, two_c, 1, 1, c1w, bias=c1b, activation="relu"),
            ca2=ConvSpec(two_c, red, 1, 1, c2w, bias=c2b),
            gconv=ConvSpec(c, 4 * c, 1, 1, gw, bias=gb, groups=groups,
                           activation="sigmoid"),
            shuffle_groups=groups,
        )


def default_verification_weights(channels: int, seed: int = 0) -> dict:
    if channels % VERIF_GROUPS:
        raise ShapeError(
            f"channels={channels} must be divisible by {VERIF_GROUPS} groups"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1FA]))
    two_c = 2 * channels
    red = max(two_c // 4, 1)
    return {
        "ifam.verif.spatial.weight": he_normal(rng, 1, 2, 3, 3),
        "ifam.verif.spatial.bias": np.zeros(1),
        "ifam.verif.ca1.weight": he_normal(rng, red, two_c, 1, 1),
        "ifam.verif.ca1.bias": np.zeros(red),
        "ifam.verif.ca2.weight": he_normal(rng, two_c, red, 1, 1),
        "ifam.verif.ca2.bias": np.zeros(two_c),
        "ifam.verif.gconv.weight": he_normal(rng, channels, channels, 1, 1),
        "ifam.verif.gconv.bias": np.zeros(channels),
    }


def verification_weights(fore: np.ndarray, enhanced: np.ndarray,
                         spec: VerificationSpec) -> np.ndarray:
    """Per-channel gates in (0, 1), shape (C, H, W).

    Spatial attention (channel max and mean through a 3x3 conv) and channel
    attention (global average pool through a bottleneck) are broadcast-added
    into one initial weight, concatenated with the feature pair, channel
    shuffled, and compressed by a grouped 1x1 conv with a sigmoid.
    """
    fore = ensure_tensor3(fore, "foreground features")
    enhanced = ensure_tensor3(enhanced, "enhanced features")
    if fore.shape != enhanced.shape:
        raise ShapeError(f"shape mismatch: {fore.shape} vs {enhanced.shape}")
    if fore.shape[0] != spec.channels:
        raise ShapeError(
            f"verification spec built for {spec.channels} channels, got "
            f"{fore.shape[0]}"
        )
    cat = np.concatenate([fore, enhanced])
    stats = np.stack([cat.max(axis=0), cat.mean(axis=0)])
    w_spatial = conv2d(stats, spec.spatial)                    # (1, H, W)
    gap = cat.mean(axis=(1, 2)).reshape(-1, 1, 1)
    w_channel = conv2d(conv2d(gap, spec.ca1), spec.ca2)        # (2C, 1, 1)
    w_init = w_spatial + w_channel                             # (2C, H, W)
    z = np.concatenate([cat, np.broadcast_to(w_init, cat.shape)])
    z = channel_shuffle(z, spec.shuffle_groups)
    return conv2d(z, spec.gconv)


def verified_blend(weights: np.ndarray, fore: np.ndarray,
                   enhanced: np.ndarray) -> np.ndarray:
    """W * fore + (1 - W) * enhanced, elementwise convex blend."""
    weights = ensure_tensor3(weights, "verification weights")
    fore = ensure_tensor3(fore, "foreground features")
    enhanced = ensure_tensor3(enhanced, "enhanced features")
    if not (weights.shape == fore.shape == enhanced.shape):
        raise ShapeError(
            f"blend inputs must share a shape, got {weights.shape}, "
            f"{fore.shape}, {enhanced.shape}"
        )
    return weights * fore + (1.0 - weights) * enhanced


AGGREGATE_WEIGHT_NAMES = ("ifam.agg.weight", "ifam.agg.bias")
FUSE_WEIGHT_NAMES = ("ifam.fuse.weight", "ifam.fuse.bias")


def default_aggregate_weights(channels: int, seed: int = 0,
                              combine: str = "sum") -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA66]))
    cin = channels if combine == "sum" else 3 * channels
    return {
        "ifam.agg.weight": he_normal(rng, channels, cin, 1, 1),
        "ifam.agg.bias": np.zeros(channels),
        "ifam.eps": np.array([EPSILON_DEFAULT]),
    }


def aggregate_instance(fore: np.ndarray, enhanced: np.ndarray,
                       back: np.ndarray, verif: np.ndarray,
                       weights: dict | None = None, seed: int = 0,
                       combine: str = "sum") -> np.ndarray:
    """Recombine the instance branch with a whisper of background.

    The verified blend, the raw foreground and the enhanced foreground are
    combined (elementwise sum by default, channel concat behind the flag),
    projected by a 1x1 conv, and the background is added back scaled by the
    stored epsilon.
    """
    if combine not in ("sum", "concat"):
        raise ShapeError(f"unknown combine mode {combine!r}")
    fore = ensure_tensor3(fore, "foreground features")
    back = ensure_tensor3(back, "background features")
    if fore.shape != back.shape:
        raise ShapeError(f"fore/back shapes differ: {fore.shape} vs {back.shape}")
    c = fore.shape[0]
    if weights is None:
        weights = default_aggregate_weights(c, seed, combine)
    wa, ba = require_weights(weights, AGGREGATE_WEIGHT_NAMES, "aggregation weights")
    (eps_arr,) = require_weights(weights, ("ifam.eps",), "aggregation weights")
    eps = float(np.asarray(eps_arr).ravel()[0])
    blend = verified_blend(verif, fore, enhanced)
    if combine == "sum":
        pre = blend + fore + enhanced
        cin = c
    else:
        pre = np.concatenate([blend, fore, enhanced])
        cin = 3 * c
    refined = conv2d(pre, ConvSpec(c, cin, 1, 1, wa, bias=ba))
    return refined + eps * back


def default_fuse_weights(channels: int, seed: int = 0) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF05E]))
    return {
        "ifam.fuse.weight": he_normal(rng, channels, 2 * channels, 1, 1),
        "ifam.fuse.bias": np.zeros(channels),
    }


def fuse_agents(features: list, weights: dict | None = None,
                seed: int = 0) -> np.ndarray:
    """Left fold over agents with one shared 2C -> C 1x1 conv.

    features[0] is the ego view; collaborators follow in id order. A single
    agent passes through unchanged; an empty list is an error.
    """
    if not features:
        raise ShapeError("fuse_agents needs at least one agent's features")
    feats = [ensure_tensor3(f, f"agent {i} features") for i, f in enumerate(features)]
    shape = feats[0].shape
    for i, f in enumerate(feats[1:], start=1):
        if f.shape != shape:
            raise ShapeError(
                f"agent {i} features {f.shape} do not match ego {shape}"
            )
    if len(feats) == 1:
        return feats[0].copy()
    c = shape[0]
    if weights is None:
        weights = default_fuse_weights(c, seed)
    wf, bf = require_weights(weights, FUSE_WEIGHT_NAMES, "fusion weights")
    spec = ConvSpec(c, 2 * c, 1, 1, wf, bias=bf)
    state = feats[0]
    for nxt in feats[1:]:
        state = conv2d(np.concatenate([state, nxt]), spec)
    return state


# ---------------------------------------------------------------------------
# foreground occupancy loss
# ---------------------------------------------------------------------------

FOCAL_POS_SCALE = 0.25
FOCAL_NEG_SCALE = 0.75
FOREGROUND_CELL_WEIGHT = 2.0
BACKGROUND_CELL_WEIGHT = 1.0
_P_CLAMP = 1e-12


def foreground_loss(pred: np.ndarray, boxes: list,
                    spec: BevSpec) -> tuple[float, np.ndarray]:
    """Weighted focal loss against rasterized box footprints.

    Ground truth is 1 on cells whose center lies in any closed box
    footprint. Foreground cells weigh 2, background 1, and the whole sum is
    normalized by max(foreground count, 1). Per cell, foreground costs
    0.25 * (1-p)^2 * -log(p) and background 0.75 * p^2 * -log(1-p).
    Predictions are clamped away from {0, 1} by 1e-12 so saturated inputs
    stay finite; the gradient is zero in the clamped flats.
    """
    pred = ensure_tensor3(pred, "foreground prediction")
    if pred.shape != (1, spec.height, spec.width):
        raise ShapeError(
            f"prediction shape {pred.shape} must be (1, {spec.height}, {spec.width})"
        )
    if np.any(pred < 0.0) or np.any(pred > 1.0):
        raise ShapeError("foreground predictions must lie in [0, 1]")
    y = box_footprint_mask(boxes, spec).astype(np.float64)[None]
    norm = max(float(y.sum()), 1.0)
    w = (FOREGROUND_CELL_WEIGHT * y + BACKGROUND_CELL_WEIGHT * (1.0 - y)) / norm
    p = np.clip(pred, _P_CLAMP, 1.0 - _P_CLAMP)
    pos = FOCAL_POS_SCALE * (1.0 - p) ** 2 * -np.log(p)
    neg = FOCAL_NEG_SCALE * p ** 2 * -np.log1p(-p)
    loss = float((w * (y * pos + (1.0 - y) * neg)).sum())
    dpos = FOCAL_POS_SCALE * (2.0 * (1.0 - p) * np.log(p) - (1.0 - p) ** 2 / p)
    dneg = FOCAL_NEG_SCALE * (-2.0 * p * np.log1p(-p) + p ** 2 / (1.0 - p))
    grad = w * (y * dpos + (1.0 - y) * dneg)
    grad[(pred <= _P_CLAMP) | (pred >= 1.0 - _P_CLAMP)] = 0.0
    return loss, grad
