"""Cross-resolution feature fusion.

Keyframe features computed at full resolution are shifted along the
decoded block motion, then selectively merged into the upsampled
reduced-resolution features of the current frame: value and key maps come
from grouped 3x3 convolutions of the warped keyframe features, the query
map from the upsampled current features, and each output position takes a
softmax-weighted sum of its value neighborhood with weights
softmax(K^T Q / sqrt(C)) shared across channels. With the direct
connection enabled the aggregate is added to the upsampled features as a
residual.

Variants swap the aggregation step: ``la`` is the local neighborhood
attention above, ``la_dense`` uses non-grouped value/key/query encoders,
``ga`` attends over average-pooled key/value columns instead of a
neighborhood, ``conv`` replaces attention with a 3x3 convolution over the
channel-concatenated warped and upsampled maps, ``warp_only`` returns the
warped keyframe features unchanged, and ``none`` returns just the
upsampled current features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

VARIANTS = ("la", "la_dense", "ga", "conv", "warp_only", "none")


@dataclass
class FusionConfig:
    variant: str = "la"
    channels: int = 16
    neighborhood: int = 7
    ga_factor: int = 32
    direct_connection: bool = True
    bias: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant {self.variant!r} not one of {VARIANTS}")
        if self.neighborhood < 1 or self.neighborhood % 2 == 0:
            raise ValueError(f"neighborhood {self.neighborhood} must be odd and >= 1")
        if self.ga_factor < 1:
            raise ValueError(f"ga_factor {self.ga_factor} must be >= 1")
        if self.channels < 1:
            raise ValueError(f"channels {self.channels} must be >= 1")


def warp_features(features, motion):
    """Per-pixel shift of keyframe features along integer motion; a zero
    field is the identity. Gradients flow through features only."""
    return ops.warp(features, motion)


class Fusion:
    """Holds the learned encoder weights for one fusion configuration."""

    def __init__(self, config, seed=0):
        self.config = config
        c = config.channels
        rng = np.random.default_rng(seed)
        self.params = {}

        def make(name, cout, cin_g, k):
            fan_in = cin_g * k * k
            w = rng.standard_normal((cout, cin_g, k, k)) * np.sqrt(2.0 / fan_in)
            self.params[f"{name}_w"] = Tensor(w, requires_grad=True)
            if config.bias:
                self.params[f"{name}_b"] = Tensor(np.zeros(cout), requires_grad=True)

        if config.variant in ("la", "ga"):
            for name in ("value", "key", "query"):
                make(name, c, 1, 3)
        elif config.variant == "la_dense":
            for name in ("value", "key", "query"):
                make(name, c, c, 3)
        elif config.variant == "conv":
            make("mix", c, 2 * c, 3)
        # warp_only and none carry no parameters

    def parameters(self):
        return list(self.params.values())

    def _bias(self, name):
        return self.params.get(f"{name}_b")

    def _encode(self, name, x):
        groups = 1 if self.config.variant == "la_dense" else self.config.channels
        return ops.conv2d(x, self.params[f"{name}_w"], self._bias(name), groups=groups)

    def encode_qkv(self, warped_key_feat, upsampled_feat):
        """Value and key maps from the warped keyframe features, query map
        from the upsampled current features; channel count is preserved."""
        if warped_key_feat.data.shape != upsampled_feat.data.shape:
            raise ShapeError(
                f"encode_qkv: warped {warped_key_feat.data.shape} and upsampled "
                f"{upsampled_feat.data.shape} shapes differ"
            )
        if warped_key_feat.data.shape[0] != self.config.channels:
            raise ShapeError(
                f"encode_qkv: {warped_key_feat.data.shape[0]} channels do not match "
                f"configured {self.config.channels}"
            )
        value = self._encode("value", warped_key_feat)
        key = self._encode("key", warped_key_feat)
        query = self._encode("query", upsampled_feat)
        return value, key, query

    def forward(self, key_features, motion, cur_features):
        """Fuse keyframe features into the current frame's features.

        ``key_features`` is (C, H, W) on the full grid, ``motion`` an
        integer (2, H, W) displacement field, ``cur_features`` the current
        frame's (C, ah, aw) branch-grid features (ignored and may be None
        for the warp_only variant). Returns (C, H, W).
        """
        cfg = self.config
        c, h, w = key_features.data.shape
        if c != cfg.channels:
            raise ShapeError(
                f"fusion: {c} feature channels do not match configured {cfg.channels}"
            )
        if cfg.variant == "warp_only":
            return warp_features(key_features, motion)
        up = ops.bilinear_resize(cur_features, h, w)
        if cfg.variant == "none":
            return up
        warped = warp_features(key_features, motion)
        if cfg.variant == "conv":
            agg = ops.conv2d(ops.concat_channels(warped, up),
                             self.params["mix_w"], self._bias("mix"))
        else:
            value, key, query = self.encode_qkv(warped, up)
            scale = 1.0 / np.sqrt(c)
            if cfg.variant == "ga":
                f = cfg.ga_factor
                cols = lambda t: ops.reshape(ops.avg_pool(t, f), (c, -1))
                agg = ops.global_attention(cols(value), cols(key), query, scale)
            else:
                agg = ops.local_attention(value, key, query, cfg.neighborhood, scale)
        if cfg.direct_connection:
            return up + agg
        return agg


def fusion_flops(config, h, w):
    """Analytic cost of one fusion call on an (h, w) grid.

    Conventions: conv 2 * k^2 * (C_in / g) * C_out per output position,
    resize 8 per output element, warp 1 per element, average pooling 1 per
    input element, attention (4C + 6) per candidate per position (score
    and value accumulation at 2C each, softmax and bookkeeping ~6).
    """
    c = config.channels
    hw = h * w
    if config.variant == "none":
        return 8 * c * hw
    if config.variant == "warp_only":
        return c * hw
    total = 8 * c * hw + c * hw  # upsample + warp
    if config.variant == "conv":
        total += 2 * 9 * (2 * c) * c * hw
    else:
        cin_g = c if config.variant == "la_dense" else 1
        total += 3 * 2 * 9 * cin_g * c * hw  # value, key, query encoders
        if config.variant == "ga":
            p = -(-h // config.ga_factor) * (-(-w // config.ga_factor))
            total += 2 * c * hw  # pooling the value and key maps
            total += hw * p * (4 * c + 6)
        else:
            n = config.neighborhood
            total += hw * n * n * (4 * c + 6)
    if config.direct_connection:
        total += c * hw
    return total
