"""Encoder-decoder segmentation network runnable at a configurable scale.

The network splits into a feature stack (four 3x3 convs, the first two at
stride 2), a task stack (two 3x3 convs plus one bilinear upsample back to
the branch input extent), and a final 1x1 convolution mapping the C
feature channels to K class logits. A branch resizes its input frame by
the scale factor alpha before the feature stack, so the same architecture
serves the full-resolution and reduced-resolution paths; the feature map
returned just before the final convolution is the fusion point.

FLOPs are counted analytically from the same layer plan the forward pass
executes: a convolution costs 2 * k^2 * (C_in / groups) * C_out per output
position (multiply plus add), a bilinear resize 8 per output element, a
ramp nonlinearity 1 per element. Resizes that would be the identity are
skipped and cost nothing.

Checkpoints use the bundle layout of :mod:`altseg.checkpoint` with the
architecture config embedded as JSON.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .tensor import FileFormatError, ShapeError, Tensor, relu

MIN_BRANCH_EXTENT = 8


@dataclass
class BackboneConfig:
    in_channels: int = 1
    hidden: int = 32
    feature_channels: int = 16
    classes: int = 3
    alpha: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside (0, 1]")
        for name in ("in_channels", "hidden", "feature_channels", "classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


class Backbone:
    """One branch: scaled input -> features -> logits."""

    def __init__(self, config, seed=0):
        self.config = config
        c = config
        specs = self._conv_specs()
        rng = np.random.default_rng(seed)
        self.params = {}
        for name, cin, cout, k, _stride, groups in specs:
            fan_in = (cin // groups) * k * k
            w = rng.standard_normal((cout, cin // groups, k, k)) * np.sqrt(2.0 / fan_in)
            self.params[f"{name}_w"] = Tensor(w, requires_grad=True)
            self.params[f"{name}_b"] = Tensor(np.zeros(cout), requires_grad=True)

    def _conv_specs(self):
        c = self.config
        h = c.hidden
        return [
            ("enc1", c.in_channels, h, 3, 2, 1),
            ("enc2", h, h, 3, 2, 1),
            ("enc3", h, h, 3, 1, 1),
            ("enc4", h, h, 3, 1, 1),
            ("dec1", h, h, 3, 1, 1),
            ("dec2", h, c.feature_channels, 3, 1, 1),
            ("final", c.feature_channels, c.classes, 1, 1, 1),
        ]

    def parameters(self):
        return list(self.params.values())

    def branch_extent(self, h, w):
        """Branch-grid extent for an (h, w) frame; rejects scales that
        round below the minimum working size."""
        ah = int(np.round(self.config.alpha * h))
        aw = int(np.round(self.config.alpha * w))
        if ah < MIN_BRANCH_EXTENT or aw < MIN_BRANCH_EXTENT:
            raise ShapeError(
                f"scale {self.config.alpha} maps {h}x{w} to {ah}x{aw}; both extents "
                f"must round to >= {MIN_BRANCH_EXTENT}"
            )
        return ah, aw

    def forward_features(self, frame):
        """Feature map at the fusion point, (C, ah, aw) on the branch grid."""
        if frame.data.ndim != 3 or frame.data.shape[0] != self.config.in_channels:
            raise ShapeError(
                f"frame shape {frame.data.shape} does not supply "
                f"{self.config.in_channels} channels"
            )
        _, h, w = frame.data.shape
        ah, aw = self.branch_extent(h, w)
        x = frame
        if (ah, aw) != (h, w):
            x = ops.bilinear_resize(x, ah, aw)
        p = self.params
        x = relu(ops.conv2d(x, p["enc1_w"], p["enc1_b"], stride=2))
        x = relu(ops.conv2d(x, p["enc2_w"], p["enc2_b"], stride=2))
        x = relu(ops.conv2d(x, p["enc3_w"], p["enc3_b"]))
        x = relu(ops.conv2d(x, p["enc4_w"], p["enc4_b"]))
        x = relu(ops.conv2d(x, p["dec1_w"], p["dec1_b"]))
        x = ops.conv2d(x, p["dec2_w"], p["dec2_b"])
        if x.data.shape[1:] != (ah, aw):
            x = ops.bilinear_resize(x, ah, aw)
        return x

    def forward_logits(self, features):
        """Apply only the final 1x1 convolution: (C, h, w) -> (K, h, w)."""
        if features.data.ndim != 3 or features.data.shape[0] != self.config.feature_channels:
            raise ShapeError(
                f"features shape {features.data.shape} does not supply "
                f"{self.config.feature_channels} channels"
            )
        return ops.conv2d(features, self.params["final_w"], self.params["final_b"],
                          padding=0)

    # FLOPs accounting walks the same plan forward_features executes.

    def features_flops(self, h, w):
        ah, aw = self.branch_extent(h, w)
        conv = 0
        resize = 0
        pointwise = 0
        if (ah, aw) != (h, w):
            resize += 8 * self.config.in_channels * ah * aw
        ch, cw = ah, aw
        for name, cin, cout, k, stride, groups in self._conv_specs():
            if name == "final":
                continue
            ch = _conv_out(ch, k, stride, k // 2)
            cw = _conv_out(cw, k, stride, k // 2)
            conv += 2 * k * k * (cin // groups) * cout * ch * cw
            if name != "dec2":
                pointwise += cout * ch * cw
        if (ch, cw) != (ah, aw):
            resize += 8 * self.config.feature_channels * ah * aw
        return {"conv": conv, "resize": resize, "pointwise": pointwise,
                "total": conv + resize + pointwise}

    def final_conv_flops(self, h, w):
        c = self.config
        return 2 * c.feature_channels * c.classes * h * w

    def flops_of(self, h, w):
        """Plain single-branch inference cost: features plus the final
        convolution on the branch grid."""
        parts = self.features_flops(h, w)
        ah, aw = self.branch_extent(h, w)
        fc = self.final_conv_flops(ah, aw)
        return {"conv": parts["conv"] + fc, "resize": parts["resize"],
                "pointwise": parts["pointwise"], "total": parts["total"] + fc}

    # Checkpoint IO

    def save_weights(self, path):
        from .checkpoint import write_bundle

        cfg = asdict(self.config)
        cfg["params"] = list(self.params)
        write_bundle(path, cfg, {n: t.data for n, t in self.params.items()})

    @classmethod
    def load_weights(cls, path):
        from .checkpoint import read_bundle

        cfg, arrays = read_bundle(path)
        names = cfg.pop("params")
        try:
            config = BackboneConfig(**cfg)
        except (TypeError, ValueError) as exc:
            raise FileFormatError(f"{path}: bad config ({exc})") from exc
        model = cls(config)
        if sorted(names) != sorted(model.params):
            raise FileFormatError(f"{path}: parameter list does not match the architecture")
        for name in names:
            arr = arrays[name]
            want = model.params[name].data.shape
            if arr.shape != want:
                raise FileFormatError(
                    f"{path}: layer {name} shape {arr.shape} does not match {want}"
                )
            model.params[name] = Tensor(arr, requires_grad=True)
        return model
