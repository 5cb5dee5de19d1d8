"""Training loops: full-resolution branch first, then the reduced branch.

The full-resolution branch trains with plain cross entropy. The reduced
branch then trains against two signals at once: cross entropy on its fused
logits, plus a feature-similarity term pulling the fused feature map
toward the frozen full-resolution branch's features of the same frame. The
full-resolution branch stays fixed throughout, and its final 1x1
convolution is shared into the reduced branch as the same parameter
objects, also fixed, so both branches decode features identically.

Optimization is stochastic gradient descent with momentum, one sample per
step, deterministic for a given seed. A non-finite loss aborts with the
step index and the offending term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, cross_entropy, kl_logits, mse


@dataclass
class TrainPair:
    """One supervised pair: a group's keyframe plus its annotated frame."""

    keyframe: np.ndarray  # (C, H, W) decoded keyframe pixels
    frame: np.ndarray  # (C, H, W) decoded target-frame pixels
    motion: np.ndarray  # (2, H, W) integer displacements, channel 0 = dx
    labels: np.ndarray  # (H, W) integer ground truth
    key_index: int = 0
    frame_index: int = 0


@dataclass
class TrainConfig:
    epochs: int = 1
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    loss_variant: str = "mse"  # feature term: "mse", or "kl" on logits

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs {self.epochs} must be >= 0")
        if self.loss_variant not in ("mse", "kl"):
            raise ValueError(f"loss_variant {self.loss_variant!r} not one of ('mse', 'kl')")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the step index and term name."""

    def __init__(self, step, term, value):
        super().__init__(f"step {step}: {term} term is not finite ({value})")
        self.step = step
        self.term = term


class SGD:
    """Momentum SGD over a fixed list of parameter tensors."""

    def __init__(self, params, lr, momentum=0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, buf in zip(self.params, self.buffers):
            if p.grad is None:
                continue
            buf *= self.momentum
            buf += p.grad
            p.data -= self.lr * buf

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def fst_loss(logits, labels, fused, target_features):
    """Total, cross-entropy part, and feature part of the combined loss.

    total = CE(logits, labels) + MSE(fused, target_features); the target
    features come from the frozen full-resolution branch.
    """
    if fused.data.shape != target_features.data.shape:
        raise ShapeError(
            f"fst_loss: fused {fused.data.shape} and target "
            f"{target_features.data.shape} shapes differ"
        )
    ce_part = cross_entropy(logits, labels)
    mse_part = mse(fused, target_features)
    return ce_part + mse_part, ce_part, mse_part


def _check_finite(step, parts):
    for term, t in parts:
        v = float(t.data)
        if not np.isfinite(v):
            raise TrainingDiverged(step, term, v)


def _freeze(model):
    for p in model.parameters():
        p.requires_grad = False


def train_hr_branch(model, samples, config):
    """Cross-entropy training of one branch on (frame, labels) samples.

    A reduced-scale branch produces logits on its own grid; they are
    bilinearly resized up to the label grid before the loss, so one routine
    serves both the full-resolution branch and a reduced-scale baseline.
    Returns the per-step loss history as (step, total, ce, aux) rows with
    aux fixed at 0; the model is updated in place.
    """
    opt = SGD(model.parameters(), config.lr, config.momentum)
    rng = np.random.default_rng(config.seed)
    history = []
    step = 0
    for _ in range(config.epochs):
        for idx in rng.permutation(len(samples)):
            frame, labels = samples[idx]
            logits = model.forward_logits(model.forward_features(Tensor(frame)))
            if logits.data.shape[1:] != labels.shape:
                logits = ops.bilinear_resize(logits, *labels.shape)
            loss = cross_entropy(logits, labels)
            _check_finite(step, [("cross-entropy", loss)])
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append((step, float(loss.data), float(loss.data), 0.0))
            step += 1
    return history


def train_lr_branch(lr_model, fusion_model, hr_model, pairs, config):
    """Feature-similarity training of the reduced branch plus fusion.

    The full-resolution model is frozen; its final convolution parameters
    are shared into ``lr_model`` (same objects) and stay fixed. Only the
    reduced branch's feature/task stacks and the fusion encoders train.
    Returns (step, total, ce, feature-term) history rows.
    """
    _freeze(hr_model)
    lr_model.params["final_w"] = hr_model.params["final_w"]
    lr_model.params["final_b"] = hr_model.params["final_b"]
    trainable = [t for name, t in lr_model.params.items()
                 if not name.startswith("final_")]
    trainable += fusion_model.parameters()
    for t in trainable:
        t.requires_grad = True
    opt = SGD(trainable, config.lr, config.momentum)
    rng = np.random.default_rng(config.seed)
    history = []
    step = 0
    for _ in range(config.epochs):
        for idx in rng.permutation(len(pairs)):
            pair = pairs[idx]
            key_feat = hr_model.forward_features(Tensor(pair.keyframe))
            target_feat = hr_model.forward_features(Tensor(pair.frame))
            cur_feat = lr_model.forward_features(Tensor(pair.frame))
            fused = fusion_model.forward(key_feat, pair.motion, cur_feat)
            logits = lr_model.forward_logits(fused)
            if config.loss_variant == "kl":
                ce_part = cross_entropy(logits, pair.labels)
                aux_part = kl_logits(logits, hr_model.forward_logits(target_feat))
                total = ce_part + aux_part
                aux_name = "kl"
            else:
                total, ce_part, aux_part = fst_loss(logits, pair.labels, fused, target_feat)
                aux_name = "feature-mse"
            _check_finite(step, [("cross-entropy", ce_part), (aux_name, aux_part),
                                 ("total", total)])
            opt.zero_grad()
            total.backward()
            opt.step()
            history.append((step, float(total.data), float(ce_part.data),
                            float(aux_part.data)))
            step += 1
    return history


def save_history(path, history):
    """Write (step, total, ce, aux) rows as CSV with a header line."""
    with open(path, "w") as fh:
        fh.write("step,total,ce,aux\n")
        for step, total, ce, aux in history:
            fh.write(f"{step},{total!r},{ce!r},{aux!r}\n")
