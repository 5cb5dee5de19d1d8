"""Command-line surface.

Subcommands cover the full workflow: generate synthetic clips, encode raw
frames, train the full-resolution branch, train the reduced branch with
feature-similarity supervision, run inference, evaluate by keyframe
distance with cost accounting, and compare two rate curves.

Exit codes: 0 success, 2 input or format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import synthetic
from .backbone import Backbone, BackboneConfig
from .checkpoint import load_pipeline, save_pipeline
from .codec import (ClipFormatError, decode_clip, encode_clip, estimate_motion,
                    load_clip, save_clip)
from .evaluate import (EvalClip, RatePoint, amortized_cost, bd_metrics, frame_costs,
                       load_curve, miou_by_distance, run_sequence)
from .fusion import VARIANTS, Fusion, FusionConfig
from .tensor import FileFormatError, load_labels, load_tensor, save_labels, save_tensor
from .training import (TrainConfig, TrainingDiverged, TrainPair, save_history,
                       train_hr_branch, train_lr_branch)

IGNORE_INDEX = -1


def _clip_paths(arg):
    path = Path(arg)
    if path.is_dir():
        found = sorted(path.glob("*.arsg"))
        if not found:
            raise FileNotFoundError(f"{path}: no .arsg clips in directory")
        return found
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such clip")
    return [path]


def _labels_path(clip_path, labels_dir):
    return Path(labels_dir) / f"{Path(clip_path).stem}.labels.tnsr"


def _load_clip_labels(clip_path, labels_dir, clip):
    path = _labels_path(clip_path, labels_dir)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no label file for {clip_path}")
    labels = load_labels(path)
    want = (len(clip.frames), clip.height, clip.width)
    if labels.shape != want:
        raise FileFormatError(f"{path}: label shape {labels.shape} does not match {want}")
    return labels


def _annotated_frames(labels):
    return [t for t in range(labels.shape[0])
            if (labels[t] != IGNORE_INDEX).any()]


def _section(config, name, cls, **overrides):
    known = {f.name for f in fields(cls)}
    section = dict(config.get(name, {}))
    unknown = set(section) - known
    if unknown:
        raise ValueError(f"config section {name!r}: unknown keys {sorted(unknown)}")
    section.update(overrides)
    return cls(**section)


def _read_config(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise FileFormatError(f"{path}: config is not valid JSON ({exc})") from exc


def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.clips):
        frames, labels = synthetic.make_clip(args.seed * 10_000 + i, args.frames,
                                             args.height, args.width, args.max_speed)
        clip_dir = out / f"clip_{i:03d}"
        clip_dir.mkdir(exist_ok=True)
        for t in range(args.frames):
            save_tensor(clip_dir / f"frame_{t:04d}.tnsr", frames[t])
        if args.annotate == "last":
            labels = labels.copy()
            labels[:-1] = IGNORE_INDEX
        save_labels(out / f"clip_{i:03d}.labels.tnsr", labels)
    print(f"wrote {args.clips} clips of {args.frames} frames to {out}")


def cmd_encode(args):
    src = Path(args.inp)
    if src.is_dir():
        frame_files = sorted(p for p in src.glob("*.tnsr")
                             if not p.name.endswith(".labels.tnsr"))
        if not frame_files:
            raise FileNotFoundError(f"{src}: no frame tensors in directory")
        frames = np.stack([load_tensor(p) for p in frame_files])
    else:
        frames = load_tensor(src)
        if frames.ndim != 4:
            raise FileFormatError(f"{src}: expected a rank-4 (T, C, H, W) tensor")
    clip = encode_clip(frames, gop=args.gop, block_size=args.block,
                       search_range=args.search, quant_step=args.quant)
    save_clip(args.out, clip)
    print(f"encoded {frames.shape[0]} frames -> {args.out} "
          f"(gop {args.gop}, block {args.block}, search {args.search}, quant {args.quant})")


def cmd_train_hr(args):
    config = _read_config(args.config)
    model = Backbone(_section(config, "model", BackboneConfig),
                     seed=config.get("init_seed", 0))
    train_cfg = _section(config, "train", TrainConfig)
    samples = []
    for clip_path in _clip_paths(args.clip):
        clip = load_clip(clip_path)
        labels = _load_clip_labels(clip_path, args.labels, clip)
        frames, _ = decode_clip(clip)
        for t in _annotated_frames(labels):
            samples.append((frames[t], labels[t]))
    if not samples:
        raise ValueError("no annotated frames found for training")
    history = train_hr_branch(model, samples, train_cfg)
    model.save_weights(args.out)
    if args.history:
        save_history(args.history, history)
    last = history[-1][1] if history else float("nan")
    print(f"trained on {len(samples)} samples for {train_cfg.epochs} epochs; "
          f"final loss {last:.4f}; saved {args.out}")


def _build_pairs(clip_path, clip, labels):
    frames, motions = decode_clip(clip)
    annotated = _annotated_frames(labels)
    if not annotated:
        raise ValueError(f"{clip_path}: no annotated frames")
    p = annotated[-1]
    gop = clip.gop
    key = p - (gop - 1)
    if key < 0:
        raise ValueError(
            f"{clip_path}: annotated frame {p} has no keyframe at distance {gop - 1}"
        )
    if p % gop == gop - 1 and motions[p] is not None:
        dense = motions[p].expand(clip.height, clip.width)
    else:
        field = estimate_motion(frames[p], frames[key], clip.block_size,
                                clip.search_range)
        dense = field.expand(clip.height, clip.width)
    return TrainPair(keyframe=frames[key], frame=frames[p], motion=dense,
                     labels=labels[p], key_index=key, frame_index=p)


def cmd_train_lr(args):
    config = _read_config(args.config)
    hr_model = Backbone.load_weights(args.hr_ckpt)
    hr_cfg = hr_model.config
    lr_model = Backbone(
        _section(config, "model", BackboneConfig,
                 in_channels=hr_cfg.in_channels,
                 feature_channels=hr_cfg.feature_channels,
                 classes=hr_cfg.classes),
        seed=config.get("init_seed", 0))
    fusion_model = Fusion(
        _section(config, "fusion", FusionConfig,
                 channels=hr_cfg.feature_channels),
        seed=config.get("init_seed", 0) + 1)
    train_cfg = _section(config, "train", TrainConfig)
    pairs = []
    for clip_path in _clip_paths(args.clip):
        clip = load_clip(clip_path)
        labels = _load_clip_labels(clip_path, args.labels, clip)
        pairs.append(_build_pairs(clip_path, clip, labels))
    history = train_lr_branch(lr_model, fusion_model, hr_model, pairs, train_cfg)
    save_pipeline(args.out, lr_model, fusion_model)
    if args.history:
        save_history(args.history, history)
    last = history[-1][1] if history else float("nan")
    print(f"trained on {len(pairs)} pairs for {train_cfg.epochs} epochs; "
          f"final loss {last:.4f}; saved {args.out}")


def _load_models(hr_ckpt, lr_ckpt, variant=None):
    hr_model = Backbone.load_weights(hr_ckpt)
    lr_model, fusion_model = load_pipeline(lr_ckpt)
    if variant is not None and variant != fusion_model.config.variant:
        cfg = FusionConfig(variant=variant, channels=fusion_model.config.channels,
                           neighborhood=fusion_model.config.neighborhood,
                           ga_factor=fusion_model.config.ga_factor,
                           direct_connection=fusion_model.config.direct_connection,
                           bias=fusion_model.config.bias)
        swapped = Fusion(cfg)
        for name, param in swapped.params.items():
            stored = fusion_model.params.get(name)
            if stored is None or stored.data.shape != param.data.shape:
                raise ValueError(
                    f"variant {variant!r} needs weight {name!r} of shape "
                    f"{param.data.shape}, which the checkpoint (trained as "
                    f"{fusion_model.config.variant!r}) does not provide"
                )
            swapped.params[name] = stored
        fusion_model = swapped
    if lr_model.config.feature_channels != hr_model.config.feature_channels:
        raise ValueError("checkpoints disagree on feature channels")
    if lr_model.config.classes != hr_model.config.classes:
        raise ValueError("checkpoints disagree on class count")
    lr_model.params["final_w"] = hr_model.params["final_w"]
    lr_model.params["final_b"] = hr_model.params["final_b"]
    return hr_model, lr_model, fusion_model


def cmd_infer(args):
    hr_model, lr_model, fusion_model = _load_models(args.hr_ckpt, args.lr_ckpt,
                                                    args.fusion)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for clip_path in _clip_paths(args.clip):
        clip = load_clip(clip_path)
        _, labels, flops = run_sequence(clip, hr_model, lr_model, fusion_model)
        dest = out / f"{clip_path.stem}.pred.tnsr"
        save_labels(dest, labels)
        print(f"{clip_path}: {labels.shape[0]} frames, "
              f"{flops / len(clip.frames) / 1e6:.2f} MFLOPs/frame -> {dest}")


def cmd_eval(args):
    hr_model, lr_model, fusion_model = _load_models(args.hr_ckpt, args.lr_ckpt,
                                                    args.fusion)
    clips = []
    first = None
    for clip_path in _clip_paths(args.clip):
        clip = load_clip(clip_path)
        if first is None:
            first = clip
        labels = _load_clip_labels(clip_path, args.labels, clip)
        frames, _ = decode_clip(clip)
        annotated = _annotated_frames(labels)
        if not annotated:
            raise ValueError(f"{clip_path}: no annotated frames")
        p = annotated[-1]
        clips.append(EvalClip(frames=frames, labels=labels[p], annotated_index=p))
    gop = args.gop if args.gop else first.gop
    rows, overall = miou_by_distance(clips, hr_model, lr_model, fusion_model, gop,
                                     first.block_size, first.search_range)
    h, w = first.height, first.width
    hr_frame, lr_frame, creff = frame_costs(hr_model, lr_model, fusion_model.config,
                                            h, w)
    report = amortized_cost(hr_frame, lr_frame, creff, gop)
    lines = ["d,miou_d,cells,skipped"]
    for d, value, cells, skipped in rows:
        lines.append(f"{d},{value!r},{cells},{skipped}")
    lines.append(f"overall,{overall!r},,")
    lines.append(f"hr_frame_flops,{hr_frame!r},,")
    lines.append(f"lr_frame_flops,{lr_frame!r},,")
    lines.append(f"creff_flops,{creff!r},,")
    lines.append(f"amortized_flops,{report.average!r},,")
    lines.append(f"ratio_to_hr,{report.ratio!r},,")
    text = "\n".join(lines) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    print(text, end="")
    if args.append_curve:
        curve = Path(args.append_curve)
        point = RatePoint(flops=report.average, miou=overall)
        if not curve.exists():
            curve.write_text("flops,miou\n")
        with open(curve, "a") as fh:
            fh.write(f"{point.flops!r},{point.miou!r}\n")


def cmd_bd(args):
    anchor = load_curve(args.anchor)
    test = load_curve(args.test)
    bd_miou, bd_flops = bd_metrics(anchor, test)
    print(f"bd_miou {bd_miou!r}")
    print(f"bd_flops_percent {bd_flops!r}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="altseg",
        description="Altering-resolution video segmentation at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic moving-shapes clips")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=8)
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-speed", type=int, default=2)
    p.add_argument("--annotate", choices=("all", "last"), default="all")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("encode", help="encode raw frame tensors into a clip")
    p.add_argument("--in", dest="inp", required=True,
                   help="directory of per-frame .tnsr files, or one rank-4 tensor")
    p.add_argument("--out", required=True)
    p.add_argument("--gop", type=int, required=True)
    p.add_argument("--block", type=int, default=4)
    p.add_argument("--search", type=int, default=3)
    p.add_argument("--quant", type=float, default=0.0)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train-hr", help="train the full-resolution branch")
    p.add_argument("--clip", required=True, help=".arsg file or directory")
    p.add_argument("--labels", required=True, help="directory of .labels.tnsr files")
    p.add_argument("--config", required=True, help="JSON with model/train sections")
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="optional loss-history CSV")
    p.set_defaults(func=cmd_train_hr)

    p = sub.add_parser("train-lr", help="train the reduced branch with fusion")
    p.add_argument("--clip", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--hr-ckpt", required=True)
    p.add_argument("--config", required=True,
                   help="JSON with model/fusion/train sections")
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="optional loss-history CSV")
    p.set_defaults(func=cmd_train_lr)

    p = sub.add_parser("infer", help="segment clips and write label tensors")
    p.add_argument("--clip", required=True)
    p.add_argument("--hr-ckpt", required=True)
    p.add_argument("--lr-ckpt", required=True)
    p.add_argument("--fusion", choices=VARIANTS,
                   help="override the checkpoint's fusion variant")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="mIoU by keyframe distance plus cost report")
    p.add_argument("--clip", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--hr-ckpt", required=True)
    p.add_argument("--lr-ckpt", required=True)
    p.add_argument("--fusion", choices=VARIANTS)
    p.add_argument("--gop", type=int, help="override the clips' group length")
    p.add_argument("--report", help="write the report CSV here")
    p.add_argument("--append-curve", help="append (amortized flops, overall miou)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bd", help="compare two rate curves")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_bd)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (FileFormatError, ClipFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
