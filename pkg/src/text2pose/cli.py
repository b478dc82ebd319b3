"""Command-line surface for dataset prep, training, sampling, rendering and
evaluation.

Exit codes: 0 success, 1 usage error, 2 runtime error (error name on stderr).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import dataset, diffusion, training
from .errors import Text2PoseError
from .heatmaps import (
    decode_heatmaps,
    default_sigma,
    encode_pose,
    read_heatmap_file,
    read_pose_json,
    write_heatmap_file,
    write_pose_json,
)
from .model import DenoiserConfig, load_checkpoint
from .skeleton import build_default_topology, render_pose, write_png
from .text import Vocabulary

# Profile constants: "desk" is sized to train on a small CPU, "full" matches
# the 17x64x64 setting with T=1000.
PROFILES = {
    "desk": {
        "grid_size": 32,
        "timesteps": 200,
        "base_channels_per_keypoint": 1,
        "steps": 13000,
        "batch_size": 16,
        "learning_rate": 5e-4,
        "lr_schedule": "cosine",
    },
    "full": {
        "grid_size": 64,
        "timesteps": 1000,
        "base_channels_per_keypoint": 4,
        "steps": 100000,
        "batch_size": 16,
        "learning_rate": 1e-4,
        "lr_schedule": "constant",
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="text2pose")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep-coco", help="filter COCO annotations into a manifest")
    p.add_argument("--annotations", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth-data", help="generate the synthetic template dataset")
    p.add_argument("--templates", default="default", help="'default' or a template JSON file")
    p.add_argument("--count", type=int, default=400, help="records per template")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-size", type=int, default=32)

    p = sub.add_parser("train", help="train the denoiser on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--no-spatial-block", action="store_true",
                   help="train the plain-U-Net ablation")
    p.add_argument("--steps", type=int, default=None, help="override profile step count")

    p = sub.add_parser("sample", help="generate poses from a caption")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--render-size", type=int, default=256)

    p = sub.add_parser("render", help="render a pose JSON to PNG")
    p.add_argument("--pose", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--grid-size", type=int, default=64)

    p = sub.add_parser("eval", help="MSE/variance evaluation over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--samples-per-caption", type=int, default=10)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-records", type=int, default=None)

    p = sub.add_parser("ablation", help="side-by-side graph-block vs plain U-Net run")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--eval-records", type=int, default=5)
    p.add_argument("--samples-per-caption", type=int, default=4)

    p = sub.add_parser("inspect-schedule", help="dump a noise schedule as CSV")
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--out", required=True)

    p = sub.add_parser("encode", help="pose JSON -> heatmap file")
    p.add_argument("--pose", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-size", type=int, default=64)
    p.add_argument("--sigma", type=float, default=None)

    p = sub.add_parser("decode", help="heatmap file -> pose JSON")
    p.add_argument("--heatmaps", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.2)

    return parser


def _load_templates(spec: str):
    if spec == "default":
        return dataset.default_templates()
    with open(spec) as fh:
        raw = json.load(fh)
    return tuple(
        dataset.PoseTemplate(
            t["template_id"],
            t["coordinates"],
            tuple(t["caption_patterns"]),
            t.get("jitter_scale", 1.5),
        )
        for t in raw["templates"]
    )


def _train_configs(args):
    profile = PROFILES[args.profile]
    steps = args.steps if getattr(args, "steps", None) else profile["steps"]
    train_cfg = training.TrainConfig(
        steps=steps,
        batch_size=profile["batch_size"],
        learning_rate=profile["learning_rate"],
        seed=args.seed,
        timesteps=profile["timesteps"],
        lr_schedule=profile["lr_schedule"],
    )
    return profile, train_cfg


def run(args) -> int:
    if args.command == "prep-coco":
        records = dataset.parse_coco(args.annotations, args.captions, args.grid_size, args.seed)
        dataset.write_manifest(records, args.out)
        print(f"wrote {len(records)} records to {args.out}")

    elif args.command == "synth-data":
        templates = _load_templates(args.templates)
        records = dataset.synthesize(templates, args.count, args.seed, args.grid_size)
        dataset.write_manifest(records, args.out)
        print(f"wrote {len(records)} records to {args.out}")

    elif args.command == "train":
        records = dataset.read_manifest(args.manifest)
        profile, train_cfg = _train_configs(args)
        vocab = Vocabulary.build(r.caption for r in records)
        denoiser_cfg = DenoiserConfig(
            grid_size=profile["grid_size"],
            base_channels_per_keypoint=profile["base_channels_per_keypoint"],
            use_graph_block=not args.no_spatial_block,
            vocab_size=vocab.size,
        )
        ckpt, history = training.train(records, denoiser_cfg, train_cfg, args.out_dir, vocab)
        print(f"checkpoint: {ckpt}")
        print(f"final smoothed loss: {history[-1][2]:.6f}")

    elif args.command == "sample":
        model, vocab, extra = load_checkpoint(args.checkpoint)
        model.eval()
        schedule = diffusion.make_schedule(
            extra.get("timesteps", 200),
            extra.get("beta_start", 1e-4),
            extra.get("beta_end", 0.02),
        )
        os.makedirs(args.out_dir, exist_ok=True)
        stacks = training.sample_heatmaps(
            model, vocab, args.caption, args.count, args.seed, schedule,
            sigma=extra.get("sigma"),
        )
        topology = build_default_topology()
        for i, stack in enumerate(stacks):
            base = os.path.join(args.out_dir, f"sample_{i:03d}")
            write_heatmap_file(stack, base + ".phm")
            pose = decode_heatmaps(stack.values)
            write_pose_json(pose, base + ".json")
            image = render_pose(pose, topology, stack.grid_size, args.render_size)
            write_png(image, base + ".png")
        print(f"wrote {len(stacks)} samples to {args.out_dir}")

    elif args.command == "render":
        pose = read_pose_json(args.pose)
        image = render_pose(pose, build_default_topology(), args.grid_size, args.size)
        write_png(image, args.out)
        print(f"wrote {args.out}")

    elif args.command == "eval":
        records = dataset.read_manifest(args.manifest)
        if args.max_records is not None:
            records = records[: args.max_records]
        report = training.evaluate_mse_var(
            args.checkpoint, records,
            samples_per_caption=args.samples_per_caption, seed=args.seed,
        )
        report.write_json(args.out)
        from .plotting import save_metrics_figure

        save_metrics_figure(report, os.path.splitext(args.out)[0] + ".png")
        print(f"mse: {report.mse}  variance: {report.variance}")

    elif args.command == "ablation":
        records = dataset.read_manifest(args.manifest)
        profile, train_cfg = _train_configs(args)
        vocab = Vocabulary.build(r.caption for r in records)
        denoiser_cfg = DenoiserConfig(
            grid_size=profile["grid_size"],
            base_channels_per_keypoint=profile["base_channels_per_keypoint"],
            vocab_size=vocab.size,
        )
        report = training.run_ablation(
            records, records[: args.eval_records], denoiser_cfg, train_cfg,
            args.out_dir, vocab, samples_per_caption=args.samples_per_caption,
        )
        print(json.dumps(report, indent=2))

    elif args.command == "inspect-schedule":
        schedule = diffusion.make_schedule(args.T, args.beta_start, args.beta_end)
        diffusion.write_schedule_csv(schedule, args.out)
        from .plotting import save_schedule_plot

        save_schedule_plot(schedule, os.path.splitext(args.out)[0] + ".png")
        print(f"wrote {args.out}")

    elif args.command == "encode":
        pose = read_pose_json(args.pose)
        sigma = args.sigma if args.sigma is not None else default_sigma(args.grid_size)
        write_heatmap_file(encode_pose(pose, args.grid_size, sigma), args.out)
        print(f"wrote {args.out}")

    elif args.command == "decode":
        stack = read_heatmap_file(args.heatmaps)
        write_pose_json(decode_heatmaps(stack.values, args.threshold), args.out)
        print(f"wrote {args.out}")

    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return run(args)
    except (Text2PoseError, OSError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
