"""Training loop, checkpointing, and the quantitative evaluation protocol
(per-caption sample MSE and coordinate variance), plus template-accuracy and
ablation harnesses for the synthetic set."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import diffusion, plotting
from .diffusion import NoiseSchedule, make_schedule, q_sample_batch, training_loss
from .errors import DivergedTraining, EmptyDataset
from .heatmaps import HeatmapStack, decode_heatmaps, default_sigma, encode_pose
from .model import DenoiserConfig, PoseDenoiser, load_checkpoint, save_checkpoint
from .text import Vocabulary, tokenize


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 16
    learning_rate: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    ema_decay: float | None = None
    seed: int = 0
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma: float | None = None  # None: bandwidth scaled from the grid size
    checkpoint_interval: int = 5000
    loss_smoothing: float = 0.99
    lr_schedule: str = "constant"  # "constant" or "cosine" decay to zero

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("steps, batch size and learning rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "cosine":
            return self.learning_rate * 0.5 * (1.0 + np.cos(np.pi * (step - 1) / self.steps))
        return self.learning_rate

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.timesteps, self.beta_start, self.beta_end)


def _prepare_tensors(records, config: DenoiserConfig, vocab: Vocabulary, sigma: float):
    """Heatmap-encode every record and pad the tokenized captions."""
    n, k, s = len(records), config.keypoint_count, config.grid_size
    x0 = torch.empty(n, k, s, s)
    token_lists = []
    for i, record in enumerate(records):
        stack = encode_pose(record.pose, s, sigma)
        x0[i] = torch.from_numpy(np.array(stack.values))
        token_lists.append(tokenize(record.caption, vocab))
    max_len = max(len(t) for t in token_lists)
    tokens = torch.zeros(n, max_len, dtype=torch.long)
    mask = torch.zeros(n, max_len)
    for i, ids in enumerate(token_lists):
        tokens[i, : len(ids)] = torch.tensor(ids)
        mask[i, : len(ids)] = 1.0
    return x0, tokens, mask


def train(
    records,
    denoiser_config: DenoiserConfig,
    train_config: TrainConfig,
    out_dir,
    vocab: Vocabulary,
):
    """Noise-prediction training; returns (checkpoint_path, history).

    Emits loss_history.csv, loss_curve.png and periodic checkpoints under
    out_dir. Fully seeded: identical inputs give identical histories."""
    if not records:
        raise EmptyDataset("empty training set")
    os.makedirs(out_dir, exist_ok=True)
    cfg = train_config
    sigma = cfg.sigma if cfg.sigma is not None else default_sigma(denoiser_config.grid_size)
    schedule = cfg.schedule()
    x0_all, tokens, mask = _prepare_tensors(records, denoiser_config, vocab, sigma)
    n = len(records)
    k, s = denoiser_config.keypoint_count, denoiser_config.grid_size

    torch.manual_seed(cfg.seed)
    model = PoseDenoiser(denoiser_config)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas
    )
    ema_state = None
    if cfg.ema_decay is not None:
        ema_state = {name: p.detach().clone() for name, p in model.state_dict().items()}

    gen = torch.Generator().manual_seed(cfg.seed + 1)
    history = []
    smoothed = None
    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
    extra = {
        "timesteps": cfg.timesteps,
        "beta_start": cfg.beta_start,
        "beta_end": cfg.beta_end,
        "sigma": sigma,
    }

    for step in range(1, cfg.steps + 1):
        if cfg.lr_schedule != "constant":
            lr = cfg.lr_at(step)
            for group in optimizer.param_groups:
                group["lr"] = lr
        idx = torch.randint(n, (cfg.batch_size,), generator=gen)
        t = torch.randint(1, schedule.steps + 1, (cfg.batch_size,), generator=gen)
        eps = torch.randn(cfg.batch_size, k, s, s, generator=gen)
        x_t = q_sample_batch(x0_all[idx], t, eps, schedule)
        text = model.encode_text(tokens[idx], mask[idx])
        loss = training_loss(eps, model(x_t, t, text))
        if not torch.isfinite(loss):
            _finalize(out_dir, history)
            raise DivergedTraining(f"non-finite loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        if ema_state is not None:
            with torch.no_grad():
                for name, p in model.state_dict().items():
                    ema_state[name].mul_(cfg.ema_decay).add_(p, alpha=1 - cfg.ema_decay)

        value = float(loss.detach())
        smoothed = value if smoothed is None else (
            cfg.loss_smoothing * smoothed + (1 - cfg.loss_smoothing) * value
        )
        history.append((step, value, smoothed))

        if step % cfg.checkpoint_interval == 0 or step == cfg.steps:
            save_checkpoint(model, ckpt_path, vocab, extra)
            if ema_state is not None:
                backup = {name: p.detach().clone() for name, p in model.state_dict().items()}
                model.load_state_dict(ema_state)
                save_checkpoint(model, os.path.join(out_dir, "checkpoint_ema.ckpt"), vocab, extra)
                model.load_state_dict(backup)

    _finalize(out_dir, history)
    return ckpt_path, history


def _finalize(out_dir, history) -> None:
    if not history:
        return
    with open(os.path.join(out_dir, "loss_history.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "smoothed_loss"])
        writer.writerows(history)
    plotting.save_loss_curve(history, os.path.join(out_dir, "loss_curve.png"))


def read_loss_history(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [(int(r[0]), float(r[1]), float(r[2])) for r in reader]


def sample_heatmaps(
    model: PoseDenoiser,
    vocab: Vocabulary,
    caption: str,
    count: int,
    seed: int,
    schedule: NoiseSchedule,
    sigma: float | None = None,
):
    """Generate `count` heatmap stacks conditioned on one caption."""
    cfg = model.config
    if sigma is None:
        sigma = default_sigma(cfg.grid_size)
    ids = torch.tensor([tokenize(caption, vocab)])
    with torch.no_grad():
        text = model.encode_text(ids)[0]
    shape = (count, cfg.keypoint_count, cfg.grid_size, cfg.grid_size)
    x = diffusion.sample(model, text, schedule, shape, seed)
    return [HeatmapStack(x[i].numpy(), sigma) for i in range(count)]


@dataclass(frozen=True)
class MetricsReport:
    mse: float | None  # grid px^2, averaged over captions
    variance: float | None  # grid px^2, averaged over captions
    samples_per_caption: int
    per_caption: list  # one dict per validation record

    def to_json_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)


def _caption_metrics(samples, gt_pose, visibility_threshold: float):
    """Brute-force-checkable per-caption metrics over decoded samples."""
    decoded = [decode_heatmaps(s.values, visibility_threshold) for s in samples]
    k = gt_pose.keypoint_count

    sq_errors = []
    excluded = 0
    for pose in decoded:
        for i in range(k):
            if not gt_pose.visibility[i]:
                continue
            if not pose.visibility[i]:
                excluded += 1
                continue
            dx = pose.coordinates[i, 0] - gt_pose.coordinates[i, 0]
            dy = pose.coordinates[i, 1] - gt_pose.coordinates[i, 1]
            sq_errors.append(dx * dx + dy * dy)

    variances = []
    for i in range(k):
        coords = np.array(
            [p.coordinates[i] for p in decoded if p.visibility[i]]
        )
        if len(coords) == 0:
            continue
        variances.append(coords.var(axis=0))  # population variance, per axis

    mse = float(np.mean(sq_errors)) if sq_errors else None
    variance = float(np.mean(variances)) if variances else None
    degenerate = all(not p.visibility.any() for p in decoded)
    return mse, variance, excluded, degenerate


def evaluate_mse_var(
    checkpoint_path,
    val_records,
    samples_per_caption: int = 10,
    seed: int = 0,
    timesteps: int | None = None,
    beta_start: float | None = None,
    beta_end: float | None = None,
    visibility_threshold: float = 0.2,
) -> MetricsReport:
    """Per caption: generate samples, decode, and report sample-vs-truth MSE
    over visible keypoints and the coordinate variance across samples.
    Keypoints decoded invisible are excluded and counted."""
    if not val_records:
        raise EmptyDataset("empty validation set")
    model, vocab, extra = load_checkpoint(checkpoint_path)
    model.eval()
    schedule = make_schedule(
        timesteps if timesteps is not None else extra.get("timesteps", 200),
        beta_start if beta_start is not None else extra.get("beta_start", 1e-4),
        beta_end if beta_end is not None else extra.get("beta_end", 0.02),
    )

    per_caption = []
    for index, record in enumerate(val_records):
        caption_seed = seed * 1_000_003 + index
        samples = sample_heatmaps(
            model, vocab, record.caption, samples_per_caption, caption_seed, schedule
        )
        mse, variance, excluded, degenerate = _caption_metrics(
            samples, record.pose, visibility_threshold
        )
        per_caption.append(
            {
                "record_id": record.record_id,
                "caption": record.caption,
                "mse": mse,
                "variance": variance,
                "excluded_keypoints": excluded,
                "sample_count": samples_per_caption,
                "degenerate": degenerate,
            }
        )

    mses = [e["mse"] for e in per_caption if e["mse"] is not None]
    variances = [e["variance"] for e in per_caption if e["variance"] is not None]
    return MetricsReport(
        mse=float(np.mean(mses)) if mses else None,
        variance=float(np.mean(variances)) if variances else None,
        samples_per_caption=samples_per_caption,
        per_caption=per_caption,
    )


def nearest_template(pose, templates, grid_size: int) -> str | None:
    """Template whose canonical pose is closest in mean visible-keypoint
    distance; None when the pose has no visible keypoints."""
    if not pose.visibility.any():
        return None
    best, best_dist = None, None
    for template in templates:
        canon = template.canonical_pose(grid_size)
        deltas = pose.coordinates[pose.visibility] - canon.coordinates[pose.visibility]
        dist = float(np.linalg.norm(deltas, axis=1).mean())
        if best_dist is None or dist < best_dist:
            best, best_dist = template.template_id, dist
    return best


def template_accuracy(
    checkpoint_path,
    templates,
    n_samples: int,
    seed: int = 0,
    timesteps: int | None = None,
    visibility_threshold: float = 0.2,
) -> dict:
    """For each template's prompt, count generated poses whose nearest
    template (strictly) is the prompted one."""
    model, vocab, extra = load_checkpoint(checkpoint_path)
    model.eval()
    schedule = make_schedule(
        timesteps if timesteps is not None else extra.get("timesteps", 200),
        extra.get("beta_start", 1e-4),
        extra.get("beta_end", 0.02),
    )
    grid_size = model.config.grid_size
    per_template = {}
    correct_total = 0
    for index, template in enumerate(templates):
        caption = template.caption_patterns[0]
        samples = sample_heatmaps(
            model, vocab, caption, n_samples, seed * 1_000_003 + index, schedule
        )
        correct = 0
        for stack in samples:
            pose = decode_heatmaps(stack.values, visibility_threshold)
            if nearest_template(pose, templates, grid_size) == template.template_id:
                correct += 1
        per_template[template.template_id] = correct / n_samples
        correct_total += correct
    return {
        "per_template": per_template,
        "overall": correct_total / (n_samples * len(templates)),
        "n_samples": n_samples,
    }


def run_ablation(
    records,
    eval_records,
    denoiser_config: DenoiserConfig,
    train_config: TrainConfig,
    out_dir,
    vocab: Vocabulary,
    samples_per_caption: int = 4,
) -> dict:
    """Train and evaluate the graph-block model and its plain-U-Net ablation
    side by side; writes comparison.json and a loss comparison figure."""
    os.makedirs(out_dir, exist_ok=True)
    variants = {
        "with_graph_block": True,
        "without_graph_block": False,
    }
    report = {}
    histories = {}
    for name, enabled in variants.items():
        variant_dir = os.path.join(out_dir, name)
        cfg_dict = asdict(denoiser_config)
        cfg_dict["channel_multipliers"] = tuple(cfg_dict["channel_multipliers"])
        cfg_dict["attention_divisors"] = tuple(cfg_dict["attention_divisors"])
        cfg_dict["use_graph_block"] = enabled
        variant_config = DenoiserConfig(**cfg_dict)
        ckpt, history = train(records, variant_config, train_config, variant_dir, vocab)
        metrics = evaluate_mse_var(
            ckpt,
            eval_records,
            samples_per_caption=samples_per_caption,
            seed=train_config.seed,
            timesteps=train_config.timesteps,
            beta_start=train_config.beta_start,
            beta_end=train_config.beta_end,
        )
        histories[name] = history
        report[name] = {
            "checkpoint": ckpt,
            "final_loss": history[-1][1],
            "final_smoothed_loss": history[-1][2],
            "mse": metrics.mse,
            "variance": metrics.variance,
        }
    with open(os.path.join(out_dir, "comparison.json"), "w") as fh:
        json.dump(report, fh, indent=2)
    plotting.save_loss_comparison(histories, os.path.join(out_dir, "loss_comparison.png"))
    return report
