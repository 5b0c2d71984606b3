"""Training loop, learning-rate schedule and checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .config import TrainConfig, from_flat, model_hash, to_flat
from .model import PromptSegmenter
from .perturb import perturb_images, sample_perturbation
from .scenegen import DatasetError, load_manifest, stable_seed

log = logging.getLogger(__name__)

METRIC_FIELDS = ("iter", "lr", "L_seg", "L_reg", "L_contra", "L_cons", "L_total")
CHECKPOINT_FORMAT = "promptseg-checkpoint-1"


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to ``cfg.lr`` over ``cfg.warmup_iters``, then constant."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if cfg.warmup_iters == 0 or iteration >= cfg.warmup_iters:
        return cfg.lr
    return cfg.lr * iteration / cfg.warmup_iters


def build_model(cfg: TrainConfig) -> PromptSegmenter:
    if cfg.contra and not cfg.model.domain_prompt:
        raise TrainingError("train.contra needs model.domain_prompt (it acts on the domain embeddings)")
    return PromptSegmenter(cfg.model, seed=cfg.seed)


class FlatAdamW:
    """AdamW over one contiguous buffer holding every trainable parameter.

    The parameters become views into the buffer, so a step is a handful of
    large ops instead of a dozen small ones per tensor. Gradients are
    gathered into the buffer just before each step.
    """

    def __init__(self, params, **kwargs):
        self.params = list(params)
        self.numels = [p.numel() for p in self.params]
        flat = torch.cat([p.detach().reshape(-1) for p in self.params]) if self.params else torch.zeros(0)
        self.flat = torch.nn.Parameter(flat)
        for p, view in zip(self.params, self.flat.data.split(self.numels)):
            p.data = view.view_as(p)
        self.inner = torch.optim.AdamW([self.flat], **kwargs)

    @property
    def param_groups(self):
        return self.inner.param_groups

    def zero_grad(self, set_to_none: bool = True) -> None:
        for p in self.params:
            p.grad = None
        self.flat.grad = None

    def step(self) -> None:
        grads = [p.grad.reshape(-1) if p.grad is not None else p.new_zeros(p.numel()) for p in self.params]
        self.flat.grad = torch.cat(grads)
        self.inner.step()

    def state_dict(self) -> dict:
        return self.inner.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self.inner.load_state_dict(state)


def build_optimizer(model: PromptSegmenter, cfg: TrainConfig) -> FlatAdamW:
    return FlatAdamW(model.trainable_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def perturb_batch(images: torch.Tensor, cfg: TrainConfig, iteration: int) -> torch.Tensor:
    """Perturbed copy of every image; sample ``i`` at step ``t`` has its own seed."""
    params = [sample_perturbation(stable_seed("perturb", cfg.seed, iteration, i), cfg.ranges)
              for i in range(images.shape[0])]
    return perturb_images(images, params)


def compute_losses(model: PromptSegmenter, images: torch.Tensor, labels: torch.Tensor | L.LabelTargets,
                   cfg: TrainConfig, aug: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """Forward the (original[, perturbed]) batch and return every loss component plus ``L_total``.

    ``labels`` is (B, H, W) or the batch's precomputed ``LabelTargets``.
    """
    w = cfg.loss
    b = images.shape[0]
    batch = images if aug is None else torch.cat([images, aug])
    out = model(batch)
    n_sup = batch.shape[0] if (aug is not None and cfg.seg_on_aug) else b
    sup = slice(0, n_sup)
    if n_sup == b:
        gt = labels
    else:
        gt = L.LabelTargets.cat([labels, labels]) if isinstance(labels, L.LabelTargets) else torch.cat([labels, labels])
    trace = out.trace.select(sup)
    comps = {
        "L_seg": L.segmentation_loss(trace, gt, w),
        "L_reg_L": L.reg_language(out.text[sup], out.text0),
        "L_reg_VL": L.reg_vision_language(out.vl_feats[sup], out.text[sup], gt, w.tau_vl),
        "L_reg_V": L.reg_vision(out.feats.class_token[sup], out.frozen_cls[sup]),
    }
    comps["L_reg"] = comps["L_reg_L"] + comps["L_reg_VL"] + comps["L_reg_V"]
    zero = comps["L_seg"].new_zeros(())
    comps["L_contra"] = zero
    comps["L_cons"] = zero
    if aug is not None and cfg.contra:
        part = L.partition_batch(["original"] * b + ["augmented"] * b, b)
        comps["L_contra"] = L.contrastive_loss(out.pi, part, w.tau)
    if aug is not None and cfg.cons:
        comps["L_cons"] = L.consistency_loss(out.trace.select(slice(0, b)), out.trace.select(slice(b, 2 * b)), w)
    try:
        comps["L_total"] = L.total_loss({k: comps[k] for k in L.COMPONENTS}, w)
    except L.LossError as exc:
        breakdown = {k: float(v.detach()) for k, v in comps.items()}
        raise TrainingError(f"{exc}; breakdown {breakdown}") from None
    return comps


def train_step(model: PromptSegmenter, optimizer: FlatAdamW, images: torch.Tensor,
               labels: torch.Tensor | L.LabelTargets, cfg: TrainConfig, iteration: int) -> dict[str, float]:
    """One optimizer update on a batch of B originals (plus their perturbed copies)."""
    if images.shape[0] < 2:
        raise TrainingError("a training batch needs at least 2 images")
    lr = lr_at(iteration, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.train()
    aug = perturb_batch(images, cfg, iteration) if cfg.perturb else None
    comps = compute_losses(model, images, labels, cfg, aug)
    optimizer.zero_grad(set_to_none=True)
    comps["L_total"].backward()
    optimizer.step()
    row = {"iter": iteration, "lr": lr}
    row.update({k: float(comps[k].detach()) for k in METRIC_FIELDS[2:]})
    return row


def label_targets(labels: torch.Tensor, cfg: TrainConfig) -> L.LabelTargets:
    """Loss targets for a whole (N, H, W) label set on the model's mask and patch grids."""
    m = cfg.model
    h, w = labels.shape[-2:]
    if h % m.patch_size or w % m.patch_size:
        raise DatasetError(f"label size {h}x{w} is not divisible by patch size {m.patch_size}")
    return L.LabelTargets.build(labels, (h // m.pixel_stride, w // m.pixel_stride),
                                (h // m.patch_size, w // m.patch_size), m.num_classes,
                                torch.get_default_dtype())


class BatchSampler:
    """Shuffled epochs of fixed-size index batches, deterministic per seed."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < batch_size:
            raise DatasetError(f"train split has {n} images, fewer than batch size {batch_size}")
        self.n, self.batch_size = n, batch_size
        self.rng = np.random.default_rng(stable_seed("batches", seed))
        self.order: list[int] = []

    def next(self) -> list[int]:
        if len(self.order) < self.batch_size:
            self.order = self.rng.permutation(self.n).tolist()
        batch, self.order = self.order[: self.batch_size], self.order[self.batch_size:]
        return batch


def format_metrics(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for row in rows:
        writer.writerow([row["iter"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])
    return buf.getvalue()


@dataclass
class FitResult:
    model: PromptSegmenter
    optimizer: FlatAdamW
    metrics: list[dict]
    checkpoint: Path | None


def fit(cfg: TrainConfig, train_data: tuple[torch.Tensor, torch.Tensor] | None = None,
        write: bool = True) -> FitResult:
    """Train for ``cfg.iterations`` steps; write ``metrics.csv`` and checkpoints under ``cfg.checkpoint_dir``."""
    if train_data is None:
        if not cfg.data.manifest:
            raise DatasetError("data.manifest is not set")
        manifest = load_manifest(cfg.data.manifest)
        if manifest.num_classes != cfg.model.num_classes:
            raise DatasetError(f"dataset has K={manifest.num_classes}, model.num_classes={cfg.model.num_classes}")
        train_data = manifest.load_split("train")
    images, labels = train_data
    model = build_model(cfg)
    targets = label_targets(labels, cfg)
    optimizer = build_optimizer(model, cfg)
    sampler = BatchSampler(len(images), cfg.batch_size, cfg.seed)
    out_dir = Path(cfg.checkpoint_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for it in range(cfg.iterations):
        idx = sampler.next()
        row = train_step(model, optimizer, images[idx], targets[idx], cfg, it)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            rows.append(row)
        if it % 100 == 0:
            log.info("iter %d lr %.2e L_total %.4f L_seg %.4f", it, row["lr"], row["L_total"], row["L_seg"])
        if write and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"iter_{it + 1:06d}.pt", model, optimizer, it + 1, cfg)
    ckpt = None
    if write:
        (out_dir / "metrics.csv").write_text(format_metrics(rows))
        ckpt = save_checkpoint(out_dir / "final.pt", model, optimizer, cfg.iterations, cfg)
    return FitResult(model, optimizer, rows, ckpt)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: PromptSegmenter
    config: TrainConfig
    iteration: int
    optimizer_state: dict | None
    frozen_hashes: dict[str, str]

    def optimizer(self) -> FlatAdamW:
        opt = build_optimizer(self.model, self.config)
        if self.optimizer_state is not None:
            opt.load_state_dict(self.optimizer_state)
        return opt


def save_checkpoint(path: str | Path, model: PromptSegmenter, optimizer: FlatAdamW | None,
                    iteration: int, cfg: TrainConfig) -> Path:
    path = Path(path)
    blob = {
        "format": CHECKPOINT_FORMAT,
        "config": to_flat(cfg),
        "config_hash": model_hash(cfg.model),
        "iteration": int(iteration),
        "model": model.state_dict(),
        "frozen_hashes": model.frozen_hashes(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, expected: TrainConfig | None = None, force: bool = False) -> Checkpoint:
    """Load a checkpoint; refuses a different architecture than ``expected`` unless ``force``."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable or truncated checkpoint ({type(exc).__name__}: {exc})") from None
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    try:
        cfg = from_flat(blob["config"])
        stored_hash, state = blob["config_hash"], blob["model"]
        iteration, hashes = int(blob["iteration"]), dict(blob["frozen_hashes"])
    except Exception as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    if stored_hash != model_hash(cfg.model):
        raise CheckpointError(f"{path}: stored config hash does not match its own config")
    if expected is not None and model_hash(expected.model) != stored_hash and not force:
        raise CheckpointError(f"{path}: config hash {stored_hash} != expected {model_hash(expected.model)}")
    model = PromptSegmenter(cfg.model, seed=cfg.seed)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: state does not fit the model ({exc})") from None
    if model.frozen_hashes() != hashes:
        raise CheckpointError(f"{path}: frozen parameters do not match their recorded hashes")
    model.eval()
    return Checkpoint(model, cfg, iteration, blob.get("optimizer"), hashes)
