"""Evaluation reports and the component ablation."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .corruptions import GROUPS, corruption_group
from .metrics import ConfusionMatrix, PRCurve, accumulate_confusion, iou_from_confusion, pr_curve_and_ap
from .model import PromptSegmenter
from .scenegen import IGNORE, DatasetError, DatasetManifest, load_manifest
from .trainer import fit, load_checkpoint

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


@dataclass
class DomainResult:
    domain: str
    split: str
    num_images: int
    confusion: ConfusionMatrix
    ious: list[float | None]
    miou: float
    pr: list[PRCurve] | None = None


@dataclass
class Report:
    num_classes: int
    domains: list[DomainResult]
    groups: dict[str, float] | None = None  # corruption group -> mean mIoU
    source: str = ""

    def domain(self, name: str) -> DomainResult:
        for d in self.domains:
            if d.domain == name:
                return d
        raise KeyError(name)

    def held_out_miou(self) -> float:
        """Mean mIoU over the non-corruption val domains."""
        vals = [d.miou for d in self.domains if d.split == "val" and corruption_group(d.domain) is None]
        if not vals:
            raise EvaluationError("report has no held-out val domain")
        return float(np.mean(vals))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", "domain", "images", "mIoU"] + [f"IoU_{k}" for k in range(self.num_classes)])
        for d in self.domains:
            w.writerow([d.split, d.domain, d.num_images, _fmt(d.miou)] + [_fmt(v) for v in d.ious])
        return buf.getvalue()

    def pr_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain", "class", "threshold", "precision", "recall"])
        for d in self.domains:
            for k, curve in enumerate(d.pr or []):
                for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
                    w.writerow([d.domain, k, _fmt(t), _fmt(p), _fmt(r)])
        return buf.getvalue()

    def ap_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain", "class", "AP"])
        for d in self.domains:
            for k, curve in enumerate(d.pr or []):
                w.writerow([d.domain, k, _fmt(curve.ap)])
        return buf.getvalue()

    def groups_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "mIoU"])
        for g, v in (self.groups or {}).items():
            w.writerow([g, _fmt(v)])
        return buf.getvalue()

    def to_text(self) -> str:
        k = self.num_classes
        head = f"{'domain':<20}{'split':<7}{'imgs':>5}{'mIoU':>8}" + "".join(f"{'c' + str(i):>8}" for i in range(k))
        lines = [f"evaluation of {self.source}" if self.source else "evaluation", head, "-" * len(head)]
        for d in self.domains:
            cells = "".join(f"{_pct(v):>8}" for v in d.ious)
            lines.append(f"{d.domain:<20}{d.split:<7}{d.num_images:>5}{_pct(d.miou):>8}{cells}")
        held = [d for d in self.domains if d.split == "val" and corruption_group(d.domain) is None]
        if held:
            lines.append(f"held-out mean mIoU: {_pct(self.held_out_miou())}")
        if any(d.pr for d in self.domains):
            lines.append("")
            lines.append(f"{'AP':<20}" + "".join(f"{'c' + str(i):>8}" for i in range(k)))
            for d in self.domains:
                if d.pr:
                    lines.append(f"{d.domain:<20}" + "".join(f"{_pct(c.ap):>8}" for c in d.pr))
        if self.groups:
            lines.append("")
            lines.append("corruption groups (mIoU)")
            for g, v in self.groups.items():
                lines.append(f"  {g:<10}{_pct(v):>8}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _pct(v) -> str:
    return "n/a" if v is None else f"{100 * v:.2f}"


@torch.no_grad()
def evaluate_split(model: PromptSegmenter, images: torch.Tensor, labels: torch.Tensor, domain: str,
                   split: str = "val", pr: bool = False, batch_size: int = 16) -> DomainResult:
    """Confusion matrix, IoU and optionally per-class PR curves of one split."""
    if len(images) == 0:
        raise EvaluationError(f"domain {domain!r} ({split}) has no images")
    k = model.cfg.num_classes
    model.eval()
    cm = ConfusionMatrix.zeros(k)
    scores, truth = [], []
    for start in range(0, len(images), batch_size):
        x, y = images[start:start + batch_size], labels[start:start + batch_size]
        prob = model.predict(x)
        cm = accumulate_confusion(prob.argmax(1).numpy(), y.numpy(), cm)
        if pr:
            keep = (y != IGNORE).numpy()
            scores.append(prob.permute(0, 2, 3, 1).numpy()[keep].astype(np.float64))
            truth.append(y.numpy()[keep])
    ious, miou = iou_from_confusion(cm)
    curves = None
    if pr:
        s, t = np.concatenate(scores), np.concatenate(truth)
        curves = [pr_curve_and_ap(np.clip(s[:, c], 0.0, 1.0), t == c) for c in range(k)]
    return DomainResult(domain, split, len(images), cm, ious, miou, curves)


def _selected_domains(manifest: DatasetManifest, corruptions: bool) -> list[tuple[str, str]]:
    chosen = []
    for split, domain in manifest.splits():
        is_corrupt = corruption_group(domain) is not None
        if is_corrupt and not corruptions:
            continue
        chosen.append((split, domain))
    if corruptions and not any(corruption_group(d) for _, d in chosen):
        raise EvaluationError("manifest has no corruption domains; regenerate it with gen-data --corruptions")
    return chosen


def evaluate_model(model: PromptSegmenter, manifest: DatasetManifest, pr: bool = False,
                   corruptions: bool = False, splits: tuple[str, ...] = ("train", "val")) -> Report:
    if manifest.num_classes != model.cfg.num_classes:
        raise EvaluationError(f"dataset has K={manifest.num_classes} but the model predicts "
                              f"K={model.cfg.num_classes} classes")
    results = []
    for split, domain in _selected_domains(manifest, corruptions):
        if split not in splits:
            continue
        if not manifest.records_for(split, domain):
            raise EvaluationError(f"domain {domain!r} ({split}) has no images")
        images, labels = manifest.load_split(split, domain)
        results.append(evaluate_split(model, images, labels, domain, split, pr))
    groups = None
    if corruptions:
        per_group: dict[str, list[float]] = {}
        for r in results:
            g = corruption_group(r.domain)
            if g is not None:
                per_group.setdefault(g, []).append(r.miou)
        groups = {g: float(np.mean(per_group[g])) for g in GROUPS if g in per_group}
    return Report(model.cfg.num_classes, results, groups)


def evaluate_dataset(checkpoint: str | Path, manifest: str | Path, pr: bool = False,
                     corruptions: bool = False) -> Report:
    """Load a checkpoint and evaluate it on every declared domain of a manifest."""
    ckpt = load_checkpoint(checkpoint)
    report = evaluate_model(ckpt.model, load_manifest(manifest), pr, corruptions)
    report.source = f"{Path(checkpoint).name} (iteration {ckpt.iteration})"
    return report


def write_report(report: Report, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"report.txt": report.to_text(), "report.csv": report.to_csv()}
    if any(d.pr for d in report.domains):
        files["pr_curves.csv"] = report.pr_csv()
        files["ap.csv"] = report.ap_csv()
    if report.groups:
        files["corruption_groups.csv"] = report.groups_csv()
    paths = []
    for name, text in files.items():
        (out / name).write_text(text)
        paths.append(out / name)
    return paths


# ---------------------------------------------------------------------------
# ablation

ABLATION_ROWS = {
    "baseline": dict(perturb=False, cons=False, contra=False, domain_prompt=False),
    "+perturb": dict(perturb=True, cons=False, contra=False, domain_prompt=False),
    "+L_cons": dict(perturb=True, cons=True, contra=False, domain_prompt=False),
    "+L_contra": dict(perturb=True, cons=True, contra=True, domain_prompt=True),
}


def ablation_config(cfg: TrainConfig, row: str, seed: int) -> TrainConfig:
    flags = dict(ABLATION_ROWS[row])
    model = cfg.model.__class__(**{**cfg.model.__dict__, "domain_prompt": flags.pop("domain_prompt")})
    return cfg.replace(seed=seed, model=model, **flags)


def _ablation_run(args) -> tuple[str, int, float, dict[str, float]]:
    cfg, row, seed = args
    torch.set_num_threads(1)
    manifest = load_manifest(cfg.data.manifest)
    run = ablation_config(cfg, row, seed)
    model = fit(run, manifest.load_split("train"), write=False).model
    report = evaluate_model(model, manifest, splits=("val",))
    per_domain = {d.domain: d.miou for d in report.domains}
    log.info("ablation %s seed %d: held-out mIoU %.4f", row, seed, report.held_out_miou())
    return row, seed, report.held_out_miou(), per_domain


@dataclass
class AblationResult:
    seeds: list[int]
    scores: dict[str, dict[int, float]] = field(default_factory=dict)  # row -> seed -> held-out mIoU
    domains: dict[str, dict[int, dict[str, float]]] = field(default_factory=dict)

    def mean(self, row: str) -> float:
        return float(np.mean([self.scores[row][s] for s in self.seeds]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row"] + [f"seed_{s}" for s in self.seeds] + ["mean"])
        for row in self.scores:
            w.writerow([row] + [repr(self.scores[row][s]) for s in self.seeds] + [repr(self.mean(row))])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'row':<12}" + "".join(f"{'seed ' + str(s):>10}" for s in self.seeds) + f"{'mean':>10}"]
        for row in self.scores:
            lines.append(f"{row:<12}" + "".join(f"{100 * self.scores[row][s]:>10.2f}" for s in self.seeds)
                         + f"{100 * self.mean(row):>10.2f}")
        return "\n".join(lines) + "\n"


def run_ablation(cfg: TrainConfig, seeds: tuple[int, ...] = (0, 1, 2), rows: tuple[str, ...] = tuple(ABLATION_ROWS),
                 workers: int = 1) -> AblationResult:
    """Train every (row, seed) pair and score the mean held-out mIoU.

    Runs are independent; with ``workers > 1`` they go to a process pool and
    results do not depend on the worker count.
    """
    if not cfg.data.manifest:
        raise DatasetError("data.manifest is not set")
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown:
        raise EvaluationError(f"unknown ablation rows {unknown}; choose from {list(ABLATION_ROWS)}")
    jobs = [(cfg, row, seed) for seed in seeds for row in rows]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_ablation_run, jobs))
    else:
        done = [_ablation_run(job) for job in jobs]
    result = AblationResult(list(seeds))
    for row in rows:
        result.scores[row] = {}
        result.domains[row] = {}
    for row, seed, score, per_domain in done:
        if not math.isfinite(score):
            raise EvaluationError(f"ablation row {row} seed {seed} produced a non-finite score")
        result.scores[row][seed] = score
        result.domains[row][seed] = per_domain
    return result
