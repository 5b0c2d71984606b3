"""Training objectives.

Segmentation (class CE + mask BCE + dice under fixed query/class matching),
VLM regularization (language, vision-language, vision), the domain-aware
contrastive loss over domain embeddings, the per-block consistency loss
between an image and its perturbed copy, and their weighted total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .scenegen import IGNORE
from .segnet import DecoderTrace

EPS = 1e-8
DICE_SMOOTH = 1.0


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_reg: float = 1.0
    lambda_contra: float = 1.0
    lambda_cons: float = 10.0
    lambda_mc: float = 1.0
    lambda_cc: float = 1.0
    lambda_bce: float = 5.0
    lambda_dice: float = 5.0
    tau: float = 0.5
    tau_vl: float = 0.07

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not math.isfinite(value) or value < 0:
                raise LossError(f"loss.{name} must be finite and non-negative, got {value}")
        if self.tau <= 0 or self.tau_vl <= 0:
            raise LossError("temperatures must be > 0")


# ---------------------------------------------------------------------------
# contrastive


@dataclass(frozen=True)
class BatchPartition:
    tags: tuple[str, ...]  # "original" | "augmented" per sample
    positives: torch.Tensor  # (2B, 2B) bool, row i is P_i
    negatives: torch.Tensor  # (2B, 2B) bool, row i is N_i

    def P(self, i: int) -> set[int]:
        return set(torch.nonzero(self.positives[i]).flatten().tolist())

    def N(self, i: int) -> set[int]:
        return set(torch.nonzero(self.negatives[i]).flatten().tolist())


def partition_batch(tags: Sequence[str], B: int | None = None) -> BatchPartition:
    """Positive/negative index sets per anchor.

    An original anchor takes the other originals as positives and every
    augmented sample as a negative. An augmented anchor is its own only
    positive and everything else is negative.
    """
    tags = tuple({"o": "original", "a": "augmented"}.get(t, t) for t in tags)
    if any(t not in ("original", "augmented") for t in tags):
        raise LossError(f"tags must be 'original' or 'augmented', got {sorted(set(tags))}")
    n_orig = tags.count("original")
    if n_orig != tags.count("augmented") or (B is not None and n_orig != B):
        raise LossError(f"expected B originals and B augmented samples, got {n_orig}/{tags.count('augmented')}")
    if n_orig < 2:
        raise LossError("contrastive loss requires at least 2 originals")
    orig = torch.tensor([t == "original" for t in tags])
    eye = torch.eye(len(tags), dtype=torch.bool)
    pos = torch.where(orig[:, None], orig[None, :] & ~eye, eye)
    neg = torch.where(orig[:, None], ~orig[None, :].expand(len(tags), -1), ~eye)
    return BatchPartition(tags, pos, neg)


def contrastive_loss(pi: torch.Tensor, part: BatchPartition, tau: float) -> torch.Tensor:
    """Domain-aware contrastive loss with cosine similarity over embeddings (2B, C)."""
    if not tau > 0:
        raise LossError(f"tau must be > 0, got {tau}")
    if pi.shape[0] != len(part.tags):
        raise LossError(f"{pi.shape[0]} embeddings for a partition of {len(part.tags)}")
    unit = F.normalize(pi, dim=-1, eps=1e-12)
    logits = unit @ unit.T / tau
    neg_inf = torch.finfo(logits.dtype).min
    pos = part.positives.to(pi.device)
    both = pos | part.negatives.to(pi.device)
    num = torch.logsumexp(logits.masked_fill(~pos, neg_inf), dim=1)
    den = torch.logsumexp(logits.masked_fill(~both, neg_inf), dim=1)
    return (den - num).mean()


# ---------------------------------------------------------------------------
# consistency


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise LossError(f"{what}: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")


def bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Elementwise binary cross-entropy of probabilities with ``log(. + EPS)``."""
    return -(target * torch.log(pred + EPS) + (1 - target) * torch.log(1 - pred + EPS))


def mask_consistency(mask_a: torch.Tensor, mask_b: torch.Tensor) -> torch.Tensor:
    """Symmetric BCE between two sets of mask logits, mean over all entries."""
    _check_same(mask_a, mask_b, "mask_consistency")
    pa, pb = torch.sigmoid(mask_a), torch.sigmoid(mask_b)
    return 0.5 * (bce(pa, pb) + bce(pb, pa)).mean()


def jsd(logits_a: torch.Tensor, logits_b: torch.Tensor) -> torch.Tensor:
    """Jensen-Shannon divergence (nats) between softmax distributions along the last dim."""
    la, lb = torch.log_softmax(logits_a, -1), torch.log_softmax(logits_b, -1)
    lm = torch.logsumexp(torch.stack([la, lb]), dim=0) - math.log(2.0)
    pa, pb = la.exp(), lb.exp()
    return 0.5 * ((pa * (la - lm)).sum(-1) + (pb * (lb - lm)).sum(-1))


def class_consistency(c_a: torch.Tensor, c_b: torch.Tensor) -> torch.Tensor:
    _check_same(c_a, c_b, "class_consistency")
    return jsd(c_a, c_b).mean()


def consistency_loss(trace_x: DecoderTrace, trace_aug: DecoderTrace, w: LossWeights) -> torch.Tensor:
    """Sum over decoder blocks of the mask and class consistency terms."""
    if trace_x.num_blocks != trace_aug.num_blocks:
        raise LossError(f"traces have {trace_x.num_blocks} and {trace_aug.num_blocks} blocks")
    s = trace_x.num_blocks
    # every block has the same shape, so the sum of per-block means is s times the stacked mean
    mc = mask_consistency(torch.stack(trace_x.mask_logits), torch.stack(trace_aug.mask_logits))
    cc = class_consistency(torch.stack(trace_x.class_logits), torch.stack(trace_aug.class_logits))
    return s * (w.lambda_mc * mc + w.lambda_cc * cc)


# ---------------------------------------------------------------------------
# segmentation


def check_labels(gt: torch.Tensor, num_classes: int) -> None:
    bad = (gt != IGNORE) & ((gt < 0) | (gt >= num_classes))
    if bad.any():
        raise LossError(f"label value {int(gt[bad][0])} outside [0, {num_classes}) and not IGNORE")


def dice_loss(prob: torch.Tensor, target: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Per-mask dice loss over the trailing two dims, smoothing 1."""
    if valid is not None:
        prob, target = prob * valid, target * valid
    inter = (prob * target).flatten(-2).sum(-1)
    total = prob.flatten(-2).sum(-1) + target.flatten(-2).sum(-1)
    return 1 - (2 * inter + DICE_SMOOTH) / (total + DICE_SMOOTH)


def class_counts(gt: torch.Tensor, size: tuple[int, int], num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """Per-cell pixel counts of each class, (B, K, h, w), from (B, H, W) labels; IGNORE counts nowhere."""
    b, h, w = gt.shape
    gh, gw = size
    if h % gh or w % gw:
        raise LossError(f"label size {h}x{w} is not a multiple of grid size {gh}x{gw}")
    onehot = (gt[:, None] == torch.arange(num_classes, device=gt.device)[None, :, None, None]).to(dtype)
    if (gh, gw) == (h, w):
        return onehot
    return F.avg_pool2d(onehot, (h // gh, w // gw), divisor_override=1)


def mask_targets(gt: torch.Tensor, size: tuple[int, int], num_classes: int,
                 dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-class mask targets on a ``size`` grid from (B, H, W) labels.

    Returns ``(target (B, K, h, w), valid (B, 1, h, w))``. Each grid cell
    holds the fraction of its valid pixels carrying class k, so at full
    resolution the targets are the binary class masks. Cells with no valid
    pixel are marked invalid.
    """
    counts = class_counts(gt, size, num_classes, dtype)
    total = counts.sum(1, keepdim=True)
    return counts / total.clamp_min(1), (total > 0).to(dtype)


@dataclass
class LabelTargets:
    """Label-derived targets, computed once per dataset since labels never change.

    ``mask`` (B, K, h, w) and ``valid`` (B, 1, h, w) are ``mask_targets`` on
    the mask grid; ``patch`` (B, h', w') is ``patch_majority`` on the patch grid.
    """
    mask: torch.Tensor
    valid: torch.Tensor
    patch: torch.Tensor

    @classmethod
    def build(cls, gt: torch.Tensor, mask_grid: tuple[int, int], patch_grid: tuple[int, int],
              num_classes: int, dtype=torch.float32) -> "LabelTargets":
        check_labels(gt, num_classes)
        mask, valid = mask_targets(gt, mask_grid, num_classes, dtype)
        return cls(mask, valid, patch_majority(gt, patch_grid, num_classes))

    def __getitem__(self, idx) -> "LabelTargets":
        return LabelTargets(self.mask[idx], self.valid[idx], self.patch[idx])

    def __len__(self) -> int:
        return self.mask.shape[0]

    @staticmethod
    def cat(parts: Sequence["LabelTargets"]) -> "LabelTargets":
        return LabelTargets(*(torch.cat([getattr(p, f) for p in parts]) for f in ("mask", "valid", "patch")))


def segmentation_terms(trace: DecoderTrace, gt: torch.Tensor | LabelTargets) -> dict[str, torch.Tensor]:
    """Unweighted ``cls``, ``bce`` and ``dice`` terms summed over all blocks.

    Query ``k`` is matched to class ``k``; gt is (B, H, W) labels or their
    precomputed ``LabelTargets``. IGNORE pixels
    are excluded and an empty reduction counts as zero. All blocks share
    one shape, so each sum over blocks is the block count times a mean
    over the stacked predictions.
    """
    b, n = trace.class_logits[0].shape[:2]
    if isinstance(gt, LabelTargets):
        target, valid = gt.mask, gt.valid
        if target.shape[1:] != (n, *trace.mask_logits[0].shape[-2:]):
            raise LossError(f"mask targets {tuple(target.shape)} do not match predictions")
    else:
        check_labels(gt, n)
        target, valid = mask_targets(gt, trace.mask_logits[0].shape[-2:], n, trace.mask_logits[0].dtype)
    n_valid = valid.sum() * n
    cls_target = torch.arange(n).repeat(b)
    s = trace.num_blocks
    logits, prob = torch.stack(trace.class_logits), torch.sigmoid(torch.stack(trace.mask_logits))
    cls = s * F.cross_entropy(logits.reshape(s * b * n, -1), cls_target.repeat(s))
    bce_term = (bce(prob, target) * valid).sum() / n_valid if n_valid > 0 else cls.new_zeros(())
    return {"cls": cls, "bce": bce_term, "dice": s * dice_loss(prob, target, valid).mean()}


def segmentation_loss(trace: DecoderTrace, gt: torch.Tensor | LabelTargets, w: LossWeights) -> torch.Tensor:
    t = segmentation_terms(trace, gt)
    return t["cls"] + w.lambda_bce * t["bce"] + w.lambda_dice * t["dice"]


# ---------------------------------------------------------------------------
# regularization


def _unit_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise LossError(f"{what} has a zero row")
    return x / norms


def reg_language(t: torch.Tensor, t0: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of softmax(cos(t, T0)) rows against the identity; ``t`` is (K, C) or (B, K, C)."""
    sim = _unit_rows(t, "text features") @ _unit_rows(t0, "template features").T
    k = sim.shape[-1]
    return F.cross_entropy(sim.reshape(-1, k), torch.arange(k).repeat(sim.numel() // (k * k)))


def patch_majority(gt: torch.Tensor, grid: tuple[int, int], num_classes: int) -> torch.Tensor:
    """Downsample (B, H, W) labels to the patch grid by majority vote; ties pick the smaller id."""
    counts = class_counts(gt, grid, num_classes)
    # argmax returns the first maximum, i.e. the smallest class id
    out = counts.argmax(1)
    return torch.where(counts.sum(1) > 0, out, torch.full_like(out, IGNORE))


def reg_vision_language(v: torch.Tensor, t: torch.Tensor, gt: torch.Tensor | LabelTargets,
                        tau_vl: float) -> torch.Tensor:
    """Per-patch CE of softmax(cos(v, t) / tau_vl) against the patch-level labels.

    ``v`` is (B, C, h, w) patch features in text space, ``t`` is (B, K, C),
    ``gt`` is (B, H, W) pixel labels or their ``LabelTargets``.
    """
    b, c, gh, gw = v.shape
    if t.ndim != 3 or t.shape[0] != b or t.shape[-1] != c:
        raise LossError(f"text features {tuple(t.shape)} incompatible with patch features {tuple(v.shape)}")
    k = t.shape[1]
    if isinstance(gt, LabelTargets):
        if gt.patch.shape != (b, gh, gw):
            raise LossError(f"patch labels {tuple(gt.patch.shape)} do not match patch features {tuple(v.shape)}")
        target = gt.patch.reshape(b, -1)
    else:
        target = patch_majority(gt, (gh, gw), k).reshape(b, -1)
    score = F.normalize(v.flatten(2).transpose(1, 2), dim=-1) @ _unit_rows(t, "text features").transpose(1, 2)
    keep = target != IGNORE
    if not keep.any():
        return score.new_zeros(())
    return F.cross_entropy(score[keep] / tau_vl, target[keep])


def reg_vision(v_cls: torch.Tensor, v0_cls: torch.Tensor) -> torch.Tensor:
    """L2 distance between trainable and frozen class tokens, mean over the batch."""
    return (v_cls - v0_cls).norm(dim=-1).mean()


# ---------------------------------------------------------------------------
# total

COMPONENTS = ("L_seg", "L_reg", "L_contra", "L_cons")


def total_loss(components: Mapping[str, torch.Tensor | float], w: LossWeights) -> torch.Tensor:
    """``L_seg + lambda_reg L_reg + lambda_contra L_contra + lambda_cons L_cons``.

    ``L_reg`` may be given directly or as its parts ``L_reg_L``, ``L_reg_VL``
    and ``L_reg_V``. Missing components count as zero.
    """
    comps = dict(components)
    if "L_reg" not in comps and any(k.startswith("L_reg_") for k in comps):
        comps["L_reg"] = sum(comps.get(k, 0.0) for k in ("L_reg_L", "L_reg_VL", "L_reg_V"))
    for name, value in comps.items():
        v = value.detach() if torch.is_tensor(value) else torch.tensor(float(value))
        if not torch.isfinite(v).all():
            raise LossError(f"non-finite loss component {name}={float(v)}")
    return (comps.get("L_seg", 0.0) + w.lambda_reg * comps.get("L_reg", 0.0)
            + w.lambda_contra * comps.get("L_contra", 0.0) + w.lambda_cons * comps.get("L_cons", 0.0))
