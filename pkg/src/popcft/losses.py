"""Detection loss with anchor assignment, loss fusion and the masked latent MSE.

The detection loss for one image is

    L_od = 1/N_cls * sum_i CE(p_i, p_i*) + lam * 1/N_loc * sum_i p_i* smoothL1(t_i - t_i*)

evaluated for the RPN (anchors) and the box head (proposals) and summed.
``L_co_sup = L_od(downstream) + alpha * L_od(co-title)`` and
``L_cft = L_co_sup + beta * MSE_ssl``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import encode_deltas, iou_matrix


@dataclass
class AnchorBatch:
    """Anchor (or proposal) assignment for one image.

    ``labels`` is 1 (positive), 0 (negative) or -1 (ignored). ``classes``
    holds the matched ground-truth class id (1-based) for positives and 0
    otherwise. ``sampled`` marks the anchors that enter the loss.
    """

    anchors: np.ndarray
    labels: np.ndarray
    classes: np.ndarray
    targets: np.ndarray
    sampled: np.ndarray

    @property
    def n_cls(self) -> int:
        return int(self.sampled.sum())

    @property
    def n_loc(self) -> int:
        return int((self.sampled & (self.labels == 1)).sum())


def assign_anchors(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
    gt_classes: np.ndarray | None = None,
) -> AnchorBatch:
    """Label anchors against ground truth.

    Positive when IoU >= ``pos_iou`` with some box or when the anchor is the
    best match of a ground-truth box; negative when the best IoU is below
    ``neg_iou``; ignored otherwise. All anchors start out sampled.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(anchors) == 0:
        raise ValueError("empty anchor list")
    if not pos_iou > neg_iou:
        raise ValueError("pos_iou must exceed neg_iou")
    n = len(anchors)
    labels = np.full(n, -1, dtype=np.int64)
    classes = np.zeros(n, dtype=np.int64)
    targets = np.zeros((n, 4), dtype=np.float64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return AnchorBatch(anchors, labels, classes, targets, np.ones(n, dtype=bool))
    if gt_classes is None:
        gt_classes = np.ones(len(gt_boxes), dtype=np.int64)
    overlaps = iou_matrix(anchors, gt_boxes)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(n), best_gt]
    labels[best_iou < neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    # every gt box keeps at least one positive: its highest-IoU anchor(s)
    gt_best = overlaps.max(axis=0)
    for g in range(len(gt_boxes)):
        if gt_best[g] <= 0:
            continue
        hits = np.flatnonzero(overlaps[:, g] == gt_best[g])
        labels[hits] = 1
    pos = labels == 1
    classes[pos] = np.asarray(gt_classes)[best_gt[pos]]
    if pos.any():
        targets[pos] = encode_deltas(anchors[pos], gt_boxes[best_gt[pos]])
    return AnchorBatch(anchors, labels, classes, targets, labels >= 0)


def sample_anchors(batch: AnchorBatch, batch_size: int, pos_fraction: float, rng: np.random.Generator) -> AnchorBatch:
    """Subsample up to ``batch_size`` anchors, positives capped at ``pos_fraction``.

    Negatives fill the remaining slots when positives are scarce.
    """
    pos = np.flatnonzero(batch.labels == 1)
    neg = np.flatnonzero(batch.labels == 0)
    n_pos = min(len(pos), int(batch_size * pos_fraction))
    n_neg = min(len(neg), batch_size - n_pos)
    chosen_pos = rng.choice(pos, n_pos, replace=False) if n_pos < len(pos) else pos
    chosen_neg = rng.choice(neg, n_neg, replace=False) if n_neg < len(neg) else neg
    sampled = np.zeros(len(batch.labels), dtype=bool)
    sampled[chosen_pos] = True
    sampled[chosen_neg] = True
    return AnchorBatch(batch.anchors, batch.labels, batch.classes, batch.targets, sampled)


def smooth_l1(x):
    """Huber loss with unit threshold, elementwise."""
    if isinstance(x, torch.Tensor):
        ax = x.abs()
        return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1, 0.5 * x * x, ax - 0.5)
    return float(out) if out.ndim == 0 else out


def detection_loss(
    cls_logits: torch.Tensor,
    pred_deltas: torch.Tensor,
    labels: torch.Tensor,
    targets: torch.Tensor,
    sampled: torch.Tensor,
    lam: float = 1.0,
    classes: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Classification and localisation terms of the detection loss for one image.

    ``cls_logits`` is ``(A,)`` for binary objectness or ``(A, C+1)`` for
    multi-class heads (class 0 is background; ``classes`` supplies the
    positive class ids). Returns ``(l_cls, lam * l_loc)``.
    """
    n = labels.shape[0]
    if cls_logits.shape[0] != n or pred_deltas.shape[0] != n or targets.shape[0] != n:
        raise ValueError("predictions and anchors are misaligned")
    sampled = sampled & (labels >= 0)
    n_cls = int(sampled.sum())
    if n_cls == 0:
        raise ValueError("N_cls = 0: no sampled anchors")
    pos = sampled & (labels == 1)
    n_loc = int(pos.sum())
    if cls_logits.dim() == 1:
        ce = F.binary_cross_entropy_with_logits(cls_logits[sampled], labels[sampled].to(cls_logits.dtype), reduction="sum")
    else:
        tgt = torch.where(labels == 1, classes if classes is not None else labels, torch.zeros_like(labels))
        ce = F.cross_entropy(cls_logits[sampled], tgt[sampled], reduction="sum")
    l_cls = ce / n_cls
    if n_loc == 0:
        l_loc = pred_deltas.sum() * 0.0
    else:
        gate = pos.to(pred_deltas.dtype)[:, None]
        l_loc = (gate * smooth_l1(pred_deltas - targets)).sum() / n_loc
    return l_cls, lam * l_loc


def co_supervised_loss(l_down, l_co, alpha: float):
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return l_down + alpha * l_co


def total_loss(l_co_sup, mse, beta: float):
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return l_co_sup + beta * mse


def ssl_loss(predicted: torch.Tensor, target_latents: torch.Tensor, mask_indices) -> torch.Tensor:
    """Mean squared error between predictions and the target rows at masked positions.

    ``predicted`` is ``(M, D)`` (or ``(B, M, D)``) in the order of
    ``mask_indices``; ``target_latents`` is the full ``(N, D)`` (``(B, N, D)``)
    grid. Unmasked target rows are never read.
    """
    idx = torch.as_tensor(mask_indices, dtype=torch.long, device=target_latents.device)
    if idx.numel() == 0:
        raise ValueError("SSL step requires a nonempty mask")
    if target_latents.dim() == 2:
        if predicted.shape[0] != idx.shape[0]:
            raise ValueError("predicted row count must equal the mask size")
        chosen = target_latents.index_select(0, idx)
    else:
        if predicted.shape[:2] != idx.shape:
            raise ValueError("predicted row count must equal the mask size")
        chosen = torch.gather(target_latents, 1, idx[..., None].expand(-1, -1, target_latents.shape[-1]))
    return ((predicted - chosen) ** 2).mean()


@dataclass
class LossBreakdown:
    l_cls_rpn: float = 0.0
    l_loc_rpn: float = 0.0
    l_cls_head: float = 0.0
    l_loc_head: float = 0.0
    l_od_downstream: float = 0.0
    l_od_cotitle: float = 0.0
    l_co_sup: float = 0.0
    mse_ssl: float = 0.0
    l_cft: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    lam: float = 1.0

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())

    def to_dict(self) -> dict:
        return asdict(self)
