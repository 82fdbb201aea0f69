"""Detection metrics: greedy matching, all-points AP, mAP@0.5 and F1 at a confidence cut."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .boxes import BoundingBox, iou
from .datagen import BUG_CLASSES


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    f1_confidence_threshold: float = 0.25
    ap_interpolation: str = "all_points"

    def __post_init__(self):
        if not (0 < self.iou_threshold < 1 and 0 < self.f1_confidence_threshold < 1):
            raise ValueError("thresholds must lie in (0, 1)")
        if self.ap_interpolation != "all_points":
            raise ValueError("only all-points interpolation is supported")


@dataclass
class EvalReport:
    per_class_ap: dict[str, float]
    map: float
    precision: float
    recall: float
    f1: float
    pr_curve: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["pr_curve"] = {k: [tuple(p) for p in v] for k, v in d.get("pr_curve", {}).items()}
        return cls(**d)

    def pr_dump(self, cls: str) -> str:
        """Two-column ``recall precision`` text for external plotting."""
        return "".join(f"{r:.6f} {p:.6f}\n" for r, p in self.pr_curve.get(cls, []))


def _order(confidences) -> np.ndarray:
    return np.argsort(-np.asarray(confidences, dtype=np.float64), kind="stable")


def match_detections(dets, gts, iou_thr: float = 0.5) -> list[bool]:
    """TP/FP flag per detection, aligned with the input order.

    ``dets`` are ``(box, class, confidence)``, ``gts`` are ``(box, class)``.
    Detections are visited by descending confidence (ties in input order);
    each takes the unmatched same-class ground truth with the highest IoU if
    that IoU reaches ``iou_thr``.
    """
    flags = [False] * len(dets)
    used = [False] * len(gts)
    for i in _order([d[2] for d in dets]):
        box, cls, _ = dets[i]
        best, best_j = -1.0, -1
        for j, (gbox, gcls) in enumerate(gts):
            if used[j] or gcls != cls:
                continue
            o = iou(box, gbox)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_thr:
            used[best_j] = True
            flags[i] = True
    return flags


def pr_points(flags, confidences, num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    order = _order(confidences)
    tp = np.asarray(flags, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt if num_gt > 0 else np.zeros_like(ctp)
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    return recall, precision


def average_precision(flags, confidences, num_gt: int) -> float:
    """Area under the all-points interpolated precision envelope."""
    if len(flags) != len(confidences):
        raise ValueError("flags and confidences differ in length")
    if num_gt < 0:
        raise ValueError("num_gt must be non-negative")
    if num_gt == 0:
        return 1.0 if len(flags) == 0 else 0.0
    if len(flags) == 0:
        return 0.0
    recall, precision = pr_points(flags, confidences, num_gt)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def f1_at(dets, gts, iou_thr: float = 0.5, conf_thr: float = 0.25) -> tuple[float, float, float]:
    """Precision, recall and F1 for one image after discarding detections below ``conf_thr``."""
    kept = [d for d in dets if d[2] >= conf_thr]
    tp = sum(match_detections(kept, gts, iou_thr))
    return _prf(tp, len(kept) - tp, len(gts) - tp)


def evaluate_detections(dets_per_image, gts_per_image, cfg: EvalConfig = EvalConfig(), class_names=BUG_CLASSES) -> EvalReport:
    """Aggregate matching over all images, then compute per-class AP, mAP and F1.

    Class ids are 1-based indices into ``class_names``.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths cover different image counts")
    if len(gts_per_image) == 0:
        raise ValueError("empty split")
    per_class_ap, pr_curve = {}, {}
    class_ids = range(1, len(class_names) + 1)
    flags_by_class = {c: [] for c in class_ids}
    conf_by_class = {c: [] for c in class_ids}
    ngt_by_class = {c: 0 for c in class_ids}
    tp = fp = fn = 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        flags = match_detections(dets, gts, cfg.iou_threshold)
        for (_, c, conf), f in zip(dets, flags):
            flags_by_class[c].append(f)
            conf_by_class[c].append(conf)
        for _, c in gts:
            ngt_by_class[c] += 1
        kept = [d for d in dets if d[2] >= cfg.f1_confidence_threshold]
        t = sum(match_detections(kept, gts, cfg.iou_threshold))
        tp += t
        fp += len(kept) - t
        fn += len(gts) - t
    for c in class_ids:
        name = class_names[c - 1]
        if ngt_by_class[c] == 0:
            continue
        per_class_ap[name] = average_precision(flags_by_class[c], conf_by_class[c], ngt_by_class[c])
        r, p = pr_points(flags_by_class[c], conf_by_class[c], ngt_by_class[c])
        pr_curve[name] = [(float(a), float(b)) for a, b in zip(r, p)]
    m = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    p, r, f = _prf(tp, fp, fn)
    return EvalReport(per_class_ap, m, p, r, f, pr_curve, {"tp": tp, "fp": fp, "fn": fn})


def ground_truth(seq) -> list[tuple[BoundingBox, int]]:
    return [(a.box, BUG_CLASSES.index(a.bug_class) + 1) for a in seq.annotations]


def evaluate(model, sequences, cfg: EvalConfig = EvalConfig(), batch_size: int = 50) -> EvalReport:
    """Run ``model`` (a detector or a checkpoint path) over labeled sequences and score it."""
    import torch

    from .preprocess import stack_diffs
    from .trainer import load_detector

    if not sequences:
        raise ValueError("empty split")
    if not hasattr(model, "detect"):
        model = load_detector(model)
    was_training = model.training
    model.eval()
    dets = []
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start : start + batch_size]
        dtype = next(model.parameters()).dtype
        x = torch.from_numpy(np.stack([stack_diffs(s).channels for s in chunk])).to(dtype)
        for out in model.detect(x):
            dets.append([(b, c, s) for b, c, s in out.detections])
    model.train(was_training)
    return evaluate_detections(dets, [ground_truth(s) for s in sequences], cfg)
