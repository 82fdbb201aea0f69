"""Independent reference implementations used only by the tests.

They are written for clarity, not speed: boxes are plain tuples, IoU is
recomputed from scratch and precision/recall are rebuilt from the ranked list
at every cut-off.
"""

from __future__ import annotations


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def greedy_flags(dets, gts, thr):
    """dets: (box_tuple, cls, conf); gts: (box_tuple, cls). Flags in input order."""
    ranked = sorted(range(len(dets)), key=lambda i: (-dets[i][2], i))
    taken = set()
    flags = {}
    for i in ranked:
        box, cls, _ = dets[i]
        cands = [(box_iou(box, g[0]), j) for j, g in enumerate(gts) if g[1] == cls and j not in taken]
        # highest IoU, first index on ties
        cands.sort(key=lambda t: (-t[0], t[1]))
        if cands and cands[0][0] >= thr:
            taken.add(cands[0][1])
            flags[i] = True
        else:
            flags[i] = False
    return [flags[i] for i in range(len(dets))]


def ap_bruteforce(flags, confs, num_gt) -> float:
    """Sum over recall steps of the best precision achievable at or beyond that rank."""
    if num_gt == 0:
        return 1.0 if not flags else 0.0
    ranked = [flags[i] for i in sorted(range(len(flags)), key=lambda i: (-confs[i], i))]
    prec = []
    tp = 0
    for k, f in enumerate(ranked, start=1):
        tp += f
        prec.append(tp / k)
    total = 0.0
    for k, f in enumerate(ranked):
        if f:
            total += max(prec[k:]) / num_gt
    return total


def prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r, (2 * p * r / (p + r) if p + r else 0.0)


def evaluate_oracle(dets_per_image, gts_per_image, num_classes=2, iou_thr=0.5, conf_thr=0.25):
    flags_c = {c: [] for c in range(1, num_classes + 1)}
    conf_c = {c: [] for c in range(1, num_classes + 1)}
    ngt = {c: 0 for c in range(1, num_classes + 1)}
    tp = fp = fn = 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        for (_, c, s), f in zip(dets, greedy_flags(dets, gts, iou_thr)):
            flags_c[c].append(f)
            conf_c[c].append(s)
        for _, c in gts:
            ngt[c] += 1
        kept = [d for d in dets if d[2] >= conf_thr]
        t = sum(greedy_flags(kept, gts, iou_thr))
        tp, fp, fn = tp + t, fp + len(kept) - t, fn + len(gts) - t
    aps = [ap_bruteforce(flags_c[c], conf_c[c], ngt[c]) for c in ngt if ngt[c] > 0]
    m = sum(aps) / len(aps) if aps else 0.0
    return m, aps, prf(tp, fp, fn)


def exhaustive_best_matching(dets, gts, thr):
    """Maximum number of TPs over every one-to-one assignment (upper bound for greedy)."""
    best = 0

    def rec(i, used, count):
        nonlocal best
        if i == len(dets):
            best = max(best, count)
            return
        rec(i + 1, used, count)
        for j, g in enumerate(gts):
            if j not in used and g[1] == dets[i][1] and box_iou(dets[i][0], g[0]) >= thr:
                rec(i + 1, used | {j}, count + 1)

    rec(0, frozenset(), 0)
    return best
