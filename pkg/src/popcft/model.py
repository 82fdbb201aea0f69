"""Student/target ViT encoders, latent mask decoder and the two-stage detector."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import BoundingBox, batched_nms, clip_boxes, decode_deltas, nms
from .losses import assign_anchors, detection_loss, sample_anchors, ssl_loss


@dataclass(frozen=True)
class VitConfig:
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    input_size: tuple[int, int] = (64, 64)
    in_chans: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        h, w = self.input_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"input size {self.input_size} not divisible by patch size {self.patch_size}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.input_size[0] // self.patch_size, self.input_size[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid_shape
        return gh * gw

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VitConfig":
        return cls(**d)


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 2
    anchor_size: float = 16.0
    aspect_ratios: tuple[float, ...] = (1.0, 0.5, 2.0)
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 64
    rpn_pos_fraction: float = 0.5
    rpn_nms_iou: float = 0.7
    pre_nms_top_n: int = 200
    post_nms_top_n_train: int = 32
    post_nms_top_n_test: int = 32
    head_pos_iou: float = 0.5
    head_neg_iou: float = 0.4
    head_batch: int = 32
    head_pos_fraction: float = 0.5
    roi_grid: int = 3
    head_hidden: int = 128
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 20
    min_box_size: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "aspect_ratios", tuple(self.aspect_ratios))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aspect_ratios"] = list(self.aspect_ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**d)


def _init_linear(m: nn.Module) -> None:
    if isinstance(m, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        h = self.num_heads
        q, k, v = self.qkv(x).reshape(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * (d // h) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def patchify_tensor(x: torch.Tensor, p: int) -> torch.Tensor:
    """``(B, C, H, W)`` -> ``(B, N, P*P*C)``, row-major patches flattened as ``(P, P, C)``."""
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


class ViTEncoder(nn.Module):
    """ViT over patch tokens with learned positions and no class token.

    Masked patches have their embedding replaced by a learned mask token
    before the positional embedding is added, so no information from a
    masked patch's pixels reaches any output.
    """

    def __init__(self, cfg: VitConfig):
        super().__init__()
        self.cfg = cfg
        p, d = cfg.patch_size, cfg.embed_dim
        self.patch_embed = nn.Linear(p * p * cfg.in_chans, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches, d))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.apply(_init_linear)
        nn.init.trunc_normal_(self.pos_embed, std=0.02, a=-0.04, b=0.04)
        nn.init.trunc_normal_(self.mask_token, std=0.02, a=-0.04, b=0.04)

    def check_input(self, x: torch.Tensor) -> None:
        expected = (self.cfg.in_chans, *self.cfg.input_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"input of shape {tuple(x.shape)} does not match (B, {expected})")

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        self.check_input(x)
        tokens = self.patch_embed(patchify_tensor(x, self.cfg.patch_size))
        if mask is not None:
            tokens = torch.where(mask[..., None], self.mask_token.to(tokens.dtype).expand_as(tokens), tokens)
        x = tokens + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class MaskDecoder(nn.Module):
    """Predicts target-encoder latents at masked positions.

    Student tokens are projected to the target width; masked positions also
    receive a learned mask embedding; positions are re-embedded and mixed by
    one transformer block before the output projection.
    """

    def __init__(self, student_dim: int, target_dim: int, num_patches: int, num_heads: int = 4):
        super().__init__()
        self.proj = nn.Linear(student_dim, target_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, target_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches, target_dim))
        self.block = Block(target_dim, num_heads)
        self.norm = nn.LayerNorm(target_dim)
        self.head = nn.Linear(target_dim, target_dim)
        self.apply(_init_linear)
        nn.init.trunc_normal_(self.pos_embed, std=0.02, a=-0.04, b=0.04)
        nn.init.trunc_normal_(self.mask_token, std=0.02, a=-0.04, b=0.04)

    def forward(self, latents: torch.Tensor, mask_indices: torch.Tensor) -> torch.Tensor:
        """``latents`` (B, N, Ds), ``mask_indices`` (B, M) -> predictions (B, M, Dt) in index order."""
        b, n, _ = latents.shape
        if mask_indices.numel() and (mask_indices.min() < 0 or mask_indices.max() >= n):
            raise ValueError("mask index out of range")
        is_masked = torch.zeros(b, n, dtype=torch.bool, device=latents.device)
        is_masked.scatter_(1, mask_indices, True)
        x = self.proj(latents)
        x = x + is_masked[..., None].to(x.dtype) * self.mask_token
        x = self.head(self.norm(self.block(x + self.pos_embed)))
        return torch.gather(x, 1, mask_indices[..., None].expand(-1, -1, x.shape[-1]))


def make_anchors(vit: VitConfig, det: DetectorConfig) -> np.ndarray:
    """Anchor grid ordered (row, col, ratio), centred on token cells at stride P."""
    gh, gw = vit.grid_shape
    p = vit.patch_size
    sizes = []
    for r in det.aspect_ratios:  # r = height / width
        w = det.anchor_size / math.sqrt(r)
        sizes.append((w, det.anchor_size * math.sqrt(r)))
    out = []
    for i in range(gh):
        for j in range(gw):
            cx, cy = (j + 0.5) * p, (i + 0.5) * p
            for w, h in sizes:
                out.append((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    return np.asarray(out, dtype=np.float64)


@dataclass
class DetectorOutput:
    proposals: list[tuple[BoundingBox, float]] = field(default_factory=list)
    detections: list[tuple[BoundingBox, int, float]] = field(default_factory=list)


class Detector(nn.Module):
    """Two-stage detector over the student token grid.

    The RPN scores and regresses a fixed anchor grid; the box head pools each
    proposal with a bilinear ``g x g`` sample grid over the token map and
    predicts class scores (index 0 = background) and class-agnostic deltas.
    """

    def __init__(self, vit: VitConfig, det: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.vit_cfg = vit
        self.cfg = det
        d = vit.embed_dim
        a = len(det.aspect_ratios)
        self.backbone = ViTEncoder(vit)
        self.rpn_conv = nn.Conv2d(d, d, 3, padding=1)
        self.rpn_cls = nn.Conv2d(d, a, 1)
        self.rpn_reg = nn.Conv2d(d, 4 * a, 1)
        self.fc1 = nn.Linear(det.roi_grid**2 * d, det.head_hidden)
        self.fc2 = nn.Linear(det.head_hidden, det.head_hidden)
        self.cls_score = nn.Linear(det.head_hidden, det.num_classes + 1)
        self.bbox_pred = nn.Linear(det.head_hidden, 4)
        for m in (self.rpn_conv, self.rpn_cls, self.rpn_reg, self.fc1, self.fc2, self.cls_score, self.bbox_pred):
            _init_linear(m)
        nn.init.zeros_(self.rpn_reg.weight)
        nn.init.zeros_(self.bbox_pred.weight)
        self.register_buffer("_anchors", torch.from_numpy(make_anchors(vit, det)), persistent=False)

    @property
    def anchors(self) -> np.ndarray:
        return self._anchors.cpu().numpy()

    # -- stages ------------------------------------------------------------

    def feature_map(self, tokens: torch.Tensor) -> torch.Tensor:
        gh, gw = self.vit_cfg.grid_shape
        return tokens.transpose(1, 2).reshape(tokens.shape[0], -1, gh, gw)

    def rpn(self, fmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Objectness logits ``(B, K)`` and deltas ``(B, K, 4)``, anchors ordered (row, col, ratio)."""
        b = fmap.shape[0]
        h = F.gelu(self.rpn_conv(fmap))
        logits = self.rpn_cls(h).permute(0, 2, 3, 1).reshape(b, -1)
        deltas = self.rpn_reg(h).permute(0, 2, 3, 1).reshape(b, -1, 4)
        return logits, deltas

    def propose(self, logits: torch.Tensor, deltas: torch.Tensor, top_n: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """Decoded, clipped, NMS-filtered proposals per image (no gradient)."""
        h, w = self.vit_cfg.input_size
        anchors = self.anchors
        out = []
        logits_np = logits.detach().double().cpu().numpy()
        deltas_np = deltas.detach().double().cpu().numpy()
        for lg, dl in zip(logits_np, deltas_np):
            boxes = clip_boxes(decode_deltas(dl, anchors), h, w)
            scores = 1.0 / (1.0 + np.exp(-lg))
            ok = ((boxes[:, 2] - boxes[:, 0]) >= self.cfg.min_box_size) & ((boxes[:, 3] - boxes[:, 1]) >= self.cfg.min_box_size)
            boxes, scores = boxes[ok], scores[ok]
            order = np.argsort(-scores, kind="stable")[: self.cfg.pre_nms_top_n]
            boxes, scores = boxes[order], scores[order]
            keep = nms(boxes, scores, self.cfg.rpn_nms_iou)[:top_n]
            out.append((boxes[keep], scores[keep]))
        return out

    def roi_features(self, fmap: torch.Tensor, rois: np.ndarray, image_index: np.ndarray) -> torch.Tensor:
        """Bilinear ``g x g`` pooling of ``rois`` (R, 4) on ``fmap`` -> (R, g*g*D)."""
        b, d, gh, gw = fmap.shape
        g = self.cfg.roi_grid
        p = self.vit_cfg.patch_size
        frac = (np.arange(g) + 0.5) / g
        xs = rois[:, 0:1] + frac[None] * (rois[:, 2:3] - rois[:, 0:1])  # (R, g)
        ys = rois[:, 1:2] + frac[None] * (rois[:, 3:4] - rois[:, 1:2])
        u = np.broadcast_to(xs[:, None, :], (len(rois), g, g)).reshape(len(rois), -1) / p - 0.5
        v = np.broadcast_to(ys[:, :, None], (len(rois), g, g)).reshape(len(rois), -1) / p - 0.5
        u = u.clip(0, gw - 1)
        v = v.clip(0, gh - 1)
        x0 = np.floor(u).astype(np.int64)
        y0 = np.floor(v).astype(np.int64)
        x1 = np.minimum(x0 + 1, gw - 1)
        y1 = np.minimum(y0 + 1, gh - 1)
        wx = u - x0
        wy = v - y0
        flat = fmap.permute(0, 2, 3, 1).reshape(b * gh * gw, d)
        base = (np.asarray(image_index)[:, None] * gh * gw).astype(np.int64)

        def gather(yy, xx):
            return flat[torch.from_numpy((base + yy * gw + xx).reshape(-1)).to(fmap.device)]

        def weight(arr):
            return torch.from_numpy(np.ascontiguousarray(arr).reshape(-1, 1)).to(fmap.dtype).to(fmap.device)

        out = (
            gather(y0, x0) * weight((1 - wy) * (1 - wx))
            + gather(y0, x1) * weight((1 - wy) * wx)
            + gather(y1, x0) * weight(wy * (1 - wx))
            + gather(y1, x1) * weight(wy * wx)
        )
        return out.reshape(len(rois), g * g * d)

    def box_head(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = F.gelu(self.fc2(F.gelu(self.fc1(feats))))
        return self.cls_score(h), self.bbox_pred(h)

    # -- training ----------------------------------------------------------

    def losses(
        self,
        x: torch.Tensor,
        targets: list[tuple[np.ndarray, np.ndarray]],
        rngs: list[np.random.Generator],
        lam: float = 1.0,
        tokens: torch.Tensor | None = None,
    ) -> dict[str, torch.Tensor]:
        """Per-stage detection loss terms averaged over the images of ``x``.

        ``targets[i]`` is ``(boxes (G, 4), classes (G,))`` with 1-based class
        ids; ``rngs[i]`` drives anchor and RoI sampling for image ``i``.
        """
        cfg = self.cfg
        if tokens is None:
            tokens = self.backbone(x)
        fmap = self.feature_map(tokens)
        logits, deltas = self.rpn(fmap)
        nimg = x.shape[0]
        anchors = self.anchors
        proposals = self.propose(logits, deltas, cfg.post_nms_top_n_train)
        rpn_cls, rpn_loc = [], []
        roi_boxes, roi_img, roi_batches = [], [], []
        for i in range(nimg):
            gt_boxes, gt_cls = (np.asarray(t, dtype=np.float64) for t in targets[i])
            gt_boxes = gt_boxes.reshape(-1, 4)
            gt_cls = gt_cls.astype(np.int64).reshape(-1)
            ab = assign_anchors(anchors, gt_boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou, gt_cls)
            ab = sample_anchors(ab, cfg.rpn_batch, cfg.rpn_pos_fraction, rngs[i])
            c, l = detection_loss(
                logits[i],
                deltas[i],
                torch.from_numpy(ab.labels).to(x.device),
                torch.from_numpy(ab.targets).to(deltas.dtype).to(x.device),
                torch.from_numpy(ab.sampled).to(x.device),
                lam,
            )
            rpn_cls.append(c)
            rpn_loc.append(l)
            rois = np.concatenate([proposals[i][0], gt_boxes], axis=0)
            hb = assign_anchors(rois, gt_boxes, cfg.head_pos_iou, cfg.head_neg_iou, gt_cls)
            hb = sample_anchors(hb, cfg.head_batch, cfg.head_pos_fraction, rngs[i])
            keep = np.flatnonzero(hb.sampled)
            roi_boxes.append(rois[keep])
            roi_img.append(np.full(len(keep), i))
            roi_batches.append(hb)
        all_rois = np.concatenate(roi_boxes, axis=0)
        feats = self.roi_features(fmap, all_rois, np.concatenate(roi_img))
        cls_logits, head_deltas = self.box_head(feats)
        head_cls, head_loc = [], []
        start = 0
        for hb in roi_batches:
            keep = np.flatnonzero(hb.sampled)
            sl = slice(start, start + len(keep))
            start += len(keep)
            c, l = detection_loss(
                cls_logits[sl],
                head_deltas[sl],
                torch.from_numpy(hb.labels[keep]).to(x.device),
                torch.from_numpy(hb.targets[keep]).to(head_deltas.dtype).to(x.device),
                torch.ones(len(keep), dtype=torch.bool, device=x.device),
                lam,
                classes=torch.from_numpy(hb.classes[keep]).to(x.device),
            )
            head_cls.append(c)
            head_loc.append(l)
        terms = {
            "l_cls_rpn": torch.stack(rpn_cls).mean(),
            "l_loc_rpn": torch.stack(rpn_loc).mean(),
            "l_cls_head": torch.stack(head_cls).mean(),
            "l_loc_head": torch.stack(head_loc).mean(),
        }
        terms["l_od"] = terms["l_cls_rpn"] + terms["l_loc_rpn"] + terms["l_cls_head"] + terms["l_loc_head"]
        return terms

    # -- inference ---------------------------------------------------------

    @torch.no_grad()
    def detect(self, x: torch.Tensor) -> list[DetectorOutput]:
        cfg = self.cfg
        h, w = self.vit_cfg.input_size
        tokens = self.backbone(x)
        fmap = self.feature_map(tokens)
        logits, deltas = self.rpn(fmap)
        proposals = self.propose(logits, deltas, cfg.post_nms_top_n_test)
        outputs = [DetectorOutput() for _ in range(x.shape[0])]
        rois = [p[0] for p in proposals]
        counts = [len(r) for r in rois]
        if sum(counts) == 0:
            return outputs
        feats = self.roi_features(fmap, np.concatenate(rois), np.repeat(np.arange(len(rois)), counts))
        cls_logits, head_deltas = self.box_head(feats)
        probs = cls_logits.softmax(dim=-1).double().cpu().numpy()
        head_deltas = head_deltas.double().cpu().numpy()
        start = 0
        for i, (boxes, scores) in enumerate(proposals):
            n = len(boxes)
            pr, dl = probs[start : start + n], head_deltas[start : start + n]
            start += n
            outputs[i].proposals = [(BoundingBox(*b), float(s)) for b, s in zip(boxes.tolist(), scores)]
            if n == 0:
                continue
            refined = clip_boxes(decode_deltas(dl, boxes), h, w)
            valid = ((refined[:, 2] - refined[:, 0]) > 1e-6) & ((refined[:, 3] - refined[:, 1]) > 1e-6)
            cand_boxes, cand_scores, cand_labels = [], [], []
            for c in range(1, cfg.num_classes + 1):
                sel = valid & (pr[:, c] >= cfg.score_threshold)
                cand_boxes.append(refined[sel])
                cand_scores.append(pr[sel, c])
                cand_labels.append(np.full(int(sel.sum()), c))
            cb = np.concatenate(cand_boxes)
            cs = np.concatenate(cand_scores)
            cl = np.concatenate(cand_labels)
            keep = batched_nms(cb, cs, cl, cfg.nms_iou)[: cfg.max_detections]
            outputs[i].detections = [(BoundingBox(*cb[k]), int(cl[k]), float(cs[k])) for k in keep]
        return outputs


class CFTModel(nn.Module):
    """Detector plus latent mask decoder sharing one student backbone, and a frozen target.

    The detector is built before the decoder, so a model seeded the same way
    as a plain :class:`Detector` starts from identical detector weights.
    """

    def __init__(self, vit: VitConfig, det: DetectorConfig = DetectorConfig(), target: ViTEncoder | None = None):
        super().__init__()
        self.detector = Detector(vit, det)
        target_dim = target.cfg.embed_dim if target is not None else vit.embed_dim
        heads = target.cfg.num_heads if target is not None else vit.num_heads
        self.decoder = MaskDecoder(vit.embed_dim, target_dim, vit.num_patches, heads)
        self.target = target
        if target is not None:
            freeze(target)

    @property
    def student(self) -> ViTEncoder:
        return self.detector.backbone

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if p.requires_grad and not n.startswith("target.")]

    def train(self, mode: bool = True):
        super().train(mode)
        if self.target is not None:
            self.target.eval()
        return self

    def encode_student(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.student(x, mask)

    def encode_target(self, x: torch.Tensor) -> torch.Tensor:
        if self.target is None:
            raise RuntimeError("no target encoder attached")
        with torch.no_grad():
            return self.target(x)

    def decode_masked(self, latents: torch.Tensor, mask_indices: torch.Tensor) -> torch.Tensor:
        return self.decoder(latents, mask_indices)

    def ssl_loss(self, x: torch.Tensor, mask_indices: torch.Tensor) -> torch.Tensor:
        """Masked latent reconstruction error for a batch ``x`` with per-image ``mask_indices`` (B, M)."""
        n = self.student.cfg.num_patches
        mask = torch.zeros(x.shape[0], n, dtype=torch.bool, device=x.device)
        mask.scatter_(1, mask_indices, True)
        latents = self.encode_student(x, mask)
        predicted = self.decode_masked(latents, mask_indices)
        target = self.encode_target(x)
        return ssl_loss(predicted, target, mask_indices)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def parameter_checksum(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
