"""Co-finetuning loop: tri-stream batching, loss fusion, AdamW with warmup + cosine."""

from __future__ import annotations

import copy
import json
import math
import time
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_state, load_tensors, save_module
from .datagen import BUG_CLASSES, TitleDataset
from .losses import LossBreakdown, co_supervised_loss, total_loss
from .metrics import EvalConfig, EvalReport, evaluate_detections
from .model import CFTModel, Detector, DetectorConfig, ViTEncoder, VitConfig, freeze, parameter_checksum, patchify_tensor
from .preprocess import round_half_away, sample_mask, stack_frames


class NumericDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.4
    beta: float = 0.2
    lam: float = 1.0
    base_lr: float = 1e-4
    epochs: int = 30
    warmup_epochs: int = 10
    per_step_batch: int = 10
    accumulation_steps: int = 10
    weight_decay: float = 5e-4
    masking_ratio: float = 0.75
    csl_enabled: bool = True
    ssl_enabled: bool = True
    seed: int = 0
    labeled_fraction: float = 1.0
    include_labeled_in_unlabeled: bool = False
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_steps: int | None = None
    validate: bool = True
    vit: VitConfig = field(default_factory=VitConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        if isinstance(self.vit, dict):
            self.vit = VitConfig.from_dict(self.vit)
        if isinstance(self.detector, dict):
            self.detector = DetectorConfig.from_dict(self.detector)
        self.adam_betas = tuple(self.adam_betas)
        if self.alpha < 0 or self.beta < 0 or self.lam < 0:
            raise ValueError("alpha, beta and lambda must be non-negative")
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs exceeds epochs")
        if self.per_step_batch < 1 or self.accumulation_steps < 1:
            raise ValueError("batch size and accumulation steps must be positive")

    @property
    def effective_batch(self) -> int:
        return self.per_step_batch * self.accumulation_steps

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["vit"] = self.vit.to_dict()
        d["detector"] = self.detector.to_dict()
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine annealing to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if not 0 <= warmup_steps < total_steps:
        raise ValueError("warmup_steps must lie in [0, total_steps)")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return max(0.0, base_lr * 0.5 * (1.0 + math.cos(math.pi * progress)))


def subsample_labeled(dataset: TitleDataset, fraction: float, seed: int) -> TitleDataset:
    """Keep a uniformly random ``round(fraction * n)`` of the train split."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1:
        return dataset
    n = len(dataset.train)
    k = round_half_away(fraction * n)
    rng = np.random.default_rng([seed, 0x5B5])
    keep = np.sort(rng.choice(n, size=k, replace=False))
    out = copy.copy(dataset)
    out.train = [dataset.train[i] for i in keep]
    return out


def _crc(s: str) -> int:
    return zlib.crc32(s.encode("utf-8"))


@dataclass
class Stream:
    """Diff images plus targets for one sampling stream."""

    x: np.ndarray  # (n, 3, H, W) uint8 raw differences
    ids: list[str]
    targets: list[tuple[np.ndarray, np.ndarray]] | None = None

    def __len__(self):
        return len(self.ids)


def labeled_stream(sequences) -> Stream:
    x = np.stack([stack_frames(s.frames) for s in sequences]) if sequences else np.zeros((0, 3, 1, 1), np.uint8)
    targets = []
    for s in sequences:
        boxes = np.array([a.box.as_tuple() for a in s.annotations], dtype=np.float64).reshape(-1, 4)
        classes = np.array([BUG_CLASSES.index(a.bug_class) + 1 for a in s.annotations], dtype=np.int64)
        targets.append((boxes, classes))
    return Stream(x, [s.sequence_id for s in sequences], targets)


def unlabeled_stream(sequences) -> Stream:
    x = np.stack([stack_frames(s.frames) for s in sequences]) if sequences else np.zeros((0, 3, 1, 1), np.uint8)
    return Stream(x, [s.sequence_id for s in sequences])


class _Cycler:
    """Uniform sampling without replacement, reshuffled at every pass."""

    def __init__(self, n: int, seed: int, tag: int):
        self.n, self.seed, self.tag = n, seed, tag
        self.cycle = -1
        self.perm = np.zeros(0, dtype=np.int64)
        self.pos = 0

    def take(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Next ``k`` indices and the pass number each was drawn in."""
        idx, cyc = [], []
        while len(idx) < k:
            if self.pos >= len(self.perm):
                self.cycle += 1
                self.perm = np.random.default_rng([self.seed, self.tag, self.cycle]).permutation(self.n)
                self.pos = 0
            take = min(k - len(idx), len(self.perm) - self.pos)
            idx.extend(self.perm[self.pos : self.pos + take])
            cyc.extend([self.cycle] * take)
            self.pos += take
        return np.asarray(idx, dtype=np.int64), np.asarray(cyc, dtype=np.int64)


class TriStreamSampler:
    """Downstream, co-title and unlabeled mini-batches for each micro-step.

    An epoch is one pass over the downstream train split; the co-title and
    unlabeled streams cycle through their own reshuffled passes. Disabled
    streams yield empty batches.
    """

    def __init__(self, n_down: int, n_co: int, n_unl: int, batch: int, seed: int, csl: bool = True, ssl: bool = True):
        if n_down == 0:
            raise ValueError("downstream train split is empty")
        if csl and n_co == 0:
            raise ValueError("co-title stream is empty but CSL is enabled")
        if ssl and n_unl == 0:
            raise ValueError("unlabeled pool is empty but SSL is enabled")
        self.n_down, self.batch, self.seed = n_down, batch, seed
        self.csl, self.ssl = csl, ssl
        self.co = _Cycler(n_co, seed, 1)
        self.unl = _Cycler(n_unl, seed, 2)

    def micro_batches_per_epoch(self) -> int:
        return -(-self.n_down // self.batch)

    def epoch(self, e: int):
        perm = np.random.default_rng([self.seed, 0, e]).permutation(self.n_down)
        empty = (np.zeros(0, np.int64), np.zeros(0, np.int64))
        for start in range(0, self.n_down, self.batch):
            down = perm[start : start + self.batch]
            # the other streams follow the downstream size, so a short last batch stays balanced
            co = self.co.take(len(down)) if self.csl else empty
            unl = self.unl.take(len(down)) if self.ssl else empty
            yield down, co, unl

    def sample_tri_batch(self):
        """Next tri-batch, continuing across epochs."""
        if not hasattr(self, "_iter"):
            self._iter = self._all()
        return next(self._iter)

    def _all(self):
        e = 0
        while True:
            yield from self.epoch(e)
            e += 1


def sample_tri_batch(sampler: TriStreamSampler):
    return sampler.sample_tri_batch()


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "step", **s}, sort_keys=True) for s in self.steps]
        lines += [json.dumps({"type": "epoch", **e}, sort_keys=True) for e in self.epochs]
        return "\n".join(lines) + "\n"

    def comparable(self) -> dict:
        """Everything except wall-clock timings."""
        return {"steps": self.steps, "epochs": [{k: v for k, v in e.items() if k != "wall_clock_s"} for e in self.epochs]}


@dataclass
class TrainResult:
    model: CFTModel
    log: TrainLog
    best_epoch: int
    best_val_map: float
    checkpoint_path: Path | None = None
    target_checksum_before: str | None = None
    target_checksum_after: str | None = None


def _to_tensor(raw: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(raw).to(dtype) / 255.0


def _image_rngs(seed: int, tag: int, epoch_ids, ids: list[str]) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, tag, int(e), _crc(i)]) for e, i in zip(epoch_ids, ids)]


def make_model(config: TrainConfig, target: ViTEncoder | None = None) -> CFTModel:
    torch.manual_seed(config.seed)
    model = CFTModel(config.vit, config.detector, target)
    if target is None and config.ssl_enabled:
        # frozen random target (ablation baseline); its own RNG stream leaves the student init untouched
        with torch.random.fork_rng():
            torch.manual_seed(config.seed + 7919)
            model.target = freeze(ViTEncoder(config.vit))
    return model


def predict_stream(detector: Detector, stream: Stream, batch_size: int = 50):
    was = detector.training
    detector.eval()
    dtype = next(detector.parameters()).dtype
    dets = []
    for s in range(0, len(stream), batch_size):
        x = _to_tensor(stream.x[s : s + batch_size], dtype)
        for out in detector.detect(x):
            dets.append([(b, c, conf) for b, c, conf in out.detections])
    detector.train(was)
    return dets


def evaluate_stream(detector: Detector, stream: Stream, cfg: EvalConfig = EvalConfig()) -> EvalReport:
    from .boxes import BoundingBox

    gts = [[(BoundingBox(*b), int(c)) for b, c in zip(boxes, classes)] for boxes, classes in stream.targets]
    return evaluate_detections(predict_stream(detector, stream), gts, cfg)


def train(
    config: TrainConfig,
    downstream: TitleDataset,
    co_titles: list[TitleDataset] = (),
    target: ViTEncoder | None = None,
    out_dir: str | Path | None = None,
    eval_config: EvalConfig = EvalConfig(),
    streams: dict | None = None,
) -> TrainResult:
    """Optimise ``L_od(down) + alpha L_od(co) [csl] + beta MSE_ssl [ssl]``.

    ``streams`` may carry pre-built :class:`Stream` objects (keys ``down``,
    ``val``, ``co``, ``unl``) so repeated runs skip preprocessing; they must
    correspond to the given datasets after ``labeled_fraction`` subsampling.
    """
    cfg = config
    if streams is None:
        streams = build_streams(cfg, downstream, co_titles)
    down, val, co, unl = streams["down"], streams["val"], streams["co"], streams["unl"]
    sampler = TriStreamSampler(len(down), len(co), len(unl), cfg.per_step_batch, cfg.seed, cfg.csl_enabled, cfg.ssl_enabled)
    model = make_model(cfg, target)
    model.train()
    params = model.trainable_parameters()
    opt = torch.optim.AdamW(params, lr=0.0, betas=cfg.adam_betas, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    dtype = next(model.parameters()).dtype
    n_micro = sampler.micro_batches_per_epoch()
    updates_per_epoch = -(-n_micro // cfg.accumulation_steps)
    total_steps = cfg.epochs * updates_per_epoch
    warmup_steps = cfg.warmup_epochs * updates_per_epoch
    if warmup_steps >= total_steps:
        warmup_steps = total_steps - 1
    target_before = parameter_checksum(model.target) if model.target is not None else None
    log = TrainLog()
    best = (-1.0, -1, None)
    step = 0
    n_mask = None
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            batches = list(sampler.epoch(epoch))
            groups = [batches[i : i + cfg.accumulation_steps] for i in range(0, len(batches), cfg.accumulation_steps)]
            for group in groups:
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                acc = {k: 0.0 for k in LossBreakdown().to_dict()}
                for (d_idx), (c_idx, c_cyc), (u_idx, u_cyc) in group:
                    ids = [down.ids[i] for i in d_idx]
                    x = _to_tensor(down.x[d_idx], dtype)
                    terms = model.detector.losses(
                        x, [down.targets[i] for i in d_idx], _image_rngs(cfg.seed, 10, [epoch] * len(ids), ids), cfg.lam
                    )
                    l_down = terms["l_od"]
                    l_co = torch.zeros((), dtype=dtype)
                    if cfg.csl_enabled:
                        cids = [co.ids[i] for i in c_idx]
                        co_terms = model.detector.losses(
                            _to_tensor(co.x[c_idx], dtype),
                            [co.targets[i] for i in c_idx],
                            _image_rngs(cfg.seed, 11, c_cyc, cids),
                            cfg.lam,
                        )
                        l_co = co_terms["l_od"]
                    l_sup = co_supervised_loss(l_down, l_co, cfg.alpha) if cfg.csl_enabled else l_down
                    mse = torch.zeros((), dtype=dtype)
                    if cfg.ssl_enabled:
                        n = cfg.vit.num_patches
                        uids = [unl.ids[i] for i in u_idx]
                        masks = [
                            sample_mask(n, cfg.masking_ratio, r).masked_indices
                            for r in _image_rngs(cfg.seed, 12, u_cyc, uids)
                        ]
                        idx = torch.as_tensor(np.array(masks, dtype=np.int64).reshape(len(uids), -1))
                        mse = model.ssl_loss(_to_tensor(unl.x[u_idx], dtype), idx)
                    loss = total_loss(l_sup, mse, cfg.beta) if cfg.ssl_enabled else l_sup
                    if not torch.isfinite(loss):
                        raise NumericDivergence(f"non-finite loss at step {step}, epoch {epoch}")
                    (loss / len(group)).backward()
                    parts = {
                        "l_cls_rpn": terms["l_cls_rpn"],
                        "l_loc_rpn": terms["l_loc_rpn"],
                        "l_cls_head": terms["l_cls_head"],
                        "l_loc_head": terms["l_loc_head"],
                        "l_od_downstream": l_down,
                        "l_od_cotitle": l_co,
                        "l_co_sup": l_sup,
                        "mse_ssl": mse,
                        "l_cft": loss,
                    }
                    for k, v in parts.items():
                        acc[k] += float(v.detach()) / len(group)
                lr = lr_at(step, total_steps, warmup_steps, cfg.base_lr)
                for g in opt.param_groups:
                    g["lr"] = lr
                opt.step()
                opt.zero_grad(set_to_none=True)
                acc.update(alpha=cfg.alpha, beta=cfg.beta, lam=cfg.lam)
                record = {"step": step, "epoch": epoch, "lr": lr, **acc}
                log.steps.append(record)
                if log_fh:
                    log_fh.write(json.dumps({"type": "step", **record}, sort_keys=True) + "\n")
                step += 1
            entry = {"epoch": epoch, "steps": step}
            if cfg.validate and len(val):
                report = evaluate_stream(model.detector, val, eval_config)
                entry.update(val_map=report.map, val_f1=report.f1)
                if report.map > best[0]:
                    best = (report.map, epoch, copy.deepcopy(model.state_dict()))
            entry["wall_clock_s"] = time.perf_counter() - t0
            log.epochs.append(entry)
            if log_fh:
                log_fh.write(json.dumps({"type": "epoch", **entry}, sort_keys=True) + "\n")
                log_fh.flush()
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    if best[2] is None:
        best = (float("nan"), len(log.epochs) - 1, None)
    else:
        model.load_state_dict(best[2])
    result = TrainResult(
        model=model,
        log=log,
        best_epoch=best[1],
        best_val_map=best[0],
        target_checksum_before=target_before,
        target_checksum_after=parameter_checksum(model.target) if model.target is not None else None,
    )
    if out_dir is not None:
        result.checkpoint_path = save_checkpoint(out_dir / "best", model, cfg, step=step)
    return result


def build_streams(config: TrainConfig, downstream: TitleDataset, co_titles=()) -> dict:
    down_ds = subsample_labeled(downstream, config.labeled_fraction, config.seed)
    co_seqs = [s for t in co_titles for s in t.train]
    unl_seqs = [s for t in [downstream, *co_titles] for s in t.unlabeled]
    if config.include_labeled_in_unlabeled:
        unl_seqs += [s for t in [down_ds, *co_titles] for s in t.train]
    return {
        "down": labeled_stream(down_ds.train),
        "val": labeled_stream(downstream.validation),
        "co": labeled_stream(co_seqs) if config.csl_enabled else labeled_stream([]),
        "unl": unlabeled_stream(unl_seqs) if config.ssl_enabled else unlabeled_stream([]),
    }


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, model: CFTModel, config: TrainConfig, step: int = 0) -> Path:
    tensors = {k: v for k, v in model.state_dict().items() if not k.startswith("target.")}

    class _Wrap(nn.Module):
        def state_dict(self, *a, **k):
            return tensors

    save_module(
        path,
        _Wrap(),
        kind="cft_detector",
        config={"vit": config.vit.to_dict(), "detector": config.detector.to_dict(), "train": config.to_dict()},
        seed=config.seed,
        step=step,
    )
    return Path(path)


def load_detector(path) -> Detector:
    tensors, meta = load_tensors(path)
    if meta.get("kind") not in ("cft_detector", "detector"):
        raise ValueError(f"{path} is not a detector checkpoint")
    vit = VitConfig.from_dict(meta["config"]["vit"])
    det = Detector(vit, DetectorConfig.from_dict(meta["config"]["detector"]))
    prefix = "detector." if meta["kind"] == "cft_detector" else ""
    load_state(det, {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)})
    det.eval()
    return det


def save_target(path, encoder: ViTEncoder, seed: int = 0, step: int = 0, **extra) -> Path:
    save_module(path, encoder, kind="target_encoder", config={"vit": encoder.cfg.to_dict()}, seed=seed, step=step, **extra)
    return Path(path)


def load_target(path) -> ViTEncoder:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "target_encoder":
        raise ValueError(f"{path} is not a target encoder checkpoint")
    enc = ViTEncoder(VitConfig.from_dict(meta["config"]["vit"]))
    load_state(enc, tensors)
    return freeze(enc)


# ---------------------------------------------------------------------------
# Target encoder pretraining


def pretrain_target_encoder(
    raw_diffs: np.ndarray,
    vit: VitConfig,
    epochs: int = 10,
    batch_size: int = 50,
    lr: float = 1e-3,
    masking_ratio: float = 0.75,
    seed: int = 0,
) -> ViTEncoder:
    """Masked pixel-reconstruction pretraining of an encoder, returned frozen.

    The encoder sees mask tokens in place of masked patches and a linear head
    regresses the masked patches' pixels.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        enc = ViTEncoder(vit)
        head = nn.Linear(vit.embed_dim, vit.patch_size**2 * vit.in_chans)
    params = list(enc.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.05)
    n = len(raw_diffs)
    steps_per_epoch = -(-n // batch_size)
    total = max(2, epochs * steps_per_epoch)
    warm = max(1, total // 10)
    step = 0
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=g).numpy()
        for s in range(0, n, batch_size):
            idx = perm[s : s + batch_size]
            x = _to_tensor(raw_diffs[idx], torch.float32)
            rng = np.random.default_rng([seed, epoch, s])
            masks = np.stack([sample_mask(vit.num_patches, masking_ratio, rng).as_bool() for _ in idx])
            mask = torch.from_numpy(masks)
            pred = head(enc(x, mask))
            target = patchify_tensor(x, vit.patch_size)
            loss = ((pred - target) ** 2)[mask].mean()
            for grp in opt.param_groups:
                grp["lr"] = lr_at(min(step, total), total, warm, lr)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
    return freeze(enc)
