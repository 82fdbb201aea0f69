"""Experiment orchestration: specs, resumable training cells, grid search, ablation, reports.

Everything an experiment produces lives under its output directory::

    out/
      data/<title_id>/          generated datasets
      target/<key>/             pretrained (or random) frozen target encoder
      runs/<key>/result.json    one finished training cell; the key hashes
                                the full cell definition, so reruns skip it
      eval/<condition>/<title>.json
      gridsearch.{json,txt}  ablation.{json,txt}  efficiency.{json,txt}  report.txt
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .datagen import DatasetError, TitleStyle, generate_title, read_dataset, write_dataset
from .metrics import EvalConfig, EvalReport
from .model import ViTEncoder, freeze
from .stats import MetricTable, significance_report
from .trainer import (
    TrainConfig,
    build_streams,
    evaluate_stream,
    labeled_stream,
    load_target,
    pretrain_target_encoder,
    save_checkpoint,
    save_target,
    train,
)

OUT_ENV = "POPCFT_OUT"
DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(7))
DEFAULT_ABLATION = ((True, True), (True, False), (False, True), (False, False))


class ReportGap(DatasetError):
    """A report input is missing."""


@dataclass
class DataSpec:
    titles: list[TitleStyle]
    n_train: int = 300
    n_val: int = 50
    n_test: int = 50
    n_unlabeled: int = 2000
    seed: int = 7
    image_size: tuple[int, int] = (64, 64)

    def to_dict(self) -> dict:
        return {
            "titles": [t.to_dict() for t in self.titles],
            "n_train": self.n_train,
            "n_val": self.n_val,
            "n_test": self.n_test,
            "n_unlabeled": self.n_unlabeled,
            "seed": self.seed,
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataSpec":
        d = dict(d)
        d["titles"] = [TitleStyle.from_dict(t) for t in d["titles"]]
        d["image_size"] = tuple(d.get("image_size", (64, 64)))
        return cls(**d)

    def style(self, title_id: str) -> TitleStyle:
        for t in self.titles:
            if t.title_id == title_id:
                return t
        raise ValueError(f"title {title_id!r} is not defined in the data section")


@dataclass
class TargetSpec:
    """``kind`` is ``mae`` (pixel-reconstruction pretraining on the unlabeled pools) or ``random``."""

    kind: str = "mae"
    epochs: int = 10
    batch_size: int = 50
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("mae", "random"):
            raise ValueError(f"unknown target kind {self.kind!r}")


@dataclass
class ExperimentSpec:
    downstream_title: str
    co_titles: list[str]
    data: DataSpec
    train_config: TrainConfig = field(default_factory=TrainConfig)
    eval_config: EvalConfig = field(default_factory=EvalConfig)
    target: TargetSpec = field(default_factory=TargetSpec)
    grid: dict[str, list[float]] | None = None
    ablation: list[tuple[bool, bool]] | None = None
    data_fractions: list[float] = field(default_factory=lambda: [1.0])
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs/default"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.downstream_title in self.co_titles:
            raise ValueError("the downstream title cannot also be a co-title")
        if self.grid is not None:
            for name in ("alpha", "beta"):
                vals = self.grid.get(name)
                if not vals:
                    raise ValueError(f"empty grid for {name}")
                if any(not 0 <= v <= 1 for v in vals):
                    raise ValueError(f"grid values for {name} must lie in [0, 1]")
        for f in self.data_fractions:
            if not 0 < f <= 1:
                raise ValueError("data fractions must lie in (0, 1]")
        self.data.style(self.downstream_title)
        for t in self.co_titles:
            self.data.style(t)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        d["data"] = DataSpec.from_dict(d["data"])
        d["train_config"] = TrainConfig.from_dict(d.get("train_config", {}))
        d["eval_config"] = EvalConfig(**d.get("eval_config", {}))
        d["target"] = TargetSpec(**d.get("target", {}))
        if d.get("ablation") is not None:
            d["ablation"] = [tuple(bool(v) for v in pair) for pair in d["ablation"]]
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"cannot read experiment spec {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "downstream_title": self.downstream_title,
            "co_titles": list(self.co_titles),
            "data": self.data.to_dict(),
            "train_config": self.train_config.to_dict(),
            "eval_config": {
                "iou_threshold": self.eval_config.iou_threshold,
                "f1_confidence_threshold": self.eval_config.f1_confidence_threshold,
                "ap_interpolation": self.eval_config.ap_interpolation,
            },
            "target": vars(self.target).copy(),
            "grid": self.grid,
            "ablation": [list(p) for p in self.ablation] if self.ablation is not None else None,
            "data_fractions": list(self.data_fractions),
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }


def resolve_output(spec: ExperimentSpec, out: str | os.PathLike | None = None) -> Path:
    """``out`` argument, then the ``POPCFT_OUT`` environment variable, then the spec."""
    return Path(out or os.environ.get(OUT_ENV) or spec.output_dir)


def _key(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


# ---------------------------------------------------------------------------
# Data and target


def generate_data(spec: ExperimentSpec, out: Path, titles=None) -> dict[str, Path]:
    """Generate (or reuse) one dataset directory per title; identical specs give identical bytes."""
    d = spec.data
    paths = {}
    for title in titles or [spec.downstream_title, *spec.co_titles]:
        path = out / "data" / title
        marker = _key({"data": d.to_dict(), "title": title})
        stamp = path / "spec.key"
        if not (stamp.exists() and stamp.read_text() == marker):
            ds = generate_title(d.style(title), d.n_train, d.n_val, d.n_test, d.n_unlabeled, d.seed, image_size=d.image_size)
            write_dataset(ds, path)
            atomic_write_text(stamp, marker)
        paths[title] = path
    return paths


_DATA_CACHE: dict[tuple, object] = {}


def load_data(spec: ExperimentSpec, out: Path):
    paths = generate_data(spec, out)
    loaded = {}
    for title, path in paths.items():
        key = (str(path.resolve()), (path / "spec.key").read_text())
        if key not in _DATA_CACHE:
            _DATA_CACHE[key] = read_dataset(path)
        loaded[title] = _DATA_CACHE[key]
    return loaded[spec.downstream_title], [loaded[t] for t in spec.co_titles]


def target_key(spec: ExperimentSpec) -> str:
    titles = sorted([spec.downstream_title, *spec.co_titles])
    return _key({"data": spec.data.to_dict(), "titles": titles, "target": vars(spec.target), "vit": spec.train_config.vit.to_dict()})


def prepare_target(spec: ExperimentSpec, out: Path) -> ViTEncoder:
    """Frozen target encoder shared by every cell of an experiment, built once and cached on disk."""
    path = out / "target" / target_key(spec)
    if (path / "manifest.json").exists():
        return load_target(path)
    t = spec.target
    vit = spec.train_config.vit
    if t.kind == "random":
        with torch.random.fork_rng():
            torch.manual_seed(t.seed)
            enc = freeze(ViTEncoder(vit))
    else:
        down, co = load_data(spec, out)
        pool = build_streams(replace(spec.train_config, csl_enabled=False, ssl_enabled=True), down, co)["unl"]
        with torch.random.fork_rng():
            enc = pretrain_target_encoder(pool.x, vit, t.epochs, t.batch_size, t.lr, seed=t.seed)
    save_target(path, enc, seed=t.seed, target=vars(t))
    return load_target(path)


# ---------------------------------------------------------------------------
# Cells


def cell_key(spec: ExperimentSpec, config: TrainConfig) -> str:
    return _key(
        {
            "data": spec.data.to_dict(),
            "downstream": spec.downstream_title,
            "co_titles": list(spec.co_titles),
            "train": config.to_dict(),
            "target": target_key(spec) if config.ssl_enabled else None,
            "eval": spec.to_dict()["eval_config"],
        }
    )


def run_cell(spec: ExperimentSpec, out: Path, config: TrainConfig, save_model: bool = False) -> dict:
    """Train one configuration and score it on validation and test; reuse a finished result."""
    key = cell_key(spec, config)
    cell_dir = out / "runs" / key
    result_path = cell_dir / "result.json"
    if result_path.exists():
        return json.loads(result_path.read_text())
    down, co = load_data(spec, out)
    target = prepare_target(spec, out) if config.ssl_enabled else None
    t0 = time.perf_counter()
    res = train(config, down, co, target=target, eval_config=spec.eval_config)
    test = evaluate_stream(res.model.detector, labeled_stream(down.test), spec.eval_config)
    result = {
        "key": key,
        "alpha": config.alpha,
        "beta": config.beta,
        "csl": config.csl_enabled,
        "ssl": config.ssl_enabled,
        "fraction": config.labeled_fraction,
        "seed": config.seed,
        "best_epoch": res.best_epoch,
        "val_map": res.best_val_map,
        "test_map": test.map,
        "test_f1": test.f1,
        "target_checksum_before": res.target_checksum_before,
        "target_checksum_after": res.target_checksum_after,
        "final_l_cft": res.log.steps[-1]["l_cft"] if res.log.steps else None,
        "wall_clock_s": time.perf_counter() - t0,
        "config": config.to_dict(),
    }
    cell_dir.mkdir(parents=True, exist_ok=True)
    if save_model:
        save_checkpoint(cell_dir / "best", res.model, config)
    atomic_write_text(cell_dir / "train_log.jsonl", res.log.to_jsonl())
    atomic_write_text(result_path, json.dumps(result, indent=1, sort_keys=True))
    return result


def cell_config(spec: ExperimentSpec, seed: int, **overrides) -> TrainConfig:
    return replace(spec.train_config, seed=seed, **overrides)


# ---------------------------------------------------------------------------
# Studies


def select_best(cells: list[dict]) -> dict:
    """Highest validation mAP; ties go to the lower beta, then the lower alpha."""
    if not cells:
        raise ValueError("empty grid")
    return min(cells, key=lambda c: (-c["val_map"], c["beta"], c["alpha"]))


def gridsearch(spec: ExperimentSpec, out: Path, seed: int | None = None, on_cell=None) -> dict:
    """Train one model per (alpha, beta) cell and pick the validation-mAP argmax.

    ``on_cell`` is called after each finished cell (used to observe progress
    and to interrupt runs in tests).
    """
    grid = spec.grid or {"alpha": list(DEFAULT_GRID), "beta": list(DEFAULT_GRID)}
    alphas, betas = grid.get("alpha") or [], grid.get("beta") or []
    if not alphas or not betas:
        raise ValueError("empty grid")
    seed = spec.seeds[0] if seed is None else seed
    cells = []
    for a in alphas:
        for b in betas:
            cfg = cell_config(spec, seed, alpha=float(a), beta=float(b), csl_enabled=True, ssl_enabled=True)
            r = run_cell(spec, out, cfg)
            cells.append({k: r[k] for k in ("alpha", "beta", "val_map", "test_map", "test_f1", "key")})
            if on_cell:
                on_cell(r)
    best = select_best(cells)
    result = {"alphas": list(alphas), "betas": list(betas), "seed": seed, "cells": cells, "best": best}
    atomic_write_text(out / "gridsearch.json", json.dumps(result, indent=1, sort_keys=True))
    atomic_write_text(out / "gridsearch.txt", format_grid(result))
    return result


def format_grid(result: dict) -> str:
    alphas, betas = result["alphas"], result["betas"]
    val = {(c["alpha"], c["beta"]): c["val_map"] for c in result["cells"]}
    lines = ["validation mAP@0.5 (rows: alpha, columns: beta)", "alpha\\beta " + " ".join(f"{b:>7.2f}" for b in betas)]
    for a in alphas:
        lines.append(f"{a:>10.2f} " + " ".join(f"{val[(a, b)]:>7.4f}" for b in betas))
    best = result["best"]
    lines.append(f"best alpha={best['alpha']:.2f} beta={best['beta']:.2f} val_mAP={best['val_map']:.4f}")
    return "\n".join(lines) + "\n"


def parse_grid_table(text: str) -> dict[tuple[float, float], float]:
    """Read back the table written by :func:`format_grid`."""
    lines = text.splitlines()
    betas = [float(v) for v in lines[1].split()[1:]]
    out = {}
    for line in lines[2:]:
        if line.startswith("best"):
            break
        parts = line.split()
        a = float(parts[0])
        for b, v in zip(betas, parts[1:]):
            out[(a, b)] = float(v)
    return out


def _mean_rows(rows: list[dict]) -> dict:
    return {
        "mean_test_map": float(np.mean([r["test_map"] for r in rows])),
        "mean_test_f1": float(np.mean([r["test_f1"] for r in rows])),
        "test_map_by_seed": {str(r["seed"]): r["test_map"] for r in rows},
    }


def ablate(spec: ExperimentSpec, out: Path, pairs=None, on_cell=None) -> dict:
    """CSL/SSL ablation matrix: one run per (csl, ssl) pair and seed, averaged over seeds."""
    pairs = [tuple(p) for p in (pairs or spec.ablation or DEFAULT_ABLATION)]
    if not pairs:
        raise ValueError("ablation list is empty")
    rows = []
    for csl, ssl in pairs:
        runs = []
        for seed in spec.seeds:
            r = run_cell(spec, out, cell_config(spec, seed, csl_enabled=csl, ssl_enabled=ssl))
            runs.append(r)
            if on_cell:
                on_cell(r)
        rows.append({"csl": csl, "ssl": ssl, **_mean_rows(runs), "runs": [r["key"] for r in runs]})
    result = {"seeds": list(spec.seeds), "rows": rows}
    atomic_write_text(out / "ablation.json", json.dumps(result, indent=1, sort_keys=True))
    atomic_write_text(out / "ablation.txt", format_ablation(result))
    return result


def format_ablation(result: dict) -> str:
    lines = [f"{'SSL':<6} {'CSL':<6} {'mAP':>7} {'F1':>7}   per-seed mAP"]
    for r in result["rows"]:
        per = " ".join(f"{v:.4f}" for v in r["test_map_by_seed"].values())
        lines.append(f"{str(r['ssl']):<6} {str(r['csl']):<6} {r['mean_test_map']:>7.4f} {r['mean_test_f1']:>7.4f}   {per}")
    return "\n".join(lines) + "\n"


def data_efficiency(spec: ExperimentSpec, out: Path, fractions=None, on_cell=None) -> dict:
    """Full CFT at each labeled-data fraction, averaged over seeds."""
    fractions = list(fractions or spec.data_fractions)
    rows = []
    for f in fractions:
        runs = []
        for seed in spec.seeds:
            r = run_cell(spec, out, cell_config(spec, seed, labeled_fraction=float(f)))
            runs.append(r)
            if on_cell:
                on_cell(r)
        rows.append({"fraction": f, **_mean_rows(runs)})
    full = next((r for r in rows if r["fraction"] == 1.0), None)
    for r in rows:
        r["retained"] = r["mean_test_map"] / full["mean_test_map"] if full and full["mean_test_map"] > 0 else None
    result = {"seeds": list(spec.seeds), "rows": rows}
    atomic_write_text(out / "efficiency.json", json.dumps(result, indent=1, sort_keys=True))
    lines = [f"{'fraction':>8} {'mAP':>7} {'F1':>7} {'retained':>8}   per-seed mAP"]
    for r in rows:
        per = " ".join(f"{v:.4f}" for v in r["test_map_by_seed"].values())
        ret = f"{r['retained']:.3f}" if r["retained"] is not None else "-"
        lines.append(f"{r['fraction']:>8.2f} {r['mean_test_map']:>7.4f} {r['mean_test_f1']:>7.4f} {ret:>8}   {per}")
    atomic_write_text(out / "efficiency.txt", "\n".join(lines) + "\n")
    return result


# ---------------------------------------------------------------------------
# Evaluation reports


def write_eval_report(out: Path, condition: str, title: str, report: EvalReport) -> Path:
    path = out / "eval" / condition / f"{title}.json"
    atomic_write_text(path, report.to_json())
    return path


def collect_reports(out: Path, titles=None) -> dict[str, dict[str, EvalReport]]:
    """``condition -> title -> report`` from ``out/eval``; every condition must cover every title."""
    root = out / "eval"
    if not root.is_dir():
        raise ReportGap(f"no evaluation reports under {root}")
    found: dict[str, dict[str, EvalReport]] = {}
    for cond_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(cond_dir.glob("*.json")):
            found.setdefault(cond_dir.name, {})[f.stem] = EvalReport.from_dict(json.loads(f.read_text()))
    if not found:
        raise ReportGap(f"no evaluation reports under {root}")
    all_titles = set(titles or []) | {t for reps in found.values() for t in reps}
    for cond, reps in found.items():
        missing = sorted(all_titles - set(reps))
        if missing:
            raise ReportGap(f"condition {cond!r} lacks reports for titles {missing}")
    return found


def build_report(out: Path, titles=None) -> str:
    reports = collect_reports(out, titles)
    conds = sorted(reports)
    titles = sorted(next(iter(reports.values())))
    sections = []
    for metric in ("map", "f1"):
        table = MetricTable(metric, {t: {c: getattr(reports[c][t], metric) for c in conds} for t in titles})
        head = f"{'title':<14}" + "".join(f"{c:>16}" for c in conds)
        lines = [f"{metric} (raw)", head]
        lines += [f"{t:<14}" + "".join(f"{table.rows[t][c]:>16.4f}" for c in conds) for t in titles]
        if len(conds) >= 2:
            # an all-zero row has no per-title scale
            usable = [t for t in titles if sum(table.rows[t].values()) > 0]
            for t in sorted(set(titles) - set(usable)):
                lines.append(f"note: {t} scores 0 under every condition; excluded from normalization and t-tests")
            sub = MetricTable(metric, {t: table.rows[t] for t in usable})
            norm = sub.normalized()
            lines += [f"{metric} (normalized per title)", head]
            lines += [f"{t:<14}" + "".join(f"{norm.rows[t][c]:>16.4f}" for c in conds) for t in usable]
        sections.append("\n".join(lines) + "\n")
        if len(conds) >= 2 and len(usable) >= 2:
            pairs = [(a, b) for i, a in enumerate(conds) for b in conds[i + 1 :]]
            sections.append(significance_report(sub, pairs, normalize=True))
    for name in ("gridsearch.txt", "ablation.txt", "efficiency.txt"):
        if (out / name).exists():
            sections.append(f"[{name}]\n" + (out / name).read_text())
    text = "\n".join(sections)
    atomic_write_text(out / "report.txt", text)
    return text

