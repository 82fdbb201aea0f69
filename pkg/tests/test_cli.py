import json
import os
import subprocess
import sys
from pathlib import Path


from popcft.cli import EXIT_DATA, EXIT_DIVERGENCE, EXIT_OK, EXIT_USAGE, main

ROOT = Path(__file__).resolve().parents[1]


def tiny_spec_file(tmp_path, **kw):
    d = json.loads((ROOT / "experiments" / "smoke.json").read_text())
    d["data"].update(n_train=4, n_val=2, n_test=2, n_unlabeled=4)
    d["train_config"].update(epochs=1, warmup_epochs=0)
    d.update(kw)
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(d))
    return p


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["train"]) == EXIT_USAGE
    assert main(["--help"]) == EXIT_OK


def test_gen_idempotent(tmp_path):
    spec = tiny_spec_file(tmp_path)
    assert main(["gen", "--spec", str(spec), "--out", str(tmp_path / "o")]) == EXIT_OK
    dirs = sorted(p.name for p in (tmp_path / "o" / "data").iterdir())
    assert dirs == ["CombatGame", "GiantMap", "HighRise"]
    for d in dirs:
        assert (tmp_path / "o" / "data" / d / "manifest.json").exists()
    first = tree_bytes(tmp_path / "o")
    (tmp_path / "o" / "data" / "GiantMap" / "spec.key").unlink()  # force regeneration
    assert main(["gen", "--spec", str(spec), "--out", str(tmp_path / "o")]) == EXIT_OK
    assert tree_bytes(tmp_path / "o") == first


def test_gen_unwritable_output(tmp_path):
    spec = tiny_spec_file(tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", "--spec", str(spec), "--out", str(blocker / "o")]) == EXIT_DATA
    assert not list(tmp_path.glob("**/manifest.json"))


def test_train_eval_report_roundtrip(tmp_path, capsys):
    spec = tiny_spec_file(tmp_path)
    out = tmp_path / "o"
    assert main(["train", "--spec", str(spec), "--out", str(out), "--seed", "3", "--fraction", "0.5"]) == EXIT_OK
    ckpt = next((out / "runs").glob("*/best"))
    for cond in ("a", "b"):
        for title in ("GiantMap", "HighRise"):
            args = ["eval", "--spec", str(spec), "--out", str(out), "--checkpoint", str(ckpt), "--condition", cond]
            assert main(args + ["--data", str(out / "data" / title)]) == EXIT_OK
    rep = json.loads((out / "eval" / "a" / "GiantMap.json").read_text())
    assert "map" in rep and "f1" in rep
    assert rep == json.loads((out / "eval" / "b" / "GiantMap.json").read_text())
    assert main(["report", "--out", str(out)]) == EXIT_OK
    assert (out / "report.txt").exists()
    (out / "eval" / "b" / "HighRise.json").unlink()
    capsys.readouterr()
    assert main(["report", "--out", str(out)]) == EXIT_DATA
    assert "HighRise" in capsys.readouterr().err


def test_train_twice_identical(tmp_path):
    spec = tiny_spec_file(tmp_path)
    for name in ("o1", "o2"):
        assert main(["train", "--spec", str(spec), "--out", str(tmp_path / name)]) == EXIT_OK
    r1 = [json.loads(p.read_text()) for p in (tmp_path / "o1" / "runs").glob("*/result.json")][0]
    r2 = [json.loads(p.read_text()) for p in (tmp_path / "o2" / "runs").glob("*/result.json")][0]
    for k in ("val_map", "test_map", "test_f1", "final_l_cft"):
        assert r1[k] == r2[k]


def test_eval_dimension_mismatch(tmp_path):
    spec = tiny_spec_file(tmp_path)
    out = tmp_path / "o"
    assert main(["train", "--spec", str(spec), "--out", str(out)]) == EXIT_OK
    ckpt = next((out / "runs").glob("*/best"))
    big = tiny_spec_file(tmp_path, output_dir=str(tmp_path / "big"))
    d = json.loads(big.read_text())
    d["data"]["image_size"] = [64, 64]
    big.write_text(json.dumps(d))
    assert main(["gen", "--spec", str(big)]) == EXIT_OK
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "big" / "data" / "GiantMap"), "--out", str(out)]) == EXIT_DATA


def test_divergence_exit_code(tmp_path, monkeypatch):
    from popcft.model import Detector

    def bad(self, *a, **k):
        nan = self.rpn_cls.weight.sum() * float("nan")
        return {k: nan for k in ("l_cls_rpn", "l_loc_rpn", "l_cls_head", "l_loc_head", "l_od")}

    monkeypatch.setattr(Detector, "losses", bad)
    spec = tiny_spec_file(tmp_path)
    assert main(["train", "--spec", str(spec), "--out", str(tmp_path / "o")]) == EXIT_DIVERGENCE


def test_gridsearch_single_cell_via_env(tmp_path):
    spec = tiny_spec_file(tmp_path, grid={"alpha": [0.3], "beta": [0.2]})
    env = dict(os.environ, POPCFT_OUT=str(tmp_path / "env_out"))
    proc = subprocess.run(
        [sys.executable, "-m", "popcft", "gridsearch", "--spec", str(spec)], env=env, capture_output=True, text=True
    )
    assert proc.returncode == 0, proc.stderr
    best = json.loads(proc.stdout.strip().splitlines()[-1])
    assert (best["alpha"], best["beta"]) == (0.3, 0.2)
    assert (tmp_path / "env_out" / "gridsearch.txt").exists()
