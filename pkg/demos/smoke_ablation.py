"""The CSL/SSL ablation on the smoke-sized experiment.

Runs every (CSL, SSL) combination for one seed using ``experiments/smoke.json``
and prints the ablation table. This finishes in well under a minute; the
numbers are noise at this size and only show that the pipeline runs end to
end. ``experiments/benchmark.json`` is the real-sized version.

    python3 demos/smoke_ablation.py [--out DIR]
"""

import argparse
import tempfile
from pathlib import Path

from popcft.experiment import ExperimentSpec, ablate

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", help="output directory (default: a temporary one)")
    args = ap.parse_args()
    spec = ExperimentSpec.load(ROOT / "experiments" / "smoke.json")
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(args.out or tmp)
        ablate(spec, out, on_cell=lambda r: print(f"csl={r['csl']!s:<5} ssl={r['ssl']!s:<5} val mAP {r['val_map']:.4f}"))
        print((out / "ablation.txt").read_text(), end="")


if __name__ == "__main__":
    main()
