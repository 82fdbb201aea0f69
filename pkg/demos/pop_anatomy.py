"""Where a pop shows up in the stacked difference image.

Generates a handful of labeled sequences for one title, stacks the grayscale
differences and prints the mean difference inside and outside each pop box,
per channel. Pops are injected between the second and third frame, so the
energy concentrates in the middle channel.

    python3 demos/pop_anatomy.py [--png strip.png]
"""

import argparse

import numpy as np
from PIL import Image

from popcft.datagen import TitleStyle, generate_title
from popcft.preprocess import stack_diffs


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--png", help="write frames and difference channels of the first sequence here")
    args = ap.parse_args()

    style = TitleStyle("GiantMap", 11, "park", 0.5, 2.0, 2.0)
    ds = generate_title(style, n_train=6, n_val=1, n_test=1, n_unlabeled=1, seed=0)
    print(f"{'sequence':<22} {'class':<12} {'box':<22} in/out mean |diff| per channel")
    for seq in ds.train:
        raw = stack_diffs(seq).raw.astype(np.float64)
        for ann in seq.annotations:
            b = ann.box
            inside = np.zeros(raw.shape[1:], dtype=bool)
            inside[int(b.y_min) : int(b.y_max), int(b.x_min) : int(b.x_max)] = True
            ratio = " ".join(f"{raw[c][inside].mean():5.1f}/{raw[c][~inside].mean():4.1f}" for c in range(3))
            box = f"({b.x_min:.0f},{b.y_min:.0f},{b.x_max:.0f},{b.y_max:.0f})"
            print(f"{seq.sequence_id:<22} {ann.bug_class:<12} {box:<22} {ratio}")

    if args.png:
        seq = ds.train[0]
        diffs = stack_diffs(seq).raw
        gray = [np.repeat(d[..., None], 3, axis=2) for d in diffs]
        strip = np.concatenate([*seq.frames, *gray], axis=1)
        Image.fromarray(strip).resize((strip.shape[1] * 4, strip.shape[0] * 4), Image.NEAREST).save(args.png)
        print(f"wrote {args.png}")


if __name__ == "__main__":
    main()
