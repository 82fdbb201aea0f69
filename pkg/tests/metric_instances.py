from popcft.boxes import BoundingBox


def random_instance(rng, n_images=1, max_dets=6, max_gts=4, grid=12):
    """Small integer-grid boxes so IoU and confidence ties actually occur."""

    def box():
        x0, y0 = rng.integers(0, grid, 2)
        w, h = rng.integers(1, 6, 2)
        return (float(x0), float(y0), float(x0 + w), float(y0 + h))

    dets, gts = [], []
    for _ in range(n_images):
        g = [(box(), int(rng.integers(1, 3))) for _ in range(rng.integers(0, max_gts + 1))]
        d = []
        for _ in range(rng.integers(0, max_dets + 1)):
            if g and rng.random() < 0.6:
                b, c = g[rng.integers(0, len(g))]
                jit = rng.integers(-1, 2, 4)
                b = (b[0] + jit[0], b[1] + jit[1], max(b[0] + jit[0] + 1, b[2] + jit[2]), max(b[1] + jit[1] + 1, b[3] + jit[3]))
                c = c if rng.random() < 0.8 else 3 - c
            else:
                b, c = box(), int(rng.integers(1, 3))
            d.append((b, c, float(rng.choice([0.1, 0.25, 0.3, 0.5, 0.5, 0.7, 0.9]))))
        dets.append(d)
        gts.append(g)
    return dets, gts


def as_boxes(dets, gts):
    d = [[(BoundingBox(*b), c, s) for b, c, s in img] for img in dets]
    g = [[(BoundingBox(*b), c) for b, c in img] for img in gts]
    return d, g
