"""Synthetic labelled images for desk-scale experiments.

Each image is a soft-edged shape on a smooth background gradient. The class
is the shape: 0 disk, 1 horizontal bar, 2 vertical bar, 3 ring.
"""

import numpy as np

NUM_CLASSES = 4


def _soft(d, width):
    # 1 inside (d < 0), 0 outside, with a smooth edge about `width` px wide
    return 0.5 * (1.0 - np.tanh(d / width))


def make_shapes(count, size=16, seed=0, num_classes=NUM_CLASSES):
    """Return ``(pixels uint8 (count, 1, size, size), labels int64)``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    labels = rng.integers(0, num_classes, count)
    out = np.empty((count, 1, size, size), dtype=np.uint8)
    s = size / 16.0
    for n in range(count):
        cy, cx = rng.uniform(0.3 * size, 0.7 * size, 2)
        gy, gx = rng.uniform(-1, 1, 2) * 0.25
        base = rng.uniform(0.15, 0.35)
        bg = base + (gy * (yy - size / 2) + gx * (xx - size / 2)) / size
        fg = rng.uniform(0.65, 0.95)
        c = labels[n]
        if c == 0:
            r = rng.uniform(2.5, 4.5) * s
            d = np.hypot(yy - cy, xx - cx) - r
        elif c in (1, 2):
            half_long = rng.uniform(3.5, 6.0) * s
            half_short = rng.uniform(1.0, 2.0) * s
            dy, dx = np.abs(yy - cy), np.abs(xx - cx)
            if c == 2:
                dy, dx = dx, dy
            d = np.maximum(dx - half_long, dy - half_short)
        else:
            r = rng.uniform(3.5, 5.0) * s
            d = np.abs(np.hypot(yy - cy, xx - cx) - r) - 1.0 * s
        mask = _soft(d, 0.6 * s)
        img = bg * (1 - mask) + fg * mask
        out[n, 0] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return out, labels.astype(np.int64)
