#!/usr/bin/env python3
"""Build the bundled handwritten-digits fixture in IDX format.

Source data is scikit-learn's bundled digits set (the UCI handwritten
digits test sample: 1,797 images, 8x8, intensities 0..16). Each image is
bilinearly upscaled to 28x28, recentred on its centre of mass with an
integer shift, and quantised to unsigned bytes. Output follows the
classic IDX layout: big-endian magic and dims, raw byte payload.

Run from the repository root:

    python3 tools/make_digits_fixture.py

Writes crates/core/tests/data/digits/{train-images-idx3-ubyte,
train-labels-idx1-ubyte}. Regeneration is deterministic.
"""

import pathlib
import struct

import numpy as np
from scipy import ndimage
from sklearn.datasets import load_digits

OUT_DIR = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "tests" / "data" / "digits"
SIDE = 28


def upscale_and_centre(img8: np.ndarray) -> np.ndarray:
    img = ndimage.zoom(img8 / 16.0, SIDE / 8.0, order=1)
    img = np.clip(img, 0.0, 1.0)
    total = img.sum()
    if total > 0.0:
        cy, cx = ndimage.center_of_mass(img)
        dy = round((SIDE - 1) / 2.0 - cy)
        dx = round((SIDE - 1) / 2.0 - cx)
        shifted = np.zeros_like(img)
        ys = slice(max(0, dy), min(SIDE, SIDE + dy))
        xs = slice(max(0, dx), min(SIDE, SIDE + dx))
        yo = slice(max(0, -dy), min(SIDE, SIDE - dy))
        xo = slice(max(0, -dx), min(SIDE, SIDE - dx))
        shifted[ys, xs] = img[yo, xo]
        img = shifted
    return np.round(img * 255.0).astype(np.uint8)


def main() -> None:
    digits = load_digits()
    images = np.stack([upscale_and_centre(im) for im in digits.images])
    labels = digits.target.astype(np.uint8)

    OUT_DIR.mkdir(parents=True, exist_ok=True)
    with open(OUT_DIR / "train-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        f.write(images.tobytes())
    with open(OUT_DIR / "train-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.tobytes())

    counts = np.bincount(labels, minlength=10)
    print(f"wrote {len(images)} images to {OUT_DIR}")
    print("per-class counts:", counts.tolist())


if __name__ == "__main__":
    main()
