"""Synthetic CT-like phantoms with known Poisson-Gaussian noise, for offline runs.

``python -m lmmiqa.synthetic OUT_DIR`` writes ``OUT_DIR/manifest.csv`` and
``OUT_DIR/images/*.png``. Radiologist scores are simulated as the mean of five
integer ratings around ``4 - 40 * sigma_ref`` of the injected noise.
"""

from __future__ import annotations

import argparse
import math
from pathlib import Path

import numpy as np

from .dataset import Dataset, ImageBuffer, ImageRecord, encode_png16, write_manifest
from .noise import estimate_noise, poisson_gaussian, summarize_noise

REGIONS = ("abdomen", "kidney", "liver", "pelvis", "chest")
N_RATERS = 5
RATER_SD = 0.35


def _smooth(field: np.ndarray, passes: int = 3) -> np.ndarray:
    out = field
    for _ in range(passes):
        padded = np.pad(out, 1, mode="edge")
        out = (
            padded[:-2, :-2] + 2 * padded[:-2, 1:-1] + padded[:-2, 2:]
            + 2 * padded[1:-1, :-2] + 4 * padded[1:-1, 1:-1] + 2 * padded[1:-1, 2:]
            + padded[2:, :-2] + 2 * padded[2:, 1:-1] + padded[2:, 2:]
        ) / 16.0
    return out


def phantom(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth body-like slice: an elliptical body with a few soft organs, intensities in [0.2, 0.8]."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) * 2 - 1
    img = np.full((size, size), 0.25)
    body = (xx / 0.92) ** 2 + (yy / 0.8) ** 2 <= 1
    img[body] = 0.45
    for _ in range(3):
        cx, cy = rng.uniform(-0.5, 0.5, 2)
        rx, ry = rng.uniform(0.12, 0.3, 2)
        organ = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1
        img[organ & body] = rng.uniform(0.5, 0.75)
    img = img + 0.05 * xx
    return np.clip(_smooth(img), 0.2, 0.8)


def simulated_score(sigma: float, rng: np.random.Generator) -> float:
    ratings = np.clip(np.rint(4.0 - 40.0 * sigma + rng.normal(0.0, RATER_SD, N_RATERS)), 0, 4)
    return float(round(ratings.mean(), 4))


def make_dataset(root, n_train: int = 40, n_test: int = 10, size: int = 64, seed: int = 2024) -> Dataset:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    # test slices sit on an even grid of target scores, one per quality level
    test_sigma = (4.0 - np.linspace(3.7, 0.7, n_test)) / 40.0
    rng.shuffle(test_sigma)
    plan = [("train", None) for _ in range(n_train)] + [("test", s) for s in test_sigma]

    records = []
    for i, (split, sigma) in enumerate(plan):
        b = float(rng.uniform(1e-6, 1e-4))
        if sigma is None:
            a = float(rng.uniform(0.0002, 0.012))
        else:
            a = float(max(2.0 * (sigma**2 - b), 0.0))
        clean = phantom(size, rng)
        noisy = np.clip(poisson_gaussian(clean, float(a), b, rng), 0.0, 1.0)
        rid = f"{split}_{i:03d}"
        rel = f"images/{rid}.png"
        (root / rel).write_bytes(encode_png16(noisy))

        sigma_true = math.sqrt(0.5 * a + b)
        noise = summarize_noise(estimate_noise(ImageBuffer(noisy)), 3)
        records.append(ImageRecord(rid, rel, split, simulated_score(sigma_true, rng), REGIONS[i % len(REGIONS)], noise))

    dataset = Dataset(tuple(records), root)
    write_manifest(dataset, root / "manifest.csv")
    return dataset


def bundled_dir() -> Path:
    return Path(__file__).parent / "data" / "synthetic"


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir")
    parser.add_argument("--train", type=int, default=40)
    parser.add_argument("--test", type=int, default=10)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=2024)
    args = parser.parse_args(argv)
    ds = make_dataset(args.out_dir, args.train, args.test, args.size, args.seed)
    print(f"wrote {len(ds.records)} records to {Path(args.out_dir) / 'manifest.csv'}")


if __name__ == "__main__":
    main()
