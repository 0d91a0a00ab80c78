"""Procedural 18-class stand-in for the fruit corpus.

Six shape families play the six fruits (circle, crescent, ellipse, small
circle, ring, hexagon), each with its own base colour. Three surface grades
play the quality levels: clean (Good), blotched all over (Bad) and blotched
on one half (Mixed). Every image places the object in a random quadrant over
a noisy gradient background; bounding boxes go to ``annotations.csv``.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
from PIL import Image

from .data import FRUITS, QUALITIES

SHAPES = {
    "Apple": "circle",
    "Banana": "crescent",
    "Guava": "ellipse",
    "Lime": "small_circle",
    "Orange": "ring",
    "Pomegranate": "hexagon",
}
BASE_COLORS = {
    "Apple": (0.85, 0.10, 0.10),
    "Banana": (0.95, 0.92, 0.20),
    "Guava": (0.70, 0.92, 0.55),
    "Lime": (0.12, 0.55, 0.10),
    "Orange": (1.00, 0.50, 0.00),
    "Pomegranate": (0.60, 0.10, 0.65),
}
ROT_COLOR = np.array([0.28, 0.17, 0.07])
SUPERSAMPLE = 4


def _shape_mask(kind, xs, ys, cx, cy, r, theta, rng_vals):
    dx, dy = xs - cx, ys - cy
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    d = np.hypot(dx, dy)
    if kind in ("circle", "small_circle"):
        return d <= r
    if kind == "ellipse":
        return (u / r) ** 2 + (v / (r * rng_vals[0])) ** 2 <= 1.0
    if kind == "ring":
        return (d <= r) & (d >= 0.55 * r)
    if kind == "crescent":
        return (d <= r) & (np.hypot(u - 0.55 * r, v) > 0.85 * r)
    if kind == "hexagon":
        ang = np.arctan2(v, u)
        sector = math.pi / 3
        apothem = r * math.cos(sector / 2)
        local = np.mod(ang, sector) - sector / 2
        return d * np.cos(local) <= apothem
    raise ValueError(kind)


def render_sample(fruit: str, quality: str, resolution: int, rng: np.random.Generator):
    """Return ``(H x W x 3 uint8 image, (x0, y0, x1, y1) box)``."""
    n = resolution * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n
    xs, ys = np.meshgrid(coords, coords)

    c1 = rng.uniform(0.5, 0.9) + rng.uniform(-0.08, 0.08, 3)
    c2 = rng.uniform(0.3, 0.8) + rng.uniform(-0.08, 0.08, 3)
    g_ang = rng.uniform(0, 2 * math.pi)
    t = (np.cos(g_ang) * xs + np.sin(g_ang) * ys + 1.5) / 3.0
    img = c1 * t[..., None] + c2 * (1 - t[..., None])

    kind = SHAPES[fruit]
    quadrant = rng.integers(4)
    cx = 0.25 + 0.5 * (quadrant % 2) + rng.uniform(-0.04, 0.04)
    cy = 0.25 + 0.5 * (quadrant // 2) + rng.uniform(-0.04, 0.04)
    r = rng.uniform(0.09, 0.12) if kind == "small_circle" else rng.uniform(0.17, 0.21)
    theta = rng.uniform(0, 2 * math.pi)
    mask = _shape_mask(kind, xs, ys, cx, cy, r, theta, [rng.uniform(0.55, 0.65)])

    body = np.clip(np.array(BASE_COLORS[fruit]) + rng.uniform(-0.05, 0.05, 3), 0, 1)
    shade = 1.0 - 0.25 * np.clip(np.hypot(xs - cx, ys - cy) / r, 0, 1)
    fruit_rgb = body * shade[..., None]

    if quality != "Good":
        if quality == "Bad":
            region = mask
            n_spots = rng.integers(9, 13)
        else:
            # cut through the mask centroid so roughly half the body is blotched
            cut = rng.uniform(0, 2 * math.pi)
            mx, my = xs[mask].mean(), ys[mask].mean()
            region = mask & ((np.cos(cut) * (xs - mx) + np.sin(cut) * (ys - my)) > 0)
            n_spots = rng.integers(5, 7)
        rot = np.clip(ROT_COLOR + rng.uniform(-0.04, 0.04, 3), 0, 1)
        # discoloured region plus dark spots inside it
        fruit_rgb = np.where(region[..., None], 0.55 * fruit_rgb + 0.1 * rot, fruit_rgb)
        ry, rx = np.nonzero(region)
        spot_r = max(0.22 * r, 0.025)
        for _ in range(n_spots):
            k = rng.integers(len(rx))
            sx, sy = coords[rx[k]], coords[ry[k]]
            spot = region & (np.hypot(xs - sx, ys - sy) <= spot_r * rng.uniform(0.7, 1.2))
            fruit_rgb = np.where(spot[..., None], rot * 0.6, fruit_rgb)

    img = np.where(mask[..., None], fruit_rgb, img)
    # box-filter down to the target resolution (antialiasing)
    img = img.reshape(resolution, SUPERSAMPLE, resolution, SUPERSAMPLE, 3).mean(axis=(1, 3))
    img = img + rng.normal(0.0, 0.025, img.shape)
    cover = mask.reshape(resolution, SUPERSAMPLE, resolution, SUPERSAMPLE).mean(axis=(1, 3))
    yy, xx = np.nonzero(cover >= 0.5)
    box = (int(xx.min()), int(yy.min()), int(xx.max()), int(yy.max()))
    return (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8), box


def generate_synthetic(root, per_class: int = 50, resolution: int = 32, seed: int = 0) -> dict:
    """Write ``per_class`` PNGs for each of the 18 classes under ``root``.

    Layout is ``<root>/<Fruit>_<Quality>/<fruit>_<quality>_<i>.png``. Returns
    per-class counts. Same arguments always give the same bytes.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    counts = {}
    for fi, fruit in enumerate(FRUITS):
        for qi, quality in enumerate(QUALITIES):
            folder = root / f"{fruit}_{quality}"
            folder.mkdir(exist_ok=True)
            for i in range(per_class):
                rng = np.random.default_rng([int(seed), fi, qi, i])
                pixels, box = render_sample(fruit, quality, resolution, rng)
                rel = f"{folder.name}/{fruit.lower()}_{quality.lower()}_{i:04d}.png"
                Image.fromarray(pixels, "RGB").save(root / rel, format="PNG", optimize=False)
                rows.append((rel, fruit, quality, *box))
            counts[(fruit, quality)] = per_class
    with open(root / "annotations.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["path", "fruit", "quality", "x0", "y0", "x1", "y1"])
        w.writerows(rows)
    return counts


def read_annotations(root) -> dict:
    """Map absolute image path -> (x0, y0, x1, y1) pixel box (inclusive)."""
    root = Path(root)
    out = {}
    with open(root / "annotations.csv", newline="") as f:
        for row in csv.DictReader(f):
            out[str(root / row["path"])] = tuple(int(row[k]) for k in ("x0", "y0", "x1", "y1"))
    return out
