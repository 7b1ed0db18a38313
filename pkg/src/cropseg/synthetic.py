"""Deterministic synthetic scenes and corpora for tests and demos.

A two-plane scene is a disk of near foreground over a far ground plane,
softened by Gaussian blur, with a correlated texture field and white noise
on top. The companion functions render a matching RGB image and write whole
corpora to disk in the manifest layout the rest of the toolkit consumes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .corpus import Manifest, SampleRecord, save_manifest
from .pseudolabel import BinaryMask
from .raster import Raster2D, save_gray

FG_DEPTH = 0.8
BG_DEPTH = 0.3
NOISE_SIGMA = 0.02
TEXTURE_AMPLITUDE = 0.05
TEXTURE_CORRELATION = 2.0
EDGE_BLUR = 1.5
COVERAGE_RANGE = (0.47, 0.53)


def two_plane_scene(
    seed: int,
    size: int = 256,
    fg_depth: float = FG_DEPTH,
    bg_depth: float = BG_DEPTH,
    noise_sigma: float = NOISE_SIGMA,
    coverage_range: tuple[float, float] = COVERAGE_RANGE,
) -> tuple[Raster2D, np.ndarray]:
    """Depth raster plus boolean ground truth for one seeded scene."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    cov = rng.uniform(*coverage_range)
    radius = size * np.sqrt(cov / np.pi)
    cy, cx = rng.uniform(radius, size - radius, 2)
    gt = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    depth = gaussian_filter(np.where(gt, fg_depth, bg_depth), EDGE_BLUR)
    texture = gaussian_filter(rng.normal(0.0, 1.0, (size, size)), TEXTURE_CORRELATION)
    depth += texture * (TEXTURE_AMPLITUDE / texture.std())
    depth += rng.normal(0.0, noise_sigma, (size, size))
    return Raster2D(depth), gt


def scene_rgb(gt: np.ndarray, seed: int) -> np.ndarray:
    """H x W x 3 uint8 rendering: green-ish canopy over brown-ish soil."""
    rng = np.random.default_rng(seed)
    h, w = gt.shape
    fg_color = np.array([40.0, 160.0, 40.0])
    bg_color = np.array([150.0, 90.0, 60.0])
    img = np.where(gt[..., None], fg_color, bg_color)
    img = img + rng.normal(0.0, 8.0, (h, w, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def flip_mask_pixels(mask: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Return a copy with `fraction` of the pixels label-flipped."""
    rng = np.random.default_rng(seed)
    flat = mask.astype(np.uint8).ravel().copy()
    n_flip = int(round(fraction * flat.size))
    idx = rng.choice(flat.size, size=n_flip, replace=False)
    flat[idx] = 1 - flat[idx]
    return flat.reshape(mask.shape)


def build_corpus(
    root,
    n_train: int = 6,
    n_test: int = 2,
    seed: int = 0,
    size: int = 96,
    flip_fraction: float = 0.0,
    coverage_range: tuple[float, float] = (0.2, 0.3),
) -> Manifest:
    """Write a seeded synthetic corpus under `root` and return its manifest.

    Each sample gets an RGB image, a PFM depth map, a {0,1} pseudo-mask
    (ground truth with an optional fraction of flipped pixels), and the
    clean ground truth as `<id>_gt.png`. The manifest is saved to
    `root/manifest.json`.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    samples = []
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        sid = f"scene-{i:03d}"
        depth, gt = two_plane_scene(seed * 10_007 + i, size=size, coverage_range=coverage_range)
        rgb = scene_rgb(gt, seed * 10_007 + i + 1)
        image_path = root / f"{sid}.png"
        depth_path = root / f"{sid}_depth.pfm"
        mask_path = root / f"{sid}_mask.png"
        gt_path = root / f"{sid}_gt.png"
        Image.fromarray(rgb).save(image_path)
        save_gray(depth, depth_path, format="pfm")
        pseudo = gt.astype(np.uint8)
        if flip_fraction > 0:
            pseudo = flip_mask_pixels(pseudo, flip_fraction, seed * 10_007 + i + 2)
        save_gray(BinaryMask.from_bool(pseudo).raster, mask_path, format="png")
        save_gray(BinaryMask.from_bool(gt).raster, gt_path, format="png")
        samples.append(
            SampleRecord(
                id=sid,
                image_path=str(image_path),
                depth_path=str(depth_path),
                mask_path=str(mask_path),
                source="synthetic",
                split=split,
            )
        )
    manifest = Manifest(samples=samples)
    save_manifest(manifest, root / "manifest.json")
    return manifest


def gt_path_for(s: SampleRecord) -> str:
    """Path of the clean ground-truth mask written by build_corpus."""
    stem = str(Path(s.image_path).with_suffix(""))
    return stem + "_gt.png"
