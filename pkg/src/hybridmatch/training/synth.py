"""Procedural image pairs related by a known homography."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import ContractError


@dataclass(frozen=True)
class WarpJitter:
    """Bounds of the random homography and the additive pixel noise."""

    rotation_deg: float = 15.0
    scale_range: tuple[float, float] = (0.8, 1.25)
    translation_frac: float = 0.1
    perspective: float = 1e-4
    noise_sigma: float = 0.02

    @classmethod
    def identity(cls) -> "WarpJitter":
        return cls(0.0, (1.0, 1.0), 0.0, 0.0, 0.0)


def texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Multi-scale smoothed noise overlaid with random rectangles, discs and bars."""
    img = np.zeros((size, size))
    for sigma, weight in ((8.0, 1.0), (3.0, 0.6), (1.0, 0.3)):
        layer = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
        img += weight * layer / (layer.std() + 1e-12)
    img = (img - img.min()) / (np.ptp(img) + 1e-12)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(8, 16)):
        kind = rng.integers(3)
        value = rng.uniform(0.0, 1.0)
        cy, cx = rng.uniform(0, size, 2)
        if kind == 0:
            hh, ww = rng.uniform(size * 0.04, size * 0.2, 2)
            mask = (np.abs(yy - cy) < hh) & (np.abs(xx - cx) < ww)
        elif kind == 1:
            r = rng.uniform(size * 0.03, size * 0.12)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            theta = rng.uniform(0, math.pi)
            dist = (xx - cx) * math.sin(theta) - (yy - cy) * math.cos(theta)
            along = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
            mask = (np.abs(dist) < rng.uniform(1.0, 3.0)) & (np.abs(along) < size * 0.3)
        img[mask] = 0.5 * img[mask] + 0.5 * value
    return img


def random_homography(rng: np.random.Generator, size: int, jitter: WarpJitter) -> np.ndarray:
    """Rotation and scale about the image centre, then translation and perspective terms."""
    while True:
        angle = math.radians(rng.uniform(-jitter.rotation_deg, jitter.rotation_deg))
        lo, hi = jitter.scale_range
        scale = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        tx, ty = rng.uniform(-jitter.translation_frac, jitter.translation_frac, 2) * size
        px, py = rng.uniform(-jitter.perspective, jitter.perspective, 2)
        c = (size - 1) / 2.0
        to_centre = np.array([[1, 0, -c], [0, 1, -c], [0, 0, 1.0]])
        back = np.array([[1, 0, c + tx], [0, 1, c + ty], [0, 0, 1.0]])
        rs = np.array([[scale * math.cos(angle), -scale * math.sin(angle), 0],
                       [scale * math.sin(angle), scale * math.cos(angle), 0],
                       [0, 0, 1.0]])
        persp = np.array([[1, 0, 0], [0, 1, 0], [px, py, 1.0]])
        H = back @ rs @ persp @ to_centre
        H /= H[2, 2]
        if abs(np.linalg.det(H[:2, :2])) >= 0.1:
            return H


def warp_points(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply ``H`` to ``[N, 2]`` points given as ``(x, y)``."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ H.T
    return hom[:, :2] / hom[:, 2:3]


def warp_image(img: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Image ``B`` with ``B(H p) = A(p)``, bilinear sampling, zeros outside ``A``."""
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    src = warp_points(np.linalg.inv(H), np.stack([xs.ravel(), ys.ravel()], axis=1))
    out = ndimage.map_coordinates(img, [src[:, 1], src[:, 0]], order=1, mode="constant", cval=0.0)
    return out.reshape(h, w)


def synth_pair(seed: int, size: int = 128, jitter: WarpJitter | None = None):
    """Deterministic ``(image_a, image_b, H)``; images are float32 in ``[0, 1]``."""
    if size % 8:
        raise ContractError(f"synthetic image size must be a multiple of 8, got {size}")
    jitter = jitter or WarpJitter()
    rng = np.random.default_rng(seed)
    img_a = texture(rng, size)
    H = random_homography(rng, size, jitter)
    img_b = warp_image(img_a, H)
    if jitter.noise_sigma > 0:
        img_b = img_b + rng.normal(0.0, jitter.noise_sigma, img_b.shape)
    return (np.clip(img_a, 0, 1).astype(np.float32), np.clip(img_b, 0, 1).astype(np.float32), H)
