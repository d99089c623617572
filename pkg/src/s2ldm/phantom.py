"""Synthetic paired CT phantoms and CT preprocessing.

Each pair shares one anatomy (air, body, organs, vessels) and one noise
realization; only the vessel lumens brighten in the contrast-enhanced image,
so ``cect - ncct`` is supported exactly on the mask. Lumens are faintly
hyperdense in the non-contrast image so the vessel is locatable from it; an
optional dark rim (``rim_width > 0``) outlines each vessel instead.
"""
from dataclasses import dataclass

import numpy as np

AIR_HU = -1000.0


@dataclass(frozen=True)
class PhantomSpec:
    organ_count: tuple = (2, 4)
    vessel_count: tuple = (2, 6)
    vessel_radius: tuple = (2.0, 6.0)  # px at size 64, scaled with size
    body_hu: tuple = (35.0, 45.0)
    organ_hu: tuple = (20.0, 80.0)
    lumen_hu: tuple = (70.0, 80.0)
    rim_hu: float = -90.0
    rim_width: float = 0.0  # px at size 64; 0 = no rim
    contrast_min_delta: float = 100.0
    contrast_max_delta: float = 250.0
    noise_sigma: float = 5.0


@dataclass
class PairedSample:
    ncct: np.ndarray
    cect: np.ndarray
    contrast_mask: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if not (self.ncct.shape == self.cect.shape == self.contrast_mask.shape):
            raise ValueError("ncct, cect and contrast_mask must share a shape")
        if self.ncct.ndim != 2 or min(self.ncct.shape) < 8:
            raise ValueError(f"images must be 2-D and at least 8x8, got {self.ncct.shape}")


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def gen_pair(seed, size=64, spec=None):
    """Deterministic (ncct, cect, mask) phantom in HU for ``seed``."""
    spec = spec or PhantomSpec()
    if size < 32:
        raise ValueError(f"phantom size must be >= 32, got {size}")
    if not 0 < spec.contrast_min_delta <= spec.contrast_max_delta:
        raise ValueError("contrast delta range must be non-empty and positive")
    if spec.organ_count[0] > spec.organ_count[1] or spec.vessel_count[0] > spec.vessel_count[1]:
        raise ValueError("count ranges must be ordered (low, high)")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    scale = size / 64.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = np.full((size, size), AIR_HU)

    centre = size / 2.0
    body_ry = size * rng.uniform(0.36, 0.44)
    body_rx = size * rng.uniform(0.40, 0.46)
    body_cy = centre + rng.uniform(-1.5, 1.5) * scale
    body_cx = centre + rng.uniform(-1.5, 1.5) * scale
    body_angle = rng.uniform(-0.2, 0.2)
    body = _ellipse(yy, xx, body_cy, body_cx, body_ry, body_rx, body_angle)
    base[body] = rng.uniform(*spec.body_hu)

    for _ in range(rng.integers(spec.organ_count[0], spec.organ_count[1] + 1)):
        ry = body_ry * rng.uniform(0.18, 0.4)
        rx = body_rx * rng.uniform(0.18, 0.4)
        r = rng.uniform(0.0, 0.45)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        organ = _ellipse(yy, xx, body_cy + r * body_ry * np.sin(phi),
                         body_cx + r * body_rx * np.cos(phi), ry, rx,
                         rng.uniform(0.0, np.pi)) & body
        base[organ] = rng.uniform(*spec.organ_hu)

    delta = np.zeros((size, size))
    for _ in range(rng.integers(spec.vessel_count[0], spec.vessel_count[1] + 1)):
        radius = rng.uniform(*spec.vessel_radius) * scale
        r = rng.uniform(0.0, 0.7)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        cy = body_cy + r * (body_ry - radius - 3 * scale) * np.sin(phi)
        cx = body_cx + r * (body_rx - radius - 3 * scale) * np.cos(phi)
        dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
        lumen = (dist2 <= radius ** 2) & body
        if spec.rim_width > 0:
            rim = (dist2 <= (radius + spec.rim_width * scale) ** 2) & body
            base[rim] = spec.rim_hu
            delta[rim] = 0.0
        base[lumen] = rng.uniform(*spec.lumen_hu)
        delta[lumen] = rng.uniform(spec.contrast_min_delta, spec.contrast_max_delta)

    noise = rng.normal(0.0, spec.noise_sigma, size=(size, size))
    ncct = base + noise
    mask = delta > 0
    cect = ncct.copy()
    cect[mask] += delta[mask]
    return PairedSample(ncct, cect, mask, int(seed))


def window_normalize(img, window_width=400.0, window_level=0.0):
    """Clip HU to the display window and map it affinely onto [-1, 1]."""
    if window_width <= 0:
        raise ValueError("window width must be positive")
    lo = window_level - window_width / 2.0
    hi = window_level + window_width / 2.0
    clipped = np.clip(np.asarray(img, dtype=np.float64), lo, hi)
    return np.clip((clipped - lo) * (2.0 / window_width) - 1.0, -1.0, 1.0)


def crop_offset(shape, patch, seed):
    h, w = shape
    if patch < 1 or patch > min(h, w):
        raise ValueError(f"patch {patch} does not fit in image {shape}")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    return int(rng.integers(0, h - patch + 1)), int(rng.integers(0, w - patch + 1))


def crop_patch(img, patch, seed):
    """``patch`` x ``patch`` window at an offset determined only by ``seed``."""
    img = np.asarray(img)
    oy, ox = crop_offset(img.shape, patch, seed)
    return img[oy:oy + patch, ox:ox + patch].copy()


def crop_pair(sample, patch, seed):
    """Aligned crop of both images and the mask of a pair."""
    return PairedSample(crop_patch(sample.ncct, patch, seed),
                        crop_patch(sample.cect, patch, seed),
                        crop_patch(sample.contrast_mask, patch, seed), sample.seed)


def split_dataset(pairs, seed):
    """Seeded shuffle into train/val at 4:1; train gets round-half-up(0.8 N)."""
    pairs = list(pairs)
    if len(pairs) < 5:
        raise ValueError(f"need at least 5 pairs to split, got {len(pairs)}")
    n_train = int(np.floor(0.8 * len(pairs) + 0.5))
    order = np.random.default_rng(np.random.SeedSequence(int(seed))).permutation(len(pairs))
    return [pairs[i] for i in order[:n_train]], [pairs[i] for i in order[n_train:]]
