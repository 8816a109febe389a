"""Training-time image augmentation on float HWC arrays in [0, 1].

All randomness flows through an explicit numpy generator so augmented
batches are reproducible from (seed, epoch, step).
"""

import numpy as np

from .config import AugmentConfig


def horizontal_flip(img):
    return img[:, ::-1].copy()


def pad_crop(img, padding, rng):
    h, w = img.shape[:2]
    padded = np.pad(img, ((padding, padding), (padding, padding), (0, 0)), mode="constant")
    top = int(rng.integers(0, 2 * padding + 1))
    left = int(rng.integers(0, 2 * padding + 1))
    return padded[top:top + h, left:left + w]


def random_erase(img, rng, area_range, aspect_range, fill):
    h, w = img.shape[:2]
    area = h * w
    for _ in range(100):
        target = rng.uniform(*area_range) * area
        aspect = rng.uniform(*aspect_range)
        eh = int(round(np.sqrt(target * aspect)))
        ew = int(round(np.sqrt(target / aspect)))
        if 0 < eh < h and 0 < ew < w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            img = img.copy()
            img[top:top + eh, left:left + ew] = np.asarray(fill, dtype=img.dtype)
            return img
    return img


class PatchPool:
    """Pool of patches cropped from previously seen images, pasted onto others."""

    def __init__(self, capacity=50, area_range=(0.05, 0.3), aspect_range=(0.5, 2.0)):
        self.capacity = capacity
        self.area_range = area_range
        self.aspect_range = aspect_range
        self.patches = []

    def collect(self, img, rng):
        h, w = img.shape[:2]
        target = rng.uniform(*self.area_range) * h * w
        aspect = rng.uniform(*self.aspect_range)
        ph = int(round(np.sqrt(target * aspect)))
        pw = int(round(np.sqrt(target / aspect)))
        if not (0 < ph < h and 0 < pw < w):
            return
        top = int(rng.integers(0, h - ph + 1))
        left = int(rng.integers(0, w - pw + 1))
        patch = img[top:top + ph, left:left + pw].copy()
        if len(self.patches) < self.capacity:
            self.patches.append(patch)
        else:
            self.patches[int(rng.integers(0, self.capacity))] = patch

    def paste(self, img, rng):
        if not self.patches:
            return img
        patch = self.patches[int(rng.integers(0, len(self.patches)))]
        ph, pw = patch.shape[:2]
        h, w = img.shape[:2]
        if ph >= h or pw >= w:
            return img
        if rng.random() < 0.5:
            patch = patch[:, ::-1]
        top = int(rng.integers(0, h - ph + 1))
        left = int(rng.integers(0, w - pw + 1))
        img = img.copy()
        img[top:top + ph, left:left + pw] = patch
        return img


def augment(img, cfg: AugmentConfig, rng, pixel_mean=(0.5, 0.5, 0.5), patch_pool=None):
    """Apply the configured augmentations to one HWC float image."""
    if cfg.flip and rng.random() < cfg.flip_prob:
        img = horizontal_flip(img)
    if cfg.crop:
        img = pad_crop(img, cfg.crop_padding, rng)
    if cfg.patch and patch_pool is not None:
        patch_pool.collect(img, rng)
        if rng.random() < cfg.patch_prob:
            img = patch_pool.paste(img, rng)
    if cfg.erase and rng.random() < cfg.erase_prob:
        img = random_erase(img, rng, cfg.erase_area, cfg.erase_aspect, pixel_mean)
    return img
