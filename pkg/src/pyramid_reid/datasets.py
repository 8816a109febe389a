"""Dataset ingestion and the synthetic toy benchmark.

Real data follows the common surveillance-retrieval directory layout
(bounding_box_train / query / bounding_box_test with identity and camera
encoded in filenames). The toy generator renders person-like figures whose
appearance is pinned to the identity while background, pose offset, camera
tint and occlusion vary per image, so retrieval is learnable but raw pixel
matching is unreliable.
"""

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ToyConfig

log = logging.getLogger(__name__)

NAME_RE = re.compile(r"^(-?\d+)_c(\d+)")
SPLIT_DIRS = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
IMAGE_EXTS = {".jpg", ".jpeg", ".png", ".bmp"}


@dataclass(frozen=True)
class ImageEntry:
    path: str
    pid: int
    camid: int

    @property
    def junk(self) -> bool:
        return self.pid == -1


@dataclass
class DatasetIndex:
    train: list = field(default_factory=list)
    query: list = field(default_factory=list)
    gallery: list = field(default_factory=list)

    def split(self, name):
        return getattr(self, name)

    def summary(self) -> dict:
        out = {}
        for name in ("train", "query", "gallery"):
            entries = self.split(name)
            pids = {e.pid for e in entries if not e.junk}
            out[name] = {"images": len(entries), "identities": len(pids)}
        return out

    def save(self, path):
        data = {
            name: [[e.path, e.pid, e.camid] for e in self.split(name)]
            for name in ("train", "query", "gallery")
        }
        Path(path).write_text(json.dumps(data))

    @classmethod
    def load(cls, path):
        data = json.loads(Path(path).read_text())
        return cls(**{
            name: [ImageEntry(p, int(pid), int(cam)) for p, pid, cam in rows]
            for name, rows in data.items()
        })


def parse_name(filename):
    """(pid, camid) from a 'PPPP_cC...' style filename, or None."""
    m = NAME_RE.match(filename)
    if not m:
        return None
    return int(m.group(1)), int(m.group(2))


def _scan_split(root: Path, subdir: str):
    folder = root / subdir
    if not folder.is_dir():
        raise FileNotFoundError(f"missing dataset split directory: {folder}")
    entries = []
    for path in sorted(folder.iterdir()):
        if path.suffix.lower() not in IMAGE_EXTS:
            continue
        parsed = parse_name(path.name)
        if parsed is None:
            log.warning("skipping file with unparseable name: %s", path.name)
            continue
        pid, camid = parsed
        entries.append(ImageEntry(str(path), pid, camid))
    if not entries:
        raise ValueError(f"dataset split {subdir!r} is empty under {root}")
    return entries


def ingest_market_layout(root) -> DatasetIndex:
    root = Path(root)
    index = DatasetIndex(**{name: _scan_split(root, sub) for name, sub in SPLIT_DIRS.items()})
    train_pids = {e.pid for e in index.train if not e.junk}
    test_pids = {e.pid for e in index.query + index.gallery if not e.junk}
    overlap = train_pids & test_pids
    if overlap:
        log.warning("train and test share %d identities (cross-id protocol violated)", len(overlap))
    gallery_pids = {e.pid for e in index.gallery if not e.junk}
    missing = {e.pid for e in index.query} - gallery_pids
    if missing:
        log.warning("%d query identities have no gallery images", len(missing))
    return index


def hsv_to_rgb(h, s, v):
    h = (h % 1.0) * 6.0
    i = int(h)
    f = h - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]


def _identity_appearance(rng):
    return {
        "torso_hue": rng.uniform(0, 1),
        "torso_sat": rng.uniform(0.7, 1.0),
        "torso_val": rng.uniform(0.55, 0.95),
        "leg_hue": rng.uniform(0, 1),
        "leg_sat": rng.uniform(0.7, 1.0),
        "leg_val": rng.uniform(0.45, 0.9),
        "stripe": rng.random() < 0.7,
        "stripe_hue": rng.uniform(0, 1),
        "stripe_period": int(rng.integers(3, 7)),
        "stripe_vertical": rng.random() < 0.5,
        "head_hue": rng.uniform(0.04, 0.12),
        "head_val": rng.uniform(0.55, 0.9),
        "width_frac": rng.uniform(0.5, 0.68),
    }


def _camera_tints(cameras, rng):
    gains = 1.0 + rng.uniform(-0.08, 0.08, size=(cameras, 3))
    return gains.astype(np.float32)


def render_toy_image(appearance, cfg: ToyConfig, cam_gain, rng):
    """One HxWx3 float image of an identity under per-image nuisance."""
    h, w = cfg.image_size
    yy = np.linspace(0, 1, h, dtype=np.float32)[:, None]
    xx = np.linspace(0, 1, w, dtype=np.float32)[None, :]

    bg_top = np.array(hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.25, 0.8), rng.uniform(0.3, 0.95)), np.float32)
    bg_bot = np.array(hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.25, 0.8), rng.uniform(0.3, 0.95)), np.float32)
    img = bg_top[None, None, :] * (1 - yy[..., None]) + bg_bot[None, None, :] * yy[..., None]
    img = np.broadcast_to(img, (h, w, 3)).copy()

    hue_shift = rng.normal(0, cfg.hue_jitter)
    brightness = rng.uniform(0.85, 1.15)

    def color(hue, sat, val):
        return np.array(hsv_to_rgb(hue + hue_shift, sat, min(1.0, val * brightness)), np.float32)

    torso_c = color(appearance["torso_hue"], appearance["torso_sat"], appearance["torso_val"])
    stripe_c = color(appearance["stripe_hue"], appearance["torso_sat"], appearance["torso_val"])
    leg_c = color(appearance["leg_hue"], appearance["leg_sat"], appearance["leg_val"])
    head_c = color(appearance["head_hue"], 0.45, appearance["head_val"])

    cx = 0.5 + rng.uniform(-cfg.translation, cfg.translation)
    cy = 0.5 + rng.uniform(-cfg.translation, cfg.translation)
    scale = rng.uniform(0.85, 1.05)
    person_h = 0.82 * scale
    person_w = appearance["width_frac"] * scale
    top = cy - person_h / 2

    def band(y0, y1, x0, x1, col):
        ys = (yy >= top + y0 * person_h) & (yy < top + y1 * person_h)
        xs = (xx >= cx + x0 * person_w) & (xx < cx + x1 * person_w)
        img[(ys & xs)] = col

    # head, torso, two legs
    band(0.0, 0.14, -0.16, 0.16, head_c)
    band(0.16, 0.52, -0.5, 0.5, torso_c)
    band(0.52, 0.98, -0.48, -0.08, leg_c)
    band(0.52, 0.98, 0.08, 0.48, leg_c)

    if appearance["stripe"]:
        period = appearance["stripe_period"]
        axis = xx if appearance["stripe_vertical"] else yy
        rel = (axis - (cx - 0.5 * person_w if appearance["stripe_vertical"] else top + 0.16 * person_h))
        phase = np.floor(rel / (person_h * 0.36 / period) * 0.5).astype(int) % 2
        torso_ys = (yy >= top + 0.16 * person_h) & (yy < top + 0.52 * person_h)
        torso_xs = (xx >= cx - 0.5 * person_w) & (xx < cx + 0.5 * person_w)
        stripe_mask = (torso_ys & torso_xs) & np.broadcast_to(phase == 1, (h, w))
        img[stripe_mask] = stripe_c

    if rng.random() < cfg.occlusion_prob:
        oh = int(rng.uniform(0.1, 0.3) * h)
        ow = int(rng.uniform(0.2, 0.6) * w)
        oy = int(rng.integers(0, h - oh))
        ox = int(rng.integers(0, w - ow))
        img[oy:oy + oh, ox:ox + ow] = rng.uniform(0.1, 0.9, size=3).astype(np.float32)

    img *= cam_gain[None, None, :]
    img += rng.normal(0, cfg.noise_sigma, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def generate_toy(cfg: ToyConfig, out_path) -> DatasetIndex:
    """Write a deterministic toy dataset tree and return its index.

    Identities are split between training and a disjoint query/gallery pool;
    query and gallery share identities but never images, and camera labels
    cycle so every query has positives under a different camera.
    """
    out = Path(out_path)
    for sub in SPLIT_DIRS.values():
        (out / sub).mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(cfg.seed)
    tints = _camera_tints(cfg.cameras, master)
    n_train = cfg.train_identities if cfg.train_identities is not None else cfg.num_identities // 2
    if not 0 < n_train < cfg.num_identities:
        raise ValueError("train_identities must leave at least one evaluation identity")
    query_per_id = max(1, cfg.images_per_identity // 4)

    for pid in range(1, cfg.num_identities + 1):
        id_rng = np.random.default_rng([cfg.seed, pid])
        appearance = _identity_appearance(id_rng)
        for i in range(cfg.images_per_identity):
            camid = i % cfg.cameras + 1
            img_rng = np.random.default_rng([cfg.seed, pid, i])
            img = render_toy_image(appearance, cfg, tints[camid - 1], img_rng)
            if pid <= n_train:
                sub = SPLIT_DIRS["train"]
            elif i < query_per_id:
                sub = SPLIT_DIRS["query"]
            else:
                sub = SPLIT_DIRS["gallery"]
            name = f"{pid:04d}_c{camid}s1_{i:06d}_00.png"
            arr = np.clip(img * 255.0 + 0.5, 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(out / sub / name)
    return ingest_market_layout(out)


def load_image(path, input_hw):
    """Decode and resize to (H, W), returning float HWC in [0, 1]."""
    h, w = input_hw
    with Image.open(path) as im:
        im = im.convert("RGB").resize((w, h), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0
