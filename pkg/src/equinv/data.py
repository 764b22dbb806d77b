"""Datasets: synthetic blob faces, manifests, annotation CSVs and loaders."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidArgument, ParseError, SchemaError
from .evaluation import LandmarkSet

LANDMARK_NAMES = ("left_eye", "right_eye", "beak_tip", "body_center", "tail")
EYE_INDICES = (0, 1)
PREPROCESS_MODES = ("none", "face_crop_136_96")


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    landmarks: list
    masks: np.ndarray  # (N, H, W) bool

    def __len__(self):
        return len(self.images)

    @property
    def ids(self):
        return [lm.image_id for lm in self.landmarks]


@dataclass
class DatasetManifest:
    root: Path
    entries: list  # [(id, relative path)]
    annotations: str | None = None
    masks: dict = field(default_factory=dict)  # id -> relative path
    preprocessing: str = "none"
    version: str = "1"

    def to_json(self):
        return {
            "version": self.version,
            "entries": [{"id": i, "path": p} for i, p in self.entries],
            "annotations": self.annotations,
            "masks": self.masks,
            "preprocessing": self.preprocessing,
        }

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        raw = json.loads(path.read_text())
        man = cls(
            root=path.parent,
            entries=[(e["id"], e["path"]) for e in raw["entries"]],
            annotations=raw.get("annotations"),
            masks=raw.get("masks") or {},
            preprocessing=raw.get("preprocessing", "none"),
            version=str(raw.get("version", "1")),
        )
        man.validate()
        return man

    def validate(self):
        if self.preprocessing not in PREPROCESS_MODES:
            raise SchemaError(f"unknown preprocessing mode {self.preprocessing!r}")
        ids = [i for i, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise SchemaError("duplicate image ids in manifest")
        missing = [p for _, p in self.entries if not (self.root / p).exists()]
        if self.annotations and not (self.root / self.annotations).exists():
            missing.append(self.annotations)
        if missing:
            raise SchemaError(f"missing files: {missing[:5]}")


# ---------------------------------------------------------------- rendering


def _background(rng, h, w):
    ys, xs = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform(0.1, 0.9, size=3)
    img = np.broadcast_to(base, (h, w, 3)).copy()
    for _ in range(4):
        freq = rng.uniform(1.0, 6.0)
        ang = rng.uniform(0, 2 * math.pi)
        phase = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(0.03, 0.12) * rng.choice([-1, 1], size=3)
        wave = np.sin(2 * math.pi * freq * (xs * math.cos(ang) + ys * math.sin(ang)) + phase)
        img += wave[..., None] * amp
    img += rng.normal(0, 0.02, size=img.shape)
    return img


def _tri_mask(px, py, a, b, c):
    def side(p, q):
        return (px - q[0]) * (p[1] - q[1]) - (p[0] - q[0]) * (py - q[1])

    d1, d2, d3 = side(a, b), side(b, c), side(c, a)
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def render_blob_face(rng, size=(96, 96), supersample=2):
    """Render one blob face; returns (image, landmarks (5, 2), mask)."""
    h, w = size
    s = supersample
    # supersampled pixel centres in image coordinates
    ys, xs = np.mgrid[0:h * s, 0:w * s]
    px = (xs + 0.5) / s - 0.5
    py = (ys + 0.5) / s - 0.5

    scale = rng.uniform(0.8, 1.15) * min(h, w) / 96.0
    cx = rng.uniform(0.36, 0.62) * w
    cy = rng.uniform(0.36, 0.64) * h
    theta = math.radians(rng.uniform(-35, 35))
    a = rng.uniform(18, 25) * scale
    b = rng.uniform(12, 17) * scale
    d = np.array([math.cos(theta), math.sin(theta)])
    n = np.array([-math.sin(theta), math.cos(theta)])
    c = np.array([cx, cy])

    beak_len = rng.uniform(7, 12) * scale
    tail_len = rng.uniform(8, 14) * scale
    eye_r = rng.uniform(2.6, 3.6) * scale
    eyes = [c + 0.42 * a * d - 0.45 * b * n, c + 0.42 * a * d + 0.45 * b * n]
    beak_tip = c + (a + beak_len) * d
    tail_tip = c - (a + tail_len) * d

    lx, ly = px - cx, py - cy
    u = lx * d[0] + ly * d[1]
    v = lx * n[0] + ly * n[1]
    body = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    beak = _tri_mask(px, py, c + 0.8 * a * d - 0.3 * b * n, c + 0.8 * a * d + 0.3 * b * n, beak_tip)
    tail = _tri_mask(px, py, c - 0.7 * a * d - 0.35 * b * n, c - 0.7 * a * d + 0.35 * b * n, tail_tip)

    img = _background(rng, h * s, w * s)
    body_col = rng.uniform(0.0, 1.0, size=3)
    beak_col = rng.uniform(0.0, 1.0, size=3)
    tail_col = np.clip(body_col * rng.uniform(0.5, 1.0) + rng.normal(0, 0.1, 3), 0, 1)
    # body texture: soft stripes across the body
    stripe = 0.08 * np.sin(u / rng.uniform(2.0, 5.0))[..., None]
    img[tail] = tail_col
    img[body] = np.clip(body_col + stripe[body], 0, 1)
    img[beak] = beak_col
    for e in eyes:
        r2 = (px - e[0]) ** 2 + (py - e[1]) ** 2
        img[r2 <= eye_r ** 2] = (0.95, 0.95, 0.95)
        img[r2 <= (0.5 * eye_r) ** 2] = (0.05, 0.05, 0.05)
    fg = body | beak | tail

    img = img.reshape(h, s, w, s, 3).mean(axis=(1, 3))
    mask = fg.reshape(h, s, w, s).mean(axis=(1, 3)) >= 0.5
    pts = np.array([eyes[0], eyes[1], beak_tip, c, tail_tip])
    return np.clip(img, 0, 1).astype(np.float32), pts, mask


def generate_synthetic_dataset(n, size=(96, 96), seed=0):
    """Procedural blob faces with 5 landmarks and foreground masks."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    h, w = size
    images = np.empty((n, h, w, 3), np.float32)
    masks = np.empty((n, h, w), bool)
    landmarks = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        img, pts, mask = render_blob_face(rng, (h, w))
        images[i] = img
        masks[i] = mask
        vis = (pts[:, 0] >= 0) & (pts[:, 0] <= w - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1)
        landmarks.append(LandmarkSet(pts, vis, f"{i:06d}"))
    return SyntheticDataset(images, landmarks, masks)


# ---------------------------------------------------------------- annotations


def save_annotations(path, landmark_sets):
    if not landmark_sets:
        raise InvalidArgument("no annotations to save")
    n_pts = len(landmark_sets[0].points)
    header = ["image"]
    for k in range(1, n_pts + 1):
        header += [f"x{k}", f"y{k}", f"v{k}"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for lm in landmark_sets:
            row = [lm.image_id]
            for (x, y), v in zip(lm.points, lm.visible):
                row += [repr(float(x)), repr(float(y)), int(bool(v))]
            wr.writerow(row)


def load_annotations(path):
    """Parse ``image,x1,y1,v1,...`` rows into LandmarkSets."""
    out = []
    n_pts = None
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty annotation file", 1)
    header = rows[0]
    if not header or header[0] != "image" or (len(header) - 1) % 3:
        raise ParseError("bad header, expected image,x1,y1,v1,...", 1)
    n_pts = (len(header) - 1) // 3
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        fields = row[1:]
        if len(fields) % 3:
            raise ParseError(f"expected triples of x,y,v; got {len(fields)} fields", lineno)
        if len(fields) // 3 != n_pts:
            raise SchemaError(f"line {lineno}: {len(fields) // 3} landmarks, header declares {n_pts}")
        try:
            vals = np.array([float(f) for f in fields]).reshape(-1, 3)
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if not np.all(np.isin(vals[:, 2], (0.0, 1.0))):
            raise ParseError("visibility must be 0 or 1", lineno)
        out.append(LandmarkSet(vals[:, :2].copy(), vals[:, 2] == 1.0, row[0]))
    return out


# ---------------------------------------------------------------- images


def save_image(path, image):
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def face_crop_geometry(size, resize=136, crop=96):
    """(scale x, scale y, offset) mapping input pixels to the 136->96 crop."""
    h, w = size
    sx, sy = resize / w, resize / h
    off = (resize - crop) / 2.0
    return sx, sy, off


def preprocess_image(image, mode):
    if mode == "none":
        return image
    if mode != "face_crop_136_96":
        raise InvalidArgument(f"unknown preprocessing mode {mode!r}")
    arr = (np.clip(image, 0, 1) * 255).astype(np.uint8)
    im = Image.fromarray(arr).resize((136, 136), Image.BILINEAR)
    off = (136 - 96) // 2
    im = im.crop((off, off, off + 96, off + 96))
    return np.asarray(im, dtype=np.float32) / 255.0


def preprocess_landmarks(lm, size, mode):
    if mode == "none":
        return lm
    sx, sy, off = face_crop_geometry(size)
    pts = (lm.points + 0.5) * np.array([sx, sy]) - 0.5 - off
    vis = lm.visible & (pts[:, 0] >= 0) & (pts[:, 0] <= 95) & (pts[:, 1] >= 0) & (pts[:, 1] <= 95)
    return LandmarkSet(pts, vis, lm.image_id)


def write_dataset(ds, out_dir):
    """Write images, masks, annotations.csv and manifest.json under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    entries, masks = [], {}
    for img, lm, mask in zip(ds.images, ds.landmarks, ds.masks):
        rel = f"images/{lm.image_id}.png"
        save_image(out / rel, img)
        entries.append((lm.image_id, rel))
        mrel = f"masks/{lm.image_id}.png"
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(out / mrel)
        masks[lm.image_id] = mrel
    save_annotations(out / "annotations.csv", ds.landmarks)
    man = DatasetManifest(out, entries, "annotations.csv", masks)
    (out / "manifest.json").write_text(json.dumps(man.to_json(), indent=1))
    return man


def load_dataset(path, limit=None):
    """Load a manifest into a SyntheticDataset-shaped container."""
    man = DatasetManifest.load(path)
    entries = man.entries[:limit] if limit else man.entries
    raw = [load_image(man.root / p) for _, p in entries]
    images = np.stack([preprocess_image(im, man.preprocessing) for im in raw])
    lms = {}
    if man.annotations:
        for lm in load_annotations(man.root / man.annotations):
            lms[lm.image_id] = lm
    landmarks = []
    for (i, _), im in zip(entries, raw):
        lm = lms.get(i)
        if lm is not None:
            lm = preprocess_landmarks(lm, im.shape[:2], man.preprocessing)
        landmarks.append(lm)
    if man.masks:
        masks = np.stack([
            preprocess_image(np.repeat(load_mask(man.root / man.masks[i])[..., None], 3, 2).astype(np.float32),
                             man.preprocessing)[..., 0] > 0.5
            for i, _ in entries
        ])
    else:
        masks = None
    return SyntheticDataset(images, landmarks, masks)
