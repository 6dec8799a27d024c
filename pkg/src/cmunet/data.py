"""Dataset ingestion, synthetic scene generation, augmentation, TTA.

On-disk layout: ``<root>/images/<id>.ppm``, ``<root>/masks/<id>.pgm`` and a
``meta.json`` with ``{num_classes, class_names, split}``. Images are binary
PPM (P6, maxval 255); masks are binary PGM (P5) holding class indices.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from . import functional as F
from . import tensor as T
from .tensor import Tensor

SCALE_CHOICES = (0.5, 0.75, 1.0, 1.25, 1.5)

# color anchors per foreground class; background stays gray
_PALETTE = np.array([
    (0.85, 0.15, 0.15),
    (0.15, 0.80, 0.20),
    (0.15, 0.25, 0.85),
    (0.90, 0.85, 0.10),
    (0.85, 0.15, 0.80),
    (0.10, 0.80, 0.85),
    (0.95, 0.55, 0.10),
])


@dataclass
class SegSample:
    image: np.ndarray   # [3, H, W] float32 in [0, 1]
    mask: np.ndarray    # [H, W] integer class indices
    id: str

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape:
            raise DataError(f"sample {self.id}: image/mask size mismatch")


# -- netpbm ------------------------------------------------------------------

def _read_pnm_header(buf, path, magic):
    if buf[:2] != magic:
        raise DataError(f"{path}: expected {magic.decode()} file")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        token = buf[start:pos]
        if not token.isdigit():
            raise DataError(f"{path}: malformed header token {token!r}")
        fields.append(int(token))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255 or w < 1 or h < 1:
        raise DataError(f"{path}: unsupported header (maxval must be 255)")
    return w, h, pos


def read_ppm(path):
    buf = Path(path).read_bytes()
    w, h, pos = _read_pnm_header(buf, path, b"P6")
    raw = buf[pos:]
    if len(raw) != w * h * 3:
        raise DataError(f"{path}: expected {w * h * 3} pixel bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)


def write_ppm(path, rgb_u8):
    h, w, _ = rgb_u8.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(rgb_u8, dtype=np.uint8).tobytes())


def read_pgm(path):
    buf = Path(path).read_bytes()
    w, h, pos = _read_pnm_header(buf, path, b"P5")
    raw = buf[pos:]
    if len(raw) != w * h:
        raise DataError(f"{path}: expected {w * h} pixel bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w)


def write_pgm(path, gray_u8):
    h, w = gray_u8.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(gray_u8, dtype=np.uint8).tobytes())


def load_sample(image_path, mask_path, num_classes=None, sample_id=None):
    """Read one image/mask pair; image scaled to [0,1]."""
    rgb = read_ppm(image_path)
    mask = read_pgm(mask_path).astype(np.int64)
    if rgb.shape[:2] != mask.shape:
        raise DataError(f"{image_path}: image {rgb.shape[:2]} vs mask {mask.shape}")
    if num_classes is not None and mask.max() >= num_classes:
        raise DataError(f"{mask_path}: class index {mask.max()} >= {num_classes}")
    image = (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)
    sid = sample_id if sample_id is not None else Path(image_path).stem
    return SegSample(image=np.ascontiguousarray(image), mask=mask, id=sid)


def save_sample(root, sample):
    root = Path(root)
    rgb = np.clip(np.round(sample.image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    write_ppm(root / "images" / f"{sample.id}.ppm", rgb)
    write_pgm(root / "masks" / f"{sample.id}.pgm", sample.mask.astype(np.uint8))


# -- dataset directory ---------------------------------------------------------

@dataclass
class Dataset:
    root: Path
    num_classes: int
    class_names: list
    split: dict  # {"train": [ids], "val": [ids]}

    def ids(self, part="all"):
        if part == "all":
            return list(self.split.get("train", [])) + list(self.split.get("val", []))
        return list(self.split.get(part, []))

    def load(self, sample_id):
        return load_sample(self.root / "images" / f"{sample_id}.ppm",
                           self.root / "masks" / f"{sample_id}.pgm",
                           num_classes=self.num_classes, sample_id=sample_id)


def open_dataset(root):
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DataError(f"{root}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    for key in ("num_classes", "class_names", "split"):
        if key not in meta:
            raise DataError(f"{meta_path}: missing key {key!r}")
    return Dataset(root=root, num_classes=int(meta["num_classes"]),
                   class_names=list(meta["class_names"]), split=dict(meta["split"]))


# -- synthetic scenes ----------------------------------------------------------

def _paint_shape(rng, image, mask, class_id, size):
    """One random rectangle, disk or stripe in the class color family."""
    color = _PALETTE[(class_id - 1) % len(_PALETTE)] + rng.uniform(-0.06, 0.06, 3)
    color = np.clip(color, 0.02, 0.98)
    kind = rng.integers(0, 3)
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 0:  # rectangle
        side_h = rng.integers(size // 5, size // 2)
        side_w = rng.integers(size // 5, size // 2)
        top = rng.integers(0, size - side_h)
        left = rng.integers(0, size - side_w)
        region = (yy >= top) & (yy < top + side_h) & (xx >= left) & (xx < left + side_w)
    elif kind == 1:  # disk
        r = rng.integers(size // 7, size // 3)
        cy = rng.integers(r, size - r)
        cx = rng.integers(r, size - r)
        region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:  # stripe across the full extent
        width = rng.integers(size // 10, size // 4)
        offset = rng.integers(-size // 2, size)
        if rng.integers(0, 2):
            region = (xx - yy >= offset) & (xx - yy < offset + width)
        else:
            region = (xx + yy >= offset) & (xx + yy < offset + width)
    noise = rng.normal(0.0, 0.02, (3, size, size))
    for ch in range(3):
        image[ch][region] = color[ch] + noise[ch][region]
    mask[region] = class_id


def generate_scene(rng, size, num_classes):
    """Textured background plus colored shapes; returns (image, mask)."""
    base = rng.uniform(0.35, 0.6)
    grad_y = rng.uniform(-0.08, 0.08)
    grad_x = rng.uniform(-0.08, 0.08)
    ramp = (np.linspace(-0.5, 0.5, size)[:, None] * grad_y
            + np.linspace(-0.5, 0.5, size)[None, :] * grad_x)
    image = np.tile(base + ramp, (3, 1, 1)) + rng.normal(0.0, 0.02, (3, size, size))
    mask = np.zeros((size, size), dtype=np.int64)

    per_class = 1 if num_classes > 5 else 2
    jobs = []
    for class_id in range(1, num_classes):
        for _ in range(rng.integers(1, per_class + 1)):
            jobs.append(class_id)
    order = rng.permutation(len(jobs))
    for j in order:
        _paint_shape(rng, image, mask, jobs[j], size)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def synth_generate(out_dir, n, size, num_classes, seed, train_fraction=0.8):
    """Write a deterministic synthetic dataset directory."""
    if not 2 <= num_classes <= 8:
        raise DataError("synth_generate: num_classes must be in [2, 8]")
    if size % 32:
        raise DataError("synth_generate: size must be divisible by 32")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        image, mask = generate_scene(rng, size, num_classes)
        sid = f"{i:06d}"
        save_sample(out, SegSample(image=image, mask=mask, id=sid))
        ids.append(sid)
    n_train = int(round(n * train_fraction))
    meta = {"num_classes": num_classes,
            "class_names": ["background"] + [f"class_{k}" for k in range(1, num_classes)],
            "split": {"train": ids[:n_train], "val": ids[n_train:]}}
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return open_dataset(out)


# -- augmentation --------------------------------------------------------------

def resample_mask_nearest(mask, target):
    h, w = mask.shape
    h2, w2 = target
    ri = np.minimum((np.arange(h2) * h) // h2, h - 1)
    ci = np.minimum((np.arange(w2) * w) // w2, w - 1)
    return mask[ri[:, None], ci[None, :]]


def _resize_image(image, target):
    with T.no_grad():
        return F.resize(Tensor(image[None]), target, "bilinear").data[0]


def augment(sample, rng):
    """Random scale (crop/pad back), flips, quarter rotations.

    One geometric transform is applied to image and mask together; the mask
    resamples with nearest-neighbor, the image bilinearly.
    """
    image, mask = sample.image, sample.mask
    h, w = mask.shape

    scale = SCALE_CHOICES[rng.integers(0, len(SCALE_CHOICES))]
    if scale != 1.0:
        nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
        image = _resize_image(image, (nh, nw))
        mask = resample_mask_nearest(mask, (nh, nw))
        if nh >= h and nw >= w:  # random crop back
            top = int(rng.integers(0, nh - h + 1))
            left = int(rng.integers(0, nw - w + 1))
            image = image[:, top:top + h, left:left + w]
            mask = mask[top:top + h, left:left + w]
        else:  # edge-replicate pad back (never invents labels)
            pt, pl = (h - nh) // 2, (w - nw) // 2
            pads = ((pt, h - nh - pt), (pl, w - nw - pl))
            image = np.pad(image, ((0, 0),) + pads, mode="edge")
            mask = np.pad(mask, pads, mode="edge")

    if rng.integers(0, 2):
        image = image[:, :, ::-1]
        mask = mask[:, ::-1]
    if rng.integers(0, 2):
        image = image[:, ::-1, :]
        mask = mask[::-1, :]
    quarters = int(rng.integers(0, 4))
    if quarters and h == w:
        image = np.rot90(image, quarters, axes=(1, 2))
        mask = np.rot90(mask, quarters)

    return SegSample(image=np.ascontiguousarray(image, dtype=np.float32),
                     mask=np.ascontiguousarray(mask), id=sample.id)


def sample_rng(seed, sample_id, epoch=0):
    """Stream derived from (seed, id, epoch): load order cannot matter."""
    tag = zlib.crc32(str(sample_id).encode())
    return np.random.default_rng([seed, tag, epoch])


# -- test-time augmentation ------------------------------------------------------

def _flip(arr, horizontal, vertical):
    if horizontal:
        arr = arr[..., ::-1]
    if vertical:
        arr = arr[..., ::-1, :]
    return np.ascontiguousarray(arr)


def tta_predict(model, image):
    """Average softmax over the four flip variants, undo each flip, argmax."""
    model.eval()
    acc = None
    with T.no_grad():
        for hflip in (False, True):
            for vflip in (False, True):
                x = Tensor(_flip(image, hflip, vflip)[None])
                logits = model(x).final_logits
                probs = F.softmax_channel(logits, axis=1).data[0]
                probs = _flip(probs, hflip, vflip)
                acc = probs if acc is None else acc + probs
    return acc.argmax(axis=0)


def predict(model, image):
    model.eval()
    with T.no_grad():
        logits = model(Tensor(image[None])).final_logits
    return logits.data[0].argmax(axis=0)
