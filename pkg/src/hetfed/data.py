"""Domain construction: IDX ingestion, rotated domains, synthetic clusters, splits."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass
class LabeledSet:
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    _index: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        if not (len(self.x) == len(self.y) == len(self.ids)):
            raise ValueError("x, y and ids must have equal length")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, rows) -> "LabeledSet":
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledSet(self.x[rows], self.y[rows], self.ids[rows])

    def rows_for(self, ids) -> np.ndarray:
        """Row positions of the given sample ids; unknown ids raise KeyError."""
        if self._index is None:
            self._index = {int(i): r for r, i in enumerate(self.ids)}
        try:
            return np.fromiter((self._index[int(i)] for i in ids), dtype=np.int64, count=len(ids))
        except KeyError as exc:
            raise KeyError(f"sample id {exc.args[0]} is not in this set") from None

    @staticmethod
    def concat(sets: Sequence["LabeledSet"]) -> "LabeledSet":
        return LabeledSet(
            np.concatenate([s.x for s in sets]),
            np.concatenate([s.y for s in sets]),
            np.concatenate([s.ids for s in sets]),
        )


@dataclass
class DomainDataset:
    pri: LabeledSet
    pub: LabeledSet
    val: LabeledSet
    test: LabeledSet
    domain_id: int = 0
    rotation_deg: float = 0.0

    def split_hash(self) -> str:
        h = hashlib.sha256()
        for part in (self.pri, self.pub, self.val, self.test):
            h.update(part.ids.astype("<u8").tobytes())
            h.update(b"|")
        return h.hexdigest()[:16]


# -- IDX ------------------------------------------------------------------

def _read_idx(path, expected_magic: int) -> tuple[np.ndarray, tuple[int, ...]]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header")
    magic, = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataFormatError(f"{path}: truncated body ({len(raw) - header} of {count} bytes)")
    body = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header)
    return body.reshape(dims), dims


def load_idx(images_path, labels_path) -> LabeledSet:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images, dims = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels, _ = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return LabeledSet(x, labels.astype(np.int64), np.arange(len(labels)))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, h, w) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# -- rotation -------------------------------------------------------------

def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate clockwise about the image center; bilinear, zero outside."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = rows - cy, cols - cx
    # inverse map: output pixel pulls from the counter-rotated source location
    sx = cos * dx + sin * dy + cx
    sy = -sin * dx + cos * dy + cy
    # snap sub-1e-9 jitter so grid-aligned angles are exact permutations
    for s in (sx, sy):
        near = np.abs(s - np.round(s)) < 1e-9
        s[near] = np.round(s[near])
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    padded = np.zeros((h + 2, w + 2))
    padded[1:-1, 1:-1] = img

    def tap(yy, xx):
        inside = (yy >= -1) & (yy <= h) & (xx >= -1) & (xx <= w)
        out = np.zeros_like(sx)
        out[inside] = padded[yy[inside] + 1, xx[inside] + 1]
        return out

    return ((1 - fy) * (1 - fx) * tap(y0, x0) + (1 - fy) * fx * tap(y0, x0 + 1)
            + fy * (1 - fx) * tap(y0 + 1, x0) + fy * fx * tap(y0 + 1, x0 + 1))


def make_rotated_domains(base: LabeledSet, angles: Sequence[float], per_class: int, seed: int,
                         image_shape: tuple[int, int] | None = None) -> list[LabeledSet]:
    """Sample ``per_class`` images per class once, then rotate that subset per angle."""
    rng = np.random.default_rng(seed)
    picks = []
    for cls in np.unique(base.y):
        rows = np.flatnonzero(base.y == cls)
        if len(rows) < per_class:
            raise ValueError(f"class {cls} has {len(rows)} samples, need {per_class}")
        picks.append(np.sort(rng.choice(rows, size=per_class, replace=False)))
    subset = base.subset(np.concatenate(picks))
    if image_shape is None:
        side = int(round(np.sqrt(subset.x.shape[1])))
        image_shape = (side, side)
    domains = []
    for angle in angles:
        if angle == 0:
            x = subset.x.copy()
        else:
            imgs = subset.x.reshape(-1, *image_shape)
            x = np.stack([rotate_image(im, angle) for im in imgs]).reshape(len(subset), -1)
        domains.append(LabeledSet(x, subset.y.copy(), subset.ids.copy()))
    return domains


def make_synthetic_domains(n_domains: int, n_classes: int, d: int, n_per_domain: int,
                           rotation_step_deg: float, noise_sd: float, seed: int) -> list[LabeledSet]:
    """Gaussian clusters around unit-circle class means, domain k rotated by k*step.

    Class c sits at angle 2*pi*c/M; rotation is counter-clockwise in the plane.
    Labels are balanced (n_per_domain // M per class, remainder to low classes)
    and ids are globally unique: ``k * n_per_domain + i``.
    """
    if d != 2:
        raise ValueError("synthetic domains are 2-dimensional")
    if n_domains < 1 or n_classes < 2 or n_per_domain < n_classes or noise_sd < 0:
        raise ValueError("invalid synthetic domain counts")
    rng = np.random.default_rng(seed)
    base_angles = 2 * np.pi * np.arange(n_classes) / n_classes
    out = []
    for k in range(n_domains):
        labels = rng.permutation(np.arange(n_per_domain) % n_classes)
        ang = base_angles[labels] + np.deg2rad(k * rotation_step_deg)
        means = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        x = means + noise_sd * rng.standard_normal((n_per_domain, 2))
        ids = k * n_per_domain + np.arange(n_per_domain)
        out.append(LabeledSet(x, labels, ids))
    return out


# -- splitting and batching -----------------------------------------------

def split_domain(data: LabeledSet, alpha: float, fractions: tuple[float, float] = (0.10, 0.15),
                 seed: int = 0, domain_id: int = 0, rotation_deg: float = 0.0) -> DomainDataset:
    """Seeded shuffle then contiguous cut into pub / pri / val / test.

    ``|pub| = round(alpha * n)``, ``|val|`` and ``|test|`` likewise from
    ``fractions``; pri takes whatever remains.
    """
    val_frac, test_frac = fractions
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if alpha + val_frac + test_frac >= 1:
        raise ValueError("alpha + val + test fractions leave no private data")
    n = len(data)
    n_pub, n_val, n_test = (int(round(f * n)) for f in (alpha, val_frac, test_frac))
    n_pri = n - n_pub - n_val - n_test
    for name, size in (("pub", n_pub), ("val", n_val), ("test", n_test), ("pri", n_pri)):
        if size < 1:
            raise ValueError(f"partition {name} is empty for n={n}")
    order = np.random.default_rng(seed).permutation(n)
    cuts = np.cumsum([n_pri, n_pub, n_val])
    pri, pub, val, test = np.split(order, cuts)
    return DomainDataset(data.subset(pri), data.subset(pub), data.subset(val), data.subset(test),
                         domain_id, rotation_deg)


class EpochSampler:
    """Draws batches without replacement inside an epoch, reshuffling between epochs.

    The last batch of an epoch may be short, so each epoch covers every row
    exactly once.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("cannot sample from an empty set")
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next_rows(self) -> np.ndarray:
        if self._pos >= len(self._order):
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        rows = self._order[self._pos:self._pos + self.batch_size]
        self._pos += len(rows)
        return rows


def sample_batch(data: LabeledSet, batch_size: int, rng: np.random.Generator):
    """One batch from a fresh epoch shuffle: (x, y, ids)."""
    rows = EpochSampler(len(data), batch_size, rng).next_rows()
    return data.x[rows], data.y[rows], data.ids[rows]
