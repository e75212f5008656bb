"""Dataset ingestion, preprocessing, jitter augmentation and synthetic data.

On-disk layout understood by :func:`load_dataset` / written by
:func:`save_dataset`::

    DIR/list_attr_celeba.txt      CelebA attribute list (-1/1 labels)
    DIR/list_eval_partition.txt   "<image_id> <0|1|2>" (train/val/test)
    DIR/images/<image_id>         PPM (P6, 8-bit) or raw tensor (MTTENS1)
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, optimize, special
from scipy.linalg import hadamard

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError, ParseError
from .metrics import LabelMatrix
from .topology import AttributeVocab

SPLITS = ("train", "val", "test")
LABEL_FILE = "list_attr_celeba.txt"
PARTITION_FILE = "list_eval_partition.txt"
IMAGE_DIR = "images"
RAW_MAGIC = b"MTTENS1"


# ---------------------------------------------------------------------------
# Label and partition files
# ---------------------------------------------------------------------------


@dataclass
class Record:
    image_id: str
    labels: np.ndarray
    split: str = "train"


def parse_label_file(path):
    """Read a CelebA attribute list. Returns ``(vocab, records)``; -1 maps to 0."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if len(lines) < 2:
        raise ParseError("file must contain a count line and a header line", path, len(lines) + 1)
    try:
        count = int(lines[0].strip())
    except ValueError:
        raise ParseError(f"expected record count, got {lines[0]!r}", path, 1) from None
    names = lines[1].split()
    if len(names) != 40:
        raise ParseError(f"expected 40 attribute names, got {len(names)}", path, 2)
    vocab = AttributeVocab(tuple(names))
    records = []
    seen = set()
    for lineno, line in enumerate(lines[2:], 3):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 41:
            raise ParseError(f"expected image id and 40 labels, got {len(parts)} columns", path, lineno)
        if parts[0] in seen:
            raise ParseError(f"duplicate image id {parts[0]!r}", path, lineno)
        seen.add(parts[0])
        try:
            raw = [int(v) for v in parts[1:]]
        except ValueError:
            raise ParseError("non-integer label value", path, lineno) from None
        bad = [v for v in raw if v not in (-1, 1)]
        if bad:
            raise ParseError(f"label values must be -1 or 1, got {bad[0]}", path, lineno)
        records.append(Record(parts[0], (np.asarray(raw) > 0).astype(np.uint8)))
    if len(records) != count:
        raise ParseError(f"header declares {count} records, found {len(records)}", path, 1)
    return vocab, records


def write_label_file(path, vocab, records):
    with open(path, "w") as fh:
        fh.write(f"{len(records)}\n")
        fh.write(" ".join(vocab.names) + "\n")
        for r in records:
            fh.write(r.image_id + " " + " ".join("1" if v else "-1" for v in r.labels) + "\n")


def parse_partition_file(path):
    splits = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in ("0", "1", "2"):
                raise ParseError("expected '<image_id> <0|1|2>'", path, lineno)
            splits[parts[0]] = SPLITS[int(parts[1])]
    return splits


def write_partition_file(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(f"{r.image_id} {SPLITS.index(r.split)}\n")


# ---------------------------------------------------------------------------
# Image formats
# ---------------------------------------------------------------------------


def _ppm_tokens(buf, count, path):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        tokens.append(int(buf[start:pos]))
    return tokens, pos + 1


def read_ppm(path):
    """P6 8-bit PPM -> float ``[3, H, W]`` with values 0..255."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6) file")
    (w, h, maxval), pos = _ppm_tokens(buf, 3, path)
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=h * w * 3, offset=pos) if len(buf) - pos >= h * w * 3 else None
    if pixels is None:
        raise DataError(f"{path}: truncated PPM pixel data")
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(T.get_dtype())


def write_ppm(path, image):
    img = np.clip(np.rint(np.asarray(image)), 0, 255).astype(np.uint8)
    c, h, w = img.shape
    if c != 3:
        raise DimensionError(f"PPM needs 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.transpose(1, 2, 0).tobytes())


def read_raw_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(RAW_MAGIC):
        raise DataError(f"{path}: bad raw tensor magic")
    pos = len(RAW_MAGIC)
    try:
        (rank,) = struct.unpack_from("<I", buf, pos)
        dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
    except struct.error:
        raise DataError(f"{path}: truncated raw tensor header") from None
    pos += 4 + 4 * rank
    count = int(np.prod(dims)) if dims else 1
    if len(buf) - pos < 4 * count:
        raise DataError(f"{path}: truncated raw tensor data")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
    return data.reshape(dims).astype(T.get_dtype())


def write_raw_tensor(path, array):
    array = np.asarray(array)
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_image(path):
    with open(path, "rb") as fh:
        head = fh.read(len(RAW_MAGIC))
    if head == RAW_MAGIC:
        return read_raw_tensor(path)
    if head[:2] == b"P6":
        return read_ppm(path)
    raise DataError(f"{path}: unsupported image format (PPM P6 and raw tensors only)")


# ---------------------------------------------------------------------------
# In-memory dataset
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: str
    records: List[Record]
    image_format: str = "raw_tensor"

    def __post_init__(self):
        if self.image_format not in ("ppm", "raw_tensor"):
            raise ConfigError(f"unknown image format {self.image_format!r}")
        ids = [r.image_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("image ids must be unique")
        for r in self.records:
            if len(r.labels) != 40:
                raise DataError(f"record {r.image_id!r} has {len(r.labels)} labels, expected 40")


@dataclass
class Dataset:
    vocab: AttributeVocab
    ids: List[str]
    images: np.ndarray           # [N, 3, H, W]
    labels: LabelMatrix          # [N, 40]
    splits: np.ndarray           # [N] of "train" / "val" / "test"

    def indices(self, split):
        return np.flatnonzero(self.splits == split)

    def subset(self, split):
        idx = self.indices(split)
        return Dataset(self.vocab, [self.ids[i] for i in idx], self.images[idx],
                       self.labels.rows(idx), self.splits[idx])

    def records(self):
        return [Record(i, self.labels.values[k], str(self.splits[k])) for k, i in enumerate(self.ids)]

    def __len__(self):
        return len(self.ids)


def load_dataset(root, label_file=LABEL_FILE, partition_file=PARTITION_FILE, image_dir=IMAGE_DIR):
    vocab, records = parse_label_file(os.path.join(root, label_file))
    part_path = os.path.join(root, partition_file)
    if os.path.exists(part_path):
        splits = parse_partition_file(part_path)
        for r in records:
            if r.image_id not in splits:
                raise DataError(f"image {r.image_id!r} missing from {part_path}")
            r.split = splits[r.image_id]
    images = [read_image(os.path.join(root, image_dir, r.image_id)) for r in records]
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataError(f"heterogeneous image sizes {sorted(shapes)}; resize externally")
    return Dataset(vocab, [r.image_id for r in records], np.stack(images),
                   LabelMatrix(np.stack([r.labels for r in records])),
                   np.array([r.split for r in records]))


def save_dataset(dataset, root, image_format="raw_tensor"):
    """Write a dataset in the on-disk layout; returns its manifest."""
    manifest = DatasetManifest(root, dataset.records(), image_format)
    os.makedirs(os.path.join(root, IMAGE_DIR), exist_ok=True)
    write_label_file(os.path.join(root, LABEL_FILE), dataset.vocab, manifest.records)
    write_partition_file(os.path.join(root, PARTITION_FILE), manifest.records)
    writer = write_ppm if image_format == "ppm" else write_raw_tensor
    for image_id, image in zip(dataset.ids, dataset.images):
        writer(os.path.join(root, IMAGE_DIR, image_id), image)
    return manifest


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def compute_mean(dataset, split="train", per_channel=False):
    """Per-pixel mean image over one split (per-channel mean broadcast if asked)."""
    idx = dataset.indices(split)
    if idx.size == 0:
        raise DataError(f"split {split!r} is empty")
    mean = dataset.images[idx].astype(np.float64).mean(axis=0)
    if per_channel:
        mean = np.broadcast_to(mean.mean(axis=(1, 2), keepdims=True), mean.shape)
    return np.ascontiguousarray(mean, dtype=dataset.images.dtype)


def crop_offsets(image_hw, crop, rng, mode, count=1):
    h, w = image_hw
    ch, cw = crop
    if ch > h or cw > w:
        raise DimensionError(f"crop {crop} larger than image {(h, w)}")
    if mode == "train":
        return rng.integers(0, h - ch + 1, size=count), rng.integers(0, w - cw + 1, size=count)
    return np.full(count, (h - ch) // 2), np.full(count, (w - cw) // 2)


def preprocess(image, mean, crop, rng=None, mode="eval"):
    """Subtract the mean image, then crop (random in train mode, centred in eval)."""
    if image.shape != mean.shape:
        raise DimensionError(f"image {image.shape} and mean {mean.shape} differ")
    oy, ox = crop_offsets(image.shape[1:], crop, rng, mode)
    y, x = int(oy[0]), int(ox[0])
    return (image - mean)[:, y:y + crop[0], x:x + crop[1]]


def preprocess_batch(images, mean, crop, rng=None, mode="eval"):
    """Vectorized :func:`preprocess` over ``[N, 3, H, W]``."""
    n, _, h, w = images.shape
    ch, cw = crop
    centred = images - mean
    if (ch, cw) == (h, w):
        return centred
    oy, ox = crop_offsets((h, w), crop, rng, mode, count=n)
    rows = oy[:, None] + np.arange(ch)[None, :]
    cols = ox[:, None] + np.arange(cw)[None, :]
    return centred[np.arange(n)[:, None, None, None], np.arange(3)[None, :, None, None],
                   rows[:, None, :, None], cols[:, None, None, :]]


def shift_clamped(image, dy, dx):
    """Translate by (dy, dx) pixels, filling exposed borders by edge clamping."""
    _, h, w = image.shape
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return image[:, rows][:, :, cols]


def default_jitter_grid(step=10):
    return [(dy, dx) for dy in (-step, 0, step) for dx in (-step, 0, step)]


def jitter_augment(image_id, image, labels, step=10, grid=None):
    """One (id, image, labels) variant per grid offset; labels are copied."""
    grid = default_jitter_grid(step) if grid is None else grid
    return [(f"{image_id}@{dy:+d},{dx:+d}", shift_clamped(image, dy, dx), np.array(labels, copy=True))
            for dy, dx in grid]


def augment_dataset(dataset, step=10, grid=None):
    """Replace every train record by its jitter variants; val/test untouched."""
    ids, images, labels, masks, splits = [], [], [], [], []
    for k, image_id in enumerate(dataset.ids):
        if dataset.splits[k] == "train":
            variants = jitter_augment(image_id, dataset.images[k], dataset.labels.values[k], step, grid)
        else:
            variants = [(image_id, dataset.images[k], dataset.labels.values[k])]
        for vid, vimg, vlab in variants:
            ids.append(vid)
            images.append(vimg)
            labels.append(vlab)
            masks.append(dataset.labels.mask[k])
            splits.append(dataset.splits[k])
    return Dataset(dataset.vocab, ids, np.stack(images), LabelMatrix(np.stack(labels), np.stack(masks)),
                   np.array(splits))


def iterate_batches(indices, batch_size, epoch, seed, shuffle=True):
    """Yield index arrays; the shuffle order depends only on (seed, epoch)."""
    indices = np.asarray(indices)
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(indices.size)
        indices = indices[order]
    for start in range(0, indices.size, batch_size):
        yield indices[start:start + batch_size]


# ---------------------------------------------------------------------------
# Synthetic correlated-attribute data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    n_train: int = 1000
    n_val: int = 0
    n_test: int = 200
    image_size: int = 16
    noise: float = 0.5
    # (attr_i, attr_j, rho): target Pearson correlation of the binary labels
    correlations: Sequence[Tuple[object, object, float]] = ()
    prevalence: object = 0.5
    # probability that the image shows the opposite of the recorded label
    label_noise: float = 0.0
    glyph_intensity: float = 1.0
    seed: int = 0
    vocab: Optional[AttributeVocab] = None

    def __post_init__(self):
        self.vocab = self.vocab or AttributeVocab.celeba()
        prev = np.broadcast_to(np.asarray(self.prevalence, dtype=np.float64), (len(self.vocab),))
        if not ((prev > 0) & (prev < 1)).all():
            raise ConfigError("prevalences must lie strictly between 0 and 1")
        for _, _, rho in self.correlations:
            if abs(rho) > 1:
                raise ConfigError(f"correlation {rho} outside [-1, 1]")
        if not 0 <= self.label_noise < 1:
            raise ConfigError(f"label_noise must lie in [0, 1), got {self.label_noise}")
        if self.image_size < 4:
            raise ConfigError("synthetic images must be at least 4x4")

    @property
    def prevalences(self):
        return np.broadcast_to(np.asarray(self.prevalence, dtype=np.float64), (len(self.vocab),)).copy()

    def pair_indices(self):
        idx = []
        for a, b, rho in self.correlations:
            ia = self.vocab.index[a] if isinstance(a, str) else int(a)
            ib = self.vocab.index[b] if isinstance(b, str) else int(b)
            if ia == ib:
                raise ConfigError(f"correlation pair must join two different attributes ({a!r})")
            idx.append((ia, ib, float(rho)))
        return idx


def orthant_probability(a, b, r):
    """P(X > a, Y > b) for a standard bivariate normal with correlation r."""
    if r >= 1.0:
        return 1.0 - special.ndtr(max(a, b))
    if r <= -1.0:
        return max(0.0, special.ndtr(-a) - special.ndtr(b))
    s = math.sqrt(1.0 - r * r)
    val, _ = integrate.quad(lambda x: math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
                            * special.ndtr((r * x - b) / s), a, np.inf, epsabs=1e-13, epsrel=1e-11)
    return val


def latent_correlation(p_i, p_j, rho):
    """Latent Gaussian correlation giving binary labels with Pearson correlation ``rho``."""
    target = p_i * p_j + rho * math.sqrt(p_i * (1 - p_i) * p_j * (1 - p_j))
    lo, hi = max(0.0, p_i + p_j - 1.0), min(p_i, p_j)
    if not lo - 1e-12 <= target <= hi + 1e-12:
        raise ConfigError(f"correlation {rho} infeasible for prevalences {p_i:.3f}, {p_j:.3f}")
    a = NormalDist().inv_cdf(1 - p_i)
    b = NormalDist().inv_cdf(1 - p_j)
    f = lambda r: orthant_probability(a, b, r) - target
    edge = 1 - 1e-9
    if f(edge) <= 0:
        return edge
    if f(-edge) >= 0:
        return -edge
    return optimize.brentq(f, -edge, edge, xtol=1e-12)


def walsh_1d(k, size):
    """Walsh function with ``k`` sign changes sampled at ``size`` points (values +/-1)."""
    n = 1 << max(k, size - 1).bit_length()
    h = hadamard(n)
    sequency = np.count_nonzero(np.diff(h, axis=1), axis=1)
    row = h[np.argsort(sequency, kind="stable")[k]]
    return row[(np.arange(size) * n) // size].astype(np.float64)


def walsh_orders(count):
    """The ``count`` lowest-sequency 2-D Walsh index pairs ``(i, j)``."""
    side = int(np.ceil(np.sqrt(count))) + 1
    pairs = sorted(((i, j) for i in range(side) for j in range(side)), key=lambda t: (t[0] + t[1], max(t), t[0]))
    return pairs[:count]


def texture(order, size):
    """2-D Walsh pattern ``w_i(row) * w_j(col)``; orthogonal for power-of-two sizes."""
    i, j = order
    return np.outer(walsh_1d(i, size), walsh_1d(j, size))


def glyph_bank(vocab_size, image_size):
    """Fixed per-attribute glyphs ``[A, 3, S, S]``.

    Attribute ``a`` draws Walsh texture ``a // 3`` on channel ``a % 3`` inside
    image quadrant ``a % 4``. Every attribute has its own (channel, texture)
    code, so glyphs are mutually orthogonal and no two differ only by position.
    """
    half = image_size // 2
    orders = walsh_orders(-(-vocab_size // 3))
    bank = np.zeros((vocab_size, 3, image_size, image_size))
    for a in range(vocab_size):
        qy, qx = divmod(a % 4, 2)
        bank[a, a % 3, qy * half:(qy + 1) * half, qx * half:(qx + 1) * half] = texture(orders[a // 3], half)
    return bank


def synth_labels(spec, n, rng):
    p = spec.prevalences
    a = len(p)
    corr = np.eye(a)
    for i, j, rho in spec.pair_indices():
        corr[i, j] = corr[j, i] = latent_correlation(p[i], p[j], rho)
    try:
        chol = np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        raise ConfigError("correlation plan is not positive definite") from None
    z = rng.standard_normal((n, a)) @ chol.T
    thresholds = np.array([NormalDist().inv_cdf(1 - q) for q in p])
    return (z > thresholds).astype(np.uint8)


def synth_generate(spec):
    """Labels from a Gaussian copula, images = noise + glyphs of visible attributes."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_train + spec.n_val + spec.n_test
    labels = synth_labels(spec, n, rng)
    flips = (rng.random(labels.shape) < spec.label_noise).astype(np.uint8)
    visible = labels ^ flips
    bank = glyph_bank(labels.shape[1], spec.image_size).reshape(labels.shape[1], -1)
    images = (visible.astype(np.float64) @ bank) * spec.glyph_intensity
    images += spec.noise * rng.standard_normal(images.shape)
    images = images.reshape(n, 3, spec.image_size, spec.image_size).astype(T.get_dtype())
    splits = np.array(["train"] * spec.n_train + ["val"] * spec.n_val + ["test"] * spec.n_test)
    ids = [f"synth_{k:06d}" for k in range(n)]
    return Dataset(spec.vocab, ids, images, LabelMatrix(labels), splits)
