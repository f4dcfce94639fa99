"""Skewed class/domain benchmark datasets.

Two sources: CIFAR-10 binary batches re-split into a color/grayscale skewed
set, and a low-dimensional Gaussian analog that trains in seconds.  Domain 0
is the "full information" domain and domain 1 its transformed copy.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IMAGE_SHAPE = (3, 32, 32)
IMAGE_DIM = 3 * 32 * 32
CIFAR_RECORD = 1 + IMAGE_DIM
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_RECORDS_PER_FILE = 10_000

DATASET_MAGIC = b"SKB1"
_HEADER = struct.Struct("<4sIIHH")

# purpose tags for sub-seeds, so dataset noise and skew sampling are independent
_TAG_SAMPLES, _TAG_SKEW, _TAG_TRANSFORM = 11, 12, 13


class IngestionError(IOError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    id: int
    features: np.ndarray
    y: int
    d: int


@dataclass
class Dataset:
    """Column-wise store of examples; ``Example`` rows are produced on demand."""

    features: np.ndarray
    y: np.ndarray
    d: np.ndarray
    n_classes: int
    n_domains: int
    split: str = "train"
    ids: np.ndarray = None

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.d = np.asarray(self.d, dtype=np.int64)
        n = len(self.y)
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != n or len(self.d) != n or len(self.ids) != n:
            raise ValueError("features, y, d and ids must agree on the number of examples")
        if n and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError("class label out of range")
        if n and (self.d.min() < 0 or self.d.max() >= self.n_domains):
            raise ValueError("domain label out of range")
        if len(np.unique(self.ids)) != n:
            raise ValueError("example ids must be unique")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> Example:
        return Example(int(self.ids[i]), self.features[i], int(self.y[i]), int(self.d[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def cell_counts(self):
        """(N, D) matrix of example counts per (class, domain)."""
        counts = np.zeros((self.n_classes, self.n_domains), dtype=np.int64)
        np.add.at(counts, (self.y, self.d), 1)
        return counts

    def subset(self, idx, split=None):
        return Dataset(self.features[idx], self.y[idx], self.d[idx], self.n_classes,
                       self.n_domains, split or self.split, self.ids[idx])


def concat(parts, split):
    ids = np.concatenate([p.ids for p in parts])
    if len(np.unique(ids)) != len(ids):
        ids = np.arange(len(ids))
    return Dataset(np.concatenate([p.features for p in parts]), np.concatenate([p.y for p in parts]),
                   np.concatenate([p.d for p in parts]), parts[0].n_classes, parts[0].n_domains, split, ids)


@dataclass(frozen=True)
class SkewSpec:
    rho: float = 0.95
    majority_domain: tuple = ()

    def __post_init__(self):
        if not 0.5 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0.5, 1], got {self.rho}")
        object.__setattr__(self, "majority_domain", tuple(int(m) for m in self.majority_domain))

    def majority_for(self, c):
        if c >= len(self.majority_domain):
            raise ValueError(f"no majority domain assigned for class {c}")
        return self.majority_domain[c]

    @classmethod
    def half_split(cls, rho, n_classes, n_domains=2):
        """First half of the classes majority-domain 0, the rest domain 1 (the 5/5 layout)."""
        half = n_classes // 2
        return cls(rho, tuple(0 if c < half else min(1, n_domains - 1) for c in range(n_classes)))


def majority_count(n, rho):
    return int(np.floor(rho * n + 0.5))


def assign_domains(n_per_class, majority, rho, seed, n_domains=2):
    """Domain labels for one class's ``n_per_class`` examples.

    Exactly ``round(rho * n)`` get ``majority``; the rest are picked by a seeded
    permutation and spread round-robin over the other domains.
    """
    if n_per_class <= 0:
        raise ValueError("n_per_class must be positive")
    rng = np.random.default_rng(seed)
    d = np.full(n_per_class, majority, dtype=np.int64)
    n_min = n_per_class - majority_count(n_per_class, rho)
    minority_idx = rng.permutation(n_per_class)[:n_min]
    others = [k for k in range(n_domains) if k != majority]
    if n_min and not others:
        raise ValueError("minority examples need a second domain")
    for j, i in enumerate(np.sort(minority_idx)):
        d[i] = others[j % len(others)]
    return d


def _seed_words(seed, *tags):
    return [int(s) for s in np.atleast_1d(seed)] + list(tags)


def skew_domains(y, n_classes, spec: SkewSpec, seed, n_domains=2):
    """Domain labels for a whole label vector, class by class."""
    y = np.asarray(y)
    d = np.empty(len(y), dtype=np.int64)
    for c in range(n_classes):
        idx = np.flatnonzero(y == c)
        if len(idx):
            sub = np.random.SeedSequence(_seed_words(seed, _TAG_SKEW, c))
            d[idx] = assign_domains(len(idx), spec.majority_for(c), spec.rho, sub, n_domains)
    return d


# ---------------------------------------------------------------- transforms

def luma_gray(r, g, b):
    """BT.601 luma of 8-bit channels, rounded half up.  Works on arrays too."""
    r, g, b = (np.asarray(v, dtype=np.int64) for v in (r, g, b))
    out = np.clip((299 * r + 587 * g + 114 * b + 500) // 1000, 0, 255)
    return int(out) if out.ndim == 0 else out.astype(np.uint8)


def _as_images(x):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != IMAGE_DIM:
        raise ValueError(f"expected flattened 3x32x32 images, got shape {x.shape}")
    return x.reshape(-1, *IMAGE_SHAPE)


def gray_images(x):
    """Grayscale a batch of flattened [0,1] images, keeping three channels."""
    im = _as_images(x)
    byte = np.rint(im * 255).astype(np.int64)
    lum = luma_gray(byte[:, 0], byte[:, 1], byte[:, 2]).astype(x.dtype) / 255
    return np.repeat(lum[:, None], 3, axis=1).reshape(x.shape)


def center_crop_images(x, crop_size=28, repad=True):
    im = _as_images(x)
    lo = (32 - crop_size) // 2
    crop = im[:, :, lo:lo + crop_size, lo:lo + crop_size]
    if repad:
        out = np.zeros_like(im)
        out[:, :, lo:lo + crop_size, lo:lo + crop_size] = crop
    else:
        rows = np.arange(32) * crop_size // 32
        out = crop[:, :, rows][:, :, :, rows]
    return out.reshape(x.shape)


def downsample_images(x, factor=2, upsample_back=True):
    if not upsample_back:
        raise ValueError("downsample must upsample back to keep the feature dimension")
    if 32 % factor:
        raise ValueError("factor must divide 32")
    im = _as_images(x)
    n = im.shape[0]
    small = im.reshape(n, 3, 32 // factor, factor, 32 // factor, factor).mean(axis=(3, 5))
    return np.repeat(np.repeat(small, factor, axis=2), factor, axis=3).reshape(x.shape).astype(x.dtype)


@dataclass(frozen=True)
class DomainTransform:
    """Maps domain-0 features into domain 1; output dimension equals input."""

    kind: str = "identity"
    params: dict = field(default_factory=dict)

    KINDS = ("identity", "grayscale_luma", "center_crop", "downsample", "linear_map")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "linear_map":
            m = np.asarray(self.params.get("matrix"), dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError("linear_map needs a square matrix")
            if not np.any(m):
                raise ValueError("degenerate transform: zero matrix")

    def __call__(self, x):
        x = np.asarray(x)
        if self.kind == "identity":
            return x.copy()
        if self.kind == "grayscale_luma":
            return gray_images(x)
        if self.kind == "center_crop":
            return center_crop_images(x, **self.params)
        if self.kind == "downsample":
            return downsample_images(x, **self.params)
        m = np.asarray(self.params["matrix"], dtype=float)
        if x.shape[1] != m.shape[0]:
            raise ValueError(f"matrix is {m.shape}, features have dim {x.shape[1]}")
        return (x @ m.T).astype(x.dtype)


def coordinate_projection(dim, keep):
    """Matrix zeroing all but the first ``keep`` coordinates (rank ``keep``)."""
    if not 1 <= keep <= dim:
        raise ValueError("keep must lie in [1, dim]")
    m = np.zeros((dim, dim))
    m[np.arange(keep), np.arange(keep)] = 1.0
    return m


# ---------------------------------------------------------------- synthetic

@dataclass
class SyntheticConfig:
    """Two-"channel" Gaussian classes; domain 1 averages the channels.

    Features are two halves ``[u + v, u - v]`` of ``feature_dim // 2`` dims
    each: ``u`` is a per-class signal shared by both halves (the analog of
    luminance) and ``v`` a per-class signal carried only by their difference
    (the analog of color).  The default domain-1 map replaces both halves by
    their mean, a rank ``feature_dim // 2`` projection that erases ``v``.
    """

    n_classes: int = 10
    feature_dim: int = 16
    shared_scale: float = 4.0
    channel_scale: float = 1.25
    sigma: float = 1.0
    train_per_class: int = 1000
    val_per_class: int = 200
    test_per_class: int = 500
    means_seed: int = 0
    means: np.ndarray = None
    transform: DomainTransform = None

    def __post_init__(self):
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if min(self.train_per_class, self.val_per_class, self.test_per_class) <= 0:
            raise ValueError("counts must be positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.means is not None:
            self.means = np.asarray(self.means, dtype=float)
            if self.means.shape != (self.n_classes, self.feature_dim):
                raise ValueError("means must have shape (n_classes, feature_dim)")
        elif self.feature_dim % 2:
            raise ValueError("default two-channel layout needs an even feature_dim")

    def class_means(self):
        if self.means is not None:
            return self.means
        return channel_means(self.n_classes, self.feature_dim, self.shared_scale,
                             self.channel_scale, self.means_seed)

    def domain_transform(self):
        if self.transform is not None:
            return self.transform
        return DomainTransform("linear_map", {"matrix": channel_average(self.feature_dim)})


def channel_means(n_classes, dim, shared_scale, channel_scale, seed=0):
    """Centered random class signatures laid out as ``[u + v, u - v]``.

    Scales are the expected norm of ``u`` (resp. ``v``) over the full vector.
    """
    half = dim // 2
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n_classes, half))
    v = rng.standard_normal((n_classes, half))
    u -= u.mean(axis=0)
    v -= v.mean(axis=0)
    u *= shared_scale / np.sqrt(dim)
    v *= channel_scale / np.sqrt(dim)
    return np.hstack([u + v, u - v])


def channel_average(dim):
    """Rank ``dim // 2`` matrix replacing both halves of a vector by their mean."""
    if dim % 2:
        raise ValueError("channel_average needs an even dimension")
    half = np.eye(dim // 2)
    return 0.5 * np.block([[half, half], [half, half]])


def _gaussian_block(cfg, n_per_class, rng):
    means = cfg.class_means()
    y = np.repeat(np.arange(cfg.n_classes), n_per_class)
    x = means[y] + cfg.sigma * rng.standard_normal((len(y), cfg.feature_dim))
    return x, y


def build_synthetic(cfg: SyntheticConfig, spec: SkewSpec, seed):
    """Train/val (skewed per ``spec``) and balanced per-domain test splits."""
    transform = cfg.domain_transform()
    out = {}
    offset = 0
    for k, (split, n) in enumerate((("train", cfg.train_per_class), ("val", cfg.val_per_class))):
        rng = np.random.default_rng(_seed_words(seed, _TAG_SAMPLES, k))
        x, y = _gaussian_block(cfg, n, rng)
        d = skew_domains(y, cfg.n_classes, spec, _seed_words(seed, k), n_domains=2)
        if np.any(d == 1):
            x[d == 1] = transform(x[d == 1])
        out[split] = Dataset(x, y, d, cfg.n_classes, 2, split, offset + np.arange(len(y)))
        offset += len(y)
    for dom in (0, 1):
        rng = np.random.default_rng(_seed_words(seed, _TAG_SAMPLES, 2 + dom))
        x, y = _gaussian_block(cfg, cfg.test_per_class, rng)
        if dom == 1:
            x = transform(x)
        name = f"test_d{dom}"
        out[name] = Dataset(x, y, np.full(len(y), dom), cfg.n_classes, 2, name, offset + np.arange(len(y)))
        offset += len(y)
    return out


# ---------------------------------------------------------------- CIFAR-10S

def read_cifar_batch(path, expected_records=CIFAR_RECORDS_PER_FILE):
    """Labels (uint8) and raw pixel bytes (n, 3072) of one binary batch."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing CIFAR-10 file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise IngestionError(f"truncated CIFAR-10 file {path}: {raw.size} bytes is not a whole number of records")
    recs = raw.reshape(-1, CIFAR_RECORD)
    if expected_records is not None and len(recs) != expected_records:
        raise FormatError(f"{path}: expected {expected_records} records, found {len(recs)}")
    labels = recs[:, 0]
    if labels.max(initial=0) > 9:
        raise FormatError(f"{path}: label byte out of range")
    return labels.astype(np.int64), recs[:, 1:]


def _gray_bytes(pix):
    im = pix.reshape(-1, 3, 1024).astype(np.int64)
    lum = luma_gray(im[:, 0], im[:, 1], im[:, 2])
    return np.repeat(lum[:, None, :], 3, axis=1).reshape(pix.shape)


def build_cifar10s(cifar_dir, spec: SkewSpec = None, seed=0, expected_records=CIFAR_RECORDS_PER_FILE):
    """CIFAR-10S: skewed color/gray train set plus Color and Gray test copies.

    Domain 0 is color, domain 1 grayscale.  With the default ``spec`` classes
    0-4 are mostly color and 5-9 mostly gray.
    """
    spec = spec or SkewSpec.half_split(0.95, 10)
    cifar_dir = Path(cifar_dir)
    ys, pixels = [], []
    for name in CIFAR_TRAIN_FILES:
        y, p = read_cifar_batch(cifar_dir / name, expected_records)
        ys.append(y)
        pixels.append(p)
    y = np.concatenate(ys)
    pix = np.concatenate(pixels)
    d = skew_domains(y, 10, spec, seed)
    gray = d == 1
    pix = pix.copy()
    pix[gray] = _gray_bytes(pix[gray])
    train = Dataset(pix.astype(np.float32) / 255, y, d, 10, 2, "train")

    ty, tp = read_cifar_batch(cifar_dir / CIFAR_TEST_FILE, expected_records)
    n = len(ty)
    base = len(y)
    test_color = Dataset(tp.astype(np.float32) / 255, ty, np.zeros(n), 10, 2, "test_d0", base + np.arange(n))
    test_gray = Dataset(_gray_bytes(tp).astype(np.float32) / 255, ty, np.ones(n), 10, 2, "test_d1",
                        base + n + np.arange(n))
    return {"train": train, "test_color": test_color, "test_gray": test_gray}


def augment(features, seed=None, offset=None, flip=None):
    """Pad 4 zero pixels per side, take a 32x32 crop, flip half the time.

    ``offset`` (row, col) in [0, 8] and ``flip`` pin the random choices; a 2-D
    batch draws them independently per image.
    """
    x = np.asarray(features)
    single = x.ndim == 1
    im = _as_images(x.reshape(1, -1) if single else x)
    n = im.shape[0]
    rng = np.random.default_rng(seed)
    if offset is None:
        offs = rng.integers(0, 9, size=(n, 2))
    else:
        offs = np.broadcast_to(np.asarray(offset), (n, 2))
    flips = rng.random(n) < 0.5 if flip is None else np.broadcast_to(np.asarray(flip, bool), (n,))
    padded = np.pad(im, ((0, 0), (0, 0), (4, 4), (4, 4)))
    out = np.empty_like(im)
    for i in range(n):
        r, c = offs[i]
        crop = padded[i, :, r:r + 32, c:c + 32]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    out = out.reshape(n, -1)
    return out[0] if single else out


# ---------------------------------------------------------------- file format

def _record_dtype(dim):
    return np.dtype([("id", "<u4"), ("y", "<u2"), ("d", "<u2"), ("x", "<f4", (dim,))])


def write_dataset(ds: Dataset, path):
    rec = np.zeros(len(ds), dtype=_record_dtype(ds.feature_dim))
    rec["id"], rec["y"], rec["d"], rec["x"] = ds.ids, ds.y, ds.d, ds.features
    with open(path, "wb") as f:
        f.write(_HEADER.pack(DATASET_MAGIC, len(ds), ds.feature_dim, ds.n_classes, ds.n_domains))
        f.write(rec.tobytes())


def read_dataset(path, split=None) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: file too short for a dataset header")
    magic, n, dim, n_classes, n_domains = _HEADER.unpack_from(data)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    dt = _record_dtype(dim)
    if len(data) - _HEADER.size != n * dt.itemsize:
        raise FormatError(f"{path}: expected {n} records of {dt.itemsize} bytes")
    rec = np.frombuffer(data, dtype=dt, count=n, offset=_HEADER.size)
    return Dataset(rec["x"].astype(np.float32), rec["y"].astype(np.int64), rec["d"].astype(np.int64),
                   n_classes, n_domains, split or Path(path).stem, rec["id"].astype(np.int64))
