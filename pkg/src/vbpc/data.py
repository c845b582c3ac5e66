"""Datasets, coreset initialization, and the coreset file format.

Synthetic generators stand in for the image benchmarks at desk scale; the
IDX loader ingests MNIST-format files. Coresets round-trip through a small
versioned, checksummed little-endian binary format (magic "VBPC").
"""

import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .posterior import Hyperparams

MAGIC = b"VBPC"
FORMAT_VERSION = 1
STD_FLOOR = 1e-8
_IDX_IMAGES_MAGIC = 2051
_IDX_LABELS_MAGIC = 2049


class CoresetFileError(Exception):
    pass


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, integer class labels, and normalization stats."""

    X: np.ndarray
    labels: np.ndarray
    k: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    def onehot(self, idx=None):
        which = self.labels if idx is None else self.labels[idx]
        return np.eye(self.k)[which]


@dataclass(frozen=True)
class PseudoCoreset:
    """Learnable images (nhat x d) and real-valued labels (nhat x k)."""

    images: np.ndarray
    labels: np.ndarray
    ipc: int
    hyper: Hyperparams

    @property
    def nhat(self):
        return self.images.shape[0]

    @property
    def k(self):
        return self.labels.shape[1]

    def with_arrays(self, images, labels):
        return replace(self, images=images, labels=labels)


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------

def _balanced_counts(n, k):
    base, extra = divmod(n, k)
    return [base + (1 if c < extra else 0) for c in range(k)]


def gen_synthetic(kind, n, k, noise, seed):
    """blobs: k Gaussian clusters on a circle of radius 4; moons/circles:
    the standard 2-class shapes. Deterministic per seed."""
    if kind not in ("blobs", "moons", "circles"):
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if kind in ("moons", "circles") and k != 2:
        raise ValueError(f"{kind} is a 2-class shape, got k={k}")
    if not n >= k >= 2:
        raise ValueError(f"need n >= k >= 2, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    counts = _balanced_counts(n, k)

    if kind == "blobs":
        xs, ys = [], []
        for c, m in enumerate(counts):
            angle = 2.0 * np.pi * c / k
            center = 4.0 * np.array([np.cos(angle), np.sin(angle)])
            xs.append(center + noise * rng.standard_normal((m, 2)))
            ys.append(np.full(m, c))
        X = np.concatenate(xs)
        labels = np.concatenate(ys).astype(np.int64)
    elif kind == "moons":
        n0, n1 = counts
        t0 = np.linspace(0.0, np.pi, n0)
        t1 = np.linspace(0.0, np.pi, n1)
        outer = np.column_stack([np.cos(t0), np.sin(t0)])
        inner = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
        X = np.concatenate([outer, inner]) + noise * rng.standard_normal((n, 2))
        labels = np.concatenate([np.zeros(n0), np.ones(n1)]).astype(np.int64)
    else:
        n0, n1 = counts
        t0 = np.linspace(0.0, 2.0 * np.pi, n0, endpoint=False)
        t1 = np.linspace(0.0, 2.0 * np.pi, n1, endpoint=False)
        outer = np.column_stack([np.cos(t0), np.sin(t0)])
        inner = 0.5 * np.column_stack([np.cos(t1), np.sin(t1)])
        X = np.concatenate([outer, inner]) + noise * rng.standard_normal((n, 2))
        labels = np.concatenate([np.zeros(n0), np.ones(n1)]).astype(np.int64)
    return Dataset(X=X, labels=labels, k=k)


# ---------------------------------------------------------------------------
# IDX ingestion
# ---------------------------------------------------------------------------

def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise CoresetFileError(
            f"truncated IDX {what}: expected {count} bytes, got {len(data)}")
    return data


def load_idx(images_path, labels_path):
    """Parse big-endian IDX images (u8 pixels scaled to [0,1]) and labels."""
    with open(images_path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">iiii", _read_exact(fh, 16, "image header"))
        if magic != _IDX_IMAGES_MAGIC:
            raise CoresetFileError(
                f"bad images magic 0x{magic:08x}, expected 0x{_IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(fh, n * rows * cols, "image payload")
    X = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols) / 255.0

    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">ii", _read_exact(fh, 8, "label header"))
        if magic != _IDX_LABELS_MAGIC:
            raise CoresetFileError(
                f"bad labels magic 0x{magic:08x}, expected 0x{_IDX_LABELS_MAGIC:08x}")
        raw = _read_exact(fh, n_labels, "label payload")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if n_labels != n:
        raise CoresetFileError(f"count mismatch: {n} images vs {n_labels} labels")
    return Dataset(X=X, labels=labels, k=int(labels.max()) + 1)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize(dataset):
    """Per-feature standardization; stats are stored for reuse on test data."""
    if dataset.n < 2:
        raise ValueError("need at least 2 rows to estimate statistics")
    mean = dataset.X.mean(axis=0)
    std = np.maximum(dataset.X.std(axis=0), STD_FLOOR)
    return replace(dataset, X=(dataset.X - mean) / std, mean=mean, std=std)


def normalize_with(dataset, mean, std):
    """Apply previously estimated (train) statistics, e.g. to a test split."""
    return replace(dataset, X=(dataset.X - mean) / std, mean=mean, std=std)


# ---------------------------------------------------------------------------
# coreset initialization
# ---------------------------------------------------------------------------

def scaled_onehot_labels(classes, k):
    """Rows (e_c - 1/k) / sqrt(k/10): mean-centered, class-count scaled."""
    eye = np.eye(k)
    return (eye[classes] - 1.0 / k) / np.sqrt(k / 10.0)


def init_coreset(dataset, ipc, mode, seed, hyper=None):
    """ipc rows per class: class-stratified samples of the dataset, or
    uniform [0,1] pixels passed through the dataset's normalization."""
    if mode not in ("sample", "uniform"):
        raise ValueError(f"unknown init mode {mode!r}")
    rng = np.random.default_rng(seed)
    k = dataset.k
    classes = np.repeat(np.arange(k), ipc)
    if mode == "sample":
        rows = []
        for c in range(k):
            pool = np.flatnonzero(dataset.labels == c)
            if pool.size < ipc:
                raise ValueError(f"class {c} has {pool.size} examples, need {ipc}")
            rows.append(rng.choice(pool, size=ipc, replace=False))
        images = dataset.X[np.concatenate(rows)].copy()
    else:
        images = rng.uniform(0.0, 1.0, (ipc * k, dataset.d))
        if dataset.mean is not None:
            images = (images - dataset.mean) / dataset.std
    labels = scaled_onehot_labels(classes, k)
    if hyper is None:
        hyper = Hyperparams(rho=1.0, gamma=100.0, beta_s=float(ipc * k),
                            beta_d=1e-8)
    return PseudoCoreset(images=images, labels=labels, ipc=ipc, hyper=hyper)


# ---------------------------------------------------------------------------
# coreset file format: magic | version u32 | nhat,d,k,ipc u32 |
# rho,gamma,beta_s,beta_d f64 | X then Y row-major f64 | crc32 u32,
# everything little-endian
# ---------------------------------------------------------------------------

def save_coreset(coreset, path):
    nhat, d = coreset.images.shape
    k = coreset.labels.shape[1]
    h = coreset.hyper
    body = bytearray()
    body += MAGIC
    body += struct.pack("<IIIII", FORMAT_VERSION, nhat, d, k, coreset.ipc)
    body += struct.pack("<dddd", h.rho, h.gamma, h.beta_s, h.beta_d)
    body += np.ascontiguousarray(coreset.images, dtype="<f8").tobytes()
    body += np.ascontiguousarray(coreset.labels, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_coreset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + 20 + 32 + 4 or blob[:4] != MAGIC:
        raise CoresetFileError("not a VBPC coreset file (bad magic or truncated)")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CoresetFileError("checksum mismatch: file is corrupted")
    version, nhat, d, k, ipc = struct.unpack("<IIIII", blob[4:24])
    if version != FORMAT_VERSION:
        raise CoresetFileError(
            f"unsupported format version {version}, reader supports {FORMAT_VERSION}")
    rho, gamma, beta_s, beta_d = struct.unpack("<dddd", blob[24:56])
    need = 56 + 8 * nhat * (d + k) + 4
    if len(blob) != need:
        raise CoresetFileError(f"payload size mismatch: expected {need} bytes, "
                               f"got {len(blob)}")
    images = np.frombuffer(blob, dtype="<f8", count=nhat * d, offset=56)
    labels = np.frombuffer(blob, dtype="<f8", count=nhat * k,
                           offset=56 + 8 * nhat * d)
    hyper = Hyperparams(rho=rho, gamma=gamma, beta_s=beta_s, beta_d=beta_d,
                        nhat=nhat, k=k)
    return PseudoCoreset(images=images.reshape(nhat, d).copy(),
                         labels=labels.reshape(nhat, k).copy(),
                         ipc=ipc, hyper=hyper)
