"""Datasets: IDX parsing, PCA, binary filtering and synthetic blobs."""
from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import FactorizationError, Rng, ShapeError, cholesky, sym_eig

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATA_ENV = "WCALAB_DATA"
# Largest dimension handed to the Jacobi solver; above it LAPACK is used.
JACOBI_MAX_DIM = 256


class IdxFormatError(ValueError):
    """Malformed or inconsistent IDX input."""


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n, D)
    labels: np.ndarray  # (n,) integer class ids or +-1
    name: str = ""
    chain: tuple[str, ...] = ()
    box: tuple[float, float] = (-np.inf, np.inf)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def provenance(self) -> str:
        return " > ".join((self.name, *self.chain))

    def derive(self, step: str, **changes) -> "LabeledDataset":
        return replace(self, chain=self.chain + (step,), **changes)

    def subset(self, idx, step: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx)
        return self.derive(step or f"subset[{len(idx)}]", features=self.features[idx], labels=self.labels[idx])


# --------------------------------------------------------------------------
# IDX files


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Raw unsigned-byte array from an IDX image (0x803) or label (0x801) file."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        if len(raw) < 16:
            raise IdxFormatError(f"{path}: truncated header")
        n, rows, cols = struct.unpack(">III", raw[4:16])
        shape, offset = (n, rows, cols), 16
    elif magic == IDX_LABELS_MAGIC:
        (n,) = struct.unpack(">I", raw[4:8])
        shape, offset = (n,), 8
    else:
        raise IdxFormatError(f"{path}: bad magic number 0x{magic:08X}")
    expected = int(np.prod(shape))
    body = raw[offset:]
    if len(body) < expected:
        raise IdxFormatError(f"{path}: truncated data ({len(body)} of {expected} bytes)")
    return np.frombuffer(body[:expected], dtype=np.uint8).reshape(shape)


def write_idx(path, array: np.ndarray) -> Path:
    """Write uint8 images (n, rows, cols) or labels (n,) in IDX format."""
    path = Path(path)
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise TypeError("IDX payload must be uint8")
    if a.ndim == 3:
        header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *a.shape)
    elif a.ndim == 1:
        header = struct.pack(">II", IDX_LABELS_MAGIC, a.shape[0])
    else:
        raise ShapeError(f"IDX payload must be 1-D labels or 3-D images, got {a.shape}")
    payload = header + a.tobytes()
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)
    return path


def load_idx(images_path, labels_path, name: str | None = None) -> LabeledDataset:
    """Pair an image file with a label file; pixels are scaled to [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: not an image file")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: not a label file")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(X, labels.astype(np.int64), name=name or Path(images_path).name,
                          chain=("bytes/255",), box=(0.0, 1.0))


def data_root(explicit=None) -> Path:
    """``explicit`` if given, else ``$WCALAB_DATA``, else ``./data``."""
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(DATA_ENV, "data"))


def find_mnist(root, split: str = "train") -> tuple[Path, Path]:
    """Locate ``{split}-images-idx3-ubyte[.gz]`` and its label file under ``root``."""
    prefix = "train" if split == "train" else "t10k"
    root = Path(root)
    for sub in (root, root / "mnist"):
        for ext in ("", ".gz"):
            img = sub / f"{prefix}-images-idx3-ubyte{ext}"
            lab = sub / f"{prefix}-labels-idx1-ubyte{ext}"
            if img.exists() and lab.exists():
                return img, lab
    raise FileNotFoundError(f"no MNIST {split} files under {root}")


def load_mnist(root, split: str = "train") -> LabeledDataset:
    img, lab = find_mnist(root, split)
    return load_idx(img, lab, name=f"mnist-{split}")


# --------------------------------------------------------------------------
# PCA


@dataclass
class PcaModel:
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (k, D), orthonormal rows
    explained: np.ndarray = field(default_factory=lambda: np.zeros(0))  # eigenvalues of kept components

    @property
    def k(self) -> int:
        return self.components.shape[0]


def _eigh_desc(c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if c.shape[0] <= JACOBI_MAX_DIM:
        return sym_eig(c)
    vals, vecs = np.linalg.eigh(c)
    return vals[::-1], vecs[:, ::-1]


def pca_fit(X, k: int) -> PcaModel:
    """Top-k eigenvectors of the (1/n) covariance of X.

    Each component's sign is fixed so its largest-magnitude entry is
    positive, which makes the fit reproducible.
    """
    X = np.asarray(X, dtype=np.float64)
    n, D = X.shape
    if not 1 <= k <= min(n, D):
        raise ValueError(f"k={k} must lie in [1, min(n, D)] = [1, {min(n, D)}]")
    mu = X.mean(axis=0)
    Xc = X - mu
    cov = Xc.T @ Xc / n
    cov = 0.5 * (cov + cov.T)
    vals, vecs = _eigh_desc(cov)
    comps = vecs[:, :k].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(mu, comps, vals[:k].copy())


def pca_transform(pca: PcaModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != pca.mean.shape[0]:
        raise ShapeError(f"PCA expects {pca.mean.shape[0]} features, got {X.shape[-1]}")
    return (X - pca.mean) @ pca.components.T


def pca_inverse(pca: PcaModel, Z) -> np.ndarray:
    return np.asarray(Z) @ pca.components + pca.mean


# --------------------------------------------------------------------------
# Label handling and splits


def filter_binary(ds: LabeledDataset, class_a: int, class_b: int) -> LabeledDataset:
    """Keep two classes; ``class_a`` becomes +1 and ``class_b`` becomes -1."""
    ia = ds.labels == class_a
    ib = ds.labels == class_b
    if not ia.any() or not ib.any():
        missing = class_a if not ia.any() else class_b
        raise ValueError(f"class {missing} has no examples in {ds.name}")
    keep = ia | ib
    y = np.where(ia[keep], 1, -1)
    return ds.derive(f"binary({class_a}:+1,{class_b}:-1)", features=ds.features[keep], labels=y)


def split_by_index(ds: LabeledDataset, fraction: float = 0.9) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic split: the first ``fraction`` of rows vs the rest."""
    cut = int(round(fraction * len(ds)))
    idx = np.arange(len(ds))
    return ds.subset(idx[:cut], f"split[:{cut}]"), ds.subset(idx[cut:], f"split[{cut}:]")


def make_blobs(rng: Rng, n_per_class: int, means, covariances, box: tuple[float, float] | None = None,
               name: str = "blobs") -> LabeledDataset:
    """Gaussian class-conditional samples, classes interleaved row by row.

    ``box`` clips the samples into a bounding interval when given.
    """
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    c, D = means.shape
    covs = np.asarray(covariances, dtype=np.float64)
    if covs.ndim == 2:
        covs = np.broadcast_to(covs, (c, D, D))
    if covs.shape != (c, D, D):
        raise ShapeError(f"covariances {covs.shape} do not match means {means.shape}")
    factors = []
    for cov in covs:
        try:
            factors.append(cholesky(cov))
        except FactorizationError as exc:
            raise FactorizationError(f"blob covariance is not PSD: {exc}") from exc
    X = np.empty((n_per_class * c, D))
    for i in range(c):
        X[i::c] = means[i] + rng.gaussian((n_per_class, D)) @ factors[i].T
    y = np.tile(np.arange(c), n_per_class)
    chain = (f"blobs(n={n_per_class},c={c})",)
    if box is not None:
        X = np.clip(X, *box)
        chain += (f"clip{tuple(box)}",)
    return LabeledDataset(X, y, name=name, chain=chain, box=tuple(box) if box else (-np.inf, np.inf))


def export_csv(ds: LabeledDataset, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# source: {ds.provenance}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", *[f"x{j}" for j in range(ds.features.shape[1])]])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([int(y), *[repr(float(v)) for v in x]])
    return path
