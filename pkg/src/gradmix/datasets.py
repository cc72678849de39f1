"""Digit data: IDX files, label-space partitions, synthetic domain shift, splits and samplers."""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "GRADMIX_DATA_DIR"
DEFAULT_HYPER_SEED = 20190101


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class InsufficientSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    name: str
    label_space: tuple[int, ...]
    head_id: str
    relation_to_target: str = "same"

    def __post_init__(self):
        object.__setattr__(self, "label_space", tuple(int(c) for c in self.label_space))
        if not self.label_space:
            raise ValueError(f"domain {self.name!r} has an empty label space")
        if len(set(self.label_space)) != len(self.label_space):
            raise ValueError(f"domain {self.name!r} has duplicate classes")
        if self.relation_to_target not in ("same", "partial-overlap", "disjoint"):
            raise ValueError(f"bad relation {self.relation_to_target!r}")

    @property
    def n_classes(self) -> int:
        return len(self.label_space)


def check_domains(domains: Sequence[DomainSpec]) -> None:
    same = [d.name for d in domains if d.relation_to_target == "same"]
    if len(same) != 1:
        raise ValueError(f"exactly one source must share the target label space, got {same}")


@dataclass
class LabeledDataset:
    """Images ``(N, H, W, C)`` in [0, 1] with head-local labels.

    ``labels[i]`` indexes ``domain.label_space``; ``rows`` are the indices of
    the samples in the file they were loaded from.
    """

    domain: DomainSpec
    images: np.ndarray
    labels: np.ndarray
    rows: np.ndarray = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows is None:
            self.rows = np.arange(len(self.labels))
        self.rows = np.asarray(self.rows, dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.rows)):
            raise CountMismatchError(
                f"{len(self.images)} images vs {len(self.labels)} labels vs {len(self.rows)} rows"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.domain, self.images[idx], self.labels[idx], self.rows[idx])

    @property
    def class_ids(self) -> np.ndarray:
        """Labels translated back to the original class ids."""
        return np.asarray(self.domain.label_space)[self.labels]

    def with_domain(self, domain: DomainSpec) -> "LabeledDataset":
        if domain.label_space != self.domain.label_space:
            raise ValueError("relabelling a dataset must keep its label space")
        return replace(self, domain=domain)


@dataclass
class UnlabeledDataset:
    """Target images whose labels are withheld from training.

    The ground truth is kept on the side so evaluation tools can score pseudo
    labels; read it only through :func:`unseal_labels`.
    """

    domain: DomainSpec
    images: np.ndarray
    rows: np.ndarray
    _sealed: np.ndarray = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "UnlabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        sealed = None if self._sealed is None else self._sealed[idx]
        return UnlabeledDataset(self.domain, self.images[idx], self.rows[idx], sealed)


def unseal_labels(u: UnlabeledDataset) -> np.ndarray:
    if u._sealed is None:
        raise ValueError("no sealed ground truth attached to this unlabeled set")
    return u._sealed


# ----------------------------------------------------------------------------
# IDX files


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic, ndim):
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file shorter than the IDX magic")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims))
    if len(raw) - head < n:
        raise TruncatedFileError(f"{path}: expected {n} data bytes, found {len(raw) - head}")
    if len(raw) - head > n:
        raise IdxFormatError(f"{path}: {len(raw) - head - n} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    """Raw uint8 images ``(N, rows, cols)``."""
    return _read_idx(path, IDX_IMAGES_MAGIC, 3)


def read_idx_labels(path) -> np.ndarray:
    return _read_idx(path, IDX_LABELS_MAGIC, 1)


def write_idx(path, array) -> None:
    """Writes a uint8 array as IDX (3-d images or 1-d labels); gzips on ``.gz``."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("IDX writer only supports uint8 data")
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}.get(arr.ndim)
    if magic is None:
        raise ValueError("IDX writer expects 3-d images or 1-d labels")
    blob = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        # no file name or timestamp in the header, so output depends only on content
        with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as f:
            f.write(blob)
    else:
        path.write_bytes(blob)


def load_idx(images_path, labels_path, name="mnist", head_id=None) -> LabeledDataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    space = tuple(int(c) for c in np.unique(labels)) or (0,)
    lookup = np.zeros(256, dtype=np.int64)
    lookup[list(space)] = np.arange(len(space))
    domain = DomainSpec(name, space, head_id or name)
    return LabeledDataset(domain, images.astype(np.float64) / 255.0, lookup[labels])


def to_idx_arrays(ds: LabeledDataset):
    """``(uint8 images, uint8 class ids)`` ready for :func:`write_idx`."""
    if ds.images.shape[-1] != 1:
        raise ValueError("IDX export supports single-channel images only")
    imgs = np.rint(ds.images[..., 0] * 255.0).astype(np.uint8)
    return imgs, ds.class_ids.astype(np.uint8)


def bundled_digits() -> LabeledDataset:
    """10,000 real MNIST digits (about 1,000 per class) shipped with the package."""
    base = resources.files("gradmix") / "data"
    with resources.as_file(base / "digits10k-images-idx3-ubyte.gz") as ip, \
            resources.as_file(base / "digits10k-labels-idx1-ubyte.gz") as lp:
        return load_idx(ip, lp, name="digits10k")


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


# ----------------------------------------------------------------------------
# label spaces and shifts


def partition_by_labels(ds: LabeledDataset, classes, name=None, head_id=None,
                        relation="same") -> LabeledDataset:
    """Rows whose class id is in ``classes``, relabelled to a contiguous local space.

    The new label space lists the kept class ids in the order given.
    """
    classes = tuple(int(c) for c in classes)
    unknown = set(classes) - set(ds.domain.label_space)
    if unknown:
        raise ValueError(f"classes {sorted(unknown)} not in label space {ds.domain.label_space}")
    ids = ds.class_ids
    keep = np.flatnonzero(np.isin(ids, classes))
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[c] for c in ids[keep]], dtype=np.int64)
    domain = DomainSpec(name or ds.domain.name, classes or ds.domain.label_space,
                        head_id or ds.domain.head_id, relation)
    return LabeledDataset(domain, ds.images[keep], labels, ds.rows[keep])


def _rotate(images, degrees):
    # bilinear about the image centre; exact on affine intensity ramps
    return ndimage.rotate(images, degrees, axes=(2, 1), reshape=False, order=1,
                          mode="constant", cval=0.0, prefilter=False)


def synth_shift(ds: LabeledDataset, transforms, seed=0, name=None,
                relation=None) -> LabeledDataset:
    """Applies ``transforms`` in order, then clamps to [0, 1].

    Each transform is ``"invert"``, ``("gaussian-noise", sigma)`` or
    ``("rotate", degrees)`` with degrees in [-180, 180].
    """
    if isinstance(transforms, (str, tuple)):
        transforms = [transforms]
    rng = np.random.default_rng(seed)
    x = ds.images.copy()
    for t in transforms:
        kind, *args = (t,) if isinstance(t, str) else tuple(t)
        if kind == "invert":
            x = 1.0 - x
        elif kind == "gaussian-noise":
            (sigma,) = args
            if not sigma >= 0:
                raise ValueError(f"noise sigma must be >= 0, got {sigma}")
            if sigma > 0:
                x = x + sigma * rng.standard_normal(x.shape)
        elif kind == "rotate":
            (deg,) = args
            if not -180.0 <= deg <= 180.0:
                raise ValueError(f"rotation must lie in [-180, 180] degrees, got {deg}")
            x = _rotate(x, deg)
        else:
            raise ValueError(f"unknown transform {kind!r}")
        x = np.clip(x, 0.0, 1.0)
    domain = ds.domain
    if name is not None or relation is not None:
        domain = DomainSpec(name or domain.name, domain.label_space, domain.head_id,
                            relation or domain.relation_to_target)
    return LabeledDataset(domain, x, ds.labels.copy(), ds.rows.copy())


def downsample(ds: LabeledDataset, factor: int) -> LabeledDataset:
    """Block-average pooling of the images by an integer factor."""
    if factor == 1:
        return ds
    n, h, w, c = ds.images.shape
    hh, ww = h // factor, w // factor
    x = ds.images[:, : hh * factor, : ww * factor].reshape(n, hh, factor, ww, factor, c).mean(axis=(2, 4))
    return replace(ds, images=x)


# ----------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitPlan:
    k_per_class: int
    hyper_val_size: int
    seed: int
    hyper_seed: int = DEFAULT_HYPER_SEED

    def __post_init__(self):
        if self.k_per_class < 1:
            raise ValueError("k_per_class must be >= 1")
        if self.hyper_val_size < 0:
            raise ValueError("hyper_val_size must be >= 0")


@dataclass
class Splits:
    val: LabeledDataset
    hyper_val: LabeledDataset
    unlabeled: UnlabeledDataset
    plan: SplitPlan
    val_idx: np.ndarray
    hyper_idx: np.ndarray
    unlabeled_idx: np.ndarray

    def __iter__(self):
        return iter((self.val, self.hyper_val, self.unlabeled))

    def manifest(self) -> dict:
        return {
            "k_per_class": self.plan.k_per_class,
            "hyper_val_size": self.plan.hyper_val_size,
            "seed": self.plan.seed,
            "hyper_seed": self.plan.hyper_seed,
            "val_rows": self.val_idx.tolist(),
            "hyper_val_rows": self.hyper_idx.tolist(),
            "unlabeled_rows": self.unlabeled_idx.tolist(),
        }


def make_splits(ds: LabeledDataset, plan: SplitPlan) -> Splits:
    """Hyper-validation (fixed seed), then k-per-class V (run seed), rest is U.

    Indices refer to positions in ``ds``.  The hyper-validation draw depends
    only on ``plan.hyper_seed`` so it stays fixed while V is resampled.
    """
    n = len(ds)
    if plan.hyper_val_size > n:
        raise InsufficientSamplesError(f"hyper-validation wants {plan.hyper_val_size} of {n} rows")
    hyper = np.sort(np.random.default_rng(plan.hyper_seed).permutation(n)[: plan.hyper_val_size])
    remaining = np.setdiff1d(np.arange(n), hyper)
    rng = np.random.default_rng(plan.seed)
    val = []
    for c in range(ds.domain.n_classes):
        pool = remaining[ds.labels[remaining] == c]
        if len(pool) < plan.k_per_class:
            cid = ds.domain.label_space[c]
            raise InsufficientSamplesError(
                f"class {cid} has {len(pool)} samples left after hyper-validation, "
                f"needs {plan.k_per_class}"
            )
        val.append(rng.choice(pool, plan.k_per_class, replace=False))
    val = np.sort(np.concatenate(val))
    unl = np.setdiff1d(remaining, val)
    u = UnlabeledDataset(ds.domain, ds.images[unl], ds.rows[unl], ds.labels[unl].copy())
    return Splits(ds.subset(val), ds.subset(hyper), u, plan, val, hyper, unl)


def replay_splits(ds: LabeledDataset, manifest: dict) -> Splits:
    plan = SplitPlan(manifest["k_per_class"], manifest["hyper_val_size"], manifest["seed"],
                     manifest["hyper_seed"])
    val = np.asarray(manifest["val_rows"], dtype=np.int64)
    hyper = np.asarray(manifest["hyper_val_rows"], dtype=np.int64)
    unl = np.asarray(manifest["unlabeled_rows"], dtype=np.int64)
    u = UnlabeledDataset(ds.domain, ds.images[unl], ds.rows[unl], ds.labels[unl].copy())
    return Splits(ds.subset(val), ds.subset(hyper), u, plan, val, hyper, unl)


# ----------------------------------------------------------------------------
# mini-batches


class BatchStream:
    """Seeded epoch-wise shuffling over ``n`` rows.

    Epoch ``e`` uses its own generator seeded by ``(seed, e)`` so any epoch can
    be replayed without running the earlier ones.  The last batch of an epoch
    may be short.
    """

    def __init__(self, n: int, batch_size: int, seed: int):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if n < 1:
            raise ValueError("cannot iterate over an empty dataset")
        self.n, self.batch_size, self.seed = n, batch_size, seed

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(self.n)

    def epoch(self, epoch: int) -> list[np.ndarray]:
        order = self.epoch_order(epoch)
        return [order[i : i + self.batch_size] for i in range(0, self.n, self.batch_size)]

    def __iter__(self) -> Iterator[np.ndarray]:
        e = 0
        while True:
            yield from self.epoch(e)
            e += 1


def batch_iter(ds, batch_size: int, seed: int, targets=None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless ``(images, targets)`` batches; ``targets`` defaults to ``ds.labels``."""
    targets = ds.labels if targets is None else targets
    for idx in BatchStream(len(ds), batch_size, seed):
        yield ds.images[idx], targets[idx]


# ----------------------------------------------------------------------------
# synthetic toy digits


def synthetic_digits(n_per_class=200, classes=range(10), size=14, seed=0,
                     noise=0.15) -> LabeledDataset:
    """Self-contained toy digits: one smooth random prototype per class plus jitter.

    Prototypes come from a fixed generator, so the class structure does not
    depend on ``seed``; samples do.
    """
    classes = tuple(classes)
    proto_rng = np.random.default_rng(1234)
    protos = {}
    for c in range(max(classes) + 1):
        p = ndimage.gaussian_filter(proto_rng.random((size, size)), sigma=size / 7)
        p = (p - p.min()) / (p.max() - p.min())
        protos[c] = (p > 0.55).astype(float) * p
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for local, c in enumerate(classes):
        for _ in range(n_per_class):
            dy, dx = rng.integers(-1, 2, size=2)
            img = np.roll(protos[c], (dy, dx), axis=(0, 1))
            img = img * rng.uniform(0.7, 1.0) + noise * rng.standard_normal(img.shape)
            images.append(np.clip(img, 0, 1))
            labels.append(local)
    domain = DomainSpec("synthetic", classes, "synthetic")
    return LabeledDataset(domain, np.array(images)[..., None], np.array(labels))


def digest(obj) -> str:
    """Short stable hash of JSON-serialisable data."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
