"""Dataset ingestion, seeded corruption protocols, and train/validation splits.

Feature vectors are float64, flattened row-major from image grids and scaled
by 1/255 into [0,1] at ingestion time. Every sample carries its stable id,
its true label, its effective label (what a model is trained against), and a
corruption flag, so downstream stages can always partition clean vs corrupt.

Datasets are immutable after construction (backing arrays are marked
read-only); corruption returns a new dataset.
"""

from __future__ import annotations

import enum
import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

log = logging.getLogger("marginlab.data")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class Corruption(enum.IntEnum):
    """Per-sample corruption flag (stored as uint8 in the columnar arrays)."""

    CLEAN = 0
    LABEL_CORRUPTED = 1
    INPUT_CORRUPTED = 2


class CorruptionKind(str, enum.Enum):
    """Which corruption protocol a CorruptionSpec applies."""

    NONE = "none"
    LABEL = "label"
    GAUSSIAN_INPUT = "gaussian_input"


class IdxFormatError(ValueError):
    """Raised for malformed IDX files; message states which check failed."""


@dataclass(frozen=True)
class CorruptionSpec:
    kind: CorruptionKind
    fraction: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "kind", CorruptionKind(self.kind))
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"corruption fraction must lie in [0,1], got {self.fraction}")
        if (self.fraction == 0.0) != (self.kind == CorruptionKind.NONE):
            raise ValueError(
                f"fraction must be 0 exactly when kind is 'none' (kind={self.kind.value}, "
                f"fraction={self.fraction})"
            )


@dataclass(frozen=True)
class Sample:
    """A single labeled sample (a read-only view into its dataset)."""

    id: int
    features: np.ndarray
    true_label: int
    effective_label: int
    corruption: Corruption


@dataclass
class LabeledDataset:
    """Columnar dataset: ids, features (n, d), labels, and corruption flags."""

    ids: np.ndarray
    features: np.ndarray
    true_labels: np.ndarray
    effective_labels: np.ndarray
    corruption: np.ndarray
    num_classes: int
    split: str = "train"
    corruption_fraction: float = 0.0

    def __post_init__(self):
        n = len(self.ids)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError("features must be (n_samples, d)")
        for arr in (self.true_labels, self.effective_labels, self.corruption):
            if arr.shape != (n,):
                raise ValueError("label/flag arrays must be 1-D of length n_samples")
        for arr in (self.ids, self.features, self.true_labels,
                    self.effective_labels, self.corruption):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def sample(self, index: int) -> Sample:
        return Sample(
            id=int(self.ids[index]),
            features=self.features[index],
            true_label=int(self.true_labels[index]),
            effective_label=int(self.effective_labels[index]),
            corruption=Corruption(int(self.corruption[index])),
        )

    def __iter__(self):
        return (self.sample(k) for k in range(len(self)))

    def subset(self, indices: np.ndarray, split: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            ids=self.ids[indices].copy(),
            features=self.features[indices].copy(),
            true_labels=self.true_labels[indices].copy(),
            effective_labels=self.effective_labels[indices].copy(),
            corruption=self.corruption[indices].copy(),
            num_classes=self.num_classes,
            split=split if split is not None else self.split,
            corruption_fraction=self.corruption_fraction,
        )

    def check_invariants(self) -> None:
        """Assert the per-sample corruption invariants; raises on violation."""
        flags = self.corruption
        eff, true = self.effective_labels, self.true_labels
        if np.any(eff[flags == Corruption.CLEAN] != true[flags == Corruption.CLEAN]):
            raise AssertionError("clean sample with effective_label != true_label")
        if np.any(eff[flags == Corruption.LABEL_CORRUPTED]
                  == true[flags == Corruption.LABEL_CORRUPTED]):
            raise AssertionError("label-corrupted sample with unchanged label")
        if np.any(eff[flags == Corruption.INPUT_CORRUPTED]
                  != true[flags == Corruption.INPUT_CORRUPTED]):
            raise AssertionError("input-corrupted sample with changed label")


def round_half_up(x: float) -> int:
    """Rounding rule for corruption counts: 0.5 rounds up, so 20% of 55000 = 11000."""
    return int(np.floor(x + 0.5))


# ---------------------------------------------------------------------------
# IDX binary format (big-endian header; ubyte payload)
# ---------------------------------------------------------------------------

def read_idx_images(path) -> np.ndarray:
    """Read an IDX ubyte image file -> uint8 array (n, rows, cols)."""
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise IdxFormatError(f"{path}: truncated IDX image header")
        magic, n, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"{path}: bad IDX image magic 0x{magic:08x} (expected 0x{IDX_IMAGES_MAGIC:08x})"
            )
        payload = fh.read(n * rows * cols)
    if len(payload) != n * rows * cols:
        raise IdxFormatError(
            f"{path}: truncated IDX image payload ({len(payload)} bytes, "
            f"expected {n * rows * cols})"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    """Read an IDX ubyte label file -> uint8 array (n,)."""
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise IdxFormatError(f"{path}: truncated IDX label header")
        magic, n = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"{path}: bad IDX label magic 0x{magic:08x} (expected 0x{IDX_LABELS_MAGIC:08x})"
            )
        payload = fh.read(n)
    if len(payload) != n:
        raise IdxFormatError(
            f"{path}: truncated IDX label payload ({len(payload)} bytes, expected {n})"
        )
    return np.frombuffer(payload, dtype=np.uint8)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write a uint8 array (n, rows, cols) as an IDX image file."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def load_idx_dataset(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Ingest an IDX image/label file pair into a clean train-split dataset.

    Features are flattened row-major to d = rows*cols and scaled by 1/255.
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(
            f"image/label count mismatch: {len(images)} images vs {len(labels)} labels"
        )
    n = len(images)
    features = images.reshape(n, -1).astype(np.float64) / 255.0
    true = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(true.max()) + 1 if n else 0
    return LabeledDataset(
        ids=np.arange(n, dtype=np.int64),
        features=features,
        true_labels=true,
        effective_labels=true.copy(),
        corruption=np.zeros(n, dtype=np.uint8),
        num_classes=num_classes,
        split="train",
        corruption_fraction=0.0,
    )


# ---------------------------------------------------------------------------
# Corruption protocols
# ---------------------------------------------------------------------------

def _pick_corrupted_indices(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    k = round_half_up(fraction * n)
    return np.sort(rng.choice(n, size=k, replace=False))


def corrupt_labels(ds: LabeledDataset, spec: CorruptionSpec,
                   rng_seed: int | None = None) -> LabeledDataset:
    """Flip the effective label of round(fraction*n) samples to a random other class.

    Selection is uniform without replacement; the replacement label is uniform
    over the other classes. Features are untouched. Deterministic per seed.
    """
    if spec.kind != CorruptionKind.LABEL:
        raise ValueError(f"corrupt_labels needs a 'label' spec, got {spec.kind.value}")
    if ds.split != "train":
        raise ValueError("label corruption applies to the train split only")
    if ds.num_classes < 2:
        raise ValueError("label corruption needs >= 2 classes (no alternative label exists)")
    rng = np.random.default_rng(spec.seed if rng_seed is None else rng_seed)
    picked = _pick_corrupted_indices(len(ds), spec.fraction, rng)

    effective = ds.effective_labels.copy()
    flags = ds.corruption.copy()
    # uniform over N \ {true}: draw in [0, C-1) and skip past the true label
    draws = rng.integers(0, ds.num_classes - 1, size=len(picked))
    true_picked = ds.true_labels[picked]
    effective[picked] = draws + (draws >= true_picked)
    flags[picked] = Corruption.LABEL_CORRUPTED

    out = LabeledDataset(
        ids=ds.ids.copy(),
        features=ds.features,
        true_labels=ds.true_labels,
        effective_labels=effective,
        corruption=flags,
        num_classes=ds.num_classes,
        split=ds.split,
        corruption_fraction=spec.fraction,
    )
    out.check_invariants()
    return out


def corrupt_inputs_gaussian(ds: LabeledDataset, spec: CorruptionSpec,
                            rng_seed: int | None = None) -> LabeledDataset:
    """Resample the features of round(fraction*n) samples from N(mu_x, sigma_x).

    mu_x / sigma_x are the mean and (population) standard deviation of the
    original sample's own features. Labels are preserved. Resampled features
    are not clipped to [0,1]. A constant sample (sigma_x = 0) is emitted
    unchanged with a warning: a zero-width normal is the point mass at mu_x.
    """
    if spec.kind != CorruptionKind.GAUSSIAN_INPUT:
        raise ValueError(f"corrupt_inputs_gaussian needs a 'gaussian_input' spec, "
                         f"got {spec.kind.value}")
    rng = np.random.default_rng(spec.seed if rng_seed is None else rng_seed)
    picked = _pick_corrupted_indices(len(ds), spec.fraction, rng)

    features = ds.features.copy()
    flags = ds.corruption.copy()
    for idx in picked:
        x = ds.features[idx]
        mu, sigma = float(x.mean()), float(x.std())
        if sigma == 0.0:
            log.warning("sample id=%d has constant features (sigma=0); left unchanged",
                        int(ds.ids[idx]))
        else:
            features[idx] = rng.normal(mu, sigma, size=x.shape)
        flags[idx] = Corruption.INPUT_CORRUPTED

    out = LabeledDataset(
        ids=ds.ids.copy(),
        features=features,
        true_labels=ds.true_labels,
        effective_labels=ds.effective_labels,
        corruption=flags,
        num_classes=ds.num_classes,
        split=ds.split,
        corruption_fraction=spec.fraction,
    )
    out.check_invariants()
    return out


def apply_corruption(ds: LabeledDataset, spec: CorruptionSpec,
                     rng_seed: int | None = None) -> LabeledDataset:
    if spec.kind == CorruptionKind.NONE:
        return ds
    if spec.kind == CorruptionKind.LABEL:
        return corrupt_labels(ds, spec, rng_seed)
    return corrupt_inputs_gaussian(ds, spec, rng_seed)


def train_validation_split(ds: LabeledDataset, train_size: int, val_size: int,
                           seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded shuffle, then first train_size / last val_size samples.

    Corruption is applied after splitting, so the validation split stays clean.
    """
    if train_size + val_size > len(ds):
        raise ValueError(f"split sizes {train_size}+{val_size} exceed dataset size {len(ds)}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    train = ds.subset(perm[:train_size], split="train")
    val = ds.subset(perm[len(ds) - val_size:], split="validation")
    return train, val


# ---------------------------------------------------------------------------
# Canonical dataset serialization (written once per run; downstream stages
# never re-randomize). NPZ with the five columns plus a JSON meta record.
# ---------------------------------------------------------------------------

def save_dataset(ds: LabeledDataset, path) -> None:
    meta = {
        "num_classes": ds.num_classes,
        "split": ds.split,
        "corruption_fraction": ds.corruption_fraction,
    }
    np.savez(
        path,
        ids=ds.ids,
        features=ds.features,
        true_labels=ds.true_labels,
        effective_labels=ds.effective_labels,
        corruption=ds.corruption,
        meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
    )


def load_dataset(path) -> LabeledDataset:
    with np.load(path) as npz:
        meta = json.loads(npz["meta"].tobytes().decode())
        return LabeledDataset(
            ids=npz["ids"],
            features=npz["features"],
            true_labels=npz["true_labels"],
            effective_labels=npz["effective_labels"],
            corruption=npz["corruption"],
            num_classes=int(meta["num_classes"]),
            split=meta["split"],
            corruption_fraction=float(meta["corruption_fraction"]),
        )


def clean_copy(ds: LabeledDataset) -> LabeledDataset:
    """The pre-corruption view: true labels, original features, clean flags.

    Only valid for datasets whose corruption (if any) was label corruption,
    since input corruption discards the original features.
    """
    if np.any(ds.corruption == Corruption.INPUT_CORRUPTED):
        raise ValueError("clean_copy cannot reconstruct features of input-corrupted samples")
    return LabeledDataset(
        ids=ds.ids.copy(),
        features=ds.features,
        true_labels=ds.true_labels,
        effective_labels=ds.true_labels.copy(),
        corruption=np.zeros(len(ds), dtype=np.uint8),
        num_classes=ds.num_classes,
        split=ds.split,
        corruption_fraction=0.0,
    )
