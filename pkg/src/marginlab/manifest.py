"""Run manifests: the single source of truth for an experiment.

A manifest is a versioned JSON document; every derived artifact embeds the
manifest's SHA-256 so a directory of outputs can always be traced back to
the exact configuration that produced it (and mixed-manifest directories
are detectable). Schema, version 1:

    {
      "version": 1,
      "dataset": {
        "images": "path/to/images.idx",      # IDX image file
        "labels": "path/to/labels.idx",      # IDX label file
        "num_classes": null,                 # null: infer from labels
        "train_size": 4000,
        "val_size": 2000,
        "split_seed": 5
      },
      "variants": [                          # model kinds to train
        {"kind": "none", "fraction": 0.0, "seed": 0},
        {"kind": "label", "fraction": 0.2, "seed": 77},
        {"kind": "gaussian_input", "fraction": 0.2, "seed": 78}
      ],
      "capacities": [100, 500, 2000],        # hidden widths
      "seeds": [3, 4],                       # training seeds
      "train": {"lr0": 0.05, "max_epochs": 800, ...},   # TrainConfig fields
      "solver": {"residual_target": 1e-3, ...},          # SolverConfig fields
      "margins": {"sample_budget": 1000, "selection_seed": 99}
    }

`train.seed` must not appear: the per-model training seed comes from
`seeds`. Unknown keys anywhere are rejected so typos fail loudly instead
of silently running defaults. The margin sample selection is a pure
function of (selection_seed, train ids) and is shared by every model kind,
so clean and corrupted models are measured on the same samples.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .data import CorruptionKind, CorruptionSpec
from .model import TrainConfig
from .solver import SolverConfig

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DEFAULT_SAMPLE_BUDGET = 10_000


class ManifestError(ValueError):
    """Invalid manifest content (CLI exit code 2)."""


@dataclass(frozen=True)
class DatasetSpec:
    images: str
    labels: str
    train_size: int
    val_size: int
    split_seed: int
    num_classes: int | None = None


@dataclass(frozen=True)
class RunManifest:
    version: int
    dataset: DatasetSpec
    variants: tuple[CorruptionSpec, ...]
    capacities: tuple[int, ...]
    seeds: tuple[int, ...]
    train: TrainConfig
    solver: SolverConfig
    sample_budget: int
    selection_seed: int

    def validate(self, base_dir: Path | None = None) -> None:
        """Structural checks plus referenced-file existence."""
        if self.version != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {self.version} "
                                f"(expected {MANIFEST_VERSION})")
        if not self.capacities:
            raise ManifestError("capacity list must be non-empty")
        if any(c < 1 for c in self.capacities):
            raise ManifestError("capacities must be positive")
        if len(set(self.capacities)) != len(self.capacities):
            raise ManifestError("capacities must be unique")
        if not self.seeds:
            raise ManifestError("seeds list must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ManifestError("seeds must be unique")
        if not self.variants:
            raise ManifestError("variants list must be non-empty")
        kinds = [v.kind for v in self.variants]
        if len(set(kinds)) != len(kinds):
            raise ManifestError("variant kinds must be unique")
        if self.sample_budget < 1:
            raise ManifestError("sample_budget must be >= 1")
        if self.sample_budget > self.dataset.train_size:
            raise ManifestError(f"sample_budget {self.sample_budget} exceeds "
                                f"train_size {self.dataset.train_size}")
        if self.dataset.train_size < 1 or self.dataset.val_size < 0:
            raise ManifestError("train_size must be >= 1 and val_size >= 0")
        for p in (self.images_path(base_dir), self.labels_path(base_dir)):
            if not p.exists():
                raise ManifestError(f"referenced file does not exist: {p}")

    def images_path(self, base_dir: Path | None = None) -> Path:
        return _resolve(self.dataset.images, base_dir)

    def labels_path(self, base_dir: Path | None = None) -> Path:
        return _resolve(self.dataset.labels, base_dir)

    def model_kind(self, spec: CorruptionSpec) -> str:
        """Table-1 model-kind name for a training variant."""
        return {CorruptionKind.NONE: "clean",
                CorruptionKind.LABEL: "label_corrupted",
                CorruptionKind.GAUSSIAN_INPUT: "input_corrupted"}[spec.kind]

    def cells(self) -> list[tuple[int, int, CorruptionSpec]]:
        """All (capacity, seed, variant) experiment cells, in canonical order."""
        return [(cap, seed, var) for cap in self.capacities
                for seed in self.seeds for var in self.variants]

    def canonical_dict(self) -> dict:
        d = {
            "version": self.version,
            "dataset": dataclasses.asdict(self.dataset),
            "variants": [{"kind": v.kind.value, "fraction": v.fraction,
                          "seed": v.seed} for v in self.variants],
            "capacities": list(self.capacities),
            "seeds": list(self.seeds),
            "train": dataclasses.asdict(self.train),
            "solver": dataclasses.asdict(self.solver),
            "margins": {"sample_budget": self.sample_budget,
                        "selection_seed": self.selection_seed},
        }
        return d

    @property
    def hash(self) -> str:
        """SHA-256 over the canonical JSON encoding (sorted keys)."""
        blob = json.dumps(self.canonical_dict(), sort_keys=True,
                          separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _resolve(path_str: str, base_dir: Path | None) -> Path:
    p = Path(path_str)
    if not p.is_absolute() and base_dir is not None:
        p = Path(base_dir) / p
    return p


def _take(section: dict, name: str, keys: dict) -> dict:
    """Pop known keys with defaults; reject unknown ones."""
    unknown = set(section) - set(keys)
    if unknown:
        raise ManifestError(f"unknown keys in '{name}': {sorted(unknown)}")
    out = {}
    for key, default in keys.items():
        if default is _REQUIRED and key not in section:
            raise ManifestError(f"'{name}' is missing required key '{key}'")
        out[key] = section.get(key, default)
    return out


_REQUIRED = object()


def manifest_from_dict(doc: dict) -> RunManifest:
    if not isinstance(doc, dict):
        raise ManifestError("manifest root must be a JSON object")
    top = _take(doc, "manifest", {
        "version": _REQUIRED, "dataset": _REQUIRED, "variants": _REQUIRED,
        "capacities": _REQUIRED, "seeds": _REQUIRED, "train": {},
        "solver": {}, "margins": {},
    })

    ds = _take(top["dataset"], "dataset", {
        "images": _REQUIRED, "labels": _REQUIRED, "train_size": _REQUIRED,
        "val_size": _REQUIRED, "split_seed": _REQUIRED, "num_classes": None,
    })
    dataset = DatasetSpec(**ds)

    variants = []
    for k, v in enumerate(top["variants"]):
        fields = _take(v, f"variants[{k}]",
                       {"kind": _REQUIRED, "fraction": _REQUIRED,
                        "seed": _REQUIRED})
        try:
            kind = CorruptionKind(fields["kind"])
        except ValueError as exc:
            raise ManifestError(f"variants[{k}]: unknown kind "
                                f"{fields['kind']!r}") from exc
        try:
            variants.append(CorruptionSpec(kind, fields["fraction"],
                                           fields["seed"]))
        except ValueError as exc:
            raise ManifestError(f"variants[{k}]: {exc}") from exc

    train_fields = dict(top["train"])
    if "seed" in train_fields:
        raise ManifestError("train.seed is not allowed: per-model seeds come "
                            "from the top-level 'seeds' list")
    try:
        train = TrainConfig(**train_fields)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"train: {exc}") from exc
    try:
        solver = SolverConfig(**top["solver"])
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"solver: {exc}") from exc

    margins = _take(top["margins"], "margins", {
        "sample_budget": DEFAULT_SAMPLE_BUDGET, "selection_seed": 0,
    })

    m = RunManifest(
        version=top["version"], dataset=dataset, variants=tuple(variants),
        capacities=tuple(int(c) for c in top["capacities"]),
        seeds=tuple(int(s) for s in top["seeds"]), train=train, solver=solver,
        sample_budget=int(margins["sample_budget"]),
        selection_seed=int(margins["selection_seed"]),
    )
    return m


def load_manifest(path, validate: bool = True) -> RunManifest:
    """Parse and (by default) validate a manifest file.

    Relative dataset paths are resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    m = manifest_from_dict(doc)
    if validate:
        m.validate(base_dir=path.parent)
    return m


def write_manifest(m: RunManifest, path) -> None:
    doc = m.canonical_dict()
    # the loader forbids train.seed (per-model seeds come from `seeds`), and
    # a written manifest must reload; the field is the fixed default anyway
    doc["train"].pop("seed", None)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
