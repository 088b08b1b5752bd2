"""Manifest schema enforcement, canonical hashing, and path resolution."""
import copy
import json

import numpy as np
import pytest

from marginlab import synth
from marginlab.data import CorruptionKind
from marginlab.manifest import (ManifestError, RunManifest, load_manifest,
                                manifest_from_dict, write_manifest)

GOOD = {
    "version": 1,
    "dataset": {"images": "im.idx", "labels": "lb.idx",
                "train_size": 30, "val_size": 10, "split_seed": 5},
    "variants": [
        {"kind": "none", "fraction": 0.0, "seed": 0},
        {"kind": "label", "fraction": 0.2, "seed": 77},
        {"kind": "gaussian_input", "fraction": 0.2, "seed": 78},
    ],
    "capacities": [8, 64],
    "seeds": [1, 2],
    "train": {"lr0": 0.1, "max_epochs": 50},
    "solver": {},
    "margins": {"sample_budget": 20, "selection_seed": 99},
}


def _doc(**edits):
    doc = copy.deepcopy(GOOD)
    doc.update(edits)
    return doc


def test_round_trip_and_model_kinds():
    m = manifest_from_dict(_doc())
    assert m.capacities == (8, 64)
    assert m.seeds == (1, 2)
    assert m.sample_budget == 20 and m.selection_seed == 99
    kinds = [m.model_kind(v) for v in m.variants]
    assert kinds == ["clean", "label_corrupted", "input_corrupted"]
    # canonical order: capacity-major, then seed, then variant
    cells = m.cells()
    assert len(cells) == 2 * 2 * 3
    assert [c[:2] for c in cells[:3]] == [(8, 1)] * 3
    assert cells[3][:2] == (8, 2)
    assert cells[6][:2] == (64, 1)


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: d.update(version=2), "version"),
    (lambda d: d.update(capacities=[]), "non-empty"),
    (lambda d: d.update(capacities=[0, 8]), "positive"),
    (lambda d: d.update(capacities=[8, 8]), "unique"),
    (lambda d: d.update(seeds=[]), "non-empty"),
    (lambda d: d.update(seeds=[1, 1]), "unique"),
    (lambda d: d.update(variants=[]), "non-empty"),
    (lambda d: d.update(variants=GOOD["variants"][:1] * 2), "unique"),
    (lambda d: d["margins"].update(sample_budget=0), "sample_budget"),
    (lambda d: d["margins"].update(sample_budget=31), "exceeds"),
])
def test_validate_rejects(tmp_path, mutate, msg):
    doc = _doc()
    mutate(doc)
    m = manifest_from_dict(doc)
    with pytest.raises(ManifestError, match=msg):
        m.validate(base_dir=tmp_path)  # empty dir: file checks come last


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: d.update(extra=1), "unknown keys"),
    (lambda d: d["dataset"].update(shuffle=True), "unknown keys"),
    (lambda d: d["variants"][0].update(rate=0.1), "unknown keys"),
    (lambda d: d["margins"].update(budget=5), "unknown keys"),
    (lambda d: d.pop("dataset"), "missing required"),
    (lambda d: d["dataset"].pop("images"), "missing required"),
    (lambda d: d["variants"][1].update(kind="salt_pepper"), "unknown kind"),
    (lambda d: d["variants"][1].update(fraction=1.5), "fraction"),
    (lambda d: d["train"].update(seed=3), "train.seed"),
    (lambda d: d["train"].update(lr0=-1.0), "train"),
    (lambda d: d["train"].update(warmup=9), "train"),
    (lambda d: d["solver"].update(penalty_growth=0.5), "solver"),
    (lambda d: d["solver"].update(wormhole=1), "solver"),
])
def test_schema_rejects(mutate, msg):
    doc = _doc()
    mutate(doc)
    with pytest.raises(ManifestError, match=msg):
        manifest_from_dict(doc)


def test_hash_is_stable_and_sensitive():
    a = manifest_from_dict(_doc())
    b = manifest_from_dict(_doc())
    assert a.hash == b.hash
    assert len(a.hash) == 64 and int(a.hash, 16) >= 0
    c = manifest_from_dict(_doc(capacities=[8, 65]))
    assert c.hash != a.hash
    # defaults are part of the canonical encoding: explicit default == omitted
    d = manifest_from_dict(_doc(solver={"validity_threshold": 1e-3}))
    assert d.hash == a.hash


def test_load_resolves_paths_against_manifest_dir(tmp_path):
    synth.write_blob_dataset(tmp_path / "im.idx", tmp_path / "lb.idx",
                             n=60, seed=0)
    mpath = tmp_path / "manifest.json"
    mpath.write_text(json.dumps(_doc()))
    m = load_manifest(mpath)
    assert m.images_path(tmp_path).exists()
    # validation failed when the referenced files are absent
    (tmp_path / "im.idx").unlink()
    with pytest.raises(ManifestError, match="does not exist"):
        load_manifest(mpath)
    assert load_manifest(mpath, validate=False).dataset.images == "im.idx"


def test_load_rejects_bad_json_and_missing_file(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "nope.json")
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(ManifestError, match="not valid JSON"):
        load_manifest(p)
    q = tmp_path / "list.json"
    q.write_text("[1, 2]")
    with pytest.raises(ManifestError, match="JSON object"):
        load_manifest(q)


def test_write_manifest_round_trips(tmp_path):
    synth.write_blob_dataset(tmp_path / "im.idx", tmp_path / "lb.idx",
                             n=60, seed=0)
    m = manifest_from_dict(_doc())
    out = tmp_path / "copy.json"
    write_manifest(m, out)
    back = load_manifest(out)
    assert back.hash == m.hash
    assert back == m


def test_variant_kind_enum_coverage():
    m = manifest_from_dict(_doc())
    assert [v.kind for v in m.variants] == [CorruptionKind.NONE,
                                            CorruptionKind.LABEL,
                                            CorruptionKind.GAUSSIAN_INPUT]
