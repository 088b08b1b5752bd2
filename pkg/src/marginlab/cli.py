"""Command-line interface.

Subcommands mirror the pipeline phases:

    marginlab synth      --out DIR [--n N] [--seed S] [--kind digits|blobs]
    marginlab ingest     --images F --labels F --out DS.npz [--num-classes C]
    marginlab corrupt    --in DS.npz --kind K --fraction F --seed S --out DS.npz
    marginlab train      --manifest M --out DIR [--resume] [--seed S]
    marginlab margins    --manifest M --out DIR [--workers N] [--resume] [--seed S]
    marginlab maxmargins --manifest M --out DIR [--resume]
    marginlab report     --manifest M --out DIR
    marginlab run        --manifest M --out DIR [--workers N] [--resume] [--seed S]
    marginlab verify     [--manifest M] [--out DIR] [--seed S]

Exit codes: 0 success; 2 invalid manifest or arguments; 3 partial failure
(some experiment cells failed); 4 verification failure. `--seed` restricts
a manifest-driven run to that single training seed; `verify` runs the
oracle/invariant audit (closed-form linear margins, finite-difference
gradients, brute-force nearest neighbors) and, given --out, audits an
experiment directory's tables against their manifest.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_BAD_MANIFEST = 2
EXIT_PARTIAL = 3
EXIT_VERIFY = 4


def _common(p: argparse.ArgumentParser, *, manifest=False, out=False,
            workers=False, resume=False, seed=False) -> None:
    if manifest:
        p.add_argument("--manifest", required=True, help="manifest JSON path")
    if out:
        p.add_argument("--out", required=True, help="experiment directory")
    if workers:
        p.add_argument("--workers", type=int, default=1,
                       help="worker processes for the margin phase")
    if resume:
        p.add_argument("--resume", action="store_true",
                       help="continue an existing experiment directory")
    if seed:
        p.add_argument("--seed", type=int, default=None,
                       help="restrict the manifest's seed list to this seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="marginlab",
                                 description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic IDX dataset")
    p.add_argument("--out", required=True, help="directory for the IDX pair")
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=("digits", "blobs"), default="digits")

    p = sub.add_parser("ingest", help="IDX image/label pair -> dataset NPZ")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--num-classes", type=int, default=None)

    p = sub.add_parser("corrupt", help="apply a corruption to a dataset NPZ")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--kind", required=True,
                   choices=("label", "gaussian_input"))
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    for name, hlp in (("train", "train every manifest cell's model"),
                      ("margins", "train (if needed) and run margin CMPs"),
                      ("run", "full pipeline: train, margins, report")):
        p = sub.add_parser(name, help=hlp)
        _common(p, manifest=True, out=True, workers=(name != "train"),
                resume=True, seed=True)

    p = sub.add_parser("maxmargins",
                       help="Eq.-4 max-margin records for the manifest datasets")
    _common(p, manifest=True, out=True, resume=True)

    p = sub.add_parser("report",
                       help="rebuild tables, report.json, and figures from ledgers")
    _common(p, manifest=True, out=True)

    p = sub.add_parser("verify", help="oracle/invariant audit (exit 4 on failure)")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None,
                   help="experiment directory to audit")
    p.add_argument("--seed", type=int, default=0)
    return ap


def _load_manifest(args):
    from .manifest import load_manifest

    m = load_manifest(args.manifest)
    if getattr(args, "seed", None) is not None:
        m = dataclasses.replace(m, seeds=(args.seed,))
    return m


def _run_phases(args, phases, resume=None) -> int:
    from .pipeline import run_experiment

    m = _load_manifest(args)
    outcome = run_experiment(
        m, args.out, workers=getattr(args, "workers", 1),
        resume=args.resume if resume is None else resume,
        base_dir=Path(args.manifest).parent, phases=phases)
    log.info("done in %.1fs: %d cells ok, %d failed", outcome.elapsed,
             len(outcome.cells_done), len(outcome.cells_failed))
    return EXIT_OK if outcome.ok else EXIT_PARTIAL


def cmd_synth(args) -> int:
    from . import synth

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write = (synth.write_digit_dataset if args.kind == "digits"
             else synth.write_blob_dataset)
    write(out / "images.idx", out / "labels.idx", args.n, args.seed)
    print(f"wrote {out / 'images.idx'} and {out / 'labels.idx'} "
          f"({args.n} samples, seed {args.seed})")
    return EXIT_OK


def cmd_ingest(args) -> int:
    from .data import load_idx_dataset, save_dataset

    ds = load_idx_dataset(args.images, args.labels,
                          num_classes=args.num_classes)
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: {len(ds)} samples, {ds.input_dim} features, "
          f"{ds.num_classes} classes")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    from .data import (CorruptionKind, CorruptionSpec, apply_corruption,
                       load_dataset, save_dataset)

    ds = load_dataset(args.inp)
    spec = CorruptionSpec(CorruptionKind(args.kind), args.fraction, args.seed)
    out = apply_corruption(ds, spec)
    save_dataset(out, args.out)
    n = int(np.sum(out.corruption != 0))
    print(f"wrote {args.out}: {n}/{len(out)} samples corrupted ({args.kind})")
    return EXIT_OK


def cmd_maxmargins(args) -> int:
    from .pipeline import (maxmargin_phase, prepare_datasets,
                           prepare_directory)

    m = _load_manifest(args)
    paths = prepare_directory(m, args.out, resume=args.resume)
    variants, _val, selected = prepare_datasets(m, paths,
                                                Path(args.manifest).parent)
    summaries = maxmargin_phase(m, paths, variants, selected)
    for kind, stats in summaries.items():
        for key, val in stats.items():
            print(f"{kind}: {key} = {val:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_verification

    failures = run_verification(manifest_path=args.manifest,
                                exp_dir=args.out, seed=args.seed)
    return EXIT_VERIFY if failures else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr)

    from .data import IdxFormatError
    from .manifest import ManifestError

    handlers = {
        "synth": cmd_synth,
        "ingest": cmd_ingest,
        "corrupt": cmd_corrupt,
        "train": lambda a: _run_phases(a, ("train",)),
        "margins": lambda a: _run_phases(a, ("train", "margins")),
        "run": lambda a: _run_phases(a, ("train", "margins", "report")),
        "maxmargins": cmd_maxmargins,
        "report": lambda a: _run_phases(a, ("report",), resume=True),
        "verify": cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except ManifestError as exc:
        log.error("invalid manifest: %s", exc)
        return EXIT_BAD_MANIFEST
    except IdxFormatError as exc:
        log.error("bad IDX input: %s", exc)
        return EXIT_BAD_MANIFEST
    except FileNotFoundError as exc:
        log.error("missing file: %s", exc)
        return EXIT_BAD_MANIFEST


if __name__ == "__main__":
    sys.exit(main())
