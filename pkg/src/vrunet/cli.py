"""Command line: ``vrunet {synth,slice,train,predict,eval}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Runtime failures
print one ``error: <message>`` line to stderr.

Checkpoints are named ``{plane}-{task}.ckpt`` (task is ``classify`` or
``segment``) inside ``--ckpt-dir`` unless overridden per model.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data_io, metrics, training, workflow
from .aggregation import AggregationRule
from .models import ArchSpec
from .pipeline import PlaneModelPair, process_volume, write_run_report
from .volume import PLANES, Volume

TASKS = ("classify", "segment")
THREADS_ENV = "VRUNET_THREADS"


class CliError(RuntimeError):
    pass


def _dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(t) for t in text.lower().replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like 32x32x32, got {text!r}")
    if len(dims) != 3 or min(dims) < 8:
        raise argparse.ArgumentTypeError(f"dims need three values >= 8, got {text!r}")
    return dims


def _ckpt_path(args, plane: str, task: str) -> Path:
    override = getattr(args, f"{plane}_{task}", None)
    return Path(override) if override else Path(args.ckpt_dir) / f"{plane}-{task}.ckpt"


def _load_cases(manifest: Path, split: str | None):
    root = manifest.parent
    recs = data_io.read_manifest(manifest)
    if split:
        recs = [r for r in recs if r.split in split.split(",")]
    return [(r.case_id, r.load(root)) for r in recs]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise OSError(f"output directory {out} is not writable")
    except OSError as e:
        raise CliError(str(e))
    ids = [f"case{i:04d}" for i in range(args.n)]
    splits = data_io.split_cases(ids, args.ratio, args.seed) if ids else {}
    spec = data_io.LesionSpec(args.lesions, (args.radius_min, args.radius_max))
    recs = []
    for i, cid in enumerate(ids):
        v = data_io.synth_volume(args.seed * 100003 + i, args.dims, spec)
        data_io.write_raw(v, out / cid)
        recs.append(data_io.CaseRecord(cid, f"{cid}.json", f"{cid}.json", splits[cid]))
    data_io.write_manifest(recs, out / "manifest.tsv")
    print(f"wrote {len(recs)} cases to {out}")
    return 0


def cmd_slice(args) -> int:
    manifest = Path(args.manifest)
    root = manifest.parent
    recs = data_io.read_manifest(manifest)
    if args.split:
        recs = [r for r in recs if r.split in args.split.split(",")]
    records = [data_io.CaseRecord(r.case_id, str(root / r.volume_path), str(root / r.mask_path), r.split)
               for r in recs]
    ds = data_io.extract_slices(records, args.plane)
    if args.balance:
        ds = data_io.balance_for_classification(ds, args.seed)
    data_io.write_slice_manifest(ds, args.out)
    t = ds.tallies()
    print(f"{args.plane}: {t['total']} slices, {t['lesion']} lesion, {t['normal']} normal")
    return 0


def cmd_train(args) -> int:
    manifest = Path(args.manifest)
    train_cases = _load_cases(manifest, args.train_split)
    val_cases = _load_cases(manifest, args.val_split) if args.val_split else []
    if not train_cases:
        raise CliError(f"no cases with split {args.train_split!r} in {manifest}")
    dims = train_cases[0][1].dims
    for cid, v in train_cases + val_cases:
        if v.dims != dims:
            raise CliError(f"case {cid}: dims {v.dims} differ from {dims}")
    cls_spec, seg_spec = workflow.toy_specs(dims, args.plane)
    spec = cls_spec if args.task == "classify" else seg_spec
    if args.arch:
        spec = ArchSpec.from_json(Path(args.arch).read_text())
    want = spec.kind == ("classifier" if args.task == "classify" else "segmenter")
    if not want:
        raise CliError(f"ArchSpec kind {spec.kind!r} does not match task {args.task!r}")
    from .volume import plane_slice_shape

    a, b = plane_slice_shape(dims, args.plane)
    if a > spec.input_hw[0] or b > spec.input_hw[1]:
        raise CliError(f"{args.plane} slices are {a}x{b} but ArchSpec input_hw is {spec.input_hw}")
    lr = args.lr if args.lr is not None else (workflow.CLASSIFIER_LR if args.task == "classify"
                                               else workflow.SEGMENTER_LR)
    dtype = np.float64 if args.precision == "f64" else np.float32
    train = workflow.plane_data(train_cases, args.plane)
    val = workflow.plane_data(val_cases, args.plane) if val_cases else None
    kw = dict(lr=lr, epochs=args.epochs, batch_size=args.batch_size, patience=args.patience, seed=args.seed,
              dtype=dtype)
    if args.task == "classify":
        fr = workflow.train_classifier(spec, train, val, **kw)
    else:
        fr = workflow.train_segmenter(spec, train, val, **kw)
    out = Path(args.out) if args.out else Path(args.ckpt_dir) / f"{args.plane}-{args.task}.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    training.save_checkpoint(fr.model, out, dtype)
    training.write_log(fr.history, out.with_suffix(".log.tsv"), fr.stopped_epoch)
    print(f"lr={lr:g} epochs_run={len(fr.history)} stopped_epoch={fr.stopped_epoch} -> {out}")
    return 0


def _load_pairs(args, dtype):
    missing = [str(_ckpt_path(args, p, t)) for p in PLANES for t in TASKS if not _ckpt_path(args, p, t).exists()]
    if missing:
        raise CliError("missing checkpoints: " + ", ".join(missing))
    return [PlaneModelPair(p, training.load_checkpoint(_ckpt_path(args, p, "classify"), dtype=dtype),
                           training.load_checkpoint(_ckpt_path(args, p, "segment"), dtype=dtype))
            for p in PLANES]


def cmd_predict(args) -> int:
    dtype = np.float64 if args.precision == "f64" else np.float32
    pairs = _load_pairs(args, dtype)
    if args.manifest:
        manifest = Path(args.manifest)
        recs = data_io.read_manifest(manifest)
        if args.split:
            recs = [r for r in recs if r.split in args.split.split(",")]
        jobs = [(r.case_id, manifest.parent / r.volume_path) for r in recs]
    elif args.volume:
        jobs = [(Path(args.volume).name.split(".")[0], Path(args.volume))]
    else:
        raise CliError("give --volume or --manifest")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rule = AggregationRule(args.vote_threshold)
    for cid, path in jobs:
        v = data_io.read_volume(path)
        res = process_volume(pairs, Volume(v.intensities), rule, gate=args.gate, tau=args.tau,
                             min_pixels=args.min_pixels, aggregate=not args.no_aggregate, threads=args.threads)
        if res.mask is not None:
            data_io.write_raw(Volume(res.mask), out / cid)
        for plane, m in res.per_plane_masks.items():
            data_io.write_raw(Volume(m), out / f"{cid}-{plane}")
        write_run_report(res, out / f"{cid}.report.json")
        print(f"{cid}: " + json.dumps({p: d["gate_open"] for p, d in res.report()["planes"].items()}))
    return 0


def cmd_eval(args) -> int:
    manifest = Path(args.manifest)
    recs = data_io.read_manifest(manifest)
    if args.split:
        recs = [r for r in recs if r.split in args.split.split(",")]
    pred_dir = Path(args.pred_dir)
    sections: dict[str, list] = {"aggregated": []}
    sections.update({f"{p} (no aggregation)": [] for p in PLANES})
    for r in recs:
        truth = r.load(manifest.parent).mask
        if truth is None:
            raise CliError(f"case {r.case_id}: no ground-truth mask")
        for name, stem in [("aggregated", r.case_id)] + [(f"{p} (no aggregation)", f"{r.case_id}-{p}")
                                                          for p in PLANES]:
            f = pred_dir / f"{stem}.json"
            if not f.exists():
                continue
            pred = data_io.read_raw(f).intensities
            if pred.shape != truth.shape:
                raise CliError(f"case {r.case_id}: prediction dims {pred.shape} != truth dims {truth.shape}")
            sections[name].append(metrics.evaluate_volume(pred, truth, r.case_id))
    sections = {k: v for k, v in sections.items() if v}
    if not sections:
        raise CliError(f"no predictions found in {pred_dir}")
    print(metrics.format_table(sections))
    if args.out:
        metrics.write_report(sections, args.out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vrunet", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate seeded phantom cases and a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_dims, default=(32, 32, 32), help="XxYxZ, each >= 8")
    p.add_argument("--lesions", type=int, default=2)
    p.add_argument("--radius-min", type=float, default=2.5)
    p.add_argument("--radius-max", type=float, default=6.0)
    p.add_argument("--ratio", type=float, default=0.2, help="fraction of cases held out for 3D testing")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("slice", help="write a per-slice lesion manifest for one plane")
    p.add_argument("--manifest", required=True)
    p.add_argument("--plane", choices=PLANES, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--balance", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("train", help="train one (plane, task) model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--plane", choices=PLANES, required=True)
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--arch", default=None, help="ArchSpec JSON file")
    p.add_argument("--lr", type=float, default=None, help="default 1e-5 (classify) / 1e-3 (segment)")
    p.add_argument("--batch-size", type=int, default=workflow.BATCH_SIZE)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--train-split", default="train2d")
    p.add_argument("--val-split", default="test2d")
    p.add_argument("--ckpt-dir", default=".")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run the six-model pipeline on volumes")
    p.add_argument("--ckpt-dir", default=".")
    for plane in PLANES:
        for task in TASKS:
            p.add_argument(f"--{plane}-{task}", default=None, metavar="CKPT",
                           help=f"override {{ckpt-dir}}/{plane}-{task}.ckpt")
    p.add_argument("--volume", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--vote-threshold", type=int, choices=(1, 2, 3), default=3)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--gate", type=float, default=0.5)
    p.add_argument("--min-pixels", type=int, default=1)
    p.add_argument("--no-aggregate", action="store_true")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--threads", type=int, default=int(os.environ.get(THREADS_ENV, "1")))
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="metrics of predicted masks against manifest truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--out", default=None, help="JSON record file")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
