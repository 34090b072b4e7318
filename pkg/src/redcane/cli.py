"""Command-line front end.

    redcane train    --out model.json
    redcane profile  --mult trunc4 --inputs uniform --chains 1,9,81 --out prof.json
    redcane analyze  --model model.json --out report.csv
    redcane select   --report report.csv --out plan.json
    redcane energy   --model model.json --plan plan.json --out energy.json
    redcane report   --report report.csv --out-dir curves/

The default seed is 0 unless REDCANE_SEED is set; ``--seed`` wins over both.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import approx, methodology
from .capsnet import Model, TrainConfig, build_network, evaluate, extract_sites, toy_spec, train
from .data import digits_split, downsample, load_idx
from .energy import DEEPCAPS_COUNTS, count_ops, count_ops_by_site, energy_estimate
from .sites import GroupId, Site

log = logging.getLogger("redcane")


class CliError(Exception):
    pass


def _default_seed() -> int:
    env = os.environ.get("REDCANE_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"REDCANE_SEED must be an integer, got {env!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


def _dataset(args, split: str):
    """Test or train split of the bundled digits or of IDX files."""
    if args.idx_images or args.idx_labels:
        if not (args.idx_images and args.idx_labels):
            raise CliError("--idx-images and --idx-labels must be given together")
        ds = load_idx(_need_file(args.idx_images, "IDX image file"), _need_file(args.idx_labels, "IDX label file"), split)
        if args.downsample > 1:
            ds = downsample(ds, args.downsample)
        return ds
    train_ds, test_ds = digits_split(args.seed)
    return train_ds if split == "train" else test_ds


def _add_data_args(p):
    p.add_argument("--idx-images", help="IDX image file instead of the bundled digits")
    p.add_argument("--idx-labels", help="IDX label file matching --idx-images")
    p.add_argument("--downsample", type=int, default=1, help="average-pool factor for IDX images")


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> None:
    train_ds = _dataset(args, "train")
    model = build_network(toy_spec(), args.seed)
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
                      optimizer=args.optimizer)
    model = train(model, train_ds, cfg)
    model.save(args.out)
    if not (args.idx_images or args.idx_labels):
        acc = evaluate(model, _dataset(args, "test"))
        print(f"test accuracy {acc:.4f}")


def _input_source(spec: str):
    if spec in ("uniform", "exhaustive"):
        return approx.uniform_exhaustive()
    if spec.startswith("random:"):
        return approx.uniform_random(int(spec[7:]))
    if spec.startswith("empirical:"):
        path = _need_file(spec[10:], "empirical operand file")
        pairs = np.load(path) if path.suffix == ".npy" else np.loadtxt(path, delimiter=",", ndmin=2)
        return approx.empirical(pairs)
    raise CliError(f"unknown input source {spec!r}; use uniform, random:N or empirical:PATH")


def cmd_profile(args) -> None:
    try:
        mult = approx.parse_multiplier(args.mult)
    except (ValueError, FileNotFoundError) as exc:
        raise CliError(str(exc)) from None
    profiles = approx.profile(mult, _input_source(args.inputs), args.chains, args.samples, args.seed)
    doc = {"multiplier": mult.name, "inputs": args.inputs, "seed": args.seed, "profiles": []}
    for length, prof in profiles.items():
        na, nm = approx.to_nm_na(prof, approx.PRODUCT_RANGE)
        g = approx.gaussian_likeness(prof) if prof.count >= 1000 else None
        entry = prof.to_dict()
        entry.update(na=na, nm=nm)
        if g is not None:
            entry.update(gaussian_like=g.is_gaussian_like, gaussian_score=g.score)
        doc["profiles"].append(entry)
    _write(args.out, json.dumps(doc, indent=1) + "\n")


def _run_config(args) -> methodology.RunConfig:
    base = {}
    if args.config:
        base = json.loads(_need_file(args.config, "config file").read_text())
    for key in ("nm_grid", "na", "reps", "threshold_pp", "probe_nm", "workers"):
        val = getattr(args, key)
        if val is not None:
            base[key] = val
    base["seed"] = args.seed
    base.setdefault("workers", methodology.default_workers())
    if args.catalog:
        base["catalog_path"] = args.catalog
    try:
        return methodology.RunConfig(**base)
    except TypeError as exc:
        raise CliError(f"bad config: {exc}") from None


def cmd_analyze(args) -> None:
    model = Model.load(_need_file(args.model, "model file"))
    cfg = _run_config(args)
    result = methodology.run_pipeline(model, _dataset(args, "test"), cfg)
    out = Path(args.out)
    _write(out, result.report.to_csv())
    marks = result.report.marks_dict()
    marks["sites"] = [{"name": s.name, "layer": s.layer, "group": s.group.value} for s in result.sites]
    marks["config"] = cfg.to_dict()
    _write(args.marks or out.with_suffix(".marks.json"), json.dumps(marks, indent=2) + "\n")


def cmd_select(args) -> None:
    catalog = approx.load_catalog(args.catalog)
    if args.report:
        report_path = _need_file(args.report, "report CSV")
        marks_path = _need_file(args.marks or report_path.with_suffix(".marks.json"), "marks JSON")
        marks = json.loads(marks_path.read_text())
        threshold = marks.get("config", {}).get("threshold_pp", methodology.DEFAULT_THRESHOLD_PP)
        report = methodology.read_report_csv(report_path.read_text(), marks["baseline"])
        sites = [Site(s["name"], s["layer"], GroupId(s["group"])) for s in marks["sites"]]
        tol = methodology.site_tolerances(report, sites, threshold)
    elif args.model:
        sites = extract_sites(Model.load(_need_file(args.model, "model file")).spec)
        tol = {s.name: (np.inf, 0.0) for s in sites}
    else:
        raise CliError("select needs --report (or --model together with --tolerated)")
    if args.tolerated is not None:
        tol = {k: (min(v[0], args.tolerated), v[1]) for k, v in tol.items()}
    elif not args.report:
        raise CliError("--model without --report needs --tolerated")
    plan = methodology.select_components(
        {k: v[0] for k, v in tol.items()}, catalog,
        groups={s.name: s.group.value for s in sites},
        drops={k: v[1] for k, v in tol.items()},
        nm_column=args.nm_column,
    )
    _write(args.out, plan.to_json())


def cmd_energy(args) -> None:
    catalog = approx.load_catalog(args.catalog)
    plan = None
    if args.plan:
        plan = methodology.SelectionPlan.from_json(_need_file(args.plan, "plan JSON").read_text())
    if args.deepcaps:
        if plan is not None:
            raise CliError("--deepcaps has no per-site counts; use --all-mults instead of --plan")
        counts, site_counts = DEEPCAPS_COUNTS, None
    else:
        if not args.model:
            raise CliError("energy needs --model (or --deepcaps)")
        model = Model.load(_need_file(args.model, "model file"))
        counts, site_counts = count_ops(model), count_ops_by_site(model)
    summary = energy_estimate(counts, plan=plan, catalog=catalog, site_counts=site_counts,
                              default_component=args.all_mults)
    doc = summary.to_dict()
    doc["counts"] = counts.as_dict()
    _write(args.out, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_report(args) -> None:
    report = methodology.read_report_csv(_need_file(args.report, "report CSV").read_text(), baseline=0.0)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for kind in ("group", "layer"):
        for name in report.targets(kind):
            lines = ["# nm mean_acc min_acc max_acc"]
            lines += [f"{nm!r} {mean!r} {lo!r} {hi!r}" for nm, mean, lo, hi in report.curve(kind, name)]
            _write(out / f"{kind}_{name}.dat", "\n".join(lines) + "\n")


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="redcane", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the toy capsule network")
    _add_data_args(p)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("profile", help="error profile of a multiplier")
    p.add_argument("--mult", required=True, help="exact, truncK, truncate:K or lut:PATH")
    p.add_argument("--inputs", default="uniform", help="uniform, random:N or empirical:PATH (.npy or CSV pairs)")
    p.add_argument("--chains", type=_ints, default=list(approx.DEFAULT_CHAINS))
    p.add_argument("--samples", type=int, default=approx.DEFAULT_CHAIN_SAMPLES, help="random chains per length > 1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("analyze", help="group- and layer-wise resilience analysis")
    _add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--config", help="RunConfig JSON; flags override its fields")
    p.add_argument("--nm-grid", dest="nm_grid", type=_floats)
    p.add_argument("--na", type=float)
    p.add_argument("--reps", type=int)
    p.add_argument("--threshold", dest="threshold_pp", type=float)
    p.add_argument("--probe-nm", dest="probe_nm", type=float)
    p.add_argument("--workers", type=int, help="parallel sweep workers (default: all cores)")
    p.add_argument("--catalog")
    p.add_argument("--marks", help="where to write marks JSON (default: next to --out)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("select", help="choose approximate components per site")
    p.add_argument("--report")
    p.add_argument("--marks")
    p.add_argument("--model")
    p.add_argument("--tolerated", type=float, help="cap on every site's tolerated NM")
    p.add_argument("--catalog")
    p.add_argument("--nm-column", choices=("modeled", "real"), default="modeled")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("energy", help="computational-path energy estimate")
    p.add_argument("--model")
    p.add_argument("--plan")
    p.add_argument("--catalog")
    p.add_argument("--deepcaps", action="store_true", help="use the DeepCaps operation counts")
    p.add_argument("--all-mults", help="component for every multiplication not covered by --plan")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("report", help="per-target accuracy-vs-NM data files")
    p.add_argument("--report", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    for p in sub.choices.values():
        p.add_argument("--seed", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.seed is None:
            args.seed = _default_seed()
        args.func(args)
    except (CliError, ValueError, KeyError, OSError, FloatingPointError, OverflowError) as exc:
        print(f"redcane {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
