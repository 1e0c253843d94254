"""Command-line entry point: ``cordmorph <phantom|split|compute|compare|report|gate>``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .drift import GatePolicy
from .errors import CordMorphError
from .phantom import DEFAULT_CONTRASTS, make_cohort
from .workflow import (
    EXIT_ERROR,
    DatasetManifest,
    RunConfig,
    build_report,
    emit_reports,
    gate_cli,
    merge_stores,
    parse_shard,
    run_morphometrics,
    split_subjects,
    write_run_outputs,
)

log = logging.getLogger("cordmorph")


def _global_options(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="TOML run configuration")
    parser.add_argument("--out", type=Path, default=default, help="output directory")
    parser.add_argument("--shard", default=default, help="process rows with index mod n == k (k/n)")
    parser.add_argument("--seed", type=int, default=default, help="seed for phantoms and splits")
    parser.add_argument("--stamp", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="add wall-clock timestamps to outputs")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser():
    parser = argparse.ArgumentParser(prog="cordmorph", description=__doc__)
    _global_options(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_options(p, suppress=True)
        return p

    p = add("phantom", "write a synthetic phantom cohort and its manifest")
    p.add_argument("--subjects", type=int, default=5)
    p.add_argument("--contrasts", nargs="+", default=list(DEFAULT_CONTRASTS))
    p.add_argument("--jitter", type=float, default=0.0, help="boundary fraction perturbed per contrast")
    p.add_argument("--version", dest="version_id", default="v1")
    p.add_argument("--shift", type=int, default=0, help="systematic dilation (+) / erosion (-) layers")

    p = add("split", "subject-wise train/test split of a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--ratio", type=float, default=0.2)

    p = add("compute", "run morphometrics over a manifest into a drift store")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--workers", type=int, default=None)

    for name, help_ in (("compare", "compare two versions and write the drift report"),
                        ("report", "write drift report, plots and the release bundle")):
        p = add(name, help_)
        p.add_argument("--store", type=Path, action="append", required=True,
                       help="drift store (repeat to merge shard stores)")
        p.add_argument("--base", required=True)
        p.add_argument("--candidate", required=True)

    p = add("gate", "exit 0 on PASS, 2 on drift FAIL, 1 on error")
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--max-std-increase-pct", type=float, default=None)
    p.add_argument("--max-std-increase-mm2", type=float, default=None)
    p.add_argument("--max-csa-shift-pct", type=float, default=None)
    return parser


def _config(args) -> RunConfig:
    overrides = dict(
        out=args.out,
        shard=parse_shard(args.shard) if args.shard else None,
        seed=args.seed,
        stamp=args.stamp or None,
        workers=getattr(args, "workers", None),
    )
    if args.config is not None:
        return RunConfig.from_toml(args.config.read_text(), **overrides)
    return RunConfig(**{k: v for k, v in overrides.items() if v is not None})


def _gate_policy(args, config):
    given = {
        "max_std_increase_rel_pct": args.max_std_increase_pct,
        "max_std_increase_abs_mm2": args.max_std_increase_mm2,
        "max_mean_csa_shift_pct": args.max_csa_shift_pct,
    }
    if args.config is None and all(v is None for v in given.values()):
        return None  # use the policy recorded in the report
    base = config.policy
    return GatePolicy(**{k: (v if v is not None else getattr(base, k)) for k, v in given.items()}).validate()


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _config(args)
        out = config.out

        if args.command == "phantom":
            cohort = make_cohort(out, args.subjects, tuple(args.contrasts), args.jitter, config.seed,
                                 args.version_id, args.shift)
            print(cohort.manifest_path)
            return 0

        if args.command == "split":
            manifest = DatasetManifest.read(args.manifest)
            split = split_subjects(manifest.subjects(), args.ratio, config.seed)
            out.mkdir(parents=True, exist_ok=True)
            (out / "split.csv").write_text(split.to_csv())
            print(f"train={len(split.train)} test={len(split.test)} -> {out / 'split.csv'}")
            return 0

        if args.command == "compute":
            manifest = DatasetManifest.read(args.manifest)
            result = run_morphometrics(manifest, config)
            store_path = write_run_outputs(result, out, config)
            s = result.summary()
            print(f"processed={s['processed']} failed={s['failed']} records={s['records']} -> {store_path}")
            if not manifest.rows:
                print("warning: manifest is empty", file=sys.stderr)
            if result.failed:
                print(f"warning: {result.failed} row(s) failed; see {out / 'errors.csv'}", file=sys.stderr)
            return 0

        if args.command in ("compare", "report"):
            store = merge_stores(args.store)
            if args.command == "compare":
                report = build_report(store, args.base, args.candidate, config)
                out.mkdir(parents=True, exist_ok=True)
                (out / "drift_report.json").write_text(report.to_json())
                (out / "drift_report.csv").write_text(report.summary_csv())
                print(f"verdict: {report.verdict.label} -> {out / 'drift_report.json'}")
            else:
                files = emit_reports(store, args.base, args.candidate, config, out)
                print(f"release bundle: {files['release']}")
            return 0

        if args.command == "gate":
            return gate_cli(args.report, _gate_policy(args, config))
    except (CordMorphError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_ERROR


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
