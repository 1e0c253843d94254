"""Pipeline orchestration: manifest ingestion, sharded morphometric runs, reports, gating.

Mirrors a three-stage CI job: fetch data (external pre-step), compute
morphometrics into a drift store, then emit drift reports and a release
bundle whose verdict maps to a process exit code.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import svg
from .drift import (
    DEFAULT_LEVEL_KEY,
    DriftReport,
    DriftStore,
    GatePolicy,
    ModelVersion,
    MorphometricRecord,
    atomic_write_text,
    compare_versions,
    contrast_agreement,
    gate,
    scaling_factors,
)
from .errors import (
    ConfigError,
    CordMorphError,
    InsufficientSubjects,
    ManifestError,
    NoQualifyingSlices,
    TooFewSubjects,
)
from .geometry import (
    CSV_COLUMNS as SLICE_COLUMNS,
    METRICS,
    SubjectMorphometrics,
    binarize,
    level_range_key,
    parse_level,
    slice_rows,
    slices_to_csv,
)
from .nifti_io import load, reorient
from .phantom import DEFAULT_CONTRASTS, MANIFEST_COLUMNS

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

EXIT_PASS, EXIT_ERROR, EXIT_DRIFT = 0, 1, 2


# --- manifest -----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    subject_id: str
    contrast: str
    version_id: str
    mask_path: Path
    labels_path: Path | None = None
    site: str | None = None
    pathology: str | None = None


@dataclass
class DatasetManifest:
    rows: list
    root: Path = Path(".")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        return cls.parse(text, path.parent)

    @classmethod
    def parse(cls, text, root=Path(".")) -> "DatasetManifest":
        reader = csv.DictReader(io.StringIO(text))
        required = {"subject_id", "contrast", "version_id", "mask_path"}
        if reader.fieldnames is None:
            return cls([], Path(root))
        missing = required - set(reader.fieldnames)
        if missing:
            raise ManifestError(f"manifest lacks columns {sorted(missing)}")
        rows, seen = [], set()
        root = Path(root)
        for n, r in enumerate(reader, start=2):
            key = (r["subject_id"], r["contrast"], r["version_id"])
            if not all(key) or not r["mask_path"]:
                raise ManifestError(f"line {n}: empty required field")
            if key in seen:
                raise ManifestError(f"line {n}: duplicate (subject, contrast, version) {key}")
            seen.add(key)
            labels = (r.get("labels_path") or "").strip()
            rows.append(ManifestRow(
                subject_id=r["subject_id"],
                contrast=r["contrast"],
                version_id=r["version_id"],
                mask_path=root / r["mask_path"],
                labels_path=root / labels if labels else None,
                site=r.get("site") or None,
                pathology=r.get("pathology") or None,
            ))
        return cls(rows, root)

    def subjects(self):
        return sorted({r.subject_id for r in self.rows})


# --- configuration --------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    levels: tuple = ("C2", "C3")
    metrics: tuple = METRICS
    contrasts: tuple = DEFAULT_CONTRASTS
    policy: GatePolicy = field(default_factory=GatePolicy)
    out: Path = Path("out")
    shard: tuple = (0, 1)
    formats: tuple = ("json", "csv", "svg")
    workers: int = 1
    seed: int = 0
    agreement_pair: tuple = ("T1w", "T2w")
    per_slice_records: bool = True
    versions: tuple = ()
    stamp: bool = False

    def __post_init__(self):
        k, n = self.shard
        if not (isinstance(k, int) and isinstance(n, int) and n >= 1 and 0 <= k < n):
            raise ConfigError(f"shard must satisfy 0 <= k < n, got {k}/{n}")
        if not self.levels:
            raise ConfigError("level set must be non-empty")
        try:
            [parse_level(lv) for lv in self.levels]
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        bad = set(self.metrics) - set(METRICS)
        if bad:
            raise ConfigError(f"unknown metrics {sorted(bad)}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.policy.validate()

    @property
    def level_key(self) -> str:
        return level_range_key(self.levels)

    def digest(self) -> str:
        """Hash of every setting that can change analysis results."""
        payload = {
            "levels": sorted(parse_level(lv) for lv in self.levels),
            "metrics": list(self.metrics),
            "contrasts": list(self.contrasts),
            "policy": asdict(self.policy),
            "agreement_pair": list(self.agreement_pair),
            "per_slice_records": self.per_slice_records,
            "seed": self.seed,
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_toml(cls, text: str, **overrides) -> "RunConfig":
        try:
            d = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc
        return cls.from_dict(d, **overrides)

    @classmethod
    def from_dict(cls, d, **overrides) -> "RunConfig":
        d = dict(d)
        kw = {}
        for name in ("levels", "metrics", "contrasts", "formats", "agreement_pair"):
            if name in d:
                kw[name] = tuple(d.pop(name))
        for name in ("workers", "seed"):
            if name in d:
                kw[name] = int(d.pop(name))
        if "per_slice_records" in d:
            kw["per_slice_records"] = bool(d.pop("per_slice_records"))
        if "out" in d:
            kw["out"] = Path(d.pop("out"))
        if "shard" in d:
            kw["shard"] = parse_shard(d.pop("shard"))
        if "policy" in d:
            kw["policy"] = GatePolicy.from_dict(d.pop("policy"))
        if "versions" in d:
            vs = d.pop("versions")
            kw["versions"] = tuple(
                ModelVersion(vid, meta.get("source_url"), _iso_date(meta.get("created")))
                for vid, meta in sorted(vs.items())
            )
        if d:
            raise ConfigError(f"unknown config keys {sorted(d)}")
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


def _iso_date(value):
    if value is None:
        return None
    return value.isoformat() if hasattr(value, "isoformat") else str(value)


def parse_shard(spec):
    if isinstance(spec, (tuple, list)):
        k, n = spec
    else:
        try:
            k, n = (int(x) for x in str(spec).split("/"))
        except ValueError as exc:
            raise ConfigError(f"shard must look like k/n, got {spec!r}") from exc
    return int(k), int(n)


# --- split ----------------------------------------------------------------------

@dataclass
class SplitAssignment:
    assignment: dict
    ratio: float
    seed: int

    @property
    def test(self):
        return sorted(s for s, p in self.assignment.items() if p == "TEST")

    @property
    def train(self):
        return sorted(s for s, p in self.assignment.items() if p == "TRAIN")

    def to_csv(self) -> str:
        lines = ["subject_id,partition"] + [f"{s},{self.assignment[s]}" for s in sorted(self.assignment)]
        return "\n".join(lines) + "\n"


def split_subjects(subjects, ratio=0.2, seed=0) -> SplitAssignment:
    """Subject-wise train/test split; every scan of a subject lands on one side."""
    unique = sorted(set(subjects))
    if len(unique) < 2:
        raise TooFewSubjects(f"need at least 2 subjects, got {len(unique)}")
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    n_test = int(math.floor(ratio * len(unique) + 0.5))
    order = np.random.default_rng(int(seed)).permutation(len(unique))
    test = {unique[i] for i in order[:n_test]}
    return SplitAssignment({s: "TEST" if s in test else "TRAIN" for s in unique}, ratio, int(seed))


# --- compute --------------------------------------------------------------------

@dataclass
class RowResult:
    index: int
    records: list = field(default_factory=list)
    slice_rows: list = field(default_factory=list)
    error: str | None = None


@dataclass
class RunResult:
    records: list
    slice_rows: list
    errors: list  # (row_index, subject, contrast, version, message)
    processed: int
    failed: int
    shard: tuple
    total_rows: int

    def summary(self) -> dict:
        return {
            "manifest_rows": self.total_rows,
            "shard": f"{self.shard[0]}/{self.shard[1]}",
            "rows_in_shard": self.processed + self.failed,
            "processed": self.processed,
            "failed": self.failed,
            "records": len(self.records),
        }


def shard_rows(rows, shard):
    k, n = shard
    return [(i, r) for i, r in enumerate(rows) if i % n == k]


def _load_rpi(path):
    return reorient(load(path), "RPI")


def process_row(index, row: ManifestRow, config: RunConfig) -> RowResult:
    out = RowResult(index)
    try:
        mask = binarize(_load_rpi(row.mask_path), 0.5)
        labels = None
        if row.labels_path is not None:
            labels = _load_rpi(row.labels_path)
        elif config.levels:
            raise ManifestError("labels_path is required for level-restricted metrics")
        sm = SubjectMorphometrics.compute(
            row.subject_id, row.contrast, row.version_id, mask, labels,
            level_sets=(config.levels,), metrics=config.metrics,
        )
        key = config.level_key
        if not any(k == key for _, k in sm.aggregates):
            raise NoQualifyingSlices(f"no non-empty slice at {key}")
        for (metric, level_key), value in sorted(sm.aggregates.items()):
            out.records.append(MorphometricRecord(row.subject_id, row.contrast, row.version_id,
                                                  metric, level_key, float(value)))
        if config.per_slice_records:
            for rec in sm.slices:
                if rec.is_empty:
                    continue
                for metric in config.metrics:
                    v = rec.value(metric)
                    if v is not None:
                        out.records.append(MorphometricRecord(row.subject_id, row.contrast, row.version_id,
                                                              metric, rec.slice_index, float(v)))
        out.slice_rows = list(slice_rows(row.subject_id, row.contrast, row.version_id, sm.slices))
        if sm.gaps:
            log.info("%s/%s/%s: %d empty slice(s) inside the cord", row.subject_id, row.contrast,
                     row.version_id, sm.gaps)
    except (CordMorphError, OSError, ValueError, IndexError) as exc:
        out.records, out.slice_rows = [], []
        out.error = f"{type(exc).__name__}: {exc}"
    return out


def run_morphometrics(manifest: DatasetManifest, config: RunConfig) -> RunResult:
    selected = shard_rows(manifest.rows, config.shard)
    if not manifest.rows:
        log.warning("manifest is empty; nothing to compute")
    if config.workers > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(lambda ir: process_row(ir[0], ir[1], config), selected))
    else:
        results = [process_row(i, r, config) for i, r in selected]
    results.sort(key=lambda r: r.index)
    records, rows, errors = [], [], []
    for res, (_, row) in zip(results, selected):
        if res.error is not None:
            errors.append((res.index, row.subject_id, row.contrast, row.version_id, res.error))
        else:
            records.extend(res.records)
            rows.extend(res.slice_rows)
    records.sort(key=MorphometricRecord.sort_key)
    rows.sort(key=lambda r: (r[2], r[0], r[1], r[3]))
    return RunResult(records, rows, errors, len(selected) - len(errors), len(errors),
                     config.shard, len(manifest.rows))


def write_run_outputs(result: RunResult, out_dir, config: RunConfig):
    """Write store (appending to any existing one), per-slice CSV, errors CSV and summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store_path = out / "store.ndjson"
    store = DriftStore.load(store_path)
    for v in config.versions:
        store.add_version(v)
    store.extend(result.records)
    store.save(store_path)

    atomic_write_text(out / "per_slice.csv", slices_to_csv(result.slice_rows))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("row_index", "subject_id", "contrast", "version_id", "error"))
    w.writerows(result.errors)
    atomic_write_text(out / "errors.csv", buf.getvalue())
    summary = result.summary()
    summary["config_digest"] = config.digest()
    if config.stamp:
        summary["generated_at"] = _now()
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return store_path


def merge_stores(paths) -> DriftStore:
    return DriftStore.merge(DriftStore.load(p) for p in paths)


def _now():
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


# --- reports ----------------------------------------------------------------------

def build_report(store: DriftStore, base, candidate, config: RunConfig) -> DriftReport:
    contrasts = [c for c in config.contrasts
                 if any(r.contrast == c for r in store.select(metric="area", level_key=config.level_key))]
    report = compare_versions(store, base, candidate, contrasts or None, config.level_key,
                              config.policy, config.digest())
    if config.stamp:
        report.generated_at = _now()
    return report


def _per_slice_scaling(store, base, candidate, metric, contrasts):
    def pick(version):
        return [r for r in store.select(version_id=version, metric=metric)
                if isinstance(r.level_key, int) and (not contrasts or r.contrast in contrasts)]

    new, old = pick(candidate), pick(base)
    if not new or not old:
        return None
    try:
        table = scaling_factors(new, old)
    except CordMorphError:
        return None
    rows = table.rows.get(metric, [])

    def mean_by_slice(recs):
        acc = {}
        for r in recs:
            acc.setdefault(r.level_key, []).append(r.value)
        return {k: math.fsum(v) / len(v) for k, v in acc.items()}

    mb, mc = mean_by_slice(old), mean_by_slice(new)
    slices = [r.level_key for r in rows]
    return table, slices, [mb[s] for s in slices], [mc[s] for s in slices]


def emit_reports(store: DriftStore, base, candidate, config: RunConfig, out_dir=None) -> dict:
    """Write report JSON/CSV, SVG plots, scaling tables and a release bundle.

    Returns a mapping of artifact name -> path.
    """
    out = Path(out_dir or config.out)
    out.mkdir(parents=True, exist_ok=True)
    report = build_report(store, base, candidate, config)
    files = {}

    def put(name, text):
        path = out / name
        atomic_write_text(path, text)
        files[name] = path

    put("drift_report.json", report.to_json())
    put("drift_report.csv", report.summary_csv())

    # level-aggregate scaling factors
    agg_new = [r for r in store.select(version_id=candidate) if isinstance(r.level_key, str)]
    agg_old = [r for r in store.select(version_id=base) if isinstance(r.level_key, str)]
    try:
        put("scaling_factors_levels.csv", scaling_factors(agg_new, agg_old).to_csv())
    except CordMorphError as exc:
        log.warning("no level scaling factors: %s", exc)

    if "svg" in config.formats:
        groups = {base: report.base.per_subject_std, candidate: report.candidate.per_subject_std}
        put("csa_std.svg", svg.strip_plot(groups, f"CSA STD across contrasts ({report.level_key})",
                                          "CSA STD across contrasts [mm²]"))
        a, b = config.agreement_pair
        series = {}
        for version in (base, candidate):
            try:
                ag = contrast_agreement(store.select(version_id=version), a, b, report.level_key)
            except InsufficientSubjects:
                continue
            series[version] = ag.pairs
        if series:
            put(f"agreement_{a}_{b}.svg", svg.scatter_identity(
                series, f"{a} vs {b} CSA at {report.level_key}", f"{a} CSA [mm²]", f"{b} CSA [mm²]"))
        pts = []
        for r in store.select(version_id=base, metric="area", level_key=report.level_key):
            other = store.select(version_id=candidate, metric="area", level_key=report.level_key,
                                 subject_id=r.subject_id, contrast=r.contrast)
            if other:
                pts.append((f"{r.subject_id}/{r.contrast}", r.value, other[0].value))
        if pts:
            put("version_agreement.svg", svg.scatter_identity(
                {f"{candidate} vs {base}": pts}, f"CSA at {report.level_key}: {candidate} vs {base}",
                f"{base} CSA [mm²]", f"{candidate} CSA [mm²]"))

    slice_tables = io.StringIO()
    w = csv.writer(slice_tables, lineterminator="\n")
    w.writerow(("metric", "slice_index", "base_mean", "candidate_mean", "mean_ratio", "std_ratio", "n"))
    any_slices = False
    for metric in config.metrics:
        res = _per_slice_scaling(store, base, candidate, metric, report.contrasts)
        if res is None:
            continue
        any_slices = True
        table, slices, mb, mc = res
        rows = table.rows[metric]
        for s, vb, vc, row in zip(slices, mb, mc, rows):
            w.writerow((metric, s, repr(vb), repr(vc), repr(row.mean_ratio), repr(row.std_ratio), row.n))
        if "svg" in config.formats:
            put(f"per_slice_{metric}.svg", svg.curves_with_band(
                slices, {base: mb, candidate: mc}, [r.mean_ratio for r in rows],
                [r.std_ratio for r in rows], f"{metric} per slice", metric))
    if any_slices:
        put("scaling_factors_slices.csv", slice_tables.getvalue())

    verdict = report.verdict
    lines = [f"verdict: {verdict.label}",
             f"policy: {json.dumps(asdict(verdict.policy), sort_keys=True)}"]
    lines += [str(v) for v in verdict.violations]
    put("verdict.txt", "\n".join(lines) + "\n")

    bundle = out / "release"
    if bundle.exists():
        shutil.rmtree(bundle)
    bundle.mkdir()
    digests = []
    for name in sorted(files):
        shutil.copyfile(files[name], bundle / name)
        digests.append(f"{hashlib.sha256(files[name].read_bytes()).hexdigest()}  {name}")
    (bundle / "SHA256SUMS").write_text("\n".join(digests) + "\n")
    files["release"] = bundle
    return files


# --- gate -------------------------------------------------------------------------

def gate_cli(report_path, policy: GatePolicy | None = None, stderr=None) -> int:
    """Exit code for a stored report: 0 PASS, 2 drift FAIL, 1 operational error."""
    stderr = stderr or sys.stderr
    try:
        report = DriftReport.from_json(Path(report_path).read_text())
        if policy is None and report.verdict is not None:
            policy = report.verdict.policy
        verdict = gate(report, policy)
    except (OSError, ValueError, KeyError, TypeError, CordMorphError) as exc:
        print(f"error: {exc}", file=stderr)
        return EXIT_ERROR
    print(f"verdict: {verdict.label}", file=stderr)
    for v in verdict.violations:
        print(str(v), file=stderr)
    return EXIT_PASS if verdict.passed else EXIT_DRIFT


def config_with(config: RunConfig, **changes) -> RunConfig:
    return replace(config, **{k: v for k, v in changes.items() if v is not None})


def default_store_path(out_dir) -> Path:
    return Path(out_dir) / "store.ndjson"


__all__ = [
    "DEFAULT_LEVEL_KEY",
    "DatasetManifest",
    "ManifestRow",
    "RunConfig",
    "SplitAssignment",
    "RunResult",
    "split_subjects",
    "run_morphometrics",
    "write_run_outputs",
    "merge_stores",
    "emit_reports",
    "gate_cli",
    "MANIFEST_COLUMNS",
    "SLICE_COLUMNS",
]
