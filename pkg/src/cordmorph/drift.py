"""Morphometric drift analytics across segmentation-model versions.

Cross-contrast CSA variability uses the sample standard deviation (n-1).
The store is an append-only newline-delimited JSON ledger.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import (
    DivisionByZeroValue,
    DuplicateRecord,
    InsufficientContrasts,
    InsufficientSubjects,
    InvalidPolicy,
    InvalidRecord,
    NoOverlap,
    UnknownVersion,
)
from .geometry import METRICS

STD_CONVENTION = "sample standard deviation (divisor n-1)"
DEFAULT_LEVEL_KEY = "C2-C3"


@dataclass(frozen=True)
class ModelVersion:
    version_id: str
    source_url: str | None = None
    created: str | None = None

    def __post_init__(self):
        if not self.version_id:
            raise ValueError("version_id must be non-empty")


@dataclass(frozen=True)
class MorphometricRecord:
    subject_id: str
    contrast: str
    version_id: str
    metric: str
    level_key: str | int
    value: float

    def __post_init__(self):
        if self.metric not in METRICS:
            raise InvalidRecord(f"unknown metric {self.metric!r}")
        if not isinstance(self.value, (int, float)) or not math.isfinite(self.value):
            raise InvalidRecord(f"value must be finite, got {self.value!r}")
        if isinstance(self.level_key, bool) or not isinstance(self.level_key, (str, int)):
            raise InvalidRecord(f"level_key must be a tag or a slice index, got {self.level_key!r}")

    @property
    def key(self):
        return (self.subject_id, self.contrast, self.version_id, self.metric, self.level_key)

    def sort_key(self):
        lk = self.level_key
        return (self.version_id, self.subject_id, self.contrast, self.metric,
                (0, lk, "") if isinstance(lk, int) else (1, 0, lk))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "MorphometricRecord":
        try:
            d = json.loads(line)
            return cls(
                subject_id=str(d["subject_id"]),
                contrast=str(d["contrast"]),
                version_id=str(d["version_id"]),
                metric=d["metric"],
                level_key=d["level_key"],
                value=float(d["value"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidRecord):
                raise
            raise InvalidRecord(f"malformed record line: {line[:80]!r}") from exc


class DriftStore:
    """In-memory view of a record ledger; ``append`` enforces key uniqueness."""

    def __init__(self, records=(), versions=()):
        self._records = {}
        self.versions = {}
        for v in versions:
            self.add_version(v)
        self.extend(records)

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(self.records())

    def add_version(self, version: ModelVersion):
        known = self.versions.get(version.version_id)
        bare = ModelVersion(version.version_id)
        if known is None or known == bare:
            self.versions[version.version_id] = version
        elif version != bare and known != version:
            raise DuplicateRecord(f"conflicting metadata for version {version.version_id!r}")

    def append(self, rec: MorphometricRecord):
        if rec.key in self._records:
            raise DuplicateRecord(f"duplicate record key {rec.key}")
        self._records[rec.key] = rec
        if rec.version_id not in self.versions:
            self.versions[rec.version_id] = ModelVersion(rec.version_id)

    def extend(self, records):
        for rec in records:
            self.append(rec)

    def records(self) -> list:
        return sorted(self._records.values(), key=MorphometricRecord.sort_key)

    def select(self, version_id=None, metric=None, level_key=None, subject_id=None, contrast=None):
        out = []
        for r in self._records.values():
            if version_id is not None and r.version_id != version_id:
                continue
            if metric is not None and r.metric != metric:
                continue
            if level_key is not None and r.level_key != level_key:
                continue
            if subject_id is not None and r.subject_id != subject_id:
                continue
            if contrast is not None and r.contrast != contrast:
                continue
            out.append(r)
        return sorted(out, key=MorphometricRecord.sort_key)

    # --- serialization ---

    def dumps(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records())

    def versions_json(self) -> str:
        vs = [asdict(self.versions[k]) for k in sorted(self.versions)]
        return json.dumps({"versions": vs}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str, versions_text: str | None = None) -> "DriftStore":
        versions = []
        if versions_text:
            for v in json.loads(versions_text).get("versions", []):
                versions.append(ModelVersion(v["version_id"], v.get("source_url"), v.get("created")))
        recs = (MorphometricRecord.from_json(ln) for ln in text.splitlines() if ln.strip())
        return cls(recs, versions)

    @classmethod
    def load(cls, path) -> "DriftStore":
        path = Path(path)
        vpath = versions_path(path)
        vtext = vpath.read_text() if vpath.exists() else None
        text = path.read_text() if path.exists() else ""
        return cls.loads(text, vtext)

    def save(self, path):
        path = Path(path)
        atomic_write_text(path, self.dumps())
        atomic_write_text(versions_path(path), self.versions_json())
        return path

    @classmethod
    def merge(cls, stores) -> "DriftStore":
        out = cls()
        for s in stores:
            for v in s.versions.values():
                out.add_version(v)
            out.extend(s.records())
        return out


def versions_path(store_path: Path) -> Path:
    return store_path.with_name("versions.json")


def atomic_write_text(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def append_records(path, records, versions=()):
    """Append to an on-disk store: read, check uniqueness, replace atomically."""
    store = DriftStore.load(path)
    for v in versions:
        store.add_version(v)
    store.extend(records)
    store.save(path)
    return store


# --- statistics ---------------------------------------------------------------

def _mean(values):
    return math.fsum(values) / len(values)


def sample_std(values) -> float:
    values = list(values)
    if len(values) < 2:
        raise ValueError("sample STD needs at least two values")
    m = _mean(values)
    return math.sqrt(math.fsum((v - m) ** 2 for v in values) / (len(values) - 1))


def pearson_r(xs, ys):
    """Pearson correlation, or None when either variable has zero variance."""
    mx, my = _mean(xs), _mean(ys)
    sxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    syy = math.fsum((y - my) ** 2 for y in ys)
    if sxx == 0 or syy == 0:
        return None
    return sxy / math.sqrt(sxx * syy)


def _csa_by_contrast(records, level_key=DEFAULT_LEVEL_KEY, metric="area"):
    out = {}
    for r in records:
        if r.metric == metric and r.level_key == level_key:
            out[r.contrast] = r.value
    return out


def csa_std_across_contrasts(records, contrasts=None, level_key=DEFAULT_LEVEL_KEY) -> float:
    """Sample STD of one subject's per-contrast CSA (one model version)."""
    by_contrast = _csa_by_contrast(records, level_key)
    if contrasts is not None:
        by_contrast = {c: v for c, v in by_contrast.items() if c in set(contrasts)}
    if len(by_contrast) < 2:
        raise InsufficientContrasts(
            f"need >= 2 contrasts with a {level_key} area record, found {sorted(by_contrast)}"
        )
    return sample_std(by_contrast[c] for c in sorted(by_contrast))


@dataclass
class Agreement:
    contrast_a: str
    contrast_b: str
    pairs: list
    mean_difference: float
    pearson_r: float | None


def contrast_agreement(records, contrast_a, contrast_b, level_key=DEFAULT_LEVEL_KEY,
                       metric="area") -> Agreement:
    """Per-subject (a, b) pairs, mean signed difference (a - b) and Pearson r."""
    a_vals, b_vals = {}, {}
    for r in records:
        if r.metric != metric or r.level_key != level_key:
            continue
        if r.contrast == contrast_a:
            a_vals[r.subject_id] = r.value
        elif r.contrast == contrast_b:
            b_vals[r.subject_id] = r.value
    subjects = sorted(set(a_vals) & set(b_vals))
    if len(subjects) < 2:
        raise InsufficientSubjects(
            f"need >= 2 subjects with both {contrast_a} and {contrast_b}, found {len(subjects)}"
        )
    pairs = [(s, a_vals[s], b_vals[s]) for s in subjects]
    xs = [p[1] for p in pairs]
    ys = [p[2] for p in pairs]
    diff = _mean([x - y for x, y in zip(xs, ys)])
    return Agreement(contrast_a, contrast_b, pairs, diff, pearson_r(xs, ys))


# --- scaling factors ----------------------------------------------------------

@dataclass
class ScalingRow:
    level_key: str | int
    mean_ratio: float
    std_ratio: float
    n: int


@dataclass
class ScalingFactorTable:
    rows: dict = field(default_factory=dict)  # metric -> [ScalingRow] ordered by level_key
    unmatched_new: list = field(default_factory=list)
    unmatched_old: list = field(default_factory=list)

    def row(self, metric, level_key) -> ScalingRow:
        for r in self.rows[metric]:
            if r.level_key == level_key:
                return r
        raise KeyError((metric, level_key))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("metric", "level_key", "mean_ratio", "std_ratio", "n"))
        for metric in sorted(self.rows):
            for r in self.rows[metric]:
                w.writerow((metric, r.level_key, repr(r.mean_ratio), repr(r.std_ratio), r.n))
        return buf.getvalue()

    def to_dict(self):
        return {
            "rows": {m: [asdict(r) for r in rows] for m, rows in sorted(self.rows.items())},
            "unmatched_new": [list(k) for k in self.unmatched_new],
            "unmatched_old": [list(k) for k in self.unmatched_old],
        }


def _level_sort(level_key):
    return (0, level_key, "") if isinstance(level_key, int) else (1, 0, str(level_key))


def scaling_factors(new_records, old_records, metrics=None) -> ScalingFactorTable:
    """Per (metric, level_key): mean and sample STD over subjects of new/old.

    Records are matched on (subject, contrast, metric, level_key); version
    ids are ignored. With a single subject the STD is reported as 0.
    """

    def index(records):
        out = {}
        for r in records:
            if metrics is not None and r.metric not in metrics:
                continue
            k = (r.subject_id, r.contrast, r.metric, r.level_key)
            if k in out:
                raise DuplicateRecord(f"duplicate key {k} within one side")
            out[k] = r.value
        return out

    new, old = index(new_records), index(old_records)
    matched = sorted(set(new) & set(old), key=lambda k: (k[2], _level_sort(k[3]), k[0], k[1]))
    if not matched:
        raise NoOverlap("no (subject, contrast, metric, level_key) key present in both record sets")
    groups = {}
    for k in matched:
        if old[k] == 0:
            raise DivisionByZeroValue(f"old value is 0 for {k}")
        groups.setdefault((k[2], k[3]), []).append(new[k] / old[k])
    table = ScalingFactorTable(
        unmatched_new=sorted(set(new) - set(old), key=str),
        unmatched_old=sorted(set(old) - set(new), key=str),
    )
    for (metric, level_key), ratios in groups.items():
        std = sample_std(ratios) if len(ratios) > 1 else 0.0
        table.rows.setdefault(metric, []).append(ScalingRow(level_key, _mean(ratios), std, len(ratios)))
    for rows in table.rows.values():
        rows.sort(key=lambda r: _level_sort(r.level_key))
    return table


# --- version comparison and gate -----------------------------------------------

@dataclass(frozen=True)
class GatePolicy:
    """Drift envelope. ``None`` disables a bound; enabled bounds must be positive."""

    max_std_increase_rel_pct: float | None = 10.0
    max_std_increase_abs_mm2: float | None = None
    max_mean_csa_shift_pct: float | None = 5.0

    def validate(self):
        for name in ("max_std_increase_rel_pct", "max_std_increase_abs_mm2", "max_mean_csa_shift_pct"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, (int, float)) or not math.isfinite(v) or v <= 0):
                raise InvalidPolicy(f"{name} must be a positive number, got {v!r}")
        if self.max_std_increase_rel_pct is None and self.max_std_increase_abs_mm2 is None:
            raise InvalidPolicy("policy needs a CSA-STD bound (relative and/or absolute)")
        if self.max_mean_csa_shift_pct is None:
            raise InvalidPolicy("policy needs a per-contrast mean-CSA shift bound")
        return self

    @classmethod
    def from_dict(cls, d):
        allowed = {"max_std_increase_rel_pct", "max_std_increase_abs_mm2", "max_mean_csa_shift_pct"}
        unknown = set(d) - allowed
        if unknown:
            raise InvalidPolicy(f"unknown policy keys {sorted(unknown)}")
        return cls(**{k: d.get(k, getattr(cls(), k)) for k in allowed}).validate()


@dataclass
class Violation:
    quantity: str
    observed: float
    allowed: float

    def __str__(self):
        return f"{self.quantity}: observed {self.observed:.6g} > allowed {self.allowed:.6g}"


@dataclass
class Verdict:
    passed: bool
    violations: list
    policy: GatePolicy

    @property
    def label(self):
        return "PASS" if self.passed else "FAIL"

    def to_dict(self):
        return {
            "verdict": self.label,
            "violations": [asdict(v) for v in self.violations],
            "policy": asdict(self.policy),
        }


@dataclass
class VersionStats:
    mean_csa_std: float | None
    per_subject_std: dict
    per_contrast_mean_csa: dict
    agreement: dict  # "A|B" -> {"mean_difference", "pearson_r", "n"}


@dataclass
class DriftReport:
    base_version: str
    candidate_version: str
    contrasts: tuple
    level_key: str
    subjects: list
    base: VersionStats
    candidate: VersionStats
    deltas: dict
    exclusions: list
    verdict: Verdict | None = None
    config_digest: str | None = None
    generated_at: str | None = None

    def to_dict(self):
        d = {
            "base_version": self.base_version,
            "candidate_version": self.candidate_version,
            "contrasts": list(self.contrasts),
            "level_key": self.level_key,
            "std_convention": STD_CONVENTION,
            "subjects": list(self.subjects),
            "base": asdict(self.base),
            "candidate": asdict(self.candidate),
            "deltas": self.deltas,
            "exclusions": self.exclusions,
            "verdict": None if self.verdict is None else self.verdict.to_dict(),
            "config_digest": self.config_digest,
        }
        if self.generated_at is not None:
            d["generated_at"] = self.generated_at
        return d

    def to_json(self) -> str:
        return json.dumps(_encode_nonfinite(self.to_dict()), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DriftReport":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_dict(cls, d) -> "DriftReport":
        d = _decode_nonfinite(d)
        def stats(s):
            return VersionStats(s["mean_csa_std"], s["per_subject_std"], s["per_contrast_mean_csa"], s["agreement"])

        verdict = None
        if d.get("verdict"):
            v = d["verdict"]
            verdict = Verdict(
                v["verdict"] == "PASS",
                [Violation(**x) for x in v["violations"]],
                GatePolicy(**v["policy"]),
            )
        return cls(
            base_version=d["base_version"],
            candidate_version=d["candidate_version"],
            contrasts=tuple(d["contrasts"]),
            level_key=d["level_key"],
            subjects=list(d["subjects"]),
            base=stats(d["base"]),
            candidate=stats(d["candidate"]),
            deltas=d["deltas"],
            exclusions=d["exclusions"],
            verdict=verdict,
            config_digest=d.get("config_digest"),
            generated_at=d.get("generated_at"),
        )

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("quantity", "base", "candidate", "delta"))

        def fmt(v):
            return "" if v is None else repr(v)

        w.writerow(("mean_csa_std_mm2", fmt(self.base.mean_csa_std), fmt(self.candidate.mean_csa_std),
                    fmt(self.deltas["mean_csa_std"])))
        for c in self.contrasts:
            w.writerow((f"mean_csa_mm2[{c}]", fmt(self.base.per_contrast_mean_csa.get(c)),
                        fmt(self.candidate.per_contrast_mean_csa.get(c)),
                        fmt(self.deltas["per_contrast_mean_csa"].get(c))))
        for pair in sorted(self.deltas["agreement_mean_difference"]):
            w.writerow((f"mean_difference[{pair}]",
                        fmt(self.base.agreement.get(pair, {}).get("mean_difference")),
                        fmt(self.candidate.agreement.get(pair, {}).get("mean_difference")),
                        fmt(self.deltas["agreement_mean_difference"][pair])))
        if self.verdict is not None:
            w.writerow(("verdict", "", "", self.verdict.label))
        return buf.getvalue()


def _version_stats(by_subject, subjects_std, subjects_by_contrast, contrasts):
    per_subject = {}
    for s in subjects_std:
        per_subject[s] = sample_std(by_subject[s][c] for c in contrasts)
    mean_std = _mean(list(per_subject.values())) if per_subject else None
    per_contrast = {}
    for c in contrasts:
        subs = subjects_by_contrast[c]
        if subs:
            per_contrast[c] = _mean([by_subject[s][c] for s in subs])
    agreement = {}
    for a, b in itertools.combinations(contrasts, 2):
        subs = sorted(set(subjects_by_contrast[a]) & set(subjects_by_contrast[b]))
        if len(subs) < 2:
            continue
        xs = [by_subject[s][a] for s in subs]
        ys = [by_subject[s][b] for s in subs]
        agreement[f"{a}|{b}"] = {
            "mean_difference": _mean([x - y for x, y in zip(xs, ys)]),
            "pearson_r": pearson_r(xs, ys),
            "n": len(subs),
        }
    return VersionStats(mean_std, per_subject, per_contrast, agreement)


def compare_versions(store: DriftStore, base: str, candidate: str, contrasts=None,
                     level_key=DEFAULT_LEVEL_KEY, policy: GatePolicy | None = None,
                     config_digest=None) -> DriftReport:
    """Compare CSA statistics of two versions over their common subjects."""
    present = {r.version_id for r in store.records()} | set(store.versions)
    for v in (base, candidate):
        if v not in present:
            raise UnknownVersion(f"version {v!r} not in store")

    def table(version):
        out = {}
        for r in store.select(version_id=version, metric="area", level_key=level_key):
            out.setdefault(r.subject_id, {})[r.contrast] = r.value
        return out

    tb, tc = table(base), table(candidate)
    if contrasts is None:
        contrasts = sorted({c for t in (tb, tc) for row in t.values() for c in row})
    contrasts = tuple(contrasts)
    subjects = sorted(set(tb) & set(tc))
    if not subjects:
        raise NoOverlap(f"versions {base!r} and {candidate!r} share no subject with {level_key} CSA")

    exclusions = []
    for s in sorted(set(tb) ^ set(tc)):
        exclusions.append({"subject_id": s, "reason": "present in only one version"})
    subjects_std = []
    subjects_by_contrast = {c: [] for c in contrasts}
    for s in subjects:
        missing = [c for c in contrasts if c not in tb[s] or c not in tc[s]]
        for c in contrasts:
            if c in tb[s] and c in tc[s]:
                subjects_by_contrast[c].append(s)
        if missing:
            exclusions.append({"subject_id": s, "reason": "missing contrasts: " + ",".join(missing)})
        elif len(contrasts) >= 2:
            subjects_std.append(s)

    bs = _version_stats(tb, subjects_std, subjects_by_contrast, contrasts)
    cs = _version_stats(tc, subjects_std, subjects_by_contrast, contrasts)

    def diff(a, b):
        return None if a is None or b is None else b - a

    deltas = {
        "mean_csa_std": diff(bs.mean_csa_std, cs.mean_csa_std),
        "mean_csa_std_rel_pct": _rel_pct(bs.mean_csa_std, cs.mean_csa_std),
        "per_contrast_mean_csa": {
            c: cs.per_contrast_mean_csa[c] - bs.per_contrast_mean_csa[c]
            for c in contrasts if c in bs.per_contrast_mean_csa
        },
        "per_contrast_mean_csa_rel_pct": {
            c: _rel_pct(bs.per_contrast_mean_csa[c], cs.per_contrast_mean_csa[c])
            for c in contrasts if c in bs.per_contrast_mean_csa
        },
        "agreement_mean_difference": {
            k: cs.agreement[k]["mean_difference"] - bs.agreement[k]["mean_difference"]
            for k in bs.agreement if k in cs.agreement
        },
    }
    report = DriftReport(
        base_version=base,
        candidate_version=candidate,
        contrasts=contrasts,
        level_key=level_key,
        subjects=subjects,
        base=bs,
        candidate=cs,
        deltas=deltas,
        exclusions=exclusions,
        config_digest=config_digest,
    )
    report.verdict = gate(report, policy or GatePolicy())
    return report


def _encode_nonfinite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {k: _encode_nonfinite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode_nonfinite(v) for v in obj]
    return obj


def _decode_nonfinite(obj):
    if obj in ("inf", "-inf", "nan"):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _decode_nonfinite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode_nonfinite(v) for v in obj]
    return obj


def _rel_pct(base, cand):
    if base is None or cand is None:
        return None
    if base == 0:
        return 0.0 if cand == 0 else math.copysign(math.inf, cand)
    return 100.0 * (cand - base) / abs(base)


def gate(report: DriftReport, policy: GatePolicy | None = None) -> Verdict:
    """PASS only if every enabled bound holds; FAIL lists every violated bound."""
    policy = (policy or GatePolicy()).validate()
    violations = []
    d = report.deltas
    std_delta = d.get("mean_csa_std")
    if std_delta is not None:
        if policy.max_std_increase_abs_mm2 is not None and std_delta > policy.max_std_increase_abs_mm2:
            violations.append(Violation("mean_csa_std_increase_mm2", std_delta, policy.max_std_increase_abs_mm2))
        rel = d.get("mean_csa_std_rel_pct")
        if policy.max_std_increase_rel_pct is not None and rel is not None and rel > policy.max_std_increase_rel_pct:
            violations.append(Violation("mean_csa_std_increase_pct", rel, policy.max_std_increase_rel_pct))
    for c in report.contrasts:
        rel = d.get("per_contrast_mean_csa_rel_pct", {}).get(c)
        if rel is not None and abs(rel) > policy.max_mean_csa_shift_pct:
            violations.append(Violation(f"mean_csa_shift_pct[{c}]", abs(rel), policy.max_mean_csa_shift_pct))
    return Verdict(not violations, violations, policy)


def records_from_rows(rows):
    """Convenience: build records from (subject, contrast, version, metric, level_key, value) tuples."""
    return [MorphometricRecord(*row) for row in rows]
