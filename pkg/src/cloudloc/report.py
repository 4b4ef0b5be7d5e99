"""Evaluation statistics: nearest-rank percentiles of localization errors
and table emission in the Median/P25/P50/P75/P90 layout.

Failed localizations never contribute to the error percentiles but always
count in the localization-rate denominator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .errors import EmptySet, ParseError


@dataclass(frozen=True)
class EvalRecord:
    image_id: int
    success: bool
    position_error: float | None = None
    rotation_error_deg: float | None = None

    def __post_init__(self):
        if self.success and (self.position_error is None or self.rotation_error_deg is None):
            raise ValueError("successful records need both error values")
        if not self.success and (self.position_error is not None or self.rotation_error_deg is not None):
            raise ValueError("failed records must not carry error values")


@dataclass(frozen=True)
class PercentileSummary:
    median: float
    p25: float
    p50: float
    p75: float
    p90: float


@dataclass(frozen=True)
class Report:
    n_total: int
    n_success: int
    position: PercentileSummary | None
    rotation_deg: PercentileSummary | None

    @property
    def rate(self) -> float:
        return self.n_success / self.n_total if self.n_total else 0.0


def percentile(errors, p: float) -> float:
    """Nearest-rank percentile: the value at 1-based index ceil(P/100 * n)
    of the ascending sort ("maximum error for P% of the data")."""
    if not 0 < p < 100:
        raise ValueError("P must lie in (0, 100)")
    values = sorted(errors)
    if not values:
        raise EmptySet("no errors to take a percentile of")
    rank = math.ceil(p / 100.0 * len(values))
    return float(values[max(rank, 1) - 1])


def _summary(errors) -> PercentileSummary:
    return PercentileSummary(
        median=percentile(errors, 50),
        p25=percentile(errors, 25),
        p50=percentile(errors, 50),
        p75=percentile(errors, 75),
        p90=percentile(errors, 90),
    )


def summarize(records) -> Report:
    """Median and P25/50/75/90 over successful records plus the
    localization rate. Raises EmptySet when no record succeeded."""
    records = list(records)
    if not records:
        raise ValueError("need at least one record")
    good = [r for r in records if r.success]
    if not good:
        raise EmptySet("no successful localizations")
    return Report(
        n_total=len(records),
        n_success=len(good),
        position=_summary([r.position_error for r in good]),
        rotation_deg=_summary([r.rotation_error_deg for r in good]),
    )


def summarize_or_null(records) -> Report:
    """Like summarize, but an all-failures set yields a rate-0 report with
    null percentile blocks instead of raising."""
    try:
        return summarize(records)
    except EmptySet:
        return Report(n_total=len(list(records)), n_success=0, position=None, rotation_deg=None)


# ---------------------------------------------------------------------------
# Emission / parsing. Text and CSV print values with 4 decimals, matching
# the published tables; CSV and JSON round-trip a Report exactly.
# ---------------------------------------------------------------------------

_METRIC_ROWS = (("position_m", "position"), ("rotation_deg", "rotation_deg"))
_COLUMNS = ("median", "p25", "p50", "p75", "p90")


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def emit_table(report: Report, format: str = "text") -> bytes:
    if format == "text":
        lines = [
            f"localized {report.n_success}/{report.n_total} (rate {_fmt(report.rate)})",
            f"{'Metric':<14}{'Median':>10}{'P 25%':>10}{'P 50%':>10}{'P 75%':>10}{'P 90%':>10}",
        ]
        for label, attr in _METRIC_ROWS:
            s = getattr(report, attr)
            if s is None:
                cells = ["-"] * 5
            else:
                cells = [_fmt(getattr(s, c)) for c in _COLUMNS]
            lines.append(f"{label:<14}" + "".join(f"{c:>10}" for c in cells))
        return ("\n".join(lines) + "\n").encode("utf-8")
    if format == "csv":
        lines = ["metric,median,p25,p50,p75,p90"]
        lines.append(f"n_total,{report.n_total},,,,")
        lines.append(f"n_success,{report.n_success},,,,")
        for label, attr in _METRIC_ROWS:
            s = getattr(report, attr)
            if s is None:
                lines.append(f"{label},,,,,")
            else:
                lines.append(label + "," + ",".join(_fmt(getattr(s, c)) for c in _COLUMNS))
        return ("\n".join(lines) + "\n").encode("utf-8")
    if format == "json":
        def block(s):
            if s is None:
                return None
            return {c: getattr(s, c) for c in _COLUMNS}

        payload = {
            "n_total": report.n_total,
            "n_success": report.n_success,
            "rate": report.rate,
            "position": block(report.position),
            "rotation_deg": block(report.rotation_deg),
        }
        return (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8")
    raise ValueError(f"unknown table format {format!r}")


def parse_table(data: bytes, format: str) -> Report:
    """Inverse of emit_table for csv and json."""
    text = data.decode("utf-8")
    if format == "csv":
        rows = [line.split(",") for line in text.strip().splitlines()]
        if not rows or rows[0][0] != "metric":
            raise ParseError("bad csv table header")
        fields = {}
        for row in rows[1:]:
            fields[row[0]] = row[1:]
        try:
            n_total = int(fields["n_total"][0])
            n_success = int(fields["n_success"][0])

            def block(label):
                vals = fields[label]
                if vals[0] == "":
                    return None
                m, p25, p50, p75, p90 = (float(v) for v in vals[:5])
                return PercentileSummary(median=m, p25=p25, p50=p50, p75=p75, p90=p90)

            return Report(n_total=n_total, n_success=n_success,
                          position=block("position_m"), rotation_deg=block("rotation_deg"))
        except (KeyError, ValueError, IndexError) as exc:
            raise ParseError(f"bad csv table: {exc}") from exc
    if format == "json":
        try:
            payload = json.loads(text)

            def block(d):
                if d is None:
                    return None
                return PercentileSummary(median=d["median"], p25=d["p25"], p50=d["p50"],
                                         p75=d["p75"], p90=d["p90"])

            return Report(
                n_total=int(payload["n_total"]),
                n_success=int(payload["n_success"]),
                position=block(payload["position"]),
                rotation_deg=block(payload["rotation_deg"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"bad json table: {exc}") from exc
    raise ValueError(f"unknown table format {format!r}")


def record_to_dict(rec: EvalRecord) -> dict:
    out = {"image_id": rec.image_id, "success": rec.success}
    if rec.success:
        out["position_error"] = rec.position_error
        out["rotation_error_deg"] = rec.rotation_error_deg
    return out


def record_from_dict(d: dict) -> EvalRecord:
    try:
        return EvalRecord(
            image_id=int(d["image_id"]),
            success=bool(d["success"]),
            position_error=d.get("position_error"),
            rotation_error_deg=d.get("rotation_error_deg"),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"bad eval record: {exc}") from exc
