"""Turn raw protocol metric rows into human-readable results.

Reads a results directory written by ``save_protocol`` (metrics.csv +
manifest.json) and emits, deterministically:

* ``curves.csv``      per-strategy efficiency curves (mean + CI per fraction)
* ``welch.csv``       Welch t-tests per fraction, method vs. each baseline
* ``matching.csv``    label fractions at which the method matches each
                      baseline's full-label mean, with CI-band bounds
* ``cost.csv``        annotation savings implied by the matching fractions
* ``subgroups.csv``   zero-shot subgroup metric means
* ``report.md``       structured text summary
* ``curve_<arch>.svg``    efficiency curves with shaded CI bands and a
                          matching-fraction marker line
* ``subgroups_<arch>.svg`` grouped bars per subgroup level

Every file names the manifest hash it derives from, and re-running on
unchanged inputs is byte-identical.  Missing cells do not abort the report:
they are listed, and the result is flagged incomplete.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cost import CostSpec, cost_savings
from .stats import EfficiencyCurve, confidence_interval, welch_ttest
from .svg import Series, bar_chart, line_chart

__all__ = ["ReportError", "ReportResult", "read_results", "generate_report"]


class ReportError(Exception):
    """The results directory is unusable (missing or malformed inputs)."""


@dataclass
class RawRow:
    strategy: str
    arch: str
    scenario: str
    fraction: float
    repeat: int
    metric_name: str
    value: float
    seed: int


@dataclass
class ReportResult:
    out_dir: Path
    manifest_hash: str
    incomplete: bool
    missing: list[str]
    matching: dict  # (arch, baseline) -> {"mean": .., "lo": .., "hi": ..}
    files: list[str] = field(default_factory=list)


def read_results(results_dir) -> tuple[list[RawRow], dict, str]:
    d = Path(results_dir)
    metrics = d / "metrics.csv"
    manifest_path = d / "manifest.json"
    if not d.is_dir() or not metrics.exists() or not manifest_path.exists():
        raise ReportError(
            f"'{d}' is not a results directory (need metrics.csv and manifest.json)"
        )
    manifest_bytes = manifest_path.read_bytes()
    manifest = json.loads(manifest_bytes)
    manifest_hash = hashlib.sha256(manifest_bytes).hexdigest()[:16]
    rows: list[RawRow] = []
    with metrics.open(newline="") as fh:
        for rec in csv.DictReader(fh):
            try:
                rows.append(
                    RawRow(
                        strategy=rec["strategy"],
                        arch=rec["arch"],
                        scenario=rec["scenario"],
                        fraction=float(rec["fraction"]),
                        repeat=int(rec["repeat"]),
                        metric_name=rec["metric_name"],
                        value=float(rec["value"]),
                        seed=int(rec["seed"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as e:
                raise ReportError(f"malformed metrics.csv row {rec}: {e}") from e
    if not rows:
        raise ReportError(f"'{metrics}' holds no metric rows")
    return rows, manifest, manifest_hash


def _group(rows: list[RawRow], metric: str) -> dict:
    out: dict = {}
    for r in rows:
        if r.metric_name != metric:
            continue
        out.setdefault((r.strategy, r.arch, r.scenario, r.fraction), []).append((r.repeat, r.value))
    return {k: [v for _, v in sorted(vals)] for k, vals in out.items()}


def _fmt(x: float | None, nd: int = 6) -> str:
    if x is None:
        return "NA"
    return f"{x:.{nd}f}"


def _curve_points(cells, strategy, arch, fractions) -> list[tuple[float, list[float]]]:
    pts = []
    zs = cells.get((strategy, arch, "zero_shot", 0.0))
    if zs:
        pts.append((0.0, zs))
    for f in fractions:
        if f <= 0.0:
            continue
        vals = cells.get((strategy, arch, "ood_finetune", f))
        if vals:
            pts.append((f, vals))
    return pts


def generate_report(
    results_dir,
    out_dir=None,
    level: float = 0.95,
    curve_strategy: str | None = None,
    cost_specs: list[CostSpec] | None = None,
) -> ReportResult:
    rows, manifest, mhash = read_results(results_dir)
    out = Path(out_dir) if out_dir is not None else Path(results_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    stamp = f"manifest {mhash}"

    metric = manifest.get("metric", "accuracy")
    strategies = list(manifest.get("strategies", sorted({r.strategy for r in rows})))
    archs = list(manifest.get("archs", sorted({r.arch for r in rows})))
    fractions = [float(f) for f in manifest.get("fractions", sorted({r.fraction for r in rows}))]
    repeats = int(manifest.get("repeats", 2))
    cells = _group(rows, metric)

    if curve_strategy is None:
        curve_strategy = "contrastive" if "contrastive" in strategies else strategies[0]
    if curve_strategy not in strategies:
        raise ReportError(f"curve strategy '{curve_strategy}' not present in results")
    baselines = [s for s in strategies if s != curve_strategy]

    # completeness: every expected cell, with >= 2 repeats for intervals
    missing: list[str] = []
    for s in strategies:
        for a in archs:
            expected = [("in_dist", 1.0), ("zero_shot", 0.0)]
            expected += [("ood_finetune", f) for f in fractions if f > 0.0]
            for scen, f in expected:
                n = len(cells.get((s, a, scen, f), []))
                if n == 0:
                    missing.append(f"{s}/{a}/{scen}/fraction={f:g}: no rows")
                elif n < 2:
                    missing.append(f"{s}/{a}/{scen}/fraction={f:g}: {n} repeat(s), need >= 2")
                elif n < repeats:
                    missing.append(f"{s}/{a}/{scen}/fraction={f:g}: {n}/{repeats} repeats")
    incomplete = bool(missing)

    files: list[str] = []

    def write(name: str, text: str) -> None:
        (out / name).write_text(text)
        files.append(name)

    # ---- curves.csv -------------------------------------------------------
    lines = [f"# {stamp}", "strategy,arch,fraction,n,mean,ci_lo,ci_hi"]
    curve_data: dict = {}
    for a in archs:
        for s in strategies:
            pts = _curve_points(cells, s, a, fractions)
            curve_data[(s, a)] = pts
            for f, vals in pts:
                mean = float(np.mean(vals))
                if len(vals) >= 2:
                    lo, hi = confidence_interval(vals, level=level)
                else:
                    lo = hi = mean
                lines.append(
                    f"{s},{a},{f:g},{len(vals)},{_fmt(mean)},{_fmt(lo)},{_fmt(hi)}"
                )
    write("curves.csv", "\n".join(lines) + "\n")

    # ---- welch.csv --------------------------------------------------------
    lines = [f"# {stamp}", "arch,fraction,scenario,method,baseline,t,dof,p_value"]
    welch_rows = []
    for a in archs:
        for f in fractions:
            scen = "zero_shot" if f == 0.0 else "ood_finetune"
            mv = cells.get((curve_strategy, a, scen, f))
            for b in baselines:
                bv = cells.get((b, a, scen, f))
                if not mv or not bv or len(mv) < 2 or len(bv) < 2:
                    lines.append(f"{a},{f:g},{scen},{curve_strategy},{b},MISSING,MISSING,MISSING")
                    continue
                w = welch_ttest(mv, bv)
                welch_rows.append((a, f, scen, b, w))
                lines.append(
                    f"{a},{f:g},{scen},{curve_strategy},{b},"
                    f"{_fmt(w.t)},{_fmt(w.dof)},{w.p_value:.6g}"
                )
    write("welch.csv", "\n".join(lines) + "\n")

    # ---- matching.csv + cost.csv ------------------------------------------
    matching: dict = {}
    lines = [f"# {stamp}", "arch,method,baseline,target,matching_mean,matching_lo,matching_hi"]
    for a in archs:
        curve = EfficiencyCurve(metric)
        for f, vals in curve_data.get((curve_strategy, a), []):
            for v in vals:
                curve.add(f, v)
        for b in baselines:
            full = cells.get((b, a, "ood_finetune", 1.0))
            if not full or not curve.fractions():
                lines.append(f"{a},{curve_strategy},{b},MISSING,MISSING,MISSING,MISSING")
                continue
            target = float(np.mean(full))
            mean_mf = curve.matching_fraction(target, which="mean", level=level)
            # band edges bound the estimate: the lower band crossing is
            # conservative (late), the upper optimistic (early)
            hi_mf = curve.matching_fraction(target, which="lo", level=level)
            lo_mf = curve.matching_fraction(target, which="hi", level=level)
            matching[(a, b)] = {"target": target, "mean": mean_mf, "lo": lo_mf, "hi": hi_mf}
            lines.append(
                f"{a},{curve_strategy},{b},{_fmt(target)},"
                f"{_fmt(mean_mf, 4)},{_fmt(lo_mf, 4)},{_fmt(hi_mf, 4)}"
            )
    write("matching.csv", "\n".join(lines) + "\n")

    lines = [f"# {stamp}", "cost_spec,arch,baseline,basis,fraction_needed,samples_saved,hours_saved,dollars_saved"]
    for spec in cost_specs or []:
        for (a, b), m in sorted(matching.items()):
            for basis in ("mean", "lo", "hi"):
                frac = m[basis]
                if frac is None:
                    lines.append(f"{spec.name},{a},{b},{basis},unmatched,NA,NA,NA")
                    continue
                rep = cost_savings(spec, frac)
                lines.append(
                    f"{spec.name},{a},{b},{basis},{_fmt(frac, 4)},{rep.samples_saved},"
                    f"{_fmt(rep.hours_saved, 2)},{_fmt(rep.dollars_saved, 2)}"
                )
    write("cost.csv", "\n".join(lines) + "\n")

    # ---- subgroups.csv ----------------------------------------------------
    sub_rows: dict = {}
    for r in rows:
        if "[" in r.metric_name and r.metric_name.endswith("]"):
            key = (r.strategy, r.arch, r.metric_name)
            sub_rows.setdefault(key, []).append(r.value)
    lines = [f"# {stamp}", "strategy,arch,metric_name,n,mean"]
    for (s, a, name), vals in sorted(sub_rows.items()):
        lines.append(f"{s},{a},{name},{len(vals)},{_fmt(float(np.mean(vals)))}")
    write("subgroups.csv", "\n".join(lines) + "\n")

    # ---- figures ----------------------------------------------------------
    for a in archs:
        series = []
        for s in strategies:
            pts = curve_data.get((s, a), [])
            if not pts:
                continue
            mean_pts = [(f, float(np.mean(v))) for f, v in pts]
            band = []
            for f, v in pts:
                if len(v) >= 2:
                    lo, hi = confidence_interval(v, level=level)
                else:
                    lo = hi = float(np.mean(v))
                band.append((f, lo, hi))
            series.append(Series(label=s, points=mean_pts, band=band))
        if not series:
            continue
        marker = None
        marker_label = ""
        if baselines:
            m = matching.get((a, baselines[0]))
            if m and m["mean"] is not None:
                marker = m["mean"]
                marker_label = f"match @ {100 * m['mean']:.1f}%"
        write(
            f"curve_{a}.svg",
            line_chart(
                title=f"{metric} vs label fraction ({a})",
                series=series,
                xlabel="fraction of shifted-domain labels",
                ylabel=metric,
                marker_x=marker,
                marker_label=marker_label,
                footnote=stamp,
            ),
        )
        levels = sorted({name for (s, aa, name) in sub_rows if aa == a})
        if levels:
            groups = []
            for s in strategies:
                vals = [
                    float(np.mean(sub_rows.get((s, a, name), [np.nan]))) for name in levels
                ]
                if not all(np.isnan(v) for v in vals):
                    groups.append((s, [0.0 if np.isnan(v) else v for v in vals]))
            cats = [name[name.index("[") + 1 : -1] for name in levels]
            if groups:
                write(
                    f"subgroups_{a}.svg",
                    bar_chart(
                        title=f"zero-shot subgroup {metric} ({a})",
                        categories=cats,
                        groups=groups,
                        ylabel=metric,
                        footnote=stamp,
                    ),
                )

    # ---- report.md --------------------------------------------------------
    md = [f"# Shift evaluation report", "", f"Derived from {stamp}.", ""]
    md += [f"- metric: {metric}", f"- method strategy: {curve_strategy}",
           f"- baselines: {', '.join(baselines) if baselines else '(none)'}",
           f"- repeats: {repeats}", ""]
    md.append("## Efficiency curves (mean over repeats)")
    md.append("")
    for a in archs:
        md.append(f"### arch {a}")
        md.append("")
        header = "| strategy | " + " | ".join(f"f={f:g}" for f in fractions) + " |"
        md.append(header)
        md.append("|" + "---|" * (len(fractions) + 1))
        for s in strategies:
            by_f = {f: np.mean(v) for f, v in curve_data.get((s, a), [])}
            cells_txt = [f"{by_f[f]:.4f}" if f in by_f else "MISSING" for f in fractions]
            md.append(f"| {s} | " + " | ".join(cells_txt) + " |")
        md.append("")
    md.append("## Welch tests (method vs baseline, per fraction)")
    md.append("")
    md.append("| arch | fraction | baseline | t | dof | p |")
    md.append("|---|---|---|---|---|---|")
    for a, f, scen, b, w in welch_rows:
        md.append(f"| {a} | {f:g} | {b} | {w.t:.4f} | {w.dof:.2f} | {w.p_value:.4g} |")
    md.append("")
    md.append("## Matching fractions")
    md.append("")
    if matching:
        for (a, b), m in sorted(matching.items()):
            mm = m["mean"]
            if mm is None:
                md.append(
                    f"- [{a}] {curve_strategy} never reaches {b}'s full-label mean "
                    f"({m['target']:.4f}) on this grid."
                )
            else:
                lo = f"{100 * m['lo']:.1f}%" if m["lo"] is not None else "NA"
                hi = f"{100 * m['hi']:.1f}%" if m["hi"] is not None else "NA"
                md.append(
                    f"- [{a}] {curve_strategy} matches {b}'s full-label mean "
                    f"({m['target']:.4f}) at {100 * mm:.1f}% of labels "
                    f"(band bounds: {lo} to {hi})."
                )
    else:
        md.append("- no baseline comparisons available")
    md.append("")
    if cost_specs:
        md.append("## Annotation savings")
        md.append("")
        for spec in cost_specs:
            note = spec.consistency_note()
            if note:
                md.append(f"- note: {note}")
            for (a, b), m in sorted(matching.items()):
                if m["mean"] is None:
                    continue
                rep = cost_savings(spec, m["mean"])
                md.append(
                    f"- {spec.name} [{a} vs {b}]: {rep.samples_saved} fewer annotations, "
                    f"{rep.hours_saved:.1f} hours, ${rep.dollars_saved:,.0f} saved "
                    f"(of {rep.hours_total:.1f} h / ${rep.dollars_total:,.0f} total)."
                )
        md.append("")
    md.append("## Data completeness")
    md.append("")
    if missing:
        md.append(f"INCOMPLETE: {len(missing)} cell(s) flagged.")
        md.append("")
        for m in missing:
            md.append(f"- MISSING {m}")
    else:
        md.append("All expected cells present.")
    md.append("")
    write("report.md", "\n".join(md))

    return ReportResult(
        out_dir=out,
        manifest_hash=mhash,
        incomplete=incomplete,
        missing=missing,
        matching=matching,
        files=sorted(files),
    )
