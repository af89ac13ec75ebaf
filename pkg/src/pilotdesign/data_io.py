"""Reading and writing datasets, designs, models and experiment results.

Arrays are 0-based in memory.  Files label grid points ``t1..tv`` and write
designs in search results as 1-based indices.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .design_gen import (
    DesignSpec,
    IncidenceMatrix,
    compute_target_concurrence,
    concurrence_deviations,
)
from .errors import DuplicateObservation, NonmonotoneGrid, ParseError, ValidationError
from .fpca_pace import FpcaModel

MISSING_TOKENS = {"", "na", "nan", "null", "none", "."}
RESULT_COLUMNS = ("structure", "n", "design", "dataset", "metric", "value", "n_used", "flag")
SUMMARY_COLUMNS = ("structure", "n", "metric", "min", "q1", "median", "q3", "max", "count",
                   "excluded")


def fmt(x) -> str:
    """Fixed 12-significant-digit float text."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return f"{x:.12g}"


# ---------------------------------------------------------------------------
# Dense data

@dataclass(frozen=True, eq=False)
class DenseDataset:
    """One row of values per subject on a common grid; NaN marks a missing value."""

    subject_ids: tuple
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, float)
        values = np.asarray(self.values, float)
        if grid.ndim != 1 or np.any(np.diff(grid) <= 0):
            raise NonmonotoneGrid("grid must be strictly increasing")
        if values.ndim != 2 or values.shape != (len(self.subject_ids), len(grid)):
            raise ValidationError("values must be n x v with one row per subject")
        object.__setattr__(self, "subject_ids", tuple(self.subject_ids))
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def v(self) -> int:
        return self.values.shape[1]

    @property
    def missing(self) -> np.ndarray:
        return ~np.isfinite(self.values)

    @property
    def missing_fraction(self) -> float:
        return float(self.missing.mean()) if self.values.size else 0.0

    def __eq__(self, other):
        if not isinstance(other, DenseDataset):
            return NotImplemented
        return (self.subject_ids == other.subject_ids
                and np.array_equal(self.grid, other.grid)
                and np.array_equal(self.values, other.values, equal_nan=True))


def _parse_float(text: str, line: int, what: str) -> float:
    if text.strip().lower() in MISSING_TOKENS:
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"cannot parse {what} {text!r}", line=line) from None


_TIME_LABEL = re.compile(r"^\s*[A-Za-z_]*\s*([-+]?\d*\.?\d+(?:[eE][-+]?\d+)?)\s*$")


def _parse_time_label(label: str, line: int) -> float:
    m = _TIME_LABEL.match(label)
    if not m:
        raise ParseError(f"cannot read a time from column label {label!r}", line=line)
    return float(m.group(1))


def _subject_key(sid: str):
    # numeric ids sort numerically, the rest lexically after them
    try:
        return (0, float(sid), sid)
    except ValueError:
        return (1, 0.0, sid)


def _read_rows(path):
    with open(path, newline="") as fh:
        rows = [(i + 1, row) for i, row in enumerate(csv.reader(fh))]
    rows = [(i, r) for i, r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError("file is empty", line=1)
    return rows


def ingest_dense_csv(path, layout: str = "wide") -> DenseDataset:
    """Read a dense dataset.

    ``wide``: header ``subject,t1,...,tv`` (labels carry the time values),
    one row per subject.  ``long``: header ``subject,time,value``, pivoted to
    wide with subjects and times sorted.  Empty cells and NA are missing.
    """
    rows = _read_rows(path)
    if layout == "wide":
        return _ingest_wide(rows)
    if layout == "long":
        return _ingest_long(rows)
    raise ValidationError("layout must be 'wide' or 'long'")


def _ingest_wide(rows) -> DenseDataset:
    head_line, header = rows[0]
    if len(header) < 2 or header[0].strip().lower() != "subject":
        raise ParseError("wide header must start with 'subject'", line=head_line)
    grid = np.array([_parse_time_label(h, head_line) for h in header[1:]])
    if np.any(np.diff(grid) <= 0):
        raise NonmonotoneGrid("time columns must be strictly increasing", line=head_line)
    ids, values, seen = [], [], {}
    for line, row in rows[1:]:
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(row)}", line=line)
        sid = row[0].strip()
        if sid in seen:
            raise DuplicateObservation(f"subject {sid!r} repeats line {seen[sid]}", line=line)
        seen[sid] = line
        ids.append(sid)
        values.append([_parse_float(c, line, "value") for c in row[1:]])
    if not ids:
        raise ParseError("no subject rows", line=head_line)
    return DenseDataset(tuple(ids), grid, np.array(values, float))


def _ingest_long(rows) -> DenseDataset:
    head_line, header = rows[0]
    if [h.strip().lower() for h in header] != ["subject", "time", "value"]:
        raise ParseError("long header must be 'subject,time,value'", line=head_line)
    cells: dict = {}
    for line, row in rows[1:]:
        if len(row) != 3:
            raise ParseError(f"expected 3 fields, found {len(row)}", line=line)
        sid = row[0].strip()
        t = _parse_float(row[1], line, "time")
        if math.isnan(t):
            raise ParseError("missing time", line=line)
        key = (sid, t)
        if key in cells:
            raise DuplicateObservation(
                f"subject {sid!r} at time {t:g} repeats line {cells[key][0]}", line=line)
        cells[key] = (line, _parse_float(row[2], line, "value"))
    if not cells:
        raise ParseError("no observation rows", line=head_line)
    ids = sorted({k[0] for k in cells}, key=_subject_key)
    times = sorted({k[1] for k in cells})
    col = {t: j for j, t in enumerate(times)}
    row_of = {s: i for i, s in enumerate(ids)}
    values = np.full((len(ids), len(times)), np.nan)
    for (sid, t), (_, val) in cells.items():
        values[row_of[sid], col[t]] = val
    return DenseDataset(tuple(ids), np.array(times), values)


def _time_label(t: float) -> str:
    return f"t{fmt(t)}"


def write_dense_csv(dataset: DenseDataset, path, layout: str = "wide") -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if layout == "wide":
        w.writerow(["subject"] + [_time_label(t) for t in dataset.grid])
        for sid, row in zip(dataset.subject_ids, dataset.values):
            w.writerow([sid] + ["" if np.isnan(x) else fmt(x) for x in row])
    elif layout == "long":
        w.writerow(["subject", "time", "value"])
        for sid, row in zip(dataset.subject_ids, dataset.values):
            for t, x in zip(dataset.grid, row):
                if not np.isnan(x):
                    w.writerow([sid, fmt(t), fmt(x)])
    else:
        raise ValidationError("layout must be 'wide' or 'long'")
    _write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Designs

def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def design_metadata(design: IncidenceMatrix, spec: DesignSpec | None = None, **extra) -> dict:
    meta = {"structure": design.structure_tag, "n": design.n, "v": design.v, "K": design.K,
            "snippet_rows": design.snippet_rows}
    if spec is not None:
        meta["spec"] = asdict(spec)
        if spec.v >= 2 and spec.K >= 2:
            target = compute_target_concurrence(spec)
            meta["target_concurrence"] = {"c1": target.c1, "c2": target.c2, "c3": target.c3,
                                          "c3_literal": target.c3_literal}
            meta["max_deviation"] = concurrence_deviations(design, spec)
    meta.update(extra)
    return meta


def write_design(design: IncidenceMatrix, path, spec: DesignSpec | None = None,
                 **extra) -> Path:
    """Write the 0/1 matrix as CSV (header ``t1..tv``) plus a JSON sidecar.

    Returns the sidecar path.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"t{j + 1}" for j in range(design.v)])
    for row in design.entries:
        w.writerow([int(x) for x in row])
    _write_text(path, buf.getvalue())
    side = sidecar_path(path)
    _write_text(side, json.dumps(design_metadata(design, spec, **extra), indent=2,
                                 sort_keys=True) + "\n")
    return side


def read_design(path) -> tuple[IncidenceMatrix, dict]:
    rows = _read_rows(path)
    head_line, header = rows[0]
    v = len(header)
    entries = []
    for line, row in rows[1:]:
        if len(row) != v:
            raise ParseError(f"expected {v} fields, found {len(row)}", line=line)
        try:
            vals = [int(c) for c in row]
        except ValueError:
            raise ParseError("design entries must be 0 or 1", line=line) from None
        if any(x not in (0, 1) for x in vals):
            raise ParseError("design entries must be 0 or 1", line=line)
        entries.append(vals)
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    arr = np.array(entries, dtype=np.uint8).reshape(len(entries), v)
    return IncidenceMatrix(arr, meta.get("structure", "random"),
                           int(meta.get("snippet_rows", 0))), meta


# ---------------------------------------------------------------------------
# Models

def write_model(model: FpcaModel, path) -> None:
    """JSON export; floats keep their shortest round-trip representation."""
    _write_text(path, json.dumps(model.to_dict(), indent=1, sort_keys=True) + "\n")


def read_model(path) -> FpcaModel:
    try:
        return FpcaModel.from_dict(json.loads(Path(path).read_text()))
    except (KeyError, json.JSONDecodeError) as exc:
        raise ParseError(f"not a model file: {exc}") from None


# ---------------------------------------------------------------------------
# Experiment results

def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def result_rows(records) -> list:
    return [{"structure": r.structure, "n": r.n, "design": r.design, "dataset": r.dataset,
             "metric": r.metric, "value": fmt(r.value), "n_used": r.n_used, "flag": r.flag}
            for r in records]


def write_results(records, path) -> None:
    _write_text(path, _csv_text(RESULT_COLUMNS, result_rows(records)))


def read_results(path) -> list:
    from .sim_harness import Record

    rows = _read_rows(path)
    head_line, header = rows[0]
    if tuple(h.strip() for h in header) != RESULT_COLUMNS:
        raise ParseError("unexpected results header", line=head_line)
    out = []
    for line, row in rows[1:]:
        if len(row) != len(RESULT_COLUMNS):
            raise ParseError("wrong field count", line=line)
        try:
            out.append(Record(row[0], int(row[1]), int(row[2]), row[3], row[4], float(row[5]),
                              int(row[6]), row[7]))
        except ValueError as exc:
            raise ParseError(str(exc), line=line) from None
    return out


def write_summary(summary_rows, path) -> None:
    rows = [{k: (fmt(r[k]) if isinstance(r[k], float) else r[k]) for k in SUMMARY_COLUMNS}
            for r in summary_rows]
    _write_text(path, _csv_text(SUMMARY_COLUMNS, rows))


def read_summary(path) -> list:
    rows = _read_rows(path)
    out = []
    for line, row in rows[1:]:
        d = dict(zip(SUMMARY_COLUMNS, row))
        try:
            out.append({"structure": d["structure"], "n": int(d["n"]), "metric": d["metric"],
                        **{k: float(d[k]) for k in ("min", "q1", "median", "q3", "max")},
                        "count": int(d["count"]), "excluded": int(d["excluded"])})
        except (KeyError, ValueError) as exc:
            raise ParseError(str(exc), line=line) from None
    return out


def write_design_table(infos, path) -> None:
    cols = ("structure", "n", "design", "seed", "delta", "flag")
    rows = [{"structure": d.structure, "n": d.n, "design": d.design, "seed": d.seed,
             "delta": "" if d.delta is None else fmt(d.delta), "flag": d.flag} for d in infos]
    _write_text(path, _csv_text(cols, rows))


def write_experiment(result, out_dir, plots: bool = False) -> list:
    """Write results, summary, design table and config; optionally SVG box plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "results.csv", out / "summary.csv", out / "designs.csv", out / "config.json"]
    write_results(result.records, written[0])
    write_summary(result.summary(), written[1])
    write_design_table(result.designs, written[2])
    _write_text(written[3], json.dumps(result.config.to_dict(), indent=2, sort_keys=True) + "\n")
    if plots:
        metrics = sorted({r.metric for r in result.records})
        for metric in metrics:
            p = out / f"boxplot_{metric}.svg"
            _write_text(p, boxplot_svg(result, metric))
            written.append(p)
    return written


def boxplot_svg(result, metric: str, width: int = 900, height: int = 360) -> str:
    """Minimal grouped box plot: one group per subject count, one box per structure."""
    structures = list(result.config.structures)
    counts = list(result.config.subject_counts)
    boxes = []
    for n in counts:
        for s in structures:
            vals = result.box_values(metric, s, n)
            boxes.append((n, s, np.percentile(vals, [0, 25, 50, 75, 100]) if vals.size else None))
    finite = [q for _, _, q in boxes if q is not None]
    lo = min(float(q[0]) for q in finite) if finite else 0.0
    hi = max(float(q[4]) for q in finite) if finite else 1.0
    if hi <= lo:
        hi = lo + 1.0
    left, right, top, bottom = 60, 20, 30, 50
    plot_w, plot_h = width - left - right, height - top - bottom

    def y(val):
        return top + plot_h * (1.0 - (val - lo) / (hi - lo))

    colours = ["#4477aa", "#ee6677", "#228833", "#ccbb44"]
    slot = plot_w / max(len(boxes), 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2:.1f}" y="18" text-anchor="middle">{metric}</text>',
             f'<text x="5" y="{y(hi):.1f}">{fmt(hi)}</text>',
             f'<text x="5" y="{y(lo):.1f}">{fmt(lo)}</text>']
    for k, (n, s, q) in enumerate(boxes):
        cx = left + slot * (k + 0.5)
        colour = colours[structures.index(s) % len(colours)]
        if k % len(structures) == 0:
            gx = left + slot * (k + len(structures) / 2)
            parts.append(f'<text x="{gx:.1f}" y="{height - 20}" text-anchor="middle">n={n}</text>')
        if q is None:
            continue
        bw = slot * 0.6
        parts += [
            f'<line x1="{cx:.1f}" y1="{y(q[0]):.1f}" x2="{cx:.1f}" y2="{y(q[4]):.1f}" '
            f'stroke="{colour}"/>',
            f'<rect x="{cx - bw / 2:.1f}" y="{y(q[3]):.1f}" width="{bw:.1f}" '
            f'height="{max(y(q[1]) - y(q[3]), 0.5):.1f}" fill="white" stroke="{colour}"/>',
            f'<line x1="{cx - bw / 2:.1f}" y1="{y(q[2]):.1f}" x2="{cx + bw / 2:.1f}" '
            f'y2="{y(q[2]):.1f}" stroke="{colour}" stroke-width="2"/>',
        ]
    for i, s in enumerate(structures):
        parts.append(f'<text x="{left + 120 * i}" y="{height - 4}" '
                     f'fill="{colours[i % len(colours)]}">{s}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)
