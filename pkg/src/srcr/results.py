"""Benchmark score tables: loading, retention reports, tables and plot data."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional

from .exceptions import DataError
from .metrics import (
    EQUAL_RATE_PAIRS,
    CompressionConfig,
    SrcrBreakdown,
    TaskScore,
    format_percent,
    parse_bits,
    parse_sparsity,
    retention_rate,
    retention_stderr,
    semantic_retention_sr1,
    semantic_retention_sr2,
    srcr_for,
    srcr_pruning,
    srcr_quantization,
    theoretical_compression_rate,
)

CSV_HEADER = ["model", "sparsity", "bits", "pattern", "task", "score", "stderr"]
TASK_ORDER = ("mmlu_pro", "bbh", "math")
MEAN_TASK = "mean"
MEAN_MISMATCH = 0.05
PLOT_KINDS = ("retention_bars", "srcr_bars", "joint_vs_quant")


def fixtures_dir() -> Path:
    """Bundled fixture root, overridable through ``SRCR_FIXTURES``."""
    env = os.environ.get("SRCR_FIXTURES")
    return Path(env) if env else Path(__file__).parent / "fixtures"


def paper_tables_dir() -> Path:
    return fixtures_dir() / "paper_tables"


@dataclass(frozen=True)
class ScoreRecord:
    """One benchmark score. ``method`` names a non-default compressor (e.g. ``nf4``)."""

    model: str
    config: CompressionConfig
    task: str
    score: float
    stderr: float
    method: str = ""

    @property
    def key(self) -> tuple:
        return (self.model, self.method, self.config, self.task)


@dataclass
class ScoreDataset:
    records: list[ScoreRecord] = field(default_factory=list)

    def __post_init__(self):
        self._index = {r.key: r for r in self.records}

    def __len__(self) -> int:
        return len(self.records)

    def get(self, model: str, config: CompressionConfig, task: str, method: str = "") -> Optional[ScoreRecord]:
        return self._index.get((model, method, config, task))

    @property
    def models(self) -> list[str]:
        return sorted({r.model for r in self.records})

    def for_model(self, model: str) -> list[ScoreRecord]:
        return [r for r in self.records if r.model == model]


def _make_record(where: str, model, sparsity, bits, pattern, task, score, stderr, method="") -> ScoreRecord:
    try:
        config = CompressionConfig(parse_sparsity(sparsity), parse_bits(bits), pattern or "none")
        score = float(score)
        stderr = float(stderr)
    except (DataError, ValueError, TypeError) as exc:
        raise DataError(f"{where}: {exc}") from None
    model = str(model).strip()
    task = str(task).strip().lower()
    if not model or not task:
        raise DataError(f"{where}: model and task are required")
    if not 0 <= score <= 100:
        raise DataError(f"{where}: score {score} for {model}/{config}/{task} outside [0, 100]")
    if stderr < 0:
        raise DataError(f"{where}: negative stderr {stderr} for {model}/{config}/{task}")
    return ScoreRecord(model, config, task, score, stderr, str(method or "").strip().lower())


def _parse_csv(text: str, source: str) -> list[ScoreRecord]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        return []
    missing = [c for c in CSV_HEADER if c not in reader.fieldnames]
    if missing:
        raise DataError(f"{source}: missing columns {missing}")
    out = []
    for row in reader:
        where = f"{source}:{reader.line_num}"
        out.append(_make_record(where, *(row[c] for c in CSV_HEADER), row.get("method", "")))
    return out


def _parse_json(text: str, source: str) -> list[ScoreRecord]:
    if not text.strip():
        return []
    try:
        items = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{source}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(items, list):
        raise DataError(f"{source}: expected a JSON array of score records")
    out = []
    for i, item in enumerate(items):
        where = f"{source}[{i}]"
        try:
            cfg = item["config"]
            out.append(_make_record(
                where, item["model"], cfg.get("sparsity", "0"), cfg.get("bits", 16), cfg.get("pattern", "none"),
                item["task"], item["score"], item.get("stderr", 0.0), item.get("method", ""),
            ))
        except (KeyError, TypeError, AttributeError) as exc:
            raise DataError(f"{where}: missing or malformed field {exc}") from None
    return out


def _dedupe(records: Iterable[tuple[str, list[ScoreRecord]]]) -> list[ScoreRecord]:
    seen: dict[tuple, ScoreRecord] = {}
    merged = []
    for source, recs in records:
        local = set()
        for r in recs:
            if r.key in local:
                raise DataError(f"{source}: duplicate record {r.model}/{r.config}/{r.task}")
            local.add(r.key)
            prev = seen.get(r.key)
            if prev is None:
                seen[r.key] = r
                merged.append(r)
            elif (prev.score, prev.stderr) != (r.score, r.stderr):
                raise DataError(f"{source}: conflicting duplicate for {r.model}/{r.config}/{r.task}")
    return merged


def load_scores(path, format: Optional[str] = None) -> ScoreDataset:
    """Load and validate score records from a CSV/JSON file or a directory of them.

    Records repeated verbatim across files are merged; conflicting repeats
    are rejected. Every model must have an uncompressed baseline.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".csv", ".json"))
        if not files:
            raise DataError(f"{path}: no .csv or .json score files")
    elif path.exists():
        files = [path]
    else:
        raise DataError(f"{path}: no such file or directory")
    chunks = []
    for f in files:
        fmt = (format or f.suffix.lstrip(".")).lower()
        text = f.read_text()
        if fmt == "csv":
            chunks.append((str(f), _parse_csv(text, str(f))))
        elif fmt == "json":
            chunks.append((str(f), _parse_json(text, str(f))))
        else:
            raise DataError(f"{f}: unknown score format {fmt!r}")
    records = _dedupe(chunks)
    if not records:
        raise DataError(f"{path}: empty dataset")
    dataset = ScoreDataset(records)
    for model in dataset.models:
        if not any(r.config.is_baseline and not r.method for r in dataset.for_model(model)):
            raise DataError(f"model {model!r} has no baseline (sparsity 0, 16 bits) records")
    return dataset


def dump_scores(dataset: ScoreDataset, format: str = "csv") -> str:
    if format == "json":
        items = [{
            "model": r.model,
            "config": {"sparsity": str(r.config.sparsity), "bits": float(r.config.bits), "pattern": str(r.config.pattern)},
            "task": r.task, "score": r.score, "stderr": r.stderr,
            **({"method": r.method} if r.method else {}),
        } for r in dataset.records]
        return json.dumps(items, indent=2) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER + ["method"])
    for r in dataset.records:
        w.writerow([r.model, r.config.sparsity, r.config.bits, r.config.pattern, r.task, r.score, r.stderr, r.method])
    return buf.getvalue()


# -- retention reports ------------------------------------------------------

@dataclass
class ReportRow:
    model: str
    method: str
    config: CompressionConfig
    tcr: Fraction
    retention: dict[str, tuple[float, float]]
    sr: float
    sr1: float
    sr_mean: Optional[float]
    srcr: SrcrBreakdown
    mean_mismatch: bool = False

    @property
    def label(self) -> str:
        text = self.config.label()
        return f"{text} [{self.method}]" if self.method else text


@dataclass
class RetentionReport:
    rows: list[ReportRow]
    sr_source: str = "tasks"

    @property
    def tasks(self) -> list[str]:
        present = {t for row in self.rows for t in row.retention}
        known = [t for t in TASK_ORDER if t in present]
        return known + sorted(present - set(known))

    def find(self, config: CompressionConfig, method: str = "", model: Optional[str] = None) -> Optional[ReportRow]:
        for row in self.rows:
            if row.config == config and row.method == method and (model is None or row.model == model):
                return row
        return None


def retention_report(dataset: ScoreDataset, model: str, sr_source: str = "tasks") -> RetentionReport:
    """Per-config retention, Sr and SrCr for one model.

    ``sr_source="tasks"`` uses the sum-of-scores aggregate over individual
    tasks; ``"mean"`` uses the ratio of the published mean scores instead.
    """
    if sr_source not in ("tasks", "mean"):
        raise DataError(f"unknown Sr source {sr_source!r}")
    records = dataset.for_model(model)
    if not records:
        raise DataError(f"no records for model {model!r}")
    base = CompressionConfig()
    baseline = {r.task: r for r in records if r.config == base and not r.method}
    if not baseline:
        raise DataError(f"model {model!r} has no baseline records")

    groups: dict[tuple, dict[str, ScoreRecord]] = {}
    for r in records:
        groups.setdefault((r.method, r.config), {})[r.task] = r

    rows = []
    for (method, config), tasks in groups.items():
        scores = []
        for task, rec in tasks.items():
            if task == MEAN_TASK:
                continue
            if task not in baseline:
                raise DataError(f"{model}: baseline has no {task!r} score for {config.label()}")
            b = baseline[task]
            scores.append(TaskScore(task, b.score, rec.score, b.stderr, rec.stderr))
        if not scores and MEAN_TASK not in tasks:
            continue
        retention = {s.task: (retention_rate(s), retention_stderr(s)) for s in scores}
        sr = semantic_retention_sr2(scores) if scores else float("nan")
        sr1 = semantic_retention_sr1(scores) if scores else float("nan")
        sr_mean = None
        mismatch = False
        if MEAN_TASK in tasks:
            if MEAN_TASK not in baseline:
                raise DataError(f"{model}: baseline has no mean score for {config.label()}")
            sr_mean = retention_rate(TaskScore(MEAN_TASK, baseline[MEAN_TASK].score, tasks[MEAN_TASK].score))
            if scores:
                avg = sum(s.compressed for s in scores) / len(scores)
                mismatch = abs(avg - tasks[MEAN_TASK].score) > MEAN_MISMATCH
        used = sr_mean if sr_source == "mean" else sr
        if used is None:
            raise DataError(f"{model}: no mean score for {config.label()}")
        rows.append(ReportRow(model, method, config, theoretical_compression_rate(config),
                              retention, sr, sr1, sr_mean, srcr_for(config, used), mismatch))
    rows.sort(key=lambda r: (r.model, r.tcr, r.method, r.config.bits, str(r.config.pattern)))
    return RetentionReport(rows, sr_source)


# -- tables -----------------------------------------------------------------

def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.4f}"


def table_rows(report: RetentionReport) -> tuple[list[str], list[list[str]]]:
    tasks = report.tasks
    sr_col = "Sr_mean" if report.sr_source == "mean" else "Sr2"
    header = ["Model", "Config", "TCr"] + [f"R_{t}" for t in tasks] + [sr_col, "SrCr"]
    body = []
    for row in report.rows:
        cells = [row.model, row.label, _fmt(float(row.tcr))]
        cells += [_fmt(row.retention[t][0]) if t in row.retention else "" for t in tasks]
        sr = row.sr_mean if report.sr_source == "mean" else row.sr
        cells += [_fmt(sr), _fmt(row.srcr.srcr)]
        body.append(cells)
    return header, body


def emit_table(report: RetentionReport, format: str = "markdown") -> str:
    """Render a report; every number is fixed at 4 decimals."""
    if not report.rows:
        raise DataError("cannot render an empty report")
    header, body = table_rows(report)
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(body)
        return buf.getvalue()
    if format not in ("markdown", "md"):
        raise DataError(f"unknown table format {format!r}")
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(cells) + " |" for cells in body]
    return "\n".join(lines) + "\n"


# -- plot data --------------------------------------------------------------

@dataclass
class PlotBundle:
    kind: str
    points: list[tuple[str, str, float]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "series", "value"])
        for g, s, v in self.points:
            w.writerow([g, s, f"{v:.6f}"])
        return buf.getvalue()

    def to_svg(self, width: int = 640, bar_height: int = 14) -> str:
        """Horizontal bar chart, one bar per point; no styling contract."""
        top = max((v for _, _, v in self.points), default=1.0) or 1.0
        label_w = 260
        height = bar_height * len(self.points) + 20
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
                 f'<text x="4" y="12" font-size="11">{_xml(self.kind)}</text>']
        for i, (g, s, v) in enumerate(self.points):
            y = 20 + i * bar_height
            bw = max(0.0, v) / top * (width - label_w - 60)
            parts.append(f'<text x="4" y="{y + 10}" font-size="9">{_xml(g)} / {_xml(s)}</text>')
            parts.append(f'<rect x="{label_w}" y="{y + 2}" width="{bw:.2f}" height="{bar_height - 4}"/>')
            parts.append(f'<text x="{label_w + bw + 4:.2f}" y="{y + 10}" font-size="9">{v:.4f}</text>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


def _xml(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _retention_points(report: RetentionReport) -> list:
    tasks = report.tasks
    points = []
    for row in report.rows:
        for t in tasks:
            if t in row.retention:
                points.append((row.label, t, row.retention[t][0]))
        points.append((row.label, "Sr", row.sr_mean if report.sr_source == "mean" else row.sr))
    return points


def _sr_of(report: RetentionReport, row: ReportRow) -> float:
    return row.sr_mean if report.sr_source == "mean" else row.sr


def _srcr_points(report: RetentionReport) -> list:
    points = []
    names = {"pruning": "SrCr_p", "quantization": "SrCr_q", "joint": "SrCr_j"}
    for row in report.rows:
        kind = row.config.kind
        if kind == "baseline":
            continue
        points.append((row.label, names[kind], row.srcr.srcr))
        if kind == "joint" and not row.method:
            p_row = report.find(CompressionConfig(row.config.sparsity, 16, row.config.pattern), model=row.model)
            q_row = report.find(CompressionConfig(0, row.config.bits), model=row.model)
            if p_row and q_row:
                est = srcr_pruning(row.config.sparsity, _sr_of(report, p_row)).srcr * \
                    srcr_quantization(row.config.bits, _sr_of(report, q_row)).srcr
                points.append((row.label, "SrCr_est", est))
    return points


def _joint_vs_quant_points(report: RetentionReport) -> list:
    points = []
    for (s, q_joint), q_only in EQUAL_RATE_PAIRS:
        joints = [r for r in report.rows if not r.method and r.config.kind == "joint"
                  and r.config.sparsity == s and r.config.bits == q_joint]
        if not joints:
            continue
        group = format_percent(theoretical_compression_rate(CompressionConfig(s, q_joint)))
        for model in sorted({r.model for r in joints}):
            partner = report.find(CompressionConfig(0, q_only), model=model)
            if partner is None:
                raise DataError(f"{model}: no {q_only}-bit quantization-only config to pair with {group} joint configs")
            points.append((group, partner.label, _sr_of(report, partner)))
            for r in joints:
                if r.model == model:
                    points.append((group, r.label, _sr_of(report, r)))
    if not points:
        raise DataError("report has no joint configs at a paired compression rate")
    return points


def emit_plot_data(report: RetentionReport, figure_kind: str) -> PlotBundle:
    if figure_kind not in PLOT_KINDS:
        raise DataError(f"unknown figure kind {figure_kind!r}")
    if not report.rows:
        raise DataError("cannot plot an empty report")
    build = {"retention_bars": _retention_points, "srcr_bars": _srcr_points,
             "joint_vs_quant": _joint_vs_quant_points}[figure_kind]
    return PlotBundle(figure_kind, build(report))
