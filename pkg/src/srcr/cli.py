"""Command-line entry point: ``srcr <subcommand> [options]``.

Exit status: 0 success, 1 usage error, 2 data/validation error,
3 numerical failure. Logs and the run manifest go to stderr; only the
requested output goes to stdout.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errorlab import SyntheticLayerSpec, generate_layer, records_to_csv, records_to_json, run_experiments
from .exceptions import DataError, NumericalError
from .metrics import (
    TABLE_BITS,
    TABLE_SPARSITIES,
    CompressionConfig,
    format_percent,
    optimal_config_search,
    parse_bits,
    parse_pattern,
    parse_sparsity,
    srcr_for,
    tcr_table,
    theoretical_compression_rate,
)
from .numerics import atomic_write, read_matrix, write_matrix
from .pruning import magnitude_mask, sparsegpt_prune, validate_mask
from .quantization import (
    CASE_A,
    CASE_B,
    DEFAULT_BLOCK_SIZE,
    DEFAULT_DAMPENING,
    DEFAULT_GROUP_SIZE,
    DEFAULT_NF4_BLOCK,
    DEFAULT_OUTLIER_THRESHOLD,
    gptq_quantize,
    int8_absmax_quantize,
    layer_objective,
    nf4_quantize,
    rtn_quantize,
)
from .results import PLOT_KINDS, emit_plot_data, emit_table, load_scores, paper_tables_dir, retention_report

log = logging.getLogger("srcr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


@dataclass
class RunManifest:
    tool_version: str
    subcommand: str
    parameters: dict
    input_digests: dict = field(default_factory=dict)
    output_digests: dict = field(default_factory=dict)
    output_paths: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    python: str = platform.python_version()
    numpy: str = np.__version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=str)


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Run:
    """Collects inputs and outputs of one invocation for the manifest."""

    def __init__(self, args):
        params = {k: v for k, v in vars(args).items() if k not in ("func", "manifest", "config")}
        self.manifest = RunManifest(__version__, args.command, params)
        self.out = args.out

    def note_input(self, path):
        p = Path(path)
        files = sorted(f for f in p.iterdir() if f.is_file()) if p.is_dir() else [p]
        for f in files:
            self.manifest.input_digests[str(f)] = _digest(f.read_bytes())

    def emit(self, text: str):
        """Write the main output to ``--out`` or stdout."""
        if not text.endswith("\n"):
            text += "\n"
        if self.out:
            atomic_write(self.out, text)
            self.note_output(self.out)
        else:
            sys.stdout.write(text)
            self.manifest.output_digests["<stdout>"] = _digest(text.encode())

    def note_output(self, path):
        path = str(path)
        self.manifest.output_paths.append(path)
        self.manifest.output_digests[path] = _digest(Path(path).read_bytes())


# -- shared helpers ---------------------------------------------------------

def _render(fmt: str, records: list[dict], columns: Optional[list[str]] = None) -> str:
    if fmt == "json":
        return json.dumps(records, indent=2, default=str)
    columns = columns or (list(records[0]) if records else [])
    if fmt == "csv":
        import csv
        import io
        buf = io.StringIO()
        w = csv.DictWriter(buf, columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(records)
        return buf.getvalue()
    lines = ["| " + " | ".join(columns) + " |", "|" + "|".join("---" for _ in columns) + "|"]
    lines += ["| " + " | ".join(str(r.get(c, "")) for c in columns) + " |" for r in records]
    return "\n".join(lines)


def _load_layer(args, run: Run) -> tuple[np.ndarray, Optional[np.ndarray]]:
    if args.weights:
        run.note_input(args.weights)
        w = read_matrix(args.weights)
        x = None
        if args.calib:
            run.note_input(args.calib)
            x = read_matrix(args.calib)
        return w, x
    if args.seed is None:
        raise UsageError("give --weights or --seed")
    spec = SyntheticLayerSpec(seed=args.seed, out_dim=args.rows, in_dim=args.cols,
                              n_samples=args.samples, calib_correlation=args.rho)
    return generate_layer(spec)


def _require_calib(x):
    if x is None:
        raise UsageError("this operation needs calibration inputs (--calib or --seed)")
    return x


def _write_matrix_output(run: Run, path, m):
    if path:
        write_matrix(path, m)
        run.note_output(path)


def _scores_path(args) -> Path:
    return Path(args.scores) if args.scores else paper_tables_dir()


def _config(sparsity, bits, pattern) -> CompressionConfig:
    """Build a config; an N:M pattern alone implies its sparsity."""
    pat = parse_pattern(pattern) if pattern else "none"
    s = parse_sparsity(sparsity)
    if s == 0 and not isinstance(pat, str):
        s = pat.sparsity
    return CompressionConfig(s, parse_bits(bits), pat)


def _fmt(v) -> str:
    return f"{float(v):.4f}"


# -- subcommands ------------------------------------------------------------

def cmd_tcr(args, run: Run):
    if args.table:
        grid = tcr_table()
        if args.format == "json":
            run.emit(json.dumps({
                "sparsities": [str(s) for s in TABLE_SPARSITIES],
                "bits": [int(q) for q in TABLE_BITS],
                "rates": [[str(c) for c in row] for row in grid],
                "percent": [[format_percent(c) for c in row] for row in grid],
            }, indent=2))
            return
        recs = [{"bits": q, **{f"s={s}": format_percent(c) for s, c in zip(TABLE_SPARSITIES, row)}}
                for q, row in zip(TABLE_BITS, grid)]
        run.emit(_render(args.format, recs))
        return
    config = _config(args.sparsity, args.bits, args.pattern)
    rate = theoretical_compression_rate(config)
    if args.format == "json":
        run.emit(json.dumps({"config": config.label(), "tcr": str(rate), "percent": format_percent(rate)}))
    else:
        run.emit(format_percent(rate))


def _prune(args, w, x):
    target = _config(args.sparsity, 16, args.pattern)
    if args.method == "magnitude":
        mask = magnitude_mask(w, target)
        pruned = np.where(mask, w, 0.0)
        delta = layer_objective(w, pruned, x) if x is not None else float("nan")
        return target, mask, pruned, delta
    rep = sparsegpt_prune(w, _require_calib(x), target, args.block_size, args.dampening)
    return target, rep.mask, rep.pruned_weights, rep.layer_objective_delta


def cmd_prune(args, run: Run):
    w, x = _load_layer(args, run)
    target, mask, pruned, delta = _prune(args, w, x)
    check = validate_mask(mask, target.pattern, target.sparsity)
    _write_matrix_output(run, args.output, pruned)
    _write_matrix_output(run, args.mask_output, mask.astype(np.float64))
    run.emit(_render(args.format, [{
        "config": target.label(), "method": args.method,
        "achieved_sparsity": _fmt(1.0 - mask.mean()),
        "layer_objective": _fmt(delta), "violations": len(check.violations),
    }]))


def _quantize(args, w, x, mask=None, mode=CASE_A):
    bits = int(parse_bits(args.bits))
    if args.scheme == "gptq":
        return gptq_quantize(w, _require_calib(x), bits, args.group_size, args.block_size,
                             args.dampening, mask=mask, mask_mode=mode)
    if args.scheme == "rtn":
        return rtn_quantize(w, bits, args.group_size)
    if args.scheme == "nf4":
        return nf4_quantize(w, args.nf4_block)
    return int8_absmax_quantize(w, args.outlier_threshold)


def _write_quant(run: Run, path, layer):
    if path:
        _write_matrix_output(run, path, layer.dequantized)
        side = f"{path}.json"
        atomic_write(side, layer.sidecar_json() + "\n")
        run.note_output(side)


def cmd_quantize(args, run: Run):
    w, x = _load_layer(args, run)
    layer = _quantize(args, w, x)
    _write_quant(run, args.output, layer)
    run.emit(_render(args.format, [{
        "scheme": args.scheme, "bits": layer.grid.bits,
        "layer_objective": _fmt(layer_objective(w, layer.dequantized, x)) if x is not None else "",
        "column_error_total": _fmt(np.sum(layer.per_column_error)),
    }]))


def cmd_joint(args, run: Run):
    w, x = _load_layer(args, run)
    x = _require_calib(x)
    args.method = "sparsegpt"
    target, mask, pruned, _ = _prune(args, w, x)
    args.scheme = "gptq"
    mode = CASE_B if args.case == "B" else CASE_A
    layer = _quantize(args, pruned, x, mask=mask, mode=mode)
    _write_quant(run, args.output, layer)
    config = CompressionConfig(target.sparsity, parse_bits(args.bits), target.pattern)
    run.emit(_render(args.format, [{
        "config": config.label(), "case": args.case,
        "tcr": format_percent(theoretical_compression_rate(config)),
        "achieved_sparsity": _fmt(1.0 - mask.mean()),
        "layer_objective": _fmt(layer_objective(w, layer.dequantized, x)),
        "column_error_total": _fmt(np.sum(layer.per_column_error)),
    }]))


def _seed_list(text: str) -> list[int]:
    text = str(text)
    if "-" in text:
        a, b = text.split("-", 1)
        return list(range(int(a), int(b) + 1))
    if "," in text:
        return [int(t) for t in text.split(",")]
    return list(range(int(text)))


def cmd_validate_errors(args, run: Run):
    try:
        seeds = _seed_list(args.seeds)
    except ValueError:
        raise UsageError(f"bad --seeds value {args.seeds!r}") from None
    specs = [SyntheticLayerSpec(seed=s, out_dim=args.rows, in_dim=args.cols,
                                n_samples=args.samples, calib_correlation=args.rho) for s in seeds]
    common = dict(group_size=args.group_size, block_size=args.block_size, dampening=args.dampening)
    if args.experiment == "case-ab":
        cfg = _config(args.sparsity, args.bits, args.pattern)
        params = dict(sparsity=cfg.sparsity, bits=int(cfg.bits), pattern=str(cfg.pattern)
                      if cfg.prunes else "unstructured", **common)
        records = run_experiments("case_ab", specs, args.jobs, **params)
    else:
        levels = [parse_sparsity(s) for s in args.sparsity_levels.split(",")]
        bits = [int(b) for b in args.bits_levels.split(",")]
        records = run_experiments("delta", specs, args.jobs, sparsity_levels=levels, bits_levels=bits, **common)
    for rec in records:
        log.info("seed %s %s done", rec["spec"]["seed"], rec["config"])
    if args.format == "json":
        run.emit(records_to_json(records))
    elif args.format == "csv":
        run.emit(records_to_csv(records))
    else:
        keys = ["e_a_total", "e_b_total"] if args.experiment == "case-ab" else \
            ["e_simple_total", "e_gptq_total", "delta_estimate", "delta_measured"]
        rows = [{"seed": r["spec"]["seed"], "config": r["config"], **{k: f"{r[k]:.6g}" for k in keys}}
                for r in records]
        run.emit(_render("md", rows))


def _report(args, run: Run, model: str):
    path = _scores_path(args)
    run.note_input(path)
    return retention_report(load_scores(path), model, args.sr_source)


def _models(args, run: Run):
    path = _scores_path(args)
    run.note_input(path)
    ds = load_scores(path)
    models = [args.model] if args.model else ds.models
    return [retention_report(ds, m, args.sr_source) for m in models]


def _merge(reports):
    from .results import RetentionReport
    return RetentionReport([row for r in reports for row in r.rows], reports[0].sr_source)


def cmd_retention(args, run: Run):
    report = _merge(_models(args, run))
    if args.format == "json":
        run.emit(json.dumps([{
            "model": r.model, "config": r.label, "tcr": str(r.tcr),
            "retention": {t: {"r": v, "stderr": e} for t, (v, e) in r.retention.items()},
            "sr2": r.sr, "sr1": r.sr1, "sr_mean": r.sr_mean, "mean_mismatch": r.mean_mismatch,
        } for r in report.rows], indent=2))
    else:
        run.emit(emit_table(report, "csv" if args.format == "csv" else "markdown"))
    for r in report.rows:
        if r.mean_mismatch:
            log.warning("%s %s: published mean differs from the task average", r.model, r.label)


def cmd_srcr(args, run: Run):
    if args.sr is not None:
        config = _config(args.sparsity, args.bits, args.pattern)
        b = srcr_for(config, args.sr)
        recs = [{"config": config.label(), "kind": config.kind, "sr": _fmt(b.sr),
                 "factor": _fmt(b.compression_factor), "srcr": _fmt(b.srcr)}]
    else:
        recs = [{"model": r.model, "config": r.label, "kind": r.config.kind,
                 "sr": _fmt(r.srcr.sr), "factor": _fmt(r.srcr.compression_factor), "srcr": _fmt(r.srcr.srcr)}
                for rep in _models(args, run) for r in rep.rows]
    run.emit(_render(args.format, recs))


def cmd_search(args, run: Run):
    reps = _models(args, run)
    recs = []
    for rep in reps:
        rows = [r for r in rep.rows if not r.method]
        sr_of = {r.config: (r.sr_mean if rep.sr_source == "mean" else r.sr) for r in rows}
        ranked = optimal_config_search(sr_of.items())
        for i, b in enumerate(ranked, start=1):
            recs.append({"model": rep.rows[0].model, "rank": i, "config": b.config.label(),
                         "tcr": format_percent(theoretical_compression_rate(b.config)),
                         "sr": _fmt(b.sr), "srcr_joint": _fmt(b.srcr)})
    if args.top:
        recs = [r for r in recs if r["rank"] <= args.top]
    run.emit(_render(args.format, recs))


def cmd_report(args, run: Run):
    report = _merge(_models(args, run))
    if args.kind == "table":
        run.emit(emit_table(report, "csv" if args.format == "csv" else "markdown"))
        return
    bundle = emit_plot_data(report, args.kind)
    if args.format == "json":
        run.emit(json.dumps([{"group": g, "series": s, "value": v} for g, s, v in bundle.points], indent=2))
    else:
        run.emit(bundle.to_csv())
    if args.svg:
        atomic_write(args.svg, bundle.to_svg())
        run.note_output(args.svg)


# -- parser -----------------------------------------------------------------

def _common(p, scores=False):
    p.add_argument("--format", choices=("json", "csv", "md"), default="md")
    p.add_argument("--out", help="write the main output here instead of stdout")
    p.add_argument("--manifest", help="write the run manifest (JSON) here instead of stderr")
    p.add_argument("--config", help="file of key=value defaults (keys match flag names)")
    if scores:
        p.add_argument("--scores", help="score file or directory (default: bundled fixtures)")
        p.add_argument("--model", help="restrict to one model")
        p.add_argument("--sr-source", choices=("tasks", "mean"), default="tasks")


def _layer_inputs(p):
    p.add_argument("--weights", help="weight matrix (SRCRMAT1 or CSV)")
    p.add_argument("--calib", help="calibration inputs, features x samples")
    p.add_argument("--seed", type=int, help="generate a synthetic layer instead of reading one")
    p.add_argument("--rows", type=int, default=64)
    p.add_argument("--cols", type=int, default=64)
    p.add_argument("--samples", type=int, default=1024)
    p.add_argument("--rho", type=float, default=0.0, help="calibration feature correlation")
    p.add_argument("--output", help="write the resulting weights here")


def _prune_opts(p):
    p.add_argument("--sparsity", default="0")
    p.add_argument("--pattern", default=None, help="unstructured or N:M (prune N of every M)")
    p.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE)
    p.add_argument("--dampening", type=float, default=DEFAULT_DAMPENING)


def _quant_opts(p):
    p.add_argument("--bits", default="4")
    p.add_argument("--group-size", type=int, default=DEFAULT_GROUP_SIZE)
    p.add_argument("--nf4-block", type=int, default=DEFAULT_NF4_BLOCK)
    p.add_argument("--outlier-threshold", type=float, default=DEFAULT_OUTLIER_THRESHOLD)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="srcr", description="Compression-rate and retention toolkit.")
    parser.add_argument("--version", action="version", version=f"srcr {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("tcr", help="theoretical compression rate")
    _common(p)
    p.add_argument("--sparsity", default="0")
    p.add_argument("--bits", default="16")
    p.add_argument("--pattern", default=None)
    p.add_argument("--table", action="store_true", help="print the full bits x sparsity grid")
    p.set_defaults(func=cmd_tcr)

    p = sub.add_parser("prune", help="prune one layer")
    _common(p)
    _layer_inputs(p)
    _prune_opts(p)
    p.add_argument("--method", choices=("sparsegpt", "magnitude"), default="sparsegpt")
    p.add_argument("--mask-output", help="write the keep-mask (1/0) here")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("quantize", help="quantize one layer")
    _common(p)
    _layer_inputs(p)
    _quant_opts(p)
    p.add_argument("--scheme", choices=("rtn", "nf4", "int8", "gptq"), default="gptq")
    p.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE)
    p.add_argument("--dampening", type=float, default=DEFAULT_DAMPENING)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("joint", help="prune then quantize one layer")
    _common(p)
    _layer_inputs(p)
    _prune_opts(p)
    _quant_opts(p)
    p.add_argument("--case", choices=("A", "B"), default="B")
    p.set_defaults(func=cmd_joint)

    p = sub.add_parser("validate-errors", help="seeded synthetic error experiments")
    _common(p)
    p.add_argument("--experiment", choices=("case-ab", "delta"), default="case-ab")
    p.add_argument("--seeds", default="20", help="count N, range A-B, or list a,b,c")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--rows", type=int, default=64)
    p.add_argument("--cols", type=int, default=64)
    p.add_argument("--samples", type=int, default=1024)
    p.add_argument("--rho", type=float, default=0.0)
    _prune_opts(p)
    _quant_opts(p)
    p.add_argument("--sparsity-levels", default="0,1/4,0,1/2")
    p.add_argument("--bits-levels", default="4,4,8,8")
    p.set_defaults(func=cmd_validate_errors)

    p = sub.add_parser("retention", help="per-task retention and Sr")
    _common(p, scores=True)
    p.set_defaults(func=cmd_retention)

    p = sub.add_parser("srcr", help="SrCr for one config or a score set")
    _common(p, scores=True)
    p.add_argument("--sparsity", default="0")
    p.add_argument("--bits", default="16")
    p.add_argument("--pattern", default=None)
    p.add_argument("--sr", type=float, help="score a single config with this Sr")
    p.set_defaults(func=cmd_srcr)

    p = sub.add_parser("search", help="rank configs by joint SrCr")
    _common(p, scores=True)
    p.add_argument("--top", type=int, default=0, help="keep only the first N per model")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("report", help="tables and plot data")
    _common(p, scores=True)
    p.add_argument("--kind", choices=("table",) + PLOT_KINDS, default="table")
    p.add_argument("--svg", help="also write a minimal SVG chart here")
    p.set_defaults(func=cmd_report)
    return parser


def _read_config_file(path: str) -> dict:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip().strip('"').strip("'")
    return out


def _apply_config(parser, argv, args):
    """Re-parse with config-file values as defaults so explicit flags still win."""
    values = _read_config_file(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    for key, raw in values.items():
        if key not in known or key in ("help", "config"):
            raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
        action = known[key]
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes", "on")
        else:
            value = action.type(raw) if action.type else raw
            if action.choices and value not in action.choices:
                raise UsageError(f"{args.config}: {key} must be one of {list(action.choices)}")
        sub.set_defaults(**{key: value})
    return parser.parse_args(argv)


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    start = time.perf_counter()
    try:
        if args.config:
            args = _apply_config(parser, argv, args)
        if getattr(args, "pattern", None):
            parse_pattern(args.pattern)
        run = Run(args)
        args.func(args, run)
    except UsageError as exc:
        print(f"srcr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    run.manifest.wall_clock_s = round(time.perf_counter() - start, 6)
    text = run.manifest.to_json()
    if args.manifest:
        atomic_write(args.manifest, text + "\n")
    else:
        print(f"manifest: {text}", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
