"""Seeded synthetic-layer experiments on sequential prune-then-quantize error.

Two experiments:

* ``case_ab_experiment`` prunes a layer and quantizes it twice, once with
  every weight on the grid and the full Hessian (Case A) and once with pruned
  weights held at zero and a masked Hessian (Case B), then compares the
  per-column errors.
* ``delta_estimation_experiment`` compares Case-A GPTQ with a simple
  quantizer (NF4 at 4 bits, absmax int8 at 8 bits) on the same pruned
  weights, estimating the accumulated-update term from the error gap.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from .exceptions import DataError
from .metrics import CompressionConfig, parse_sparsity
from .pruning import sparsegpt_prune
from .quantization import (
    CASE_A,
    CASE_B,
    DEFAULT_BLOCK_SIZE,
    DEFAULT_DAMPENING,
    DEFAULT_GROUP_SIZE,
    QuantizedLayer,
    gptq_quantize,
    int8_absmax_quantize,
    layer_objective,
    nf4_quantize,
    rtn_quantize,
)

DEFAULT_SPARSITY_LEVELS = (Fraction(0), Fraction(1, 4), Fraction(0), Fraction(1, 2))
DEFAULT_BITS_LEVELS = (4, 4, 8, 8)


@dataclass(frozen=True)
class SyntheticLayerSpec:
    """Recipe for a random layer and correlated calibration inputs.

    ``weight_params`` is ``(sigma,)`` for gaussian weights and ``(a, b)`` for
    uniform ones.
    """

    seed: int
    out_dim: int = 64
    in_dim: int = 64
    n_samples: int = 1024
    weight_dist: str = "gaussian"
    weight_params: tuple = (1.0,)
    calib_correlation: float = 0.0

    def __post_init__(self):
        if min(self.out_dim, self.in_dim, self.n_samples) < 1:
            raise DataError("layer dimensions must be positive")
        if not 0 <= self.calib_correlation < 1:
            raise DataError(f"calibration correlation {self.calib_correlation} outside [0, 1)")
        if self.calib_correlation > 0 and self.in_dim < 2:
            raise DataError("correlated calibration needs in_dim >= 2")
        if self.weight_dist not in ("gaussian", "uniform"):
            raise DataError(f"unknown weight distribution {self.weight_dist!r}")
        object.__setattr__(self, "weight_params", tuple(float(v) for v in self.weight_params))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weight_params"] = list(self.weight_params)
        return d


def generate_layer(spec: SyntheticLayerSpec) -> tuple[np.ndarray, np.ndarray]:
    """Weights (out x in) and calibration inputs (in x samples).

    Every feature is ``sqrt(rho) * z + sqrt(1 - rho) * e_i`` with one shared
    factor ``z`` per sample, so any two features correlate at ``rho``.
    """
    rng = np.random.default_rng(spec.seed)
    shape = (spec.out_dim, spec.in_dim)
    if spec.weight_dist == "gaussian":
        w = rng.normal(0.0, spec.weight_params[0], size=shape)
    else:
        a, b = spec.weight_params
        w = rng.uniform(a, b, size=shape)
    rho = spec.calib_correlation
    z = rng.standard_normal((1, spec.n_samples))
    e = rng.standard_normal((spec.in_dim, spec.n_samples))
    x = math.sqrt(rho) * z + math.sqrt(1.0 - rho) * e
    return w, x


@dataclass
class ErrorTrace:
    config: CompressionConfig
    per_column_error: np.ndarray
    delta_sq_norms: np.ndarray
    layer_objective: float
    active_terms: Optional[np.ndarray] = None

    @classmethod
    def from_layer(cls, config, layer: QuantizedLayer, objective: float) -> "ErrorTrace":
        return cls(config, layer.per_column_error, layer.delta_sq_norms, objective, layer.active_terms)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_string(),
            "per_column_error": self.per_column_error.tolist(),
            "delta_sq_norms": self.delta_sq_norms.tolist(),
            "layer_objective": self.layer_objective,
        }


def error_ratios(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """Element-wise ``num / den`` with ``0/0 -> 1`` and ``x/0 -> inf``."""
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.ones_like(num)
    nz = den != 0
    out[nz] = num[nz] / den[nz]
    out[~nz & (num != 0)] = np.inf
    return out


def ratio_summary(ratios: np.ndarray) -> dict:
    return {"min": float(np.min(ratios)), "median": float(np.median(ratios)), "max": float(np.max(ratios))}


@dataclass
class CaseABResult:
    spec: SyntheticLayerSpec
    trace_a: ErrorTrace
    trace_b: ErrorTrace
    ratio_per_column: np.ndarray
    layer_a: QuantizedLayer = field(repr=False)
    layer_b: QuantizedLayer = field(repr=False)
    mask: np.ndarray = field(repr=False)

    def record(self) -> dict:
        return {
            "experiment": "case_ab",
            "spec": self.spec.to_dict(),
            "config": self.trace_a.config.to_string(),
            "objective_a": self.trace_a.layer_objective,
            "objective_b": self.trace_b.layer_objective,
            "e_a_total": float(np.sum(self.trace_a.per_column_error)),
            "e_b_total": float(np.sum(self.trace_b.per_column_error)),
            "delta_a_total": float(np.sum(self.trace_a.delta_sq_norms)),
            "delta_b_total": float(np.sum(self.trace_b.delta_sq_norms)),
            "ratio_summary": ratio_summary(self.ratio_per_column),
        }


def case_ab_experiment(
    spec: SyntheticLayerSpec,
    sparsity,
    bits: int,
    pattern: str = "unstructured",
    group_size: int = DEFAULT_GROUP_SIZE,
    block_size: int = DEFAULT_BLOCK_SIZE,
    dampening: float = DEFAULT_DAMPENING,
) -> CaseABResult:
    """Prune with the second-order pruner, then quantize in both mask modes.

    Layer objectives are measured against the original dense weights.
    """
    s = parse_sparsity(sparsity)
    if not 0 <= s < 1:
        raise DataError(f"sparsity {s} outside [0, 1)")
    w, x = generate_layer(spec)
    config = CompressionConfig(s, bits, pattern if s else "none")
    pr = sparsegpt_prune(w, x, CompressionConfig(s, 16, config.pattern), block_size, dampening)
    common = dict(group_size=group_size, block_size=block_size, dampening=dampening, mask=pr.mask)
    qa = gptq_quantize(pr.pruned_weights, x, bits, mask_mode=CASE_A, **common)
    qb = gptq_quantize(pr.pruned_weights, x, bits, mask_mode=CASE_B, **common)
    ta = ErrorTrace.from_layer(config, qa, layer_objective(w, qa.dequantized, x))
    tb = ErrorTrace.from_layer(config, qb, layer_objective(w, qb.dequantized, x))
    ratios = error_ratios(ta.per_column_error, tb.per_column_error)
    return CaseABResult(spec, ta, tb, ratios, qa, qb, pr.mask)


def simple_quantizer_for(bits: int):
    """NF4 at 4 bits, absmax int8 at 8 bits, round-to-nearest otherwise."""
    if bits == 4:
        return "nf4", nf4_quantize
    if bits == 8:
        return "int8_absmax", int8_absmax_quantize
    return "rtn", lambda w: rtn_quantize(w, bits)


@dataclass
class DeltaRow:
    spec: SyntheticLayerSpec
    config: CompressionConfig
    simple_scheme: str
    e_gptq: np.ndarray
    e_simple: np.ndarray
    delta_sq_norms: np.ndarray
    e_model_total: float

    @property
    def delta_estimate_per_column(self) -> np.ndarray:
        return self.e_gptq - self.e_simple

    @property
    def e_gptq_total(self) -> float:
        return float(np.sum(self.e_gptq))

    @property
    def e_simple_total(self) -> float:
        return float(np.sum(self.e_simple))

    @property
    def delta_estimate(self) -> float:
        return float(np.sum(self.delta_estimate_per_column))

    @property
    def delta_measured(self) -> float:
        return float(np.sum(self.delta_sq_norms))

    def record(self) -> dict:
        return {
            "experiment": "delta",
            "spec": self.spec.to_dict(),
            "config": self.config.to_string(),
            "simple_scheme": self.simple_scheme,
            "e_gptq_total": self.e_gptq_total,
            "e_simple_total": self.e_simple_total,
            "e_model_total": self.e_model_total,
            "delta_estimate": self.delta_estimate,
            "delta_measured": self.delta_measured,
            "ratio_summary": ratio_summary(error_ratios(self.e_gptq, self.e_simple)),
        }


def delta_estimation_on(
    w: np.ndarray,
    x: np.ndarray,
    sparsity,
    bits: int,
    spec: Optional[SyntheticLayerSpec] = None,
    group_size: int = DEFAULT_GROUP_SIZE,
    block_size: int = DEFAULT_BLOCK_SIZE,
    dampening: float = DEFAULT_DAMPENING,
) -> DeltaRow:
    """Run Case-A GPTQ and the matched simple quantizer on the same pruned weights."""
    s = parse_sparsity(sparsity)
    config = CompressionConfig(s, bits)
    if s:
        pr = sparsegpt_prune(w, x, CompressionConfig(s, 16), block_size, dampening)
        pruned = pr.pruned_weights
    else:
        pruned = np.array(w, dtype=np.float64)
    g = gptq_quantize(pruned, x, bits, group_size, block_size, dampening, mask_mode=CASE_A)
    scheme, simple = simple_quantizer_for(bits)
    q = simple(pruned)
    # constant-noise model: every weight carries scale^2 / 12 on its group's grid
    cols = pruned.shape[1]
    per_group = np.diff(np.r_[0:cols:group_size, cols])
    e_model = float(np.sum(g.grid.scales ** 2 / 12.0 * per_group[None, :]))
    return DeltaRow(spec, config, scheme, g.per_column_error, q.per_column_error, g.delta_sq_norms, e_model)


def delta_estimation_experiment(
    spec: SyntheticLayerSpec,
    sparsity_levels: Sequence = DEFAULT_SPARSITY_LEVELS,
    bits_levels: Sequence[int] = DEFAULT_BITS_LEVELS,
    **kwargs,
) -> list[DeltaRow]:
    """One row per ``(sparsity, bits)`` pair, zipped in order.

    The defaults run 4-bit at 0% and 25% and 8-bit at 0% and 50%.
    """
    if len(sparsity_levels) != len(bits_levels):
        raise DataError("sparsity_levels and bits_levels must have equal length")
    w, x = generate_layer(spec)
    return [delta_estimation_on(w, x, s, b, spec, **kwargs) for s, b in zip(sparsity_levels, bits_levels)]


# -- batch running and output ----------------------------------------------

def _run_one(job: tuple) -> list[dict]:
    kind, spec, params = job
    if kind == "case_ab":
        return [case_ab_experiment(spec, **params).record()]
    return [row.record() for row in delta_estimation_experiment(spec, **params)]


def run_experiments(kind: str, specs: Iterable[SyntheticLayerSpec], jobs: int = 1, **params) -> list[dict]:
    """Run one experiment per spec, optionally in worker processes.

    Records come back sorted by (seed, config) regardless of completion order.
    """
    if kind not in ("case_ab", "delta"):
        raise DataError(f"unknown experiment {kind!r}")
    work = [(kind, spec, params) for spec in specs]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_one, work))
    else:
        chunks = [_run_one(job) for job in work]
    records = [r for chunk in chunks for r in chunk]
    return sorted(records, key=lambda r: (r["spec"]["seed"], r["config"], r.get("simple_scheme", "")))


def _flatten(record: dict) -> dict:
    flat = {}
    for key, value in record.items():
        if isinstance(value, dict):
            for sub, v in value.items():
                flat[f"{key}_{sub}"] = json.dumps(v) if isinstance(v, list) else v
        else:
            flat[key] = value
    return flat


def records_to_csv(records: list[dict]) -> str:
    rows = [_flatten(r) for r in records]
    if not rows:
        return ""
    header = list(rows[0])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def records_to_json(records: list[dict]) -> str:
    return json.dumps(records, indent=2, sort_keys=True) + "\n"
