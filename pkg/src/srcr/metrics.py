"""Compression-rate and semantic-retention metrics.

Sparsity and bit-width are kept as :class:`fractions.Fraction` so that rates
such as one-third sparsity at 3 bits come out at exactly 87.5%.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence, Union

from .exceptions import DataError

BASELINE_BITS = Fraction(16)
SNAP_TOLERANCE = Fraction(5, 10000)

# Axes of the reference grid: bit-widths as rows, sparsities as columns.
TABLE_BITS = (Fraction(16), Fraction(8), Fraction(4), Fraction(3), Fraction(2))
TABLE_SPARSITIES = (Fraction(0), Fraction(1, 4), Fraction(1, 3), Fraction(1, 2))

# Joint configs and the quantization-only config with the same rate.
EQUAL_RATE_PAIRS = (
    ((Fraction(1, 2), Fraction(8)), Fraction(4)),   # 75%
    ((Fraction(1, 4), Fraction(4)), Fraction(3)),   # 81.25%
    ((Fraction(1, 3), Fraction(3)), Fraction(2)),   # 87.5%
)


@dataclass(frozen=True)
class NMPattern:
    """Prune ``n_pruned`` weights out of every ``m_group`` consecutive ones."""

    n_pruned: int
    m_group: int

    def __post_init__(self):
        if self.m_group < 1 or not 0 <= self.n_pruned <= self.m_group:
            raise DataError(f"invalid N:M pattern {self.n_pruned}:{self.m_group}")

    @property
    def sparsity(self) -> Fraction:
        return Fraction(self.n_pruned, self.m_group)

    def __str__(self) -> str:
        return f"{self.n_pruned}:{self.m_group}"


Pattern = Union[str, NMPattern]


def parse_pattern(text: str) -> Pattern:
    text = text.strip().lower()
    if text in ("none", "unstructured"):
        return text
    m = re.fullmatch(r"(\d+):(\d+)", text)
    if not m:
        raise DataError(f"unknown sparsity pattern {text!r}")
    return NMPattern(int(m.group(1)), int(m.group(2)))


def _snap_thirds(value: Fraction) -> Fraction:
    for k in range(4):
        third = Fraction(k, 3)
        if abs(value - third) <= SNAP_TOLERANCE:
            return third
    return value


def parse_sparsity(text) -> Fraction:
    """Parse ``"1/3"``, ``"0.25"``, ``"33.333%"`` or ``"1/3%"`` into a fraction of weights.

    A trailing ``%`` marks a percentage unless the value is written as a
    ratio (``1/3%`` is one third). Decimals within 5e-4 of a third snap to it.
    """
    if isinstance(text, Fraction):
        return text
    if isinstance(text, (int, float)):
        value = Fraction(str(text))
        return _snap_thirds(value)
    raw = str(text).strip()
    percent = raw.endswith("%")
    body = raw.rstrip("%").strip()
    try:
        value = Fraction(body)
    except (ValueError, ZeroDivisionError):
        raise DataError(f"cannot parse sparsity {text!r}") from None
    if percent and "/" not in body:
        value /= 100
    exact = "/" in body
    return value if exact else _snap_thirds(value)


def parse_bits(text) -> Fraction:
    if isinstance(text, Fraction):
        return text
    raw = str(text).strip().lower()
    raw = re.sub(r"\s*(bits?|b)$", "", raw)
    try:
        return Fraction(raw)
    except (ValueError, ZeroDivisionError):
        raise DataError(f"cannot parse bit-width {text!r}") from None


@dataclass(frozen=True)
class CompressionConfig:
    """A (sparsity, bit-width, pattern) triple.

    ``sparsity == 0`` always carries pattern ``"none"``; a positive sparsity
    with no pattern given defaults to ``"unstructured"``.
    """

    sparsity: Fraction = Fraction(0)
    bits: Fraction = BASELINE_BITS
    pattern: Pattern = "none"

    def __post_init__(self):
        s = parse_sparsity(self.sparsity)
        q = parse_bits(self.bits)
        pat = parse_pattern(self.pattern) if isinstance(self.pattern, str) else self.pattern
        if not 0 <= s <= 1:
            raise DataError(f"sparsity {s} outside [0, 1]")
        if not 0 < q <= BASELINE_BITS:
            raise DataError(f"bit-width {q} outside (0, 16]")
        if isinstance(pat, NMPattern):
            if pat.n_pruned == 0 and s == 0:
                pat = "none"
            elif pat.sparsity != s:
                raise DataError(f"pattern {pat} implies sparsity {pat.sparsity}, got {s}")
        elif s == 0:
            pat = "none"
        elif pat == "none":
            pat = "unstructured"
        object.__setattr__(self, "sparsity", s)
        object.__setattr__(self, "bits", q)
        object.__setattr__(self, "pattern", pat)

    @property
    def prunes(self) -> bool:
        return self.sparsity > 0

    @property
    def quantizes(self) -> bool:
        return self.bits < BASELINE_BITS

    @property
    def kind(self) -> str:
        if self.prunes and self.quantizes:
            return "joint"
        if self.prunes:
            return "pruning"
        if self.quantizes:
            return "quantization"
        return "baseline"

    @property
    def is_baseline(self) -> bool:
        return self.kind == "baseline"

    def label(self) -> str:
        """Short human label, e.g. ``s=1/4;q=4b`` or ``s=1/4;q=16b;pat=2:8``."""
        text = f"s={self.sparsity};q={self.bits}b"
        if isinstance(self.pattern, NMPattern):
            text += f";pat={self.pattern}"
        return text

    def to_string(self) -> str:
        """Lossless file form, e.g. ``s=1/3%;q=3b;pat=unstructured``."""
        s = self.sparsity
        return f"s={s.numerator}/{s.denominator}%;q={self.bits}b;pat={self.pattern}"

    @classmethod
    def parse(cls, text: str) -> "CompressionConfig":
        fields_ = {}
        for part in text.split(";"):
            part = part.strip()
            if not part:
                continue
            key, sep, value = part.partition("=")
            if not sep:
                raise DataError(f"malformed config component {part!r} in {text!r}")
            fields_[key.strip().lower()] = value.strip()
        unknown = set(fields_) - {"s", "q", "pat"}
        if unknown:
            raise DataError(f"unknown config keys {sorted(unknown)} in {text!r}")
        return cls(
            sparsity=parse_sparsity(fields_.get("s", "0")),
            bits=parse_bits(fields_.get("q", "16")),
            pattern=fields_.get("pat", "none"),
        )

    def __str__(self) -> str:
        return self.label()


@dataclass(frozen=True)
class TaskScore:
    task: str
    original: float
    compressed: float
    original_stderr: float = 0.0
    compressed_stderr: float = 0.0


@dataclass(frozen=True)
class SrcrBreakdown:
    config: CompressionConfig
    sr: float
    compression_factor: float
    srcr: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "srcr", self.compression_factor * self.sr)


# -- compression rate -------------------------------------------------------

def theoretical_compression_rate(config: CompressionConfig) -> Fraction:
    """Fraction of the 16-bit information content removed by ``config``."""
    p, q = config.sparsity, config.bits
    if config.kind in ("pruning", "baseline"):
        return p
    if config.kind == "quantization":
        return 1 - q / BASELINE_BITS
    return 1 - (q / BASELINE_BITS) * (1 - p)


def format_percent(rate: Fraction, decimals: int = 4) -> str:
    """``Fraction(13, 16)`` -> ``"81.25%"``; at most ``decimals`` places, no trailing zeros."""
    text = f"{float(rate * 100):.{decimals}f}"
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    return text + "%"


def tcr_table(
    sparsities: Sequence = TABLE_SPARSITIES, bit_widths: Sequence = TABLE_BITS
) -> list[list[Fraction]]:
    """Grid of rates, one row per bit-width and one column per sparsity."""
    if not sparsities or not bit_widths:
        raise DataError("tcr_table needs at least one sparsity and one bit-width")
    return [
        [theoretical_compression_rate(CompressionConfig(s, q)) for s in sparsities]
        for q in bit_widths
    ]


# -- retention --------------------------------------------------------------

def retention_rate(score: TaskScore) -> float:
    """Compressed over original score. Values above 1 are kept."""
    if score.original <= 0:
        raise DataError(f"retention undefined for task {score.task!r}: original score {score.original}")
    return score.compressed / score.original


def retention_stderr(score: TaskScore) -> float:
    """First-order ratio propagation, rearranged to stay finite when the compressed score is 0."""
    r = retention_rate(score)
    a = score.compressed_stderr / score.original
    b = r * score.original_stderr / score.original
    return math.hypot(a, b)


def semantic_retention_sr1(scores: Sequence[TaskScore]) -> float:
    """Mean of per-task retention ratios."""
    if not scores:
        raise DataError("semantic retention needs at least one task")
    return math.fsum(retention_rate(s) for s in scores) / len(scores)


def semantic_retention_sr2(scores: Sequence[TaskScore]) -> float:
    """Retention of summed scores; the default aggregate everywhere in this package."""
    if not scores:
        raise DataError("semantic retention needs at least one task")
    total = math.fsum(s.original for s in scores)
    if total <= 0:
        raise DataError("sum of original scores must be positive")
    return math.fsum(s.compressed for s in scores) / total


# -- SrCr -------------------------------------------------------------------

def pruning_factor(sparsity) -> float:
    p = parse_sparsity(sparsity)
    if not 0 <= p <= 1:
        raise DataError(f"sparsity {p} outside [0, 1]")
    return math.sqrt(p)


def quantization_factor(bits) -> float:
    q = parse_bits(bits)
    if not 1 <= q <= BASELINE_BITS:
        raise DataError(f"bit-width {q} outside [1, 16]")
    if q == BASELINE_BITS:
        return 0.0
    return -math.log2(q / BASELINE_BITS) / 4


def _check_sr(sr: float) -> float:
    sr = float(sr)
    if not sr >= 0 or math.isinf(sr):
        raise DataError(f"semantic retention must be finite and non-negative, got {sr}")
    return sr


def srcr_pruning(sparsity, sr: float) -> SrcrBreakdown:
    p = parse_sparsity(sparsity)
    return SrcrBreakdown(CompressionConfig(p, BASELINE_BITS), _check_sr(sr), pruning_factor(p))


def srcr_quantization(bits, sr: float) -> SrcrBreakdown:
    q = parse_bits(bits)
    factor = quantization_factor(q)
    return SrcrBreakdown(CompressionConfig(0, q), _check_sr(sr), factor)


def srcr_joint(config: CompressionConfig, sr: float) -> SrcrBreakdown:
    """Quantization factor times pruning factor times ``sr``; 0 for non-joint configs."""
    sr = _check_sr(sr)
    qf = quantization_factor(config.bits)
    pf = pruning_factor(config.sparsity)
    factor = qf * pf if config.kind == "joint" else 0.0
    return SrcrBreakdown(config, sr, factor)


def srcr_for(config: CompressionConfig, sr: float) -> SrcrBreakdown:
    """Pick the SrCr variant that applies to ``config``."""
    if config.kind == "pruning":
        return SrcrBreakdown(config, _check_sr(sr), pruning_factor(config.sparsity))
    if config.kind == "quantization":
        return srcr_quantization(config.bits, sr)
    if config.kind == "joint":
        return srcr_joint(config, sr)
    return SrcrBreakdown(config, _check_sr(sr), 0.0)


def srcr_estimate(srcr_p: SrcrBreakdown, srcr_q: SrcrBreakdown) -> float:
    """Joint SrCr predicted from the two single-method runs."""
    return srcr_p.srcr * srcr_q.srcr


def optimal_config_search(records: Iterable[tuple[CompressionConfig, float]]) -> list[SrcrBreakdown]:
    """Rank every record by joint SrCr (descending).

    Ties go to the higher compression rate, then to fewer bits. Non-joint
    configs score 0 and sink to the bottom.
    """
    scored = [srcr_joint(cfg, sr) for cfg, sr in records]
    if not scored:
        raise DataError("optimal_config_search needs at least one record")
    return sorted(
        scored,
        key=lambda b: (-b.srcr, -theoretical_compression_rate(b.config), b.config.bits),
    )
