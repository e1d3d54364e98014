"""Difference-reasoning metrics: DQR, DS, TF1, CF1, CR, DRF, and error categories.

Scores take parsed claims and ground truth. Anything needing semantic
comparison goes through a judge object exposing ``match(claim, gt, context)``
and ``consistency(claim_a, claim_b)``.
"""

from __future__ import annotations

import enum
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .judge import CR_WEIGHTS, JudgeLabel
from .records import (
    KINDS,
    Claim,
    ClaimSet,
    DifferenceRecord,
    GroundTruth,
    PairedClaims,
    claim_fields,
    infer_fields,
    normalize_text,
)

METRICS = ("dqr", "ds", "tf1", "cf1", "cr", "drf")


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class ErrorCategory(str, enum.Enum):
    TYPE_CATEGORY_MISMATCH = "TypeCategoryMismatch"
    TYPE_CONFUSION = "TypeConfusion"
    ATTRIBUTE_ERROR = "AttributeError"
    QUANTITY_ERROR = "QuantityError"
    FABRICATION = "Fabrication"


# ---------------------------------------------------------------------------
# global perception


def dqr(n: int, m: int) -> int:
    return int(n == m)


def ds(n: int, m: int) -> float:
    if m == 0:
        return 1.0 if n == 0 else 0.0
    return max(0.0, 1.0 - abs(n - m) / m)


# ---------------------------------------------------------------------------
# faithful perception


def micro_f1(matched: int, predicted: int, truth: int) -> float:
    if predicted + truth == 0:
        return 1.0
    return 2.0 * matched / (predicted + truth)


def _counts(x) -> Counter:
    return x if isinstance(x, Counter) else Counter(x)


def multiset_matches(predicted: Iterable[str], truth: Iterable[str]) -> Counter:
    """Per-label matched counts, min(|P_l|, |G_l|)."""
    return _counts(predicted) & _counts(truth)


def type_f1(matched_per_type, predicted, truth) -> float:
    """Micro F1 over modification types.

    ``predicted`` and ``truth`` are label multisets (iterables or Counters);
    ``matched_per_type`` maps type -> matched pair count.
    """
    p, g = _counts(predicted), _counts(truth)
    matched = sum(matched_per_type.values())
    return micro_f1(matched, sum(p.values()), sum(g.values()))


category_f1 = type_f1


def predicted_types(claims: Sequence[Claim]) -> list[str]:
    return [k for k, _, _ in map(claim_fields, claims) if k in KINDS]


def predicted_categories(claims: Sequence[Claim]) -> list[str]:
    return [c for _, c, _ in map(claim_fields, claims) if c]


def perception_scores(claims: Sequence[Claim], gt: GroundTruth) -> tuple[float, float]:
    """(TF1, CF1) using multiset intersection as the type/category matching."""
    p_t, g_t = predicted_types(claims), [d.kind for d in gt.items]
    p_c, g_c = predicted_categories(claims), [normalize_text(d.category) for d in gt.items]
    return (type_f1(multiset_matches(p_t, g_t), p_t, g_t),
            category_f1(multiset_matches(p_c, g_c), p_c, g_c))


# ---------------------------------------------------------------------------
# faithful reasoning


def cr_weight(label: JudgeLabel) -> float:
    return CR_WEIGHTS[JudgeLabel(label)]


@dataclass
class ConsistencyResult:
    value: float
    n_pairs: int
    labels: list[JudgeLabel] = field(default_factory=list)


def consistency_ratio(paired: PairedClaims, judge) -> ConsistencyResult:
    """Sum of label weights over every cross pair, over |D_s| + |D_d|.

    Both sets empty scores 1.0. Judge errors propagate.
    """
    ds_, dd = paired.same, paired.different
    if not ds_ and not dd:
        return ConsistencyResult(1.0, 0)
    labels = [JudgeLabel(judge.consistency(a, b)) for a in ds_ for b in dd]
    total = sum(CR_WEIGHTS[l] for l in labels)
    return ConsistencyResult(total / (len(ds_) + len(dd)), len(labels), labels)


def categorize_error(claim: Claim, gt: GroundTruth) -> ErrorCategory:
    """Category for a claim that matched nothing.

    Checked in order: same kind but different object, same object but
    different kind, same kind and object (so the attribute is off),
    otherwise fabrication.
    """
    if claim.placeholder:
        return ErrorCategory.FABRICATION
    kind, category, _ = claim_fields(claim)
    items = [(normalize_text(g.kind), normalize_text(g.category)) for g in gt.items]
    if kind and any(k == kind and c != category for k, c in items):
        return ErrorCategory.TYPE_CATEGORY_MISMATCH
    if category and any(c == category and k != kind for k, c in items):
        return ErrorCategory.TYPE_CONFUSION
    if kind and category and (kind, category) in items:
        return ErrorCategory.ATTRIBUTE_ERROR
    return ErrorCategory.FABRICATION


@dataclass
class DrfResult:
    value: float
    matched: list[bool]
    errors: list[ErrorCategory | None]
    quantity_error: bool
    empty: bool = False

    def error_counts(self) -> Counter:
        counts = Counter(e.value for e in self.errors if e is not None)
        if self.quantity_error:
            counts[ErrorCategory.QUANTITY_ERROR.value] += 1
        return counts


def drf_score(claims: ClaimSet, gt: GroundTruth, judge, context: str | None = None) -> DrfResult:
    """Fraction of claims the judge matches to any ground-truth item (no one-to-one constraint)."""
    quantity = claims.n != gt.m
    if not claims.claims:
        return DrfResult(0.0, [], [], quantity, empty=True)
    matched, errors = [], []
    for c in claims.claims:
        ok = any(judge.match(c, g, context) for g in gt.items)
        matched.append(ok)
        errors.append(None if ok else categorize_error(c, gt))
    return DrfResult(sum(matched) / len(matched), matched, errors, quantity)


# ---------------------------------------------------------------------------
# transcript parsing

_COUNT_RE = re.compile(r"^count\s*:\s*(\d+)$", re.I)
_ANSWER_RE = re.compile(r"^answer\s*:\s*(yes|no)$", re.I)
_DIFF_RE = re.compile(
    r'^diff\s+(\d+)\s*:\s*type\s*=\s*(\w+)\s+category\s*=\s*("(?:[^"\\]|\\.)*"|\S+)'
    r'\s+detail\s*=\s*"((?:[^"\\]|\\.)*)"$', re.I)

PLACEHOLDER_TEXT = "<unstated difference>"


_ESCAPE = re.compile(r"\\(.)")


def _unescape(s: str) -> str:
    return _ESCAPE.sub(r"\1", s)


def _escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"')


def _unquote(s: str) -> str:
    if len(s) >= 2 and s[0] == s[-1] == '"':
        return _unescape(s[1:-1])
    return s


def _quote(s: str) -> str:
    return '"' + _escape(s) + '"'


def _category_field(cat: str) -> str:
    return _quote(cat) if (not cat or any(ch in cat for ch in ' "\\')) else cat


def _render_claim(c: Claim) -> str:
    parts = [c.kind or ""]
    if c.category:
        parts.append(c.category)
    if c.detail:
        parts.append(c.detail)
    return " ".join(parts)


def parse_structured(text: str) -> ClaimSet:
    count = None
    claims: list[Claim] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = " ".join(line.split())
        if not line or _ANSWER_RE.match(line):
            continue
        m = _COUNT_RE.match(line)
        if m:
            if count is not None:
                raise ParseError("duplicate COUNT header", lineno)
            count = int(m.group(1))
            continue
        m = _DIFF_RE.match(line)
        if not m:
            raise ParseError(f"not a COUNT or DIFF line: {line!r}", lineno)
        kind = m.group(2).lower()
        if kind not in KINDS:
            raise ParseError(f"unknown difference type {kind!r}", lineno)
        c = Claim(raw="", kind=kind, category=_unquote(m.group(3)), detail=_unescape(m.group(4)))
        claims.append(Claim(_render_claim(c), c.kind, c.category, c.detail))
    if count is None:
        raise ParseError("missing COUNT header")
    flags = []
    if count > len(claims):
        flags.append("padded")
        claims.extend(Claim(PLACEHOLDER_TEXT, placeholder=True) for _ in range(count - len(claims)))
    elif count < len(claims):
        flags.append("count_below_claims")
        count = len(claims)
    return ClaimSet(count, claims, flags)


_NUMBER_WORDS = {w: i for i, w in enumerate(
    "zero one two three four five six seven eight nine ten eleven twelve".split())}
_COUNT_MARKER = re.compile(
    r"\b(?:there\s+(?:are|is|were|was)|i\s+(?:found|see|count|can\s+see|spot|notice|noticed)|"
    r"count(?:ed)?\s*:?|total\s+of|number\s+of\s+differences\s*(?:is|:)?)\s+(\w+)", re.I)
_ENUM_LINE = re.compile(r"^\s*(?:\d+\s*[.)]|[-*•])\s+(.*\S)")


def _as_int(word: str) -> int | None:
    word = word.lower()
    if word.isdigit():
        return int(word)
    if word in ("no", "none"):
        return 0
    return _NUMBER_WORDS.get(word)


def parse_freeform(text: str) -> ClaimSet:
    claims = []
    for line in text.splitlines():
        m = _ENUM_LINE.match(line)
        if m:
            claims.append(Claim(raw=m.group(1)))
    count, flags = None, []
    for m in _COUNT_MARKER.finditer(text):
        count = _as_int(m.group(1))
        if count is not None:
            break
    if count is None:
        flags.append("count_missing")
        count = len(claims)
    return ClaimSet(count, claims, flags)


def parse_claims(text: str, mode: str = "structured") -> ClaimSet:
    if mode == "structured":
        return parse_structured(text)
    if mode == "freeform":
        return parse_freeform(text)
    raise ValueError(f"unknown schema mode {mode!r}")


def parse_paired(same_text: str, different_text: str, mode: str = "structured") -> PairedClaims:
    def real(cs: ClaimSet) -> list[Claim]:
        return [c for c in cs.claims if not c.placeholder]

    return PairedClaims(real(parse_claims(same_text, mode)), real(parse_claims(different_text, mode)))


def format_claims(claims: ClaimSet, answer: str | None = None) -> str:
    """Canonical structured text. Placeholder padding is implied by COUNT."""
    lines = [f"ANSWER: {answer}"] if answer else []
    lines.append(f"COUNT: {claims.n}")
    real = [c for c in claims.claims if not c.placeholder]
    for idx, c in enumerate(real, start=1):
        kind = c.kind or infer_fields(c.raw)[0] or "color"
        cat = _category_field(c.category or "unknown")
        lines.append(f"DIFF {idx}: type={kind} category={cat} detail={_quote(c.detail or '')}")
    return "\n".join(lines)


def normalize_structured(text: str) -> str:
    """Canonical spelling of grammar-valid structured text, computed line by line.

    Keywords are upper-cased, whitespace collapsed, ANSWER lines dropped, DIFF
    lines renumbered, quoting made minimal, and COUNT raised to the number of
    DIFF lines. Equals ``format_claims(parse_structured(text))``.
    """
    count, diffs = 0, []
    for line in text.splitlines():
        line = " ".join(line.split())
        m = _COUNT_RE.match(line)
        if m:
            count = int(m.group(1))
            continue
        m = _DIFF_RE.match(line)
        if m:
            cat = _category_field(_unquote(m.group(3)))
            detail = _quote(_unescape(m.group(4)))
            diffs.append(f"type={m.group(2).lower()} category={cat} detail={detail}")
    out = [f"COUNT: {max(count, len(diffs))}"]
    out += [f"DIFF {i}: {d}" for i, d in enumerate(diffs, start=1)]
    return "\n".join(out)


# ---------------------------------------------------------------------------
# reports


@dataclass
class RecordScores:
    record_id: str
    split: str = "all"
    dqr: float | None = None
    ds: float | None = None
    tf1: float | None = None
    cf1: float | None = None
    cr: float | None = None
    drf: float | None = None
    cr_pairs: int = 0
    errors: Counter = field(default_factory=Counter)
    flags: list[str] = field(default_factory=list)

    def get(self, metric: str) -> float | None:
        return getattr(self, metric)


@dataclass
class MetricReport:
    records: list[RecordScores]
    metrics: tuple[str, ...] = METRICS
    judge: str = "rule"

    def aggregate(self, split: str | None = None) -> dict[str, float | int | None]:
        """Mean of each metric over the records that have it; counts of the rest."""
        rows = [r for r in self.records if split is None or r.split == split]
        out: dict[str, float | int | None] = {"n_records": len(rows)}
        for metric in self.metrics:
            vals = [r.get(metric) for r in rows if r.get(metric) is not None]
            out[metric] = math.fsum(vals) / len(vals) if vals else None
            out[f"{metric}_unevaluated"] = len(rows) - len(vals)
        errors = Counter()
        for r in rows:
            errors.update(r.errors)
        for cat in ErrorCategory:
            out[cat.value] = errors.get(cat.value, 0)
        return out

    def splits(self) -> list[str]:
        return sorted({r.split for r in self.records})
