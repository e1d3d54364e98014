"""Plain record types shared between the scene generator, the metric suite and the harness."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

KINDS = ("color", "remove", "position")

_NON_WORD = re.compile(r"[^0-9a-z]+")


def normalize_text(text: str | None) -> str:
    """Lowercase, drop punctuation, collapse whitespace."""
    if not text:
        return ""
    return _NON_WORD.sub(" ", text.lower()).strip()


@dataclass(frozen=True)
class DifferenceRecord:
    kind: str
    category: str
    before: str = ""
    after: str = ""
    # flat row-major cell indices touched by the edit (toy scenes only)
    cells: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown difference kind {self.kind!r}")
        if not self.category or not self.category.strip():
            raise ValueError("difference category must be nonempty")

    @property
    def detail(self) -> str:
        if self.before and self.after:
            return f"{self.before} to {self.after}"
        return self.before or self.after

    def describe(self) -> str:
        text = f"{self.kind} {self.category}"
        return f"{text} {self.detail}" if self.detail else text

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "category": self.category,
               "before": self.before, "after": self.after}
        if self.cells:
            out["cells"] = list(self.cells)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DifferenceRecord":
        return cls(kind=d["kind"], category=d["category"],
                   before=d.get("before", "") or "", after=d.get("after", "") or "",
                   cells=tuple(int(c) for c in d.get("cells", ())))


@dataclass(frozen=True)
class GroundTruth:
    items: tuple[DifferenceRecord, ...] = ()

    @property
    def m(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class Claim:
    raw: str
    kind: str | None = None
    category: str | None = None
    detail: str | None = None
    placeholder: bool = False

    def canonical(self) -> tuple[str, str, str]:
        return (normalize_text(self.kind), normalize_text(self.category),
                normalize_text(self.detail))


@dataclass
class ClaimSet:
    """Parsed model claims. ``n`` is the self-reported count."""

    n: int
    claims: list[Claim] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.claims)


@dataclass
class PairedClaims:
    same: list[Claim] = field(default_factory=list)
    different: list[Claim] = field(default_factory=list)


# ---------------------------------------------------------------------------
# light field inference for free-text claims

CATEGORY_VOCAB = (
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
    "traffic light", "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat",
    "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack",
    "umbrella", "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball",
    "kite", "baseball bat", "baseball glove", "skateboard", "surfboard", "tennis racket",
    "bottle", "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple",
    "sandwich", "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair",
    "couch", "potted plant", "bed", "dining table", "table", "toilet", "tv", "laptop", "mouse",
    "remote", "keyboard", "cell phone", "microwave", "oven", "toaster", "sink",
    "refrigerator", "book", "clock", "vase", "scissors", "teddy bear", "hair drier",
    "toothbrush",
)

COLOR_VOCAB = ("red", "blue", "green", "yellow", "white", "black", "orange", "purple",
               "pink", "brown", "gray", "grey")

_KIND_KEYWORDS = (
    ("remove", ("removed", "missing", "gone", "disappeared", "absent", "no longer")),
    ("position", ("moved", "position", "shifted", "relocated", "swapped", "location")),
    ("color", ("color", "colour", "turned", "painted", "changed to")),
)


def infer_fields(text: str) -> tuple[str | None, str | None, str | None]:
    """Best-effort (kind, category, detail) from a free-text claim."""
    norm = f" {normalize_text(text)} "
    kind = None
    for k, words in _KIND_KEYWORDS:
        if any(f" {w} " in norm for w in words):
            kind = k
            break
    category = None
    # longest names first so "dining table" wins over "table"
    for name in sorted(CATEGORY_VOCAB, key=len, reverse=True):
        if f" {name} " in norm or f" {name}s " in norm:
            category = name
            break
    colors = [w for w in norm.split() if w in COLOR_VOCAB]
    if kind is None and colors:
        kind = "color"
    return kind, category, " to ".join(colors) if colors else None


def claim_fields(claim: Claim) -> tuple[str, str, str]:
    """Normalized (kind, category, detail), inferring from raw text where fields are absent."""
    kind, category, detail = claim.kind, claim.category, claim.detail
    if kind is None and category is None and not claim.placeholder:
        kind, category, inferred = infer_fields(claim.raw)
        if detail is None:
            detail = inferred
    return normalize_text(kind), normalize_text(category), normalize_text(detail)
