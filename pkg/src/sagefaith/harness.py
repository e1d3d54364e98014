"""Manifest loading, record evaluation, toy-model ablations, perturbations and report output."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import toymm
from .judge import JudgeError, RuleJudge
from .metrics import (
    METRICS,
    ErrorCategory,
    MetricReport,
    ParseError,
    RecordScores,
    consistency_ratio,
    dqr,
    drf_score,
    ds,
    format_claims,
    parse_claims,
    parse_paired,
    perception_scores,
)
from .probes import attention_allocation
from .records import Claim, ClaimSet, DifferenceRecord, GroundTruth
from .sage import SageConfig, sage_decode
from .toymm import ModelConfig, ModelParams, ScenePair, build_model, greedy_decode, make_scene

log = logging.getLogger(__name__)

DIFFICULTIES = ("easy", "medium", "hard")
MULTI_COUNTS = (2, 3, 4, 5)
PHASES = ("same", "different", "count", "describe")
NEEDED_PHASES = {"dqr": ("count",), "ds": ("count",), "tf1": ("describe",),
                 "cf1": ("describe",), "drf": ("describe",), "cr": ("same", "different")}
HINT_MODES = ("none", "explicit", "implicit")
MASK_RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)


class HarnessError(ValueError):
    pass


class ManifestError(HarnessError):
    def __init__(self, message: str, errors: Sequence[tuple[int, str]] = ()):
        super().__init__(message)
        self.errors = list(errors)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ManifestRecord:
    pair_id: str
    ground_truth: GroundTruth
    transcripts: dict[str, str]
    difficulty: str | None = None
    multi_count: int | None = None
    schema: str = "structured"
    context: str = ""
    scene: ScenePair | None = None

    def __post_init__(self):
        if not self.pair_id:
            raise HarnessError("pair_id must be nonempty")
        if (self.difficulty is None) == (self.multi_count is None):
            raise HarnessError("exactly one of difficulty and multi_count must be set")
        if self.difficulty is not None and self.difficulty not in DIFFICULTIES:
            raise HarnessError(f"difficulty must be one of {DIFFICULTIES}")
        if self.multi_count is not None:
            if self.multi_count not in MULTI_COUNTS:
                raise HarnessError(f"multi_count must be one of {MULTI_COUNTS}")
            if self.multi_count != self.ground_truth.m:
                raise HarnessError(f"multi_count {self.multi_count} but {self.ground_truth.m} "
                                   "ground-truth differences")
        unknown = set(self.transcripts) - set(PHASES)
        if unknown:
            raise HarnessError(f"unknown transcript phases {sorted(unknown)}")
        if self.schema not in ("structured", "freeform"):
            raise HarnessError("schema must be 'structured' or 'freeform'")

    @property
    def split(self) -> str:
        return self.difficulty if self.difficulty is not None else f"multi-{self.multi_count}"

    def to_dict(self) -> dict:
        out = {"pair_id": self.pair_id}
        if self.difficulty is not None:
            out["difficulty"] = self.difficulty
        else:
            out["multi_count"] = self.multi_count
        out["ground_truth"] = [g.to_dict() for g in self.ground_truth.items]
        out["transcripts"] = {k: self.transcripts[k] for k in PHASES if k in self.transcripts}
        out["schema"] = self.schema
        if self.context:
            out["context"] = self.context
        if self.scene is not None:
            out["scene"] = self.scene.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestRecord":
        if not isinstance(d, dict):
            raise HarnessError("record must be an object")
        missing = [k for k in ("pair_id", "ground_truth", "transcripts") if k not in d]
        if missing:
            raise HarnessError(f"missing fields {missing}")
        extra = set(d) - {"pair_id", "difficulty", "multi_count", "ground_truth", "transcripts",
                          "schema", "context", "scene"}
        if extra:
            raise HarnessError(f"unknown fields {sorted(extra)}")
        transcripts = d["transcripts"]
        if not isinstance(transcripts, dict) or not all(isinstance(v, str) for v in transcripts.values()):
            raise HarnessError("transcripts must map phase names to strings")
        multi = d.get("multi_count")
        return cls(
            pair_id=str(d["pair_id"]),
            ground_truth=GroundTruth(tuple(DifferenceRecord.from_dict(g) for g in d["ground_truth"])),
            transcripts=dict(transcripts),
            difficulty=d.get("difficulty"),
            multi_count=None if multi is None else int(multi),
            schema=d.get("schema", "structured"),
            context=d.get("context", ""),
            scene=ScenePair.from_dict(d["scene"]) if d.get("scene") else None,
        )


def dump_manifest(records: Iterable[ManifestRecord]) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)


def parse_manifest(text: str) -> tuple[list[ManifestRecord], list[tuple[int, str]]]:
    """Valid records plus ``(line number, message)`` for every rejected line."""
    records, errors = [], []
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = ManifestRecord.from_dict(json.loads(line))
        except (json.JSONDecodeError, HarnessError, ValueError, KeyError, TypeError) as exc:
            errors.append((lineno, str(exc)))
            continue
        if rec.pair_id in seen:
            errors.append((lineno, f"duplicate pair_id {rec.pair_id!r}"))
            continue
        seen.add(rec.pair_id)
        records.append(rec)
    for lineno, msg in errors:
        log.warning("manifest line %d rejected: %s", lineno, msg)
    if not records:
        raise ManifestError("manifest has no valid records", errors)
    return records, errors


def load_manifest(path: str | Path) -> list[ManifestRecord]:
    records, _ = parse_manifest(Path(path).read_text(encoding="utf-8"))
    return records


# ---------------------------------------------------------------------------
# evaluation


def resolve_metrics(selection: str | Sequence[str]) -> tuple[str, ...]:
    if isinstance(selection, str):
        selection = METRICS if selection == "all" else [s.strip() for s in selection.split(",") if s.strip()]
    chosen = tuple(m for m in METRICS if m in set(selection))
    unknown = set(selection) - set(METRICS)
    if unknown or not chosen:
        raise HarnessError(f"unknown metric selection {sorted(unknown) or selection!r}")
    return chosen


def score_record(rec: ManifestRecord, judge, metrics: Sequence[str] = METRICS) -> RecordScores:
    out = RecordScores(rec.pair_id, rec.split)
    gt = rec.ground_truth
    parsed: dict[str, ClaimSet] = {}

    def claims(phase: str) -> ClaimSet:
        if phase not in parsed:
            parsed[phase] = parse_claims(rec.transcripts[phase], rec.schema)
            out.flags.extend(f"{phase}:{f}" for f in parsed[phase].flags)
        return parsed[phase]

    if {"dqr", "ds"} & set(metrics):
        n = claims("count").n
        if "dqr" in metrics:
            out.dqr = float(dqr(n, gt.m))
        if "ds" in metrics:
            out.ds = ds(n, gt.m)
    if {"tf1", "cf1"} & set(metrics):
        tf1, cf1 = perception_scores(claims("describe").claims, gt)
        out.tf1 = tf1 if "tf1" in metrics else None
        out.cf1 = cf1 if "cf1" in metrics else None
    if "cr" in metrics:
        try:
            paired = parse_paired(rec.transcripts["same"], rec.transcripts["different"], rec.schema)
            res = consistency_ratio(paired, judge)
            out.cr, out.cr_pairs = res.value, res.n_pairs
        except JudgeError as exc:
            out.flags.append(f"cr:unevaluated:{exc}")
    if "drf" in metrics:
        try:
            context = rec.context or ("; ".join(g.describe() for g in gt.items) if rec.scene else "")
            res = drf_score(claims("describe"), gt, judge, context or None)
            out.drf = res.value
            out.errors = res.error_counts()
            if res.empty:
                out.flags.append("drf:empty_claims")
        except JudgeError as exc:
            out.flags.append(f"drf:unevaluated:{exc}")
    return out


def evaluate_records(records: Sequence[ManifestRecord], judge=None,
                     metrics: str | Sequence[str] = "all", workers: int = 4) -> MetricReport:
    """Score every record; results are merged in pair_id order whatever the worker count."""
    judge = judge or RuleJudge()
    chosen = resolve_metrics(metrics)
    problems = []
    for rec in records:
        need = {p for m in chosen for p in NEEDED_PHASES[m]}
        missing = sorted(need - set(rec.transcripts))
        if missing:
            problems.append(f"{rec.pair_id}: missing transcripts {missing}")
    if problems:
        raise HarnessError("; ".join(problems))

    def one(rec: ManifestRecord) -> RecordScores:
        try:
            return score_record(rec, judge, chosen)
        except ParseError as exc:
            raise HarnessError(f"{rec.pair_id}: {exc}") from exc

    if workers > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(one, records))
    else:
        scored = [one(r) for r in records]
    scored.sort(key=lambda r: r.record_id)
    return MetricReport(scored, chosen, getattr(judge, "name", type(judge).__name__))


# ---------------------------------------------------------------------------
# toy transcripts

PROMPTS = {"same": toymm.Q_SAME, "different": toymm.Q_DIFF,
           "count": toymm.Q_COUNT, "describe": toymm.Q_DESCRIBE}


def scripted_claims(tokens: Sequence[int]) -> tuple[ClaimSet, str | None]:
    """Read claim structure off a token stream with a fixed codebook.

    A category token opens a claim; a kind token sets the open claim's kind;
    color tokens extend its detail. A claim without a kind token is a color
    change if it names a color and a removal otherwise. The first number token
    is the stated count, and the first yes/no token the answer. Repeated
    identical claims count once.
    """
    opened: list[dict] = []
    count = answer = None
    for tok in tokens:
        if tok in toymm.CAT_TOKENS:
            opened.append({"category": toymm.CAT_TOKENS[tok], "kind": None, "colors": []})
        elif tok in toymm.KIND_TOKENS and opened:
            opened[-1]["kind"] = opened[-1]["kind"] or toymm.KIND_TOKENS[tok]
        elif tok in toymm.COLOR_TOKENS and opened:
            opened[-1]["colors"].append(toymm.COLOR_TOKENS[tok])
        elif toymm.NUM_BASE <= tok <= toymm.NUM_BASE + toymm.MAX_NUM and count is None:
            count = tok - toymm.NUM_BASE
        elif tok in (toymm.YES, toymm.NO) and answer is None:
            answer = "yes" if tok == toymm.YES else "no"
    claims, seen = [], set()
    for c in opened:
        kind = c["kind"] or ("color" if c["colors"] else "remove")
        detail = " to ".join(c["colors"])
        key = (kind, c["category"], detail)
        if key in seen:
            continue
        seen.add(key)
        claims.append(Claim(f"{kind} {c['category']} {detail}".strip(), kind, c["category"], detail))
    n = len(claims) if count is None else count
    return ClaimSet(max(n, len(claims)), claims), answer


def scripted_transcript(tokens: Sequence[int]) -> str:
    claims, answer = scripted_claims(tokens)
    return format_claims(claims, answer)


def difficulty_band(occupied: int, n_cells: int) -> str:
    """Occupied-cell bands 0-6 / 7-16 / 17-38 rescaled from 38 objects to the grid size."""
    if occupied <= 6 * n_cells / 38:
        return "easy"
    if occupied <= 16 * n_cells / 38:
        return "medium"
    return "hard"


def scene_suite(seeds: Sequence[int], config: ModelConfig, n_differences: Sequence[int] = (1,)) -> list[tuple[str, ScenePair]]:
    """``(pair_id, scene)`` for each seed, cycling through the difference counts."""
    out = []
    for i, seed in enumerate(seeds):
        nd = n_differences[i % len(n_differences)]
        scene = make_scene(int(seed), config.grid_h, config.grid_w, n_differences=nd)
        out.append((f"toy-{int(seed):05d}-d{nd}", scene))
    return out


@dataclass
class DecodeStats:
    visual_share: list[float] = field(default_factory=list)
    gate_rates: list[float] = field(default_factory=list)
    mask_sizes: list[float] = field(default_factory=list)


def toy_record(pair_id: str, scene: ScenePair, transcripts: dict[str, str]) -> ManifestRecord:
    gt = GroundTruth(tuple(scene.differences))
    if gt.m >= 2:
        return ManifestRecord(pair_id, gt, transcripts, multi_count=gt.m, scene=scene)
    band = difficulty_band(scene.occupied("a"), scene.n_cells)
    return ManifestRecord(pair_id, gt, transcripts, difficulty=band, scene=scene)


def run_toy_suite(params: ModelParams, suite, config: SageConfig | None = None,
                  max_len: int = 12) -> tuple[list[ManifestRecord], DecodeStats]:
    """Decode every phase prompt per scene (plain greedy when ``config`` is None)."""
    records, stats = [], DecodeStats()
    for pair_id, scene in suite:
        transcripts = {}
        for phase, q in PROMPTS.items():
            if config is None:
                tokens, trace = greedy_decode(params, scene, [q], None, max_len)
            else:
                tokens, trace, strace = sage_decode(params, scene, [q], config, max_len)
                stats.gate_rates.append(strace.gate_rate())
                stats.mask_sizes.extend(len(m) for m in strace.masks)
            stats.visual_share.extend(attention_allocation(trace).visual_share_per_step().tolist())
            transcripts[phase] = scripted_transcript(tokens)
        records.append(toy_record(pair_id, scene, transcripts))
    return records, stats


# ---------------------------------------------------------------------------
# ablation

GRID_KEYS = ("alpha0", "beta", "eta", "tau", "top_k")
ROW_METRICS = METRICS + ("visual_share",)


@dataclass(frozen=True)
class StageCombo:
    tag: str
    see: bool
    analyze: bool
    generate: bool


DEFAULT_COMBOS = (
    StageCombo("none", False, False, False),
    StageCombo("I", True, False, False),
    StageCombo("II", False, True, False),
    StageCombo("III", False, False, True),
    StageCombo("I+II", True, True, False),
    StageCombo("I+II+III", True, True, True),
)


@dataclass
class AblationPlan:
    combos: tuple[StageCombo, ...] = DEFAULT_COMBOS
    grid: dict[str, list] = field(default_factory=dict)
    seed: int = 0
    n_scenes: int = 8
    n_differences: tuple[int, ...] = (1, 1, 2, 3)
    suite: str = "toy-v1"
    model: ModelConfig = field(default_factory=ModelConfig)
    max_len: int = 12

    def __post_init__(self):
        if not self.combos:
            raise HarnessError("ablation plan needs at least one stage combination")
        tags = [c.tag for c in self.combos]
        if len(set(tags)) != len(tags) or not all(tags):
            raise HarnessError("stage combination tags must be unique and nonempty")
        bad = set(self.grid) - set(GRID_KEYS)
        if bad:
            raise HarnessError(f"unknown grid keys {sorted(bad)}")
        if any(not v for v in self.grid.values()):
            raise HarnessError("grid value lists must be nonempty")
        if self.n_scenes < 1:
            raise HarnessError("n_scenes must be >= 1")

    @property
    def seeds(self) -> list[int]:
        return list(range(self.seed, self.seed + self.n_scenes))

    def points(self) -> list[dict]:
        keys = [k for k in GRID_KEYS if k in self.grid]
        return [dict(zip(keys, vals)) for vals in itertools.product(*(self.grid[k] for k in keys))]

    @classmethod
    def from_dict(cls, d: dict) -> "AblationPlan":
        extra = set(d) - {"combos", "grid", "seed", "n_scenes", "n_differences", "suite", "model", "max_len"}
        if extra:
            raise HarnessError(f"unknown plan fields {sorted(extra)}")
        kw = {}
        if "combos" in d:
            kw["combos"] = tuple(StageCombo(c["tag"], bool(c.get("see")), bool(c.get("analyze")),
                                            bool(c.get("generate"))) for c in d["combos"])
        if "grid" in d:
            kw["grid"] = {k: list(v) for k, v in d["grid"].items()}
        for k in ("seed", "n_scenes", "max_len"):
            if k in d:
                kw[k] = int(d[k])
        if "n_differences" in d:
            kw["n_differences"] = tuple(int(x) for x in d["n_differences"])
        if "suite" in d:
            kw["suite"] = str(d["suite"])
        if "model" in d:
            kw["model"] = ModelConfig(**d["model"])
        return cls(**kw)


@dataclass
class AblationReport:
    plan: AblationPlan
    baseline: dict
    rows: list[dict]

    def columns(self) -> list[str]:
        base = ["tag", "see", "analyze", "generate", *GRID_KEYS, "status"]
        return base + list(ROW_METRICS) + [f"delta_{m}" for m in ROW_METRICS] + ["gate_rate", "mask_size"]

    def table(self) -> list[dict]:
        cols = self.columns()
        baseline = {c: self.baseline.get(c) for c in cols}
        return [baseline] + [{c: r.get(c) for c in cols} for r in self.rows]


def _summary(records: list[ManifestRecord], stats: DecodeStats) -> dict:
    agg = evaluate_records(records, RuleJudge(), "all", workers=1).aggregate()
    out = {m: agg[m] for m in METRICS}
    out["visual_share"] = float(np.mean(stats.visual_share)) if stats.visual_share else None
    out["gate_rate"] = float(np.mean(stats.gate_rates)) if stats.gate_rates else 0.0
    out["mask_size"] = float(np.mean(stats.mask_sizes)) if stats.mask_sizes else 0.0
    return out


def run_ablation(plan: AblationPlan, overrides: dict | None = None) -> AblationReport:
    """Baseline greedy decoding plus one row per (stage combination, grid point).

    ``overrides`` fixes SageConfig fields for every row; grid values win over it.
    """
    params = build_model(plan.model)
    suite = scene_suite(plan.seeds, plan.model, plan.n_differences)
    base_records, base_stats = run_toy_suite(params, suite, None, plan.max_len)
    baseline = {"tag": "baseline", "status": "ok", **_summary(base_records, base_stats)}
    rows = []
    for combo in plan.combos:
        for point in plan.points() or [{}]:
            row = {"tag": combo.tag, "see": combo.see, "analyze": combo.analyze,
                   "generate": combo.generate, **{k: point.get(k, (overrides or {}).get(k)) for k in GRID_KEYS}}
            try:
                cfg = SageConfig(**{**(overrides or {}), **point, "see": combo.see,
                                    "analyze": combo.analyze, "generate": combo.generate})
                records, stats = run_toy_suite(params, suite, cfg, plan.max_len)
                summary = _summary(records, stats)
            except (toymm.DecodeError, toymm.ConfigError, ValueError, FloatingPointError) as exc:
                log.warning("ablation row %s %s failed: %s", combo.tag, point, exc)
                row["status"] = f"failed: {exc}"
                rows.append(row)
                continue
            row["status"] = "ok"
            row.update(summary)
            for m in ROW_METRICS:
                a, b = summary.get(m), baseline.get(m)
                row[f"delta_{m}"] = None if a is None or b is None else a - b
            rows.append(row)
    return AblationReport(plan, baseline, rows)


# ---------------------------------------------------------------------------
# perturbations


def perturb_hint(prompt_tokens: Sequence[int], mode: str) -> list[int]:
    tokens = [int(t) for t in prompt_tokens]
    if mode == "none":
        return tokens
    if mode == "explicit":
        return tokens + list(toymm.HINT_SUFFIX)
    if mode == "implicit":
        return [toymm.TAG_Q_OPEN, *tokens, toymm.TAG_Q_CLOSE, toymm.TAG_A_OPEN]
    raise HarnessError(f"hint mode must be one of {HINT_MODES}")


def unperturb_hint(prompt_tokens: Sequence[int], mode: str) -> list[int]:
    tokens = [int(t) for t in prompt_tokens]
    if mode == "none":
        return tokens
    if mode == "explicit":
        k = len(toymm.HINT_SUFFIX)
        if tuple(tokens[-k:]) != toymm.HINT_SUFFIX:
            raise HarnessError("prompt does not end with the hint suffix")
        return tokens[:-k]
    if mode == "implicit":
        if len(tokens) < 3 or tokens[0] != toymm.TAG_Q_OPEN or tokens[-2:] != [toymm.TAG_Q_CLOSE, toymm.TAG_A_OPEN]:
            raise HarnessError("prompt is not wrapped in question/answer tags")
        return tokens[1:-2]
    raise HarnessError(f"hint mode must be one of {HINT_MODES}")


def masked_count(ratio: float, n_cells: int) -> int:
    """Cells to mask: ratio * n rounded half up."""
    return min(n_cells, int(math.floor(ratio * n_cells + 0.5)))


def perturb_mask(scene: ScenePair, ratio: float, seed: int) -> ScenePair:
    """Blank the same seeded random cells in both grids; ground truth is kept as annotated."""
    if ratio not in MASK_RATIOS:
        raise HarnessError(f"mask ratio must be one of {MASK_RATIOS}")
    n = scene.n_cells
    k = masked_count(ratio, n)
    cells = np.random.default_rng(seed).choice(n, size=k, replace=False)
    a, b = scene.cells_a.copy(), scene.cells_b.copy()
    a[cells] = toymm.NEUTRAL_CELL
    b[cells] = toymm.NEUTRAL_CELL
    return ScenePair(scene.grid_h, scene.grid_w, a, b, list(scene.differences))


# ---------------------------------------------------------------------------
# report output

RECORD_COLUMNS = ("row", "pair_id", "split", *METRICS, "cr_pairs", *(c.value for c in ErrorCategory), "flags")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def _json_value(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "null"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.6f}"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_json_value(x) for x in v) + "]"
    return json.dumps(str(v))


def _json_line(row: dict) -> str:
    return "{" + ", ".join(f"{json.dumps(k)}: {_json_value(v)}" for k, v in row.items()) + "}"


def report_rows(report) -> list[dict]:
    """Fixed-order rows: records then per-split and overall aggregates, or the ablation table."""
    if isinstance(report, AblationReport):
        return report.table()
    rows = []
    for r in report.records:
        row = {"row": "record", "pair_id": r.record_id, "split": r.split}
        row.update({m: r.get(m) for m in METRICS})
        row["cr_pairs"] = r.cr_pairs
        row.update({c.value: r.errors.get(c.value, 0) for c in ErrorCategory})
        row["flags"] = ";".join(r.flags)
        rows.append(row)
    for split in report.splits() + [None]:
        agg = report.aggregate(split)
        row = {"row": "aggregate", "pair_id": "", "split": split or "all"}
        row.update({m: agg[m] for m in METRICS})
        row["cr_pairs"] = sum(r.cr_pairs for r in report.records if split is None or r.split == split)
        row.update({c.value: agg[c.value] for c in ErrorCategory})
        row["flags"] = ";".join(f"{m}_unevaluated={agg[f'{m}_unevaluated']}" for m in METRICS
                                if agg[f"{m}_unevaluated"])
        rows.append(row)
    return rows


def render_report(report, fmt: str) -> str:
    rows = report_rows(report)
    if fmt == "lines":
        return "".join(_json_line(r) + "\n" for r in rows)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = list(rows[0]) if rows else list(RECORD_COLUMNS)
        writer.writerow(cols)
        for r in rows:
            writer.writerow([_fmt(r.get(c)) for c in cols])
        return buf.getvalue()
    raise HarnessError(f"unknown report format {fmt!r}; use 'lines' or 'csv'")


def emit_report(report, fmt: str, path: str | Path) -> Path:
    text = render_report(report, fmt)
    path = Path(path)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise HarnessError(f"cannot write report to {path}: {exc.strerror or exc}") from exc
    return path


def read_csv_aggregates(text: str) -> dict[str, dict[str, float | None]]:
    """Aggregate rows of a CSV metric report, keyed by split."""
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        if row.get("row") == "aggregate":
            out[row["split"]] = {m: float(row[m]) if row[m] else None for m in METRICS}
    return out


# ---------------------------------------------------------------------------
# trace bundles and probe output

PROBES = ("tam", "alloc", "residual", "sublayer", "neuron")


def trace_bundle(config: ModelConfig, prompt: Sequence[int], tokens: Sequence[int], trace) -> dict:
    """Self-contained decode record: the model is rebuilt from its config when probed."""
    return {"model": config.to_dict(), "prompt": [int(t) for t in prompt],
            "tokens": [int(t) for t in tokens], "trace": trace.to_dict()}


def _bundle_trace(bundle: dict):
    try:
        return ModelConfig(**bundle["model"]), toymm.DecodeTrace.from_dict(bundle["trace"])
    except (KeyError, TypeError) as exc:
        raise HarnessError(f"malformed trace bundle: {exc}") from exc


def probe_report(kind: str, bundles: Sequence[dict]) -> str:
    """Tab-separated probe output for one or more trace bundles."""
    from . import probes

    if kind not in PROBES:
        raise HarnessError(f"probe must be one of {PROBES}")
    if not bundles:
        raise HarnessError("at least one trace is required")
    loaded = [_bundle_trace(b) for b in bundles]
    if kind == "residual":
        if len(loaded) != 2:
            raise HarnessError("residual probe compares exactly two traces")
        sims = probes.paired_hidden_similarity(loaded[0][1], loaded[1][1])
        return "layer\tcosine\n" + "".join(f"{l}\t{v:.6f}\n" for l, v in enumerate(sims))
    lines = []
    for i, (cfg, trace) in enumerate(loaded):
        if kind == "tam":
            w_head = build_model(cfg).w_head
            for t in range(len(trace)):
                tam = probes.step_tam(trace, w_head, t, (cfg.grid_h, cfg.grid_w))
                lines.append(f"# trace {i} step {t} token {toymm.token_name(tam.token)}\n")
                lines.append(probes.grid_text(tam.grid))
        elif kind == "alloc":
            fr = probes.attention_allocation(trace).fractions
            lines.append("trace\tlayer\tstep\t" + "\t".join(probes.SEGMENTS) + "\n")
            for l in range(fr.shape[0]):
                for t in range(fr.shape[1]):
                    vals = "\t".join(f"{v:.6f}" for v in fr[l, t])
                    lines.append(f"{i}\t{l}\t{t}\t{vals}\n")
        elif kind == "sublayer":
            sims = probes.sublayer_similarity(trace)
            lines.append("trace\tstep\tlayer\tattention\tffn\n")
            for t in range(sims.shape[0]):
                for l in range(sims.shape[1]):
                    lines.append(f"{i}\t{t}\t{l}\t{sims[t, l, 0]:.6f}\t{sims[t, l, 1]:.6f}\n")
        else:
            prof = probes.neuron_profile(trace)
            lines.append("trace\tlayer\tactivation_ratio\n")
            lines.extend(f"{i}\t{l}\t{r:.6f}\n" for l, r in enumerate(prof.ratios))
    return "".join(lines)
