"""A small deterministic decoder-only transformer over a segmented multimodal sequence.

The input is ``[system block, visual cells, prompt tokens, generated tokens]``.
Visual tokens come from :func:`encode_pair`, which embeds a pair of attribute
grids cell by cell, so scenes stand in for image pairs.

Decoding runs one position at a time with a key/value cache. The prefix up to
the last prompt token is computed plainly; every decode step then processes
one query position through :func:`residual_block`, where an
:class:`Interventions` bundle can rewrite the attention row, rescale the FFN
update, and fuse the final logits.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import numkit
from .records import KINDS, DifferenceRecord

# ---------------------------------------------------------------------------
# vocabulary

EOS = 0
SYS_TOKENS = (1, 2, 3)
Q_SAME, Q_DIFF, Q_COUNT, Q_DESCRIBE = 4, 5, 6, 7
HINT_SUFFIX = (8, 9, 10)  # "The answer is"
TAG_Q_OPEN, TAG_Q_CLOSE, TAG_A_OPEN = 11, 12, 13
NUM_BASE = 14  # NUM_0 .. NUM_5
MAX_NUM = 5
KIND_BASE = 20
CATEGORIES = ("person", "dog", "cat", "car", "bus", "chair", "table", "cup")
CAT_BASE = 23
COLORS = ("red", "blue", "green", "yellow", "white", "black")
COLOR_BASE = 31
YES, NO = 37, 38
MIN_VOCAB = 40

KIND_TOKENS = {KIND_BASE + i: k for i, k in enumerate(KINDS)}
CAT_TOKENS = {CAT_BASE + i: c for i, c in enumerate(CATEGORIES)}
COLOR_TOKENS = {COLOR_BASE + i: c for i, c in enumerate(COLORS)}


def num_token(n: int) -> int:
    return NUM_BASE + max(0, min(MAX_NUM, n))


def token_name(tok: int) -> str:
    if tok == EOS:
        return "<eos>"
    if tok in SYS_TOKENS:
        return f"<sys{tok}>"
    named = {Q_SAME: "<q:same>", Q_DIFF: "<q:diff>", Q_COUNT: "<q:count>",
             Q_DESCRIBE: "<q:describe>", HINT_SUFFIX[0]: "the", HINT_SUFFIX[1]: "answer",
             HINT_SUFFIX[2]: "is", TAG_Q_OPEN: "<question>", TAG_Q_CLOSE: "</question>",
             TAG_A_OPEN: "<answer>", YES: "yes", NO: "no"}
    if tok in named:
        return named[tok]
    if NUM_BASE <= tok <= NUM_BASE + MAX_NUM:
        return str(tok - NUM_BASE)
    for table in (KIND_TOKENS, CAT_TOKENS, COLOR_TOKENS):
        if tok in table:
            return table[tok]
    return f"w{tok}"


# ---------------------------------------------------------------------------
# configuration and parameters


class ConfigError(ValueError):
    pass


class DecodeError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 4
    d_ffn: int = 128
    vocab_size: int = 64
    max_seq_len: int = 128
    seed: int = 0
    grid_h: int = 4
    grid_w: int = 4
    n_sys: int = 4

    def __post_init__(self):
        for f in ("n_layers", "d_model", "n_heads", "d_ffn", "vocab_size",
                  "max_seq_len", "grid_h", "grid_w", "n_sys"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_ffn < self.d_model:
            raise ConfigError("d_ffn must be >= d_model")
        if self.vocab_size < MIN_VOCAB:
            raise ConfigError(f"vocab_size must be >= {MIN_VOCAB}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")

    @property
    def n_visual(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class LayerParams:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w_gate: np.ndarray  # (d_ffn, d)
    w_up: np.ndarray    # (d_ffn, d)
    w_down: np.ndarray  # (d, d_ffn)


@dataclass(frozen=True)
class ModelParams:
    config: ModelConfig
    layers: tuple[LayerParams, ...]
    tok_emb: np.ndarray      # (V, d)
    pos_emb: np.ndarray      # (max_seq_len, d)
    cat_emb: np.ndarray      # (2 sides, n_categories + 1, d)
    color_emb: np.ndarray    # (2 sides, n_colors + 1, d)
    occ_emb: np.ndarray      # (2 sides, 2, d)
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    w_head: np.ndarray       # (d, V)

    def arrays(self):
        for i, layer in enumerate(self.layers):
            for f in fields(layer):
                yield f"layers.{i}.{f.name}", getattr(layer, f.name)
        for name in ("tok_emb", "pos_emb", "cat_emb", "color_emb", "occ_emb",
                     "lnf_g", "lnf_b", "w_head"):
            yield name, getattr(self, name)

    def checksum(self) -> str:
        cached = self.__dict__.get("_checksum")
        if cached is not None:
            return cached
        h = hashlib.sha256()
        for name, arr in self.arrays():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        # frozen dataclass: write through __dict__
        self.__dict__["_checksum"] = h.hexdigest()
        return self.__dict__["_checksum"]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def build_model(config: ModelConfig) -> ModelParams:
    """Draw all parameters from a PCG64 stream seeded by ``config.seed``."""
    if not isinstance(config, ModelConfig):
        raise ConfigError("build_model expects a ModelConfig")
    rng = np.random.default_rng(config.seed)
    d, f, v = config.d_model, config.d_ffn, config.vocab_size

    def normal(shape, scale):
        return _frozen(rng.normal(0.0, scale, size=shape))

    def gain():
        return _frozen(1.0 + rng.normal(0.0, 0.05, size=d))

    def bias():
        return _frozen(rng.normal(0.0, 0.02, size=d))

    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerParams(
            ln1_g=gain(), ln1_b=bias(),
            w_q=normal((d, d), 1.0 / math.sqrt(d)),
            w_k=normal((d, d), 1.0 / math.sqrt(d)),
            w_v=normal((d, d), 1.0 / math.sqrt(d)),
            w_o=normal((d, d), 1.0 / math.sqrt(d)),
            ln2_g=gain(), ln2_b=bias(),
            w_gate=normal((f, d), 1.0 / math.sqrt(d)),
            w_up=normal((f, d), 1.0 / math.sqrt(d)),
            w_down=normal((d, f), 1.0 / math.sqrt(f)),
        ))
    return ModelParams(
        config=config,
        layers=tuple(layers),
        tok_emb=normal((v, d), 1.0),
        pos_emb=normal((config.max_seq_len, d), 0.1),
        cat_emb=normal((2, len(CATEGORIES) + 1, d), 1.0),
        color_emb=normal((2, len(COLORS) + 1, d), 0.5),
        occ_emb=normal((2, 2, d), 0.5),
        lnf_g=gain(), lnf_b=bias(),
        w_head=normal((d, v), 1.0 / math.sqrt(d)),
    )


# ---------------------------------------------------------------------------
# scenes


NEUTRAL_CELL = (0, 0, 0)


@dataclass
class ScenePair:
    """Two H x W grids of (category id, color id, occupancy) cells.

    Category 0 and color 0 mean "nothing there". Ids >= 1 index into
    ``CATEGORIES`` / ``COLORS`` shifted by one.
    """

    grid_h: int
    grid_w: int
    cells_a: np.ndarray  # (H*W, 3) int
    cells_b: np.ndarray
    differences: list[DifferenceRecord] = field(default_factory=list)

    def __post_init__(self):
        self.cells_a = np.asarray(self.cells_a, dtype=np.int64).reshape(-1, 3)
        self.cells_b = np.asarray(self.cells_b, dtype=np.int64).reshape(-1, 3)
        n = self.grid_h * self.grid_w
        if self.cells_a.shape != (n, 3) or self.cells_b.shape != (n, 3):
            raise ValueError(f"scene grids must have {n} cells of 3 attributes")

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w

    def changed_cells(self) -> set[int]:
        return set(np.flatnonzero(np.any(self.cells_a != self.cells_b, axis=1)).tolist())

    def implied_cells(self) -> set[int]:
        out: set[int] = set()
        for d in self.differences:
            out.update(d.cells)
        return out

    def validate(self) -> None:
        """Grids must differ exactly at the cells named by the difference records."""
        if self.changed_cells() != self.implied_cells():
            raise ValueError(
                f"scene grids differ at {sorted(self.changed_cells())} but records "
                f"imply {sorted(self.implied_cells())}")

    def occupied(self, side: str = "a") -> int:
        cells = self.cells_a if side == "a" else self.cells_b
        return int(cells[:, 2].sum())

    def to_dict(self) -> dict:
        return {
            "grid_h": self.grid_h,
            "grid_w": self.grid_w,
            "cells_a": self.cells_a.tolist(),
            "cells_b": self.cells_b.tolist(),
            "differences": [d.to_dict() for d in self.differences],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenePair":
        return cls(grid_h=int(d["grid_h"]), grid_w=int(d["grid_w"]),
                   cells_a=d["cells_a"], cells_b=d["cells_b"],
                   differences=[DifferenceRecord.from_dict(x) for x in d.get("differences", [])])


def _cell_name(idx: int, grid_w: int) -> str:
    return f"r{idx // grid_w}c{idx % grid_w}"


def make_scene(seed: int, grid_h: int = 4, grid_w: int = 4, n_differences: int = 1,
               n_objects: int | None = None) -> ScenePair:
    """Random scene pair with ``n_differences`` atomic edits applied to side b."""
    rng = np.random.default_rng(seed)
    n = grid_h * grid_w
    if n_objects is None:
        n_objects = int(rng.integers(max(1, n_differences), max(2, n // 2) + 1))
    n_objects = max(n_differences, min(n_objects, n - 1))
    cells_a = np.zeros((n, 3), dtype=np.int64)
    occupied = rng.choice(n, size=n_objects, replace=False)
    for idx in occupied:
        cells_a[idx] = (rng.integers(1, len(CATEGORIES) + 1), rng.integers(1, len(COLORS) + 1), 1)
    cells_b = cells_a.copy()

    diffs: list[DifferenceRecord] = []
    touched: set[int] = set()
    targets = [int(i) for i in rng.permutation(occupied)]
    for target in targets:
        if len(diffs) == n_differences:
            break
        if target in touched:
            continue
        cat = CATEGORIES[cells_a[target, 0] - 1]
        kind = KINDS[int(rng.integers(len(KINDS)))]
        free = [i for i in range(n) if cells_b[i, 2] == 0 and cells_a[i, 2] == 0 and i not in touched]
        if kind == "position" and not free:
            kind = "color"
        if kind == "color":
            old = int(cells_a[target, 1])
            new = int(rng.choice([c for c in range(1, len(COLORS) + 1) if c != old]))
            cells_b[target, 1] = new
            diffs.append(DifferenceRecord("color", cat, COLORS[old - 1], COLORS[new - 1], (target,)))
            touched.add(target)
        elif kind == "remove":
            cells_b[target] = NEUTRAL_CELL
            diffs.append(DifferenceRecord("remove", cat, "", "", (target,)))
            touched.add(target)
        else:
            dest = int(rng.choice(free))
            cells_b[dest] = cells_a[target]
            cells_b[target] = NEUTRAL_CELL
            diffs.append(DifferenceRecord("position", cat, _cell_name(target, grid_w),
                                          _cell_name(dest, grid_w), (target, dest)))
            touched.update((target, dest))
    scene = ScenePair(grid_h, grid_w, cells_a, cells_b, diffs)
    scene.validate()
    return scene


def encode_scene(cells: np.ndarray, params: ModelParams, side: int = 0) -> np.ndarray:
    """One embedding per cell; each row depends only on that cell's attributes."""
    cfg = params.config
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    if cells.shape[0] != cfg.n_visual:
        raise ConfigError(f"scene has {cells.shape[0]} cells, model expects {cfg.n_visual}")
    cat, color, occ = cells[:, 0], cells[:, 1], cells[:, 2]
    if (cat.min() < 0 or cat.max() > len(CATEGORIES) or color.min() < 0
            or color.max() > len(COLORS) or occ.min() < 0 or occ.max() > 1):
        raise ConfigError("cell attribute out of range")
    return params.cat_emb[side, cat] + params.color_emb[side, color] + params.occ_emb[side, occ]


def encode_pair(scene: ScenePair, params: ModelParams) -> np.ndarray:
    if (scene.grid_h, scene.grid_w) != (params.config.grid_h, params.config.grid_w):
        raise ConfigError("scene grid does not match the model's visual span")
    return encode_scene(scene.cells_a, params, 0) + encode_scene(scene.cells_b, params, 1)


# ---------------------------------------------------------------------------
# sequence layout


@dataclass(frozen=True)
class SequenceLayout:
    n_sys: int
    n_visual: int
    n_prompt: int

    def __post_init__(self):
        if self.n_sys < 0 or self.n_visual < 1 or self.n_prompt < 1:
            raise ConfigError("layout needs a visual span and a nonempty prompt")

    @property
    def v_start(self) -> int:
        return self.n_sys

    @property
    def v_end(self) -> int:
        """Inclusive index of the last visual position."""
        return self.n_sys + self.n_visual - 1

    @property
    def prompt_start(self) -> int:
        return self.v_end + 1

    @property
    def t_gen(self) -> int:
        return self.prompt_start + self.n_prompt

    def segment_masks(self, ctx: int) -> dict[str, np.ndarray]:
        idx = np.arange(ctx)
        return {
            "system": idx < self.v_start,
            "visual": (idx >= self.v_start) & (idx <= self.v_end),
            "prompt": (idx >= self.prompt_start) & (idx < self.t_gen),
            "generated": idx >= self.t_gen,
        }

    def to_dict(self) -> dict:
        return {"n_sys": self.n_sys, "n_visual": self.n_visual, "n_prompt": self.n_prompt}


def make_layout(config: ModelConfig, prompt_tokens) -> SequenceLayout:
    return SequenceLayout(config.n_sys, config.n_visual, len(prompt_tokens))


def system_tokens(n_sys: int) -> list[int]:
    return [SYS_TOKENS[i % len(SYS_TOKENS)] for i in range(n_sys)]


# ---------------------------------------------------------------------------
# forward pass


class Interventions:
    """No-op hook bundle. Subclasses override what they need.

    ``begin_step`` is called once per decode step before any layer runs.
    Attention hooks receive ``(n_heads, ctx)`` arrays for the query position.
    """

    def begin_step(self, step: int, position: int) -> None:
        pass

    def modulate_scores(self, layer: int, scores: np.ndarray) -> np.ndarray:
        return scores

    def modulate_attention(self, layer: int, attn: np.ndarray) -> np.ndarray:
        return attn

    def ffn_scale(self, layer: int, delta_attn: np.ndarray, delta_ffn: np.ndarray) -> float:
        return 1.0

    def fuse_logits(self, step: int, logits: np.ndarray, ctx: "StepContext") -> np.ndarray:
        return logits

    def end_step(self, step: int, token: int) -> None:
        pass


NO_INTERVENTIONS = Interventions()


@dataclass
class LayerTrace:
    attn: np.ndarray       # effective weights (n_heads, ctx)
    attn_raw: np.ndarray   # weights before any hook
    x_in: np.ndarray
    x_mid: np.ndarray
    x_out: np.ndarray
    delta_attn: np.ndarray
    delta_ffn: np.ndarray
    gate_pre: np.ndarray   # W_gate . LN2(x_mid)
    ffn_scale: float = 1.0


@dataclass
class StepTrace:
    step: int
    position: int
    token: int
    logits: np.ndarray         # logits the token was chosen from
    layers: list[LayerTrace]
    final_hidden: np.ndarray   # (ctx, d): LN_f outputs for every position so far


@dataclass
class DecodeTrace:
    layout: SequenceLayout
    steps: list[StepTrace] = field(default_factory=list)
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def n_layers(self) -> int:
        return len(self.steps[0].layers) if self.steps else 0

    def to_dict(self) -> dict:
        def arr(a):
            return np.asarray(a).tolist()

        return {
            "layout": self.layout.to_dict(),
            "truncated": self.truncated,
            "steps": [{
                "step": s.step, "position": s.position, "token": s.token,
                "logits": arr(s.logits), "final_hidden": arr(s.final_hidden),
                "layers": [{
                    "attn": arr(l.attn), "attn_raw": arr(l.attn_raw), "x_in": arr(l.x_in),
                    "x_mid": arr(l.x_mid), "x_out": arr(l.x_out),
                    "delta_attn": arr(l.delta_attn), "delta_ffn": arr(l.delta_ffn),
                    "gate_pre": arr(l.gate_pre), "ffn_scale": l.ffn_scale,
                } for l in s.layers],
            } for s in self.steps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecodeTrace":
        def arr(a):
            return np.asarray(a, dtype=np.float64)

        steps = []
        for s in d["steps"]:
            layers = [LayerTrace(
                attn=arr(l["attn"]), attn_raw=arr(l["attn_raw"]), x_in=arr(l["x_in"]),
                x_mid=arr(l["x_mid"]), x_out=arr(l["x_out"]), delta_attn=arr(l["delta_attn"]),
                delta_ffn=arr(l["delta_ffn"]), gate_pre=arr(l["gate_pre"]),
                ffn_scale=float(l.get("ffn_scale", 1.0)),
            ) for l in s["layers"]]
            steps.append(StepTrace(step=int(s["step"]), position=int(s["position"]),
                                   token=int(s["token"]), logits=arr(s["logits"]),
                                   layers=layers, final_hidden=arr(s["final_hidden"])))
        return cls(layout=SequenceLayout(**d["layout"]), steps=steps,
                   truncated=bool(d.get("truncated", False)))

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


class KVCache:
    def __init__(self, n_layers: int):
        self.keys: list[list[np.ndarray]] = [[] for _ in range(n_layers)]
        self.values: list[list[np.ndarray]] = [[] for _ in range(n_layers)]

    def __len__(self) -> int:
        return len(self.keys[0]) if self.keys else 0


def gated_ffn(layer: LayerParams, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(W_down (silu(W_gate h) * W_up h), W_gate h)``."""
    h = numkit.as_vector(h, "h")
    pre = numkit.matvec(layer.w_gate, h, "gated_ffn.gate")
    up = numkit.matvec(layer.w_up, h, "gated_ffn.up")
    out = numkit.matvec(layer.w_down, numkit.silu(pre) * up, "gated_ffn.down")
    return out, pre


def _check(arr: np.ndarray, what: str, layer: int, position: int) -> None:
    if not np.all(np.isfinite(arr)):
        raise DecodeError(f"non-finite {what} at layer {layer}, position {position}")


def residual_block(layer_params: LayerParams, x: np.ndarray, cache: KVCache, layer: int,
                   position: int, hooks: Interventions | None = None,
                   n_heads: int = 1) -> LayerTrace:
    """Pre-norm attention then gated FFN for a single query position.

    The key and value for ``position`` are appended to ``cache`` before
    attending, so the causal row spans positions ``0..position``.
    """
    hooks = hooks or NO_INTERVENTIONS
    d = x.shape[0]
    dh = d // n_heads
    h = numkit.layer_norm(x, layer_params.ln1_g, layer_params.ln1_b)
    q = numkit.matvec(layer_params.w_q, h).reshape(n_heads, dh)
    cache.keys[layer].append(numkit.matvec(layer_params.w_k, h).reshape(n_heads, dh))
    cache.values[layer].append(numkit.matvec(layer_params.w_v, h).reshape(n_heads, dh))
    keys = np.stack(cache.keys[layer], axis=1)      # (heads, ctx, dh)
    values = np.stack(cache.values[layer], axis=1)
    scores = np.einsum("hd,hcd->hc", q, keys) / math.sqrt(dh)
    scores = hooks.modulate_scores(layer, scores)
    raw = np.empty_like(scores)
    for i in range(n_heads):
        raw[i] = numkit.softmax(scores[i])
    attn = hooks.modulate_attention(layer, raw)
    mixed = np.einsum("hc,hcd->hd", attn, values).reshape(d)
    delta_attn = numkit.matvec(layer_params.w_o, mixed)
    _check(delta_attn, "attention update", layer, position)
    x_mid = x + delta_attn
    h2 = numkit.layer_norm(x_mid, layer_params.ln2_g, layer_params.ln2_b)
    delta_ffn, gate_pre = gated_ffn(layer_params, h2)
    _check(delta_ffn, "FFN update", layer, position)
    scale = float(hooks.ffn_scale(layer, delta_attn, delta_ffn))
    x_out = x_mid + delta_ffn if scale == 1.0 else x_mid + scale * delta_ffn
    return LayerTrace(attn=attn, attn_raw=raw, x_in=x, x_mid=x_mid, x_out=x_out,
                      delta_attn=delta_attn, delta_ffn=delta_ffn, gate_pre=gate_pre,
                      ffn_scale=scale)


@dataclass
class PositionOutput:
    layers: list[LayerTrace]
    hidden: np.ndarray   # LN_f(x_L)
    logits: np.ndarray


def forward_position(params: ModelParams, x0: np.ndarray, position: int, cache: KVCache,
                     hooks: Interventions | None = None) -> PositionOutput:
    cfg = params.config
    if position >= cfg.max_seq_len:
        raise DecodeError(f"position {position} exceeds max_seq_len {cfg.max_seq_len}")
    x = x0 + params.pos_emb[position]
    layers = []
    for i, lp in enumerate(params.layers):
        rec = residual_block(lp, x, cache, i, position, hooks, cfg.n_heads)
        layers.append(rec)
        x = rec.x_out
    hidden = numkit.layer_norm(x, params.lnf_g, params.lnf_b)
    logits = hidden @ params.w_head
    _check(logits, "logits", cfg.n_layers, position)
    return PositionOutput(layers, hidden, logits)


def input_embeddings(params: ModelParams, visual: np.ndarray, prompt_tokens) -> list[np.ndarray]:
    cfg = params.config
    if visual.shape != (cfg.n_visual, cfg.d_model):
        raise ConfigError(f"visual embeddings must be {(cfg.n_visual, cfg.d_model)}")
    for t in prompt_tokens:
        if not 0 <= int(t) < cfg.vocab_size:
            raise ConfigError(f"prompt token {t} outside vocabulary")
    rows = [params.tok_emb[t] for t in system_tokens(cfg.n_sys)]
    rows.extend(visual)
    rows.extend(params.tok_emb[int(t)] for t in prompt_tokens)
    return rows


@dataclass
class StepContext:
    """What a logit-fusion hook can see at one decode step."""

    params: ModelParams
    layout: SequenceLayout
    inputs: list[np.ndarray]       # embeddings for positions 0..position
    visual: np.ndarray             # unmasked visual embeddings
    output: PositionOutput
    final_hidden: np.ndarray       # (ctx, d)
    generated: list[int]


def prefill(params: ModelParams, inputs: list[np.ndarray], upto: int, cache: KVCache,
            hidden: list[np.ndarray], hooks_for=None) -> None:
    """Run positions ``len(cache)..upto-1``; ``hooks_for(position)`` may return hooks."""
    for pos in range(len(cache), upto):
        out = forward_position(params, inputs[pos], pos, cache,
                               hooks_for(pos) if hooks_for else None)
        hidden.append(out.hidden)


def greedy_decode(params: ModelParams, scene_or_visual, prompt_tokens, interventions=None,
                  max_len: int = 12, forced=None) -> tuple[list[int], DecodeTrace]:
    """Argmax decoding (lowest id wins ties) with a full per-step trace.

    ``scene_or_visual`` is a :class:`ScenePair` or precomputed visual embeddings.
    Decoding stops after emitting EOS or ``max_len`` tokens; in the second case
    ``trace.truncated`` is set.

    ``forced`` teacher-forces the emitted tokens (logits are still computed and
    traced), which lines up two runs step for step.
    """
    if forced is not None:
        forced = [int(t) for t in forced]
        max_len = min(max_len, len(forced))
    hooks = interventions or NO_INTERVENTIONS
    cfg = params.config
    visual = (encode_pair(scene_or_visual, params) if isinstance(scene_or_visual, ScenePair)
              else np.asarray(scene_or_visual, dtype=np.float64))
    prompt_tokens = [int(t) for t in prompt_tokens]
    layout = make_layout(cfg, prompt_tokens)
    inputs = input_embeddings(params, visual, prompt_tokens)
    if layout.t_gen + max_len - 1 > cfg.max_seq_len:
        raise ConfigError("prompt plus max_len exceeds max_seq_len")

    cache = KVCache(cfg.n_layers)
    hidden: list[np.ndarray] = []
    prefill(params, inputs, layout.t_gen - 1, cache, hidden)

    trace = DecodeTrace(layout=layout)
    generated: list[int] = []
    position = layout.t_gen - 1
    for step in range(max_len):
        hooks.begin_step(step, position)
        out = forward_position(params, inputs[position], position, cache, hooks)
        hidden.append(out.hidden)
        final_hidden = np.stack(hidden)
        ctx = StepContext(params, layout, inputs, visual, out, final_hidden, list(generated))
        logits = hooks.fuse_logits(step, out.logits, ctx)
        token = int(np.argmax(logits)) if forced is None else forced[step]
        trace.steps.append(StepTrace(step, position, token, logits, out.layers, final_hidden))
        generated.append(token)
        hooks.end_step(step, token)
        if token == EOS:
            break
        inputs.append(params.tok_emb[token])
        position += 1
    else:
        trace.truncated = forced is None
    return generated, trace


def replay_logits(params: ModelParams, visual: np.ndarray, prompt_tokens, generated,
                  hooks_for=None) -> PositionOutput:
    """Fresh full forward over prompt + ``generated``; returns the last position's output.

    Used by the contrastive auxiliary path, whose visual input differs from
    the cached main path.
    """
    cfg = params.config
    inputs = input_embeddings(params, visual, prompt_tokens)
    inputs.extend(params.tok_emb[t] for t in generated)
    cache = KVCache(cfg.n_layers)
    hidden: list[np.ndarray] = []
    last = len(inputs) - 1
    prefill(params, inputs, last, cache, hidden, hooks_for)
    return forward_position(params, inputs[last], last, cache,
                            hooks_for(last) if hooks_for else None)
