"""See / Analyze / Generate intervention engine for the toy model.

Stage I rescales each layer's attention row toward visual positions (a fixed
factor below the shallow/deep boundary, a decay-adaptive one above it).
Stage II compares the attention and FFN residual updates with a KL gate and
damps the FFN update when they disagree. Stage III masks the visual cells
that both the attention map and the token activation map rank highest, reruns
the model on the masked input, and boosts tokens whose logits dropped.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numkit
from .toymm import (
    DecodeTrace,
    Interventions,
    ModelParams,
    ScenePair,
    StepContext,
    greedy_decode,
    make_layout,
    make_scene,
    replay_logits,
    Q_DESCRIBE,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SageConfig:
    alpha0: float = 0.1
    shallow_boundary: int | None = None  # None -> n_layers // 2
    gamma: float = 0.2
    alpha_max: float = 0.5
    tau: float | None = None  # None -> calibrated on a baseline decode
    beta: float = 0.9
    eta: float = 0.5
    top_k: int | None = None  # None -> ceil(0.25 * grid cells)
    see: bool = True
    analyze: bool = True
    generate: bool = True
    modulation: str = "post"  # "post": rescale softmax output; "pre": rescale scores
    aux_hooks: bool = True    # auxiliary path also gets Stage I/II

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.alpha0 < 0 or self.gamma < 0 or self.alpha_max < 0:
            raise ValueError("alpha0, gamma and alpha_max must be >= 0")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.shallow_boundary is not None and self.shallow_boundary < 0:
            raise ValueError("shallow_boundary must be >= 0")
        if self.modulation not in ("post", "pre"):
            raise ValueError("modulation must be 'post' or 'pre'")

    @property
    def stages(self) -> tuple[bool, bool, bool]:
        return (self.see, self.analyze, self.generate)

    def resolved(self, params: ModelParams) -> "SageConfig":
        """Fill the defaults that depend on the model."""
        cfg = params.config
        boundary = cfg.n_layers // 2 if self.shallow_boundary is None else self.shallow_boundary
        if boundary > cfg.n_layers:
            raise ValueError(f"shallow_boundary {boundary} exceeds n_layers {cfg.n_layers}")
        k = math.ceil(0.25 * cfg.n_visual) if self.top_k is None else self.top_k
        tau = calibrate_tau(params) if self.tau is None else self.tau
        return replace(self, shallow_boundary=boundary, top_k=k, tau=tau)


# ---------------------------------------------------------------------------
# stage primitives


def modulate_row(row: np.ndarray, visual: np.ndarray, system: np.ndarray, alpha: float) -> np.ndarray:
    """Scale visual mass by 1+alpha and system mass by 1-alpha, then renormalize.

    Every other position (prompt and generated tokens) keeps coefficient 1.
    """
    row = np.asarray(row, dtype=np.float64)
    if alpha == 0.0:
        return row.copy()
    coef = np.ones_like(row)
    coef[visual] = 1.0 + alpha
    coef[system] = 1.0 - alpha
    scaled = row * coef
    total = scaled.sum()
    if not total > 0.0:
        log.warning("attention row vanished under modulation (alpha=%s); keeping it unmodulated", alpha)
        return row.copy()
    return scaled / total


def adaptive_alpha(mu_t: float, mu_prev: float | None, config: SageConfig) -> tuple[float, float]:
    """Return ``(alpha, delta)`` for a deep layer.

    ``delta`` is the relative change in mean visual attention (0 when there is
    no usable previous value); decay (negative delta) raises alpha linearly by
    ``gamma``, growth leaves it at ``alpha0``. The result is clamped to
    ``[0, alpha_max]``.
    """
    if mu_prev is None or mu_prev <= 0.0:
        delta = 0.0
    else:
        delta = (mu_t - mu_prev) / mu_prev
    alpha = config.alpha0 + config.gamma * max(0.0, -delta)
    return min(max(alpha, 0.0), config.alpha_max), delta


def update_divergence(delta_attn: np.ndarray, delta_ffn: np.ndarray) -> float:
    """KL(softmax(attention update) || softmax(FFN update)) over residual coordinates."""
    return numkit.kl_divergence(numkit.softmax(delta_attn), numkit.softmax(delta_ffn))


def rectify_ffn(delta_attn, delta_ffn, tau: float, beta: float) -> tuple[bool, np.ndarray, float]:
    """Return ``(gate_fired, effective FFN update, KL)``."""
    da = numkit.as_vector(delta_attn, "delta_attn")
    df = numkit.as_vector(delta_ffn, "delta_ffn")
    if da.shape != df.shape:
        raise numkit.NumericError("rectify_ffn: update vectors differ in length")
    kl = update_divergence(da, df)
    fired = kl > tau
    return fired, (beta * df if fired else df), kl


@dataclass
class SaliencyMask:
    omega_a: list[int]
    omega_t: list[int]
    mask: np.ndarray  # (H, W) bool

    @property
    def cells(self) -> list[int]:
        return np.flatnonzero(self.mask.ravel()).tolist()


def top_k_cells(values: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest entries; ties go to the lower row-major index."""
    order = np.argsort(-np.asarray(values, dtype=np.float64).ravel(), kind="stable")
    return sorted(order[:k].tolist())


def build_discrepancy_mask(attention_map, tam_map, k: int) -> SaliencyMask:
    a = np.asarray(attention_map, dtype=np.float64)
    t = np.asarray(tam_map, dtype=np.float64)
    if a.shape != t.shape:
        raise ValueError(f"attention map {a.shape} and TAM {t.shape} differ in shape")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > a.size:
        log.warning("top-k %d exceeds %d cells; clamping", k, a.size)
        k = a.size
    omega_a = top_k_cells(a, k)
    omega_t = top_k_cells(t, k)
    mask = np.zeros(a.size, dtype=bool)
    mask[sorted(set(omega_a) & set(omega_t))] = True
    return SaliencyMask(omega_a, omega_t, mask.reshape(a.shape))


def contrastive_logits(l_main, l_aux, eta: float) -> np.ndarray:
    main = numkit.as_vector(l_main, "l_main")
    aux = numkit.as_vector(l_aux, "l_aux")
    if main.shape != aux.shape:
        raise numkit.NumericError("contrastive_logits: length mismatch")
    return main + eta * numkit.relu(main - aux)


def occlude(visual: np.ndarray, cells) -> np.ndarray:
    """Replace the given visual rows by the mean visual embedding."""
    out = np.array(visual, dtype=np.float64, copy=True)
    cells = list(cells)
    if cells:
        out[cells] = visual.mean(axis=0)
    return out


# ---------------------------------------------------------------------------
# engine


@dataclass
class SageRecord:
    step: int
    layer: int
    alpha: float = math.nan
    delta: float = math.nan
    mu: float = math.nan
    kl: float = math.nan
    gate_fired: bool = False


@dataclass
class SageTrace:
    config: SageConfig
    records: list[SageRecord] = field(default_factory=list)
    masks: list[list[int]] = field(default_factory=list)  # per step, masked cells

    def mask_size(self, step: int) -> int:
        return len(self.masks[step]) if step < len(self.masks) else 0

    def gate_rate(self) -> float:
        kls = [r for r in self.records if not math.isnan(r.kl)]
        return sum(r.gate_fired for r in kls) / len(kls) if kls else 0.0

    def to_text(self) -> str:
        lines = ["step\tlayer\talpha\tdelta\tmu\tkl\tgate_fired\tmask_size"]
        for r in self.records:
            lines.append(f"{r.step}\t{r.layer}\t{r.alpha:.6f}\t{r.delta:.6f}\t{r.mu:.6f}\t"
                         f"{r.kl:.6f}\t{int(r.gate_fired)}\t{self.mask_size(r.step)}")
        return "\n".join(lines) + "\n"


def _segment_masks(layout, ctx: int):
    seg = layout.segment_masks(ctx)
    return seg["visual"], seg["system"]


class _StageHooks(Interventions):
    """Stage I and II hooks shared by the main path and the auxiliary replay."""

    def __init__(self, config: SageConfig, layout):
        self.config = config
        self.layout = layout

    def layer_alpha(self, layer: int, raw: np.ndarray) -> float:
        raise NotImplementedError

    def _alpha_for(self, layer: int, raw: np.ndarray) -> float:
        return self.layer_alpha(layer, raw) if self.config.see else 0.0

    def modulate_scores(self, layer, scores):
        if not self.config.see or self.config.modulation != "pre":
            return scores
        raw = np.stack([numkit.softmax(s) for s in scores])
        alpha = self._alpha_for(layer, raw)
        if alpha == 0.0:
            return scores
        visual, system = _segment_masks(self.layout, scores.shape[1])
        out = scores.copy()
        out[:, visual] *= 1.0 + alpha
        out[:, system] *= 1.0 - alpha
        return out

    def modulate_attention(self, layer, attn):
        if not self.config.see or self.config.modulation != "post":
            return attn
        alpha = self._alpha_for(layer, attn)
        if alpha == 0.0:
            return attn
        visual, system = _segment_masks(self.layout, attn.shape[1])
        return np.stack([modulate_row(row, visual, system, alpha) for row in attn])

    def gate(self, layer, delta_attn, delta_ffn) -> tuple[float, float, bool]:
        fired, _, kl = rectify_ffn(delta_attn, delta_ffn, self.config.tau, self.config.beta)
        return (self.config.beta if fired else 1.0), kl, fired

    def ffn_scale(self, layer, delta_attn, delta_ffn):
        if not self.config.analyze:
            return 1.0
        return self.gate(layer, delta_attn, delta_ffn)[0]


class _ReplayHooks(_StageHooks):
    """Auxiliary-path hooks for one position: reuse the main path's alphas."""

    def __init__(self, config, layout, alphas: list[float]):
        super().__init__(config, layout)
        self.alphas = alphas

    def layer_alpha(self, layer, raw):
        return self.alphas[layer]


class SageEngine(_StageHooks):
    def __init__(self, params: ModelParams, config: SageConfig, prompt_tokens, tam_fn=None):
        super().__init__(config, None)
        self.params = params
        self.prompt = [int(t) for t in prompt_tokens]
        self.tam_fn = tam_fn
        self.trace = SageTrace(config)
        self.mu_prev: dict[int, float] = {}
        self.alpha_log: list[list[float]] = []
        self.step = -1
        self._rows: dict[int, SageRecord] = {}

    def begin_step(self, step, position):
        self.step = step
        self.alpha_log.append([0.0] * self.params.config.n_layers)
        self._rows = {}

    def _row(self, layer) -> SageRecord:
        if layer not in self._rows:
            rec = SageRecord(self.step, layer)
            self._rows[layer] = rec
            self.trace.records.append(rec)
        return self._rows[layer]

    def layer_alpha(self, layer, raw):
        rec = self._row(layer)
        visual, _ = _segment_masks(self.layout, raw.shape[1])
        mu = float(raw[:, visual].mean())
        rec.mu = mu
        if layer < self.config.shallow_boundary:
            alpha, delta = self.config.alpha0, 0.0
        else:
            alpha, delta = adaptive_alpha(mu, self.mu_prev.get(layer), self.config)
        self.mu_prev[layer] = mu
        rec.alpha, rec.delta = alpha, delta
        self.alpha_log[self.step][layer] = alpha
        return alpha

    def ffn_scale(self, layer, delta_attn, delta_ffn):
        if not self.config.analyze:
            return 1.0
        scale, kl, fired = self.gate(layer, delta_attn, delta_ffn)
        rec = self._row(layer)
        rec.kl, rec.gate_fired = kl, bool(fired)
        return scale

    def fuse_logits(self, step, logits, ctx: StepContext):
        if not self.config.generate:
            self.trace.masks.append([])
            return logits
        cfg = self.params.config
        layout = ctx.layout
        vis = slice(layout.v_start, layout.v_end + 1)
        attn_map = ctx.output.layers[-1].attn_raw[:, vis].mean(axis=0).reshape(cfg.grid_h, cfg.grid_w)
        target = int(np.argmax(logits))
        tam = self.tam_fn(ctx.final_hidden, self.params.w_head[:, target], layout,
                          (cfg.grid_h, cfg.grid_w))
        mask = build_discrepancy_mask(attn_map, np.asarray(tam).reshape(cfg.grid_h, cfg.grid_w),
                                      self.config.top_k)
        cells = mask.cells
        self.trace.masks.append(cells)
        if not cells or self.config.eta == 0.0:
            aux = logits  # fusion is the identity either way
        else:
            aux = replay_logits(self.params, occlude(ctx.visual, cells), self.prompt,
                                ctx.generated, self._aux_hooks(layout)).logits
        return contrastive_logits(logits, aux, self.config.eta)

    def _aux_hooks(self, layout):
        if not self.config.aux_hooks or not (self.config.see or self.config.analyze):
            return None
        first = layout.t_gen - 1

        def hooks_for(position):
            if position < first:
                return None
            return _ReplayHooks(self.config, layout, self.alpha_log[position - first])

        return hooks_for


def sage_decode(params: ModelParams, scene, prompt_tokens, config: SageConfig | None = None,
                max_len: int = 12, tam_fn=None, forced=None) -> tuple[list[int], DecodeTrace, SageTrace]:
    """Decode with the enabled stages; ``tam_fn`` defaults to :func:`probes.tam_values`."""
    config = (config or SageConfig()).resolved(params)
    if tam_fn is None:
        from .probes import tam_values
        tam_fn = tam_values
    engine = SageEngine(params, config, prompt_tokens, tam_fn)
    engine.layout = make_layout(params.config, engine.prompt)
    hooks = engine if any(config.stages) else None
    tokens, trace = greedy_decode(params, scene, prompt_tokens, hooks, max_len, forced)
    return tokens, trace, engine.trace


# ---------------------------------------------------------------------------
# threshold calibration

_TAU_CACHE: dict[tuple[str, float, int], float] = {}


def kl_profile(trace: DecodeTrace) -> np.ndarray:
    """Gate divergence at every (step, layer) of a recorded decode."""
    return np.array([update_divergence(l.delta_attn, l.delta_ffn)
                     for s in trace.steps for l in s.layers])


def calibrate_tau(params: ModelParams, quantile: float = 0.9, seed: int = 0,
                  max_len: int = 12) -> float:
    """90th percentile of the gate divergence on a baseline decode of a seeded scene."""
    key = (params.checksum(), quantile, seed)
    if key not in _TAU_CACHE:
        cfg = params.config
        scene = make_scene(seed, cfg.grid_h, cfg.grid_w, n_differences=1)
        _, trace = greedy_decode(params, scene, [Q_DESCRIBE], None, max_len)
        _TAU_CACHE[key] = float(np.quantile(kl_profile(trace), quantile))
    return _TAU_CACHE[key]
