"""Measurements over recorded decodes: token activation maps, attention allocation,
residual-stream similarity, and FFN neuron activation ratios.

All functions read :class:`~sagefaith.toymm.DecodeTrace` objects and never
touch the model, so they work equally on traces loaded from disk.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numkit
from .toymm import DecodeTrace, SequenceLayout

SEGMENTS = ("system", "visual", "prompt", "generated")


class ProbeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# token activation map


@dataclass
class TamMap:
    token: int
    values: np.ndarray   # (N,) one per visual position
    grid: np.ndarray     # (H, W)


def tam_values(final_hidden: np.ndarray, w_col: np.ndarray, layout: SequenceLayout,
               grid_shape: tuple[int, int]) -> np.ndarray:
    hidden = np.asarray(final_hidden, dtype=np.float64)
    w = numkit.as_vector(w_col, "w_col")
    if hidden.ndim != 2 or hidden.shape[1] != w.shape[0]:
        raise ProbeError(f"hidden states {hidden.shape} incompatible with column of length {w.shape[0]}")
    if hidden.shape[0] <= layout.v_end:
        raise ProbeError("hidden states do not cover the visual span")
    h, wd = grid_shape
    if h * wd != layout.n_visual:
        raise ProbeError(f"grid {grid_shape} does not match {layout.n_visual} visual positions")
    return hidden[layout.v_start:layout.v_end + 1] @ w


def token_activation_map(final_hidden, w_head: np.ndarray, token: int, layout: SequenceLayout,
                         grid_shape: tuple[int, int]) -> TamMap:
    """Logit-lens projection of each visual position onto one vocabulary column."""
    values = tam_values(final_hidden, np.asarray(w_head)[:, token], layout, grid_shape)
    return TamMap(token=int(token), values=values, grid=values.reshape(grid_shape))


def step_tam(trace: DecodeTrace, w_head: np.ndarray, step: int,
             grid_shape: tuple[int, int], token: int | None = None) -> TamMap:
    s = trace.steps[step]
    return token_activation_map(s.final_hidden, w_head, s.token if token is None else token,
                                trace.layout, grid_shape)


# ---------------------------------------------------------------------------
# attention allocation


@dataclass
class AllocationSeries:
    fractions: np.ndarray  # (n_layers, n_steps, 4) over SEGMENTS

    def segment(self, name: str) -> np.ndarray:
        return self.fractions[:, :, SEGMENTS.index(name)]

    def visual_share_per_step(self) -> np.ndarray:
        """Visual fraction averaged over layers, one value per step."""
        return self.segment("visual").mean(axis=0)


def row_allocation(row: np.ndarray, layout: SequenceLayout) -> np.ndarray:
    masks = layout.segment_masks(row.shape[-1])
    return np.array([row[..., masks[s]].sum(axis=-1) for s in SEGMENTS])


def attention_allocation(trace: DecodeTrace, layout: SequenceLayout | None = None,
                         raw: bool = False) -> AllocationSeries:
    """Segment mass of each (layer, step) attention row, averaged over heads.

    Uses the weights actually applied unless ``raw`` asks for the pre-hook ones.
    """
    layout = layout or trace.layout
    out = np.zeros((trace.n_layers, len(trace), len(SEGMENTS)))
    for t, step in enumerate(trace.steps):
        for l, rec in enumerate(step.layers):
            row = (rec.attn_raw if raw else rec.attn).mean(axis=0)
            out[l, t] = row_allocation(row, layout)
    return AllocationSeries(out)


# ---------------------------------------------------------------------------
# residual stream


def paired_hidden_similarity(trace_a: DecodeTrace, trace_b: DecodeTrace, step: int = 0) -> np.ndarray:
    """Per-layer cosine between the two runs' layer outputs at the first decode position."""
    if not len(trace_a) or not len(trace_b):
        raise ProbeError("both traces need at least one decode step")
    if trace_a.n_layers != trace_b.n_layers:
        raise ProbeError(f"layer count mismatch: {trace_a.n_layers} vs {trace_b.n_layers}")
    la, lb = trace_a.steps[step].layers, trace_b.steps[step].layers
    return np.array([numkit.cosine_similarity(a.x_out, b.x_out) for a, b in zip(la, lb)])


def sublayer_similarity(trace: DecodeTrace) -> np.ndarray:
    """``(n_steps, n_layers, 2)``: cos(x_l, x_mid) for attention, cos(x_mid, x_out) for the FFN."""
    out = np.zeros((len(trace), trace.n_layers, 2))
    for t, step in enumerate(trace.steps):
        for l, rec in enumerate(step.layers):
            if rec.x_in is None or rec.x_mid is None or rec.x_out is None:
                raise ProbeError(f"missing residual checkpoint at step {t}, layer {l}")
            out[t, l, 0] = numkit.cosine_similarity(rec.x_in, rec.x_mid)
            out[t, l, 1] = numkit.cosine_similarity(rec.x_mid, rec.x_out)
    return out


# ---------------------------------------------------------------------------
# neurons


def neuron_activation_state(preacts) -> np.ndarray:
    """1 where the SiLU of the gate preactivation sums to > 0 over the generated steps.

    ``preacts`` is ``(n_steps, d_ffn)``.
    """
    pre = np.asarray(preacts, dtype=np.float64)
    if pre.ndim != 2 or pre.shape[0] == 0:
        raise ProbeError("need a nonempty (steps, d_ffn) preactivation array")
    return active_from_outputs(numkit.silu(pre))


def active_from_outputs(outputs) -> np.ndarray:
    """Strict threshold on summed gate outputs: a zero sum counts as inactive."""
    out = np.asarray(outputs, dtype=np.float64)
    if out.ndim != 2 or out.shape[0] == 0:
        raise ProbeError("need a nonempty (steps, d_ffn) array")
    return (out.sum(axis=0) > 0).astype(np.int64)


def activation_ratio(active) -> float:
    return float(np.mean(np.asarray(active, dtype=np.float64)))


@dataclass
class NeuronProfile:
    active: list[np.ndarray]  # per layer, binary (d_ffn,)
    ratios: np.ndarray        # per layer


def neuron_profile(trace: DecodeTrace) -> NeuronProfile:
    """Activation states over every decode position of ``trace``."""
    if not len(trace):
        raise ProbeError("empty generated span")
    active = []
    for l in range(trace.n_layers):
        pre = np.stack([s.layers[l].gate_pre for s in trace.steps])
        active.append(neuron_activation_state(pre))
    return NeuronProfile(active, np.array([activation_ratio(a) for a in active]))


def _ratios(group: Sequence) -> np.ndarray:
    rows = [p.ratios if isinstance(p, NeuronProfile) else np.asarray(p, dtype=np.float64) for p in group]
    if not rows:
        raise ProbeError("activation groups must be nonempty")
    return np.stack(rows)


def activation_difference_ratio(unfaithful: Sequence, faithful: Sequence) -> np.ndarray:
    """Mean per-layer ratio of the unfaithful group minus that of the faithful group.

    Group members are :class:`NeuronProfile` objects or plain per-layer ratio vectors.
    """
    u, f = _ratios(unfaithful), _ratios(faithful)
    if u.shape[1] != f.shape[1]:
        raise ProbeError("groups cover different numbers of layers")
    return u.mean(axis=0) - f.mean(axis=0)


# ---------------------------------------------------------------------------
# export


def series_text(values: np.ndarray, columns=("layer", "step", "value")) -> str:
    """Columnar text for a ``(layers, steps)`` array."""
    lines = ["\t".join(columns)]
    for l in range(values.shape[0]):
        for t in range(values.shape[1]):
            lines.append(f"{l}\t{t}\t{values[l, t]:.6f}")
    return "\n".join(lines) + "\n"


def grid_text(grid: np.ndarray) -> str:
    return "\n".join(" ".join(f"{v:.6f}" for v in row) for row in np.atleast_2d(grid)) + "\n"
