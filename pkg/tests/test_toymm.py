import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sagefaith import numkit, toymm
from sagefaith.records import DifferenceRecord
from sagefaith.toymm import (
    EOS,
    ConfigError,
    Interventions,
    KVCache,
    ModelConfig,
    ScenePair,
    SequenceLayout,
    build_model,
    encode_pair,
    encode_scene,
    gated_ffn,
    greedy_decode,
    make_scene,
    replay_logits,
    residual_block,
)


def test_same_seed_same_checksum():
    assert build_model(ModelConfig(seed=5)).checksum() == build_model(ModelConfig(seed=5)).checksum()


def test_checksums_distinct_over_100_seeds():
    cfg = dict(n_layers=1, d_model=8, n_heads=2, d_ffn=8, grid_h=2, grid_w=2, max_seq_len=32)
    sums = {build_model(ModelConfig(seed=s, **cfg)).checksum() for s in range(100)}
    assert len(sums) == 100


@pytest.mark.parametrize("bad", [dict(d_model=30, n_heads=4), dict(d_ffn=16), dict(vocab_size=10),
                                 dict(n_layers=0), dict(grid_h=0)])
def test_inconsistent_config_rejected(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad)


def test_parameters_are_read_only(params):
    with pytest.raises(ValueError):
        params.w_head[0, 0] = 1.0


def test_identical_grids_identical_embeddings(params):
    scene = make_scene(3)
    a = encode_scene(scene.cells_a, params)
    assert np.array_equal(a, encode_scene(scene.cells_a.copy(), params))


def _hamming(a, b):
    return int(np.any(a != b, axis=1).sum())


def test_color_edit_changes_one_embedding(params):
    scene = make_scene(0)
    cells = scene.cells_a.copy()
    idx = int(np.flatnonzero(cells[:, 2])[0])
    cells[idx, 1] = cells[idx, 1] % len(toymm.COLORS) + 1
    diff = np.flatnonzero(np.any(encode_scene(cells, params) != encode_scene(scene.cells_a, params), axis=1))
    assert diff.tolist() == [idx]


def test_removal_changes_one_embedding(params):
    scene = make_scene(0)
    cells = scene.cells_a.copy()
    idx = int(np.flatnonzero(cells[:, 2])[0])
    cells[idx] = toymm.NEUTRAL_CELL
    diff = np.flatnonzero(np.any(encode_scene(cells, params) != encode_scene(scene.cells_a, params), axis=1))
    assert diff.tolist() == [idx]


@given(st.integers(0, 10_000), st.integers(1, 3))
def test_pair_encoding_hamming_equals_edited_cells(seed, nd):
    p = _PARAMS
    scene = make_scene(seed, n_differences=nd)
    base = encode_scene(scene.cells_a, p, 0) + encode_scene(scene.cells_a, p, 1)
    assert _hamming(encode_pair(scene, p), base) == len(scene.changed_cells())
    assert scene.changed_cells() == scene.implied_cells()


_PARAMS = build_model(ModelConfig())


def test_encode_rejects_span_mismatch(params):
    with pytest.raises(ConfigError):
        encode_scene(np.zeros((5, 3), dtype=int), params)
    with pytest.raises(ConfigError):
        encode_pair(make_scene(0, 3, 3), params)


def test_scene_roundtrip_and_validation():
    scene = make_scene(7, n_differences=3)
    again = ScenePair.from_dict(scene.to_dict())
    assert np.array_equal(again.cells_a, scene.cells_a)
    assert again.differences == scene.differences
    broken = ScenePair(4, 4, scene.cells_a, scene.cells_a, scene.differences)
    with pytest.raises(ValueError):
        broken.validate()


@pytest.mark.parametrize("nd", [1, 2, 3, 4, 5])
def test_make_scene_counts(nd):
    for seed in range(20):
        scene = make_scene(seed, n_differences=nd, n_objects=8)
        assert len(scene.differences) == nd
        assert all(d.kind in ("color", "remove", "position") for d in scene.differences)


def test_layout_segments_partition():
    lay = SequenceLayout(4, 16, 3)
    masks = lay.segment_masks(lay.t_gen + 5)
    stacked = np.stack(list(masks.values())).astype(int)
    assert np.all(stacked.sum(axis=0) == 1)
    assert (lay.v_start, lay.v_end, lay.prompt_start, lay.t_gen) == (4, 19, 20, 23)


def test_gated_ffn_zero_input(small_params):
    out, _ = gated_ffn(small_params.layers[0], np.zeros(8))
    assert np.all(out == 0.0)


def test_gated_ffn_matches_naive_loops(rng):
    d, f = 4, 8
    layer = toymm.LayerParams(*(np.ones(d),) * 2, *(np.eye(d),) * 4, np.ones(d), np.zeros(d),
                              rng.normal(size=(f, d)), rng.normal(size=(f, d)), rng.normal(size=(d, f)))
    h = rng.normal(size=d)
    inner = []
    for i in range(f):
        g = sum(layer.w_gate[i, j] * h[j] for j in range(d))
        u = sum(layer.w_up[i, j] * h[j] for j in range(d))
        inner.append(g / (1 + math.exp(-g)) * u)
    naive = [sum(layer.w_down[k, i] * inner[i] for i in range(f)) for k in range(d)]
    assert np.allclose(gated_ffn(layer, h)[0], naive, rtol=0, atol=1e-10)


def test_gated_ffn_linear_in_down_projection(small_params, rng):
    layer = small_params.layers[0]
    doubled = dataclasses.replace(layer, w_down=layer.w_down * 2)
    h = rng.normal(size=8)
    assert np.allclose(gated_ffn(doubled, h)[0], 2 * gated_ffn(layer, h)[0], rtol=1e-15, atol=0)


def _block(params, hooks, rng):
    cache = KVCache(1)
    lp = params.layers[0]
    for _ in range(3):
        residual_block(lp, rng.normal(size=params.config.d_model), cache, 0, 0, None, params.config.n_heads)
    return residual_block(lp, rng.normal(size=params.config.d_model), cache, 0, 3, hooks,
                          params.config.n_heads)


def test_identity_block_ffn_delta_exact(small_params, rng):
    rec = _block(small_params, None, rng)
    h2 = numkit.layer_norm(rec.x_mid, small_params.layers[0].ln2_g, small_params.layers[0].ln2_b)
    assert np.array_equal(rec.x_out, rec.x_mid + gated_ffn(small_params.layers[0], h2)[0])
    assert np.allclose(rec.x_out - rec.x_mid, rec.delta_ffn, rtol=0, atol=1e-12)


class _Scale(Interventions):
    def __init__(self, s):
        self.s = s

    def ffn_scale(self, layer, da, df):
        return self.s


def test_beta_zero_suppresses_ffn(small_params, rng):
    rec = _block(small_params, _Scale(0.0), rng)
    assert np.array_equal(rec.x_out, rec.x_mid)


class _RandomRows(Interventions):
    def __init__(self, rng):
        self.rng = rng

    def modulate_attention(self, layer, attn):
        w = attn * self.rng.uniform(0.1, 3.0, size=attn.shape)
        return w / w.sum(axis=1, keepdims=True)


def test_overridden_rows_are_distributions(small_params, rng):
    for _ in range(50):
        rec = _block(small_params, _RandomRows(rng), rng)
        assert np.allclose(rec.attn.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(rec.attn >= 0)


def test_decode_deterministic(params):
    scene = make_scene(11)
    a = greedy_decode(params, scene, [toymm.Q_DESCRIBE])
    b = greedy_decode(params, scene, [toymm.Q_DESCRIBE])
    assert a[0] == b[0]
    assert a[1].dumps() == b[1].dumps()


class _Tie(Interventions):
    def fuse_logits(self, step, logits, ctx):
        out = np.full_like(logits, -5.0)
        out[7] = out[3] = 1.0
        return out


def test_tie_breaks_to_lowest_id(params):
    tokens, _ = greedy_decode(params, make_scene(0), [toymm.Q_SAME], _Tie(), max_len=2)
    assert tokens == [3, 3]


def test_trace_matches_tokens_and_truncation(params):
    tokens, trace = greedy_decode(params, make_scene(2), [toymm.Q_DESCRIBE], max_len=5)
    assert len(trace) == len(tokens)
    assert [s.token for s in trace.steps] == tokens
    assert trace.truncated == (EOS not in tokens and len(tokens) == 5)


class _ForceEos(Interventions):
    def fuse_logits(self, step, logits, ctx):
        out = logits.copy()
        if step == 2:
            out[EOS] = out.max() + 1
        return out


def test_eos_stops_decoding(params):
    tokens, trace = greedy_decode(params, make_scene(2), [toymm.Q_DESCRIBE], _ForceEos(), max_len=10)
    assert tokens[-1] == EOS and len(tokens) == 3 and not trace.truncated


def test_residual_checkpoints_reconstruct(params):
    _, trace = greedy_decode(params, make_scene(4), [toymm.Q_DIFF])
    for s in trace.steps:
        for rec in s.layers:
            assert np.allclose(rec.x_in + rec.delta_attn, rec.x_mid, rtol=0, atol=1e-9)
            assert np.allclose(rec.x_mid + rec.delta_ffn, rec.x_out, rtol=0, atol=1e-9)


class _MaskColumn(Interventions):
    def __init__(self, col):
        self.col = col

    def modulate_attention(self, layer, attn):
        if attn.shape[1] <= self.col:
            return attn
        out = attn.copy()
        out[:, self.col] = 0.0
        if attn.shape[1] == self.col + 1:
            return out if out.sum() else attn
        return out / out.sum(axis=1, keepdims=True)


def test_causality_masked_column_hides_cell(params):
    scene = make_scene(5)
    lay = toymm.make_layout(params.config, [toymm.Q_DESCRIBE])
    cell = 3
    col = lay.v_start + cell
    edited = scene.cells_a.copy()
    edited[cell] = (2, 3, 1) if tuple(edited[cell]) != (2, 3, 1) else (4, 1, 1)
    other = ScenePair(4, 4, edited, scene.cells_b)
    hooks = _MaskColumn(col)
    out_a = replay_logits(params, encode_pair(scene, params), [toymm.Q_DESCRIBE], [23, 24],
                          lambda pos: hooks if pos != col else None)
    out_b = replay_logits(params, encode_pair(other, params), [toymm.Q_DESCRIBE], [23, 24],
                          lambda pos: hooks if pos != col else None)
    # equal up to rounding: the softmax max-shift can still come from the masked key
    assert np.allclose(out_a.logits, out_b.logits, rtol=0, atol=1e-12)
    plain_a = replay_logits(params, encode_pair(scene, params), [toymm.Q_DESCRIBE], [23, 24])
    plain_b = replay_logits(params, encode_pair(other, params), [toymm.Q_DESCRIBE], [23, 24])
    assert np.abs(plain_a.logits - plain_b.logits).max() > 1e-6


def test_replay_matches_cached_decode(params):
    scene = make_scene(6)
    tokens, trace = greedy_decode(params, scene, [toymm.Q_COUNT], max_len=4)
    out = replay_logits(params, encode_pair(scene, params), [toymm.Q_COUNT], tokens[:3])
    assert np.allclose(out.logits, trace.steps[3].logits, rtol=0, atol=1e-12)


def test_trace_json_roundtrip(params):
    _, trace = greedy_decode(params, make_scene(1), [toymm.Q_SAME], max_len=3)
    again = toymm.DecodeTrace.from_dict(trace.to_dict())
    assert again.dumps() == trace.dumps()


def test_max_seq_len_guard():
    p = build_model(ModelConfig(max_seq_len=24))
    with pytest.raises(ConfigError):
        greedy_decode(p, make_scene(0), [toymm.Q_SAME], max_len=10)


def test_difference_record_validation():
    with pytest.raises(ValueError):
        DifferenceRecord("resize", "dog")
    with pytest.raises(ValueError):
        DifferenceRecord("color", " ")
    assert DifferenceRecord("color", "bus", "red", "blue").detail == "red to blue"
