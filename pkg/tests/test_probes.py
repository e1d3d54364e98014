import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sagefaith import probes, toymm
from sagefaith.probes import (
    NeuronProfile,
    ProbeError,
    activation_difference_ratio,
    activation_ratio,
    active_from_outputs,
    attention_allocation,
    neuron_activation_state,
    neuron_profile,
    paired_hidden_similarity,
    row_allocation,
    sublayer_similarity,
    tam_values,
    token_activation_map,
)
from sagefaith.sage import SageConfig, sage_decode
from sagefaith.toymm import LayerTrace, SequenceLayout, greedy_decode, make_scene

LAYOUT = SequenceLayout(2, 4, 1)


def test_tam_zero_column(rng):
    hidden = rng.normal(size=(8, 5))
    assert np.all(tam_values(hidden, np.zeros(5), LAYOUT, (2, 2)) == 0)


def test_tam_orthogonal_hidden():
    hidden = np.zeros((8, 3))
    hidden[:, :2] = 1.0
    assert np.all(tam_values(hidden, np.array([0.0, 0.0, 2.0]), LAYOUT, (2, 2)) == 0)


def test_tam_matches_full_projection(params):
    _, trace = greedy_decode(params, make_scene(0), [toymm.Q_DESCRIBE], max_len=3)
    step = trace.steps[-1]
    full = step.final_hidden @ params.w_head
    tam = token_activation_map(step.final_hidden, params.w_head, 30, trace.layout, (4, 4))
    lay = trace.layout
    assert np.allclose(tam.values, full[lay.v_start:lay.v_end + 1, 30], rtol=0, atol=1e-9)
    assert tam.grid.shape == (4, 4)


def test_tam_rejects_bad_shapes(rng):
    with pytest.raises(ProbeError):
        tam_values(rng.normal(size=(8, 5)), np.ones(4), LAYOUT, (2, 2))
    with pytest.raises(ProbeError):
        tam_values(rng.normal(size=(8, 5)), np.ones(5), LAYOUT, (3, 2))
    with pytest.raises(ProbeError):
        tam_values(rng.normal(size=(4, 5)), np.ones(5), LAYOUT, (2, 2))


def test_uniform_row_allocation():
    lay = SequenceLayout(2, 4, 1)
    ctx = 10
    fr = row_allocation(np.full(ctx, 1 / ctx), lay)
    assert np.allclose(fr, [2 / 10, 4 / 10, 1 / 10, 3 / 10], atol=1e-15)


def test_allocation_partitions_unity(params):
    _, trace = greedy_decode(params, make_scene(1), [toymm.Q_SAME])
    fr = attention_allocation(trace).fractions
    assert fr.shape == (4, len(trace), 4)
    assert np.allclose(fr.sum(axis=2), 1.0, atol=1e-12)


def test_stage_one_allocation_pointwise(params):
    scene = make_scene(12)
    base, btrace = greedy_decode(params, scene, [toymm.Q_DESCRIBE])
    _, trace, _ = sage_decode(params, scene, [toymm.Q_DESCRIBE], SageConfig(analyze=False, generate=False),
                              forced=base)
    assert np.all(attention_allocation(trace).segment("visual") >= attention_allocation(btrace).segment("visual"))
    # first layer, first step: inputs are identical, so raw rows match the baseline
    assert np.array_equal(attention_allocation(trace, raw=True).fractions[0, 0],
                          attention_allocation(btrace).fractions[0, 0])


def test_paired_similarity_identity_and_symmetry(params):
    _, a = greedy_decode(params, make_scene(1), [toymm.Q_SAME], max_len=2)
    _, b = greedy_decode(params, make_scene(2), [toymm.Q_SAME], max_len=2)
    assert np.allclose(paired_hidden_similarity(a, a), 1.0, atol=1e-12)
    assert np.array_equal(paired_hidden_similarity(a, b), paired_hidden_similarity(b, a))


def test_paired_similarity_layer_mismatch(params, small_params):
    _, a = greedy_decode(params, make_scene(1), [toymm.Q_SAME], max_len=1)
    _, b = greedy_decode(small_params, make_scene(1, 2, 2), [toymm.Q_SAME], max_len=1)
    with pytest.raises(ProbeError):
        paired_hidden_similarity(a, b)


def _trace_with(layers):
    step = toymm.StepTrace(0, 0, 1, np.zeros(3), layers, np.zeros((1, 3)))
    return toymm.DecodeTrace(LAYOUT, [step])


def _layer(x, da, df):
    return LayerTrace(np.ones((1, 1)), np.ones((1, 1)), x, x + da, x + da + df, da, df, np.zeros(2))


def test_sublayer_examples():
    x = np.array([1.0, 2.0, -1.0])
    mid = x + np.array([0.5, 0.5, 0.5])
    trace = _trace_with([_layer(x, np.zeros(3), np.ones(3)),
                         _layer(x, np.array([0.5, 0.5, 0.5]), -0.5 * mid)])
    sims = sublayer_similarity(trace)
    assert sims[0, 0, 0] == 1.0
    assert sims[0, 1, 1] == pytest.approx(1.0, abs=1e-12)


def test_sublayer_recomputation_oracle(params):
    _, trace = greedy_decode(params, make_scene(3), [toymm.Q_DIFF], max_len=4)
    sims = sublayer_similarity(trace)
    for t, s in enumerate(trace.steps):
        for l, rec in enumerate(s.layers):
            a = rec.x_in @ rec.x_mid / np.linalg.norm(rec.x_in) / np.linalg.norm(rec.x_mid)
            assert sims[t, l, 0] == pytest.approx(a, abs=1e-12)


def test_sublayer_missing_checkpoint():
    rec = _layer(np.ones(3), np.ones(3), np.ones(3))
    rec.x_mid = None
    with pytest.raises(ProbeError):
        sublayer_similarity(_trace_with([rec]))


def test_neuron_state_examples():
    assert neuron_activation_state(np.ones((3, 4))).tolist() == [1, 1, 1, 1]
    assert neuron_activation_state(np.zeros((3, 4))).tolist() == [0, 0, 0, 0]
    assert active_from_outputs(np.array([[0.5, 1.0], [-0.5, -2.0]])).tolist() == [0, 0]
    with pytest.raises(ProbeError):
        neuron_activation_state(np.zeros((0, 4)))


def test_activation_ratio_examples():
    assert activation_ratio([1, 0, 1, 0]) == 0.5
    assert activation_ratio([1, 1]) == 1.0
    assert activation_ratio([0, 0, 0]) == 0.0


def test_neuron_profile_from_trace(params):
    _, trace = greedy_decode(params, make_scene(0), [toymm.Q_DESCRIBE])
    prof = neuron_profile(trace)
    assert len(prof.active) == 4 and prof.active[0].shape == (128,)
    assert np.all((prof.ratios >= 0) & (prof.ratios <= 1))
    with pytest.raises(ProbeError):
        neuron_profile(toymm.DecodeTrace(trace.layout))


ratio_groups = arrays(np.float64, st.tuples(st.integers(1, 5), st.just(4)), elements=st.floats(0, 1))


@given(ratio_groups, ratio_groups)
def test_difference_ratio_antisymmetric(u, f):
    d = activation_difference_ratio(list(u), list(f))
    assert np.array_equal(activation_difference_ratio(list(f), list(u)), -d)
    assert np.all(activation_difference_ratio(list(u), list(u)) == 0)


def test_difference_ratio_accepts_profiles():
    a = NeuronProfile([], np.array([0.5, 0.25]))
    b = NeuronProfile([], np.array([0.25, 0.25]))
    assert activation_difference_ratio([a], [b]).tolist() == [0.25, 0.0]
    with pytest.raises(ProbeError):
        activation_difference_ratio([], [b])


def test_export_text():
    assert probes.series_text(np.array([[0.5]])) == "layer\tstep\tvalue\n0\t0\t0.500000\n"
    assert probes.grid_text(np.eye(2)) == "1.000000 0.000000\n0.000000 1.000000\n"
