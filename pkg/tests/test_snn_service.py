import numpy as np
import pytest

from app.core.errors import ConversionError
from app.models.dto import CalibrationProfile
from app.services import metrics
from app.services.idr_model import inference_masks, stack_time_inference
from app.services.snn_service import (
    SpikingLayer,
    SpikingNet,
    activation_percentile,
    ann_activations,
    calibrate,
    convert,
    count_macs,
    count_synops,
    decoding_errors,
    energy_report,
    load_snn,
    save_snn,
    simulate,
    snn_predict,
)


@pytest.fixture
def calibration_batch():
    return np.random.default_rng(8).standard_normal((200, 5))


@pytest.fixture
def dense_model(make_model):
    # unmasked slots keep the hand counts below simple
    return make_model(seed=4, keep_prob=1.0, randomize_readout=True)


@pytest.fixture
def masked_model(make_model, make_config):
    """Default mask density, with an eval seed whose mask bank actually drops features."""
    seed = next(s for s in range(50) if inference_masks(make_config(time_steps=4, eval_seed=s)).min() == 0.0)
    return make_model(seed=4, time_steps=4, eval_seed=seed)


def _single_neuron(weight=1.0, bias=0.0):
    return SpikingNet(layers=[SpikingLayer(weight=np.array([[weight]]), bias=np.array([bias]))], scales=[1.0])

# --- Calibration ---

def test_percentile_uses_linear_interpolation():
    values = np.arange(1, 1001, dtype=np.float64)
    assert activation_percentile(values, 99.9) == pytest.approx(999.001)
    assert activation_percentile(values, 100.0) == 1000.0
    assert activation_percentile(np.full(50, 2.5), 99.9) == 2.5


def test_calibration_covers_every_unit(dense_model, calibration_batch):
    profile = calibrate(dense_model, calibration_batch)
    assert profile.percentile == 99.9
    assert len(profile.scales) == dense_model.config.n_linear
    for scale, acts in zip(profile.scales, ann_activations(dense_model, calibration_batch)):
        assert 0 < scale <= acts.max()


def test_calibration_rejects_an_empty_batch(dense_model):
    with pytest.raises(ConversionError):
        calibrate(dense_model, np.zeros((0, 5)))


def test_calibration_rejects_a_silent_layer(dense_model, calibration_batch):
    params = dict(dense_model.params)
    params["extractor.0.weight"] = np.zeros_like(params["extractor.0.weight"])
    with pytest.raises(ConversionError) as info:
        calibrate(dense_model.with_params(params), calibration_batch)
    assert info.value.context["layer"] == 0

# --- Conversion ---

def test_identity_profile_keeps_weights(dense_model):
    snn = convert(dense_model, CalibrationProfile(scales=[1.0] * 4))
    for i, layer in enumerate(snn.layers):
        assert np.array_equal(layer.weight, dense_model.params[f"extractor.{i}.weight"])
        assert np.array_equal(layer.bias, dense_model.params[f"extractor.{i}.bias"])
    assert snn.layers[2].skip_from == 0 and snn.layers[2].skip_scale == 1.0


def test_doubling_every_scale_only_rescales_the_first_layer(dense_model):
    base = convert(dense_model, CalibrationProfile(scales=[1.0, 2.0, 3.0, 4.0]))
    doubled = convert(dense_model, CalibrationProfile(scales=[2.0, 4.0, 6.0, 8.0]))
    np.testing.assert_allclose(doubled.layers[0].weight, base.layers[0].weight / 2)
    for i in range(1, 4):
        np.testing.assert_allclose(doubled.layers[i].weight, base.layers[i].weight)
        np.testing.assert_allclose(doubled.layers[i].bias, base.layers[i].bias / 2)
    assert doubled.layers[2].skip_scale == pytest.approx(base.layers[2].skip_scale)


def test_conversion_needs_a_scale_per_layer(dense_model):
    with pytest.raises(ConversionError):
        convert(dense_model, CalibrationProfile(scales=[1.0, 1.0]))

# --- Simulation ---

def test_half_input_fires_every_other_step():
    result = simulate(_single_neuron(), np.full((1, 1, 1), 0.5), 10)
    assert result.counts[0].tolist() == [[[5]]]
    assert result.rates[0].tolist() == [[[0.5]]]
    assert result.decoded[0].tolist() == [[0.5]]


def test_zero_input_stays_silent(make_model, calibration_batch):
    model = make_model(randomize_readout=False, keep_prob=1.0)
    snn = convert(model, calibrate(model, calibration_batch))
    result = simulate(snn, np.zeros((3, 2, 5)), 32)
    assert all(not c.any() for c in result.counts)
    assert result.input_events == 0


def test_spike_counts_are_bounded(dense_model, calibration_batch):
    snn = convert(dense_model, calibrate(dense_model, calibration_batch))
    x_stack = np.repeat(calibration_batch[:, None, :] * 5, 2, axis=1)
    result = simulate(snn, x_stack, 16)
    for counts in result.counts:
        assert counts.min() >= 0 and counts.max() <= 16


def test_decoded_activations_track_the_network(masked_model, calibration_batch):
    model = masked_model
    assert model.config.keep_prob < 1.0
    snn = convert(model, calibrate(model, calibration_batch))
    errors = decoding_errors(model, snn, calibration_batch, [8, 16, 32, 64])
    assert errors[64] <= 0.10, errors
    assert errors[64] <= errors[8] + 0.01, errors
    assert errors[32] <= errors[8] + 0.01, errors


def test_slots_are_simulated_separately():
    # two slots at 1.0 and 0.0: a shared membrane would fire at the 0.5 average
    result = simulate(_single_neuron(), np.array([[[1.0], [0.0]]]), 8)
    assert result.counts[0].tolist() == [[[8], [0]]]
    assert result.decoded[0].tolist() == [[0.5]]


def test_spiking_prediction_matches_the_network(make_model, calibration_batch):
    model = make_model(seed=4, keep_prob=1.0, head="softmax")
    snn = convert(model, calibrate(model, calibration_batch))
    ann = model.predict(calibration_batch)
    spiking = snn_predict(model, snn, calibration_batch, 64)
    np.testing.assert_allclose(spiking.sum(axis=1), 1.0, atol=1e-12)
    assert metrics.evaluate_batch(ann, spiking)[:, 3].mean() < 0.05

# --- Energy ---

def test_dense_layer_mac_count():
    snn = SpikingNet(layers=[SpikingLayer(weight=np.ones((7, 3)), bias=np.zeros(3))], scales=[1.0])
    assert count_macs(snn, n_samples=1, n_slots=1) == 21


def test_model_mac_count(dense_model):
    snn = convert(dense_model, CalibrationProfile(scales=[1.0] * 4))
    cfg = dense_model.config
    per_slot = cfg.d_in * cfg.hidden + 3 * cfg.hidden * cfg.hidden
    head = cfg.hidden * cfg.n_labels * cfg.height * cfg.width
    assert count_macs(snn, n_samples=10, n_slots=cfg.time_steps) == 10 * (cfg.time_steps * per_slot + head)


def test_zero_input_saves_everything(make_model, calibration_batch):
    model = make_model(randomize_readout=False, keep_prob=1.0)
    snn = convert(model, calibrate(model, calibration_batch))
    report = energy_report(snn, np.zeros((4, 2, 5)), 16)
    assert report.snn_synops == 0
    assert report.estimated_saving == 1.0
    assert report.ann_macs > 0


def test_halving_spike_counts_halves_synops(dense_model):
    snn = convert(dense_model, CalibrationProfile(scales=[1.0] * 4))
    counts = [np.full((2, 8), 4), np.full((2, 8), 2), np.full((2, 8), 6), np.full((2, 8), 8)]
    full = count_synops(snn, 0, counts)
    half = count_synops(snn, 0, [c // 2 for c in counts])
    assert full == 2 * half
    assert snn.fanout(0) == 8 + 8


def test_synops_with_masked_slots_match_a_hand_count():
    snn = SpikingNet(
        layers=[SpikingLayer(weight=np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]]), bias=np.zeros(2))],
        scales=[1.0],
        head_width=3,
    )
    # slot 0 keeps feature 0, slot 1 keeps feature 2
    x_stack = np.array([[[0.5, 0.0, 0.0], [0.0, 0.0, 0.5]]])
    result = simulate(snn, x_stack, 4)
    assert result.input_events == 2 * 4
    assert result.counts[0].tolist() == [[[2, 0], [0, 2]]]
    # 8 input events x 2 targets, then 4 spikes x 3 head synapses
    assert count_synops(snn, result.input_events, result.counts) == 16 + 12
    report = energy_report(snn, x_stack, 4)
    assert report.snn_synops == 28
    assert report.ann_macs == 2 * 3 * 2 + 2 * 3


def test_masked_pseudo_slots_are_not_input_events(masked_model, calibration_batch):
    model = masked_model
    snn = convert(model, calibrate(model, calibration_batch))
    x_stack = stack_time_inference(calibration_batch[:10], model.config)
    assert np.count_nonzero(x_stack) < x_stack.size
    assert simulate(snn, x_stack, 16).input_events == np.count_nonzero(x_stack) * 16


def test_halved_input_current_halves_spikes():
    snn = _single_neuron()
    fast = simulate(snn, np.full((1, 1, 1), 0.5), 8)
    slow = simulate(snn, np.full((1, 1, 1), 0.25), 8)
    assert int(fast.counts[0].sum()) == 2 * int(slow.counts[0].sum())


def test_energy_report_is_reproducible(dense_model, calibration_batch):
    snn = convert(dense_model, calibrate(dense_model, calibration_batch))
    x_stack = np.repeat(calibration_batch[:20, None, :], 2, axis=1)
    a = energy_report(snn, x_stack, 32)
    b = energy_report(snn, x_stack, 32)
    assert a == b
    assert a.e_mac == 4.6 and a.e_ac == 0.9

# --- Persistence ---

def test_converted_checkpoint_round_trip(tmp_path, dense_model, calibration_batch):
    profile = calibrate(dense_model, calibration_batch)
    snn = convert(dense_model, profile)
    path = save_snn(tmp_path / "snn", dense_model, snn, profile, 48)
    model, back, t_sim = load_snn(path)
    assert t_sim == 48
    assert back.scales == snn.scales
    assert [layer.skip_from for layer in back.layers] == [None, None, 0, None]
    assert all(np.array_equal(a.weight, b.weight) for a, b in zip(back.layers, snn.layers))
    np.testing.assert_array_equal(model.predict(calibration_batch), dense_model.predict(calibration_batch))
