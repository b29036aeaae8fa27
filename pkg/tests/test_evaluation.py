import numpy as np
import pytest
import torch

from tempcon.evaluation import MetricsReport, evaluate, warp_error_pair, warp_error_video
from tempcon.flow import AnalyticFlowProvider
from tempcon.perception import FeatureExtractor, PerceptualMetric, perceptual_distance
from tempcon.synth import FlickerSpec, MotionSpec, apply_flicker, generate_sequence, ideal_output
from tempcon.video_data import FrameSequence


@pytest.fixture(scope="module")
def metric():
    return PerceptualMetric(FeatureExtractor("random", seed=1))


def _static(T=6, size=16, seed=0):
    spec = MotionSpec(num_frames=T, height=size, width=size, seed=seed)
    return spec, generate_sequence(spec)[0]


def _schedule_oracle(seq: FrameSequence, gains: np.ndarray) -> float:
    # static content: pair error is (g_t - g_{t+1})^2 * mean_x sum_c I(x, c)^2
    energy = float((seq[1].astype(np.float64) ** 2).sum(axis=-1).mean())
    g = gains[:, 0]
    return float(np.mean([(g[t] - g[t + 1]) ** 2 * energy for t in range(len(g) - 1)]))


@pytest.mark.formula
def test_pair_equal_frames():
    v = np.random.default_rng(0).random((8, 8, 3))
    assert warp_error_pair(v, v.copy(), np.zeros((8, 8, 2)), np.ones((8, 8))) == (0.0, False)


@pytest.mark.formula
def test_pair_all_occluded_is_flagged():
    v = np.random.default_rng(0).random((8, 8, 3))
    value, degenerate = warp_error_pair(v, 1 - v, np.zeros((8, 8, 2)), np.zeros((8, 8)))
    assert value == 0.0 and degenerate


@pytest.mark.formula
def test_pair_single_pixel():
    a = np.full((1, 1, 3), 0.5)
    value, _ = warp_error_pair(a, a + 0.1, np.zeros((1, 1, 2)), np.ones((1, 1)))
    assert value == pytest.approx(0.03, abs=1e-12)


def test_pair_is_a_mean_not_a_sum():
    small = np.zeros((4, 4, 3))
    large = np.zeros((8, 8, 3))
    a = warp_error_pair(small, small + 0.2, np.zeros((4, 4, 2)), np.ones((4, 4))).value
    b = warp_error_pair(large, large + 0.2, np.zeros((8, 8, 2)), np.ones((8, 8))).value
    assert a == pytest.approx(b, rel=1e-12)


def test_pair_rejects_non_binary_mask():
    v = np.zeros((4, 4, 3))
    with pytest.raises(ValueError):
        warp_error_pair(v, v, np.zeros((4, 4, 2)), np.full((4, 4), 0.5))


def test_pair_uses_flow_alignment():
    spec = MotionSpec(num_frames=2, height=16, width=16, translation=(1, 2), seed=3)
    seq, _, _ = generate_sequence(spec)
    p = AnalyticFlowProvider(spec)
    value, _ = warp_error_pair(seq[1], seq[2], p.get_flow(seq, 1, 2), p.occlusion(seq, 1, 2))
    assert value == 0.0


@pytest.mark.formula
def test_video_static_is_zero():
    spec, seq = _static()
    e, pairs = warp_error_video(seq, AnalyticFlowProvider(spec))
    assert e == 0.0 and len(pairs) == 5


@pytest.mark.formula
def test_video_flickered_static_matches_schedule_oracle():
    spec, seq = _static(T=8)
    p, sched = apply_flicker(seq, FlickerSpec("sinusoid", amplitude=0.2, period=4))
    e, _ = warp_error_video(p, AnalyticFlowProvider(spec))
    assert e == pytest.approx(_schedule_oracle(seq, sched.gains), abs=1e-6)


@pytest.mark.formula
def test_video_length_two_equals_its_pair():
    spec = MotionSpec(num_frames=2, height=16, width=16, translation=(1, 0), seed=4)
    seq, _, _ = generate_sequence(spec)
    p, _ = apply_flicker(seq, FlickerSpec(amplitude=0.3, period=3))
    prov = AnalyticFlowProvider(spec)
    e, pairs = warp_error_video(p, prov)
    assert e == pairs[0].value == warp_error_pair(p[1], p[2], prov.get_flow(p, 1, 2), prov.occlusion(p, 1, 2)).value


def test_video_reversal_on_symmetric_static_content():
    spec, seq = _static(T=5)
    p, _ = apply_flicker(seq, FlickerSpec(amplitude=0.2, period=3))
    prov = AnalyticFlowProvider(spec)
    forward, _ = warp_error_video(p, prov)
    backward, _ = warp_error_video(FrameSequence(p.frames[::-1].copy()), prov)
    assert forward == pytest.approx(backward, rel=1e-12)


@pytest.mark.formula
def test_evaluate_identical_static(metric):
    spec, seq = _static()
    r = evaluate(seq, seq, AnalyticFlowProvider(spec), metric)
    assert r.e_warp == 0.0 and r.d_perceptual == 0.0
    assert len(r.pair_errors) == len(seq) - 1


@pytest.mark.formula
def test_evaluate_self_comparison_of_flickered(metric):
    spec, seq = _static()
    p, _ = apply_flicker(seq, FlickerSpec(amplitude=0.2, period=4))
    prov = AnalyticFlowProvider(spec)
    r = evaluate(p, p, prov, metric)
    assert r.d_perceptual == 0.0
    assert r.e_warp == warp_error_video(p, prov)[0]


@pytest.mark.formula
def test_evaluate_ideal_output(metric):
    spec = MotionSpec(num_frames=8, height=32, width=32, translation=(2, -1), seed=5)
    seq, _, _ = generate_sequence(spec)
    p, sched = apply_flicker(seq, FlickerSpec(amplitude=0.2, period=4))
    ideal = ideal_output(seq, sched)
    r = evaluate(ideal, p, AnalyticFlowProvider(spec), metric, flow_source=seq)
    assert r.e_warp <= 1e-6
    oracle = perceptual_distance(p.tensor(torch.float32), ideal.tensor(torch.float32), metric)
    assert r.d_perceptual == pytest.approx(oracle, abs=1e-6)
    assert r.d_perceptual > 0


def test_evaluate_is_pure(metric):
    spec, seq = _static()
    p, _ = apply_flicker(seq, FlickerSpec(amplitude=0.2, period=4))
    prov = AnalyticFlowProvider(spec)
    a = evaluate(p, seq, prov, metric).to_dict()
    b = evaluate(p, seq, prov, metric).to_dict()
    assert a == b


def test_report_stamps_metadata(metric):
    spec, seq = _static()
    r = evaluate(seq, seq, AnalyticFlowProvider(spec), metric, sequence_id="clip")
    assert r.metadata["flow_backend"] == "analytic"
    assert "surrogate" in r.metadata["metric"]
    assert MetricsReport.from_dict(r.to_dict()) == r


def test_report_validation():
    with pytest.raises(ValueError):
        MetricsReport([0.1], [False], -1.0, 0.0)
