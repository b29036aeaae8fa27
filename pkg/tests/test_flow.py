import numpy as np
import pytest

from tempcon.flow import (
    AnalyticFlowProvider,
    EstimatedFlowProvider,
    EstimatorParams,
    FileFlowProvider,
    FlowUnavailableError,
    estimate_flow,
    occlusion_mask,
    write_flow_dir,
)
from tempcon.synth import MotionSpec, generate_sequence, make_texture
from tempcon.video_data import DimensionMismatchError, FlowField


@pytest.fixture(scope="module")
def moving():
    spec = MotionSpec(num_frames=4, height=16, width=16, translation=(2, 0), seed=2)
    seq, flows, occ = generate_sequence(spec)
    return spec, seq, flows


@pytest.mark.formula
def test_analytic_one_step(moving):
    spec, seq, _ = moving
    f = AnalyticFlowProvider(spec).get_backward_flow(seq, 3, 2)
    assert np.all(f.u == -2) and np.all(f.v == 0)


@pytest.mark.formula
def test_analytic_two_steps(moving):
    spec, seq, _ = moving
    f = AnalyticFlowProvider(spec).get_backward_flow(seq, 3, 1)
    assert np.all(f.u == -4) and np.all(f.v == 0)


@pytest.mark.formula
def test_analytic_static_is_zero():
    spec = MotionSpec(num_frames=5, height=16, width=16)
    seq, _, _ = generate_sequence(spec)
    p = AnalyticFlowProvider(spec)
    for t, ref in ((2, 1), (5, 1), (5, 3)):
        assert np.count_nonzero(p.get_backward_flow(seq, t, ref).uv) == 0


def test_backward_flow_index_contract(moving):
    spec, seq, _ = moving
    p = AnalyticFlowProvider(spec)
    for t, ref in ((2, 2), (2, 3), (5, 1), (1, 0)):
        with pytest.raises(IndexError):
            p.get_backward_flow(seq, t, ref)
    with pytest.raises(FlowUnavailableError):
        p.get_flow(None, 9, 1)


def test_file_backend_returns_written_fields(tmp_path, moving):
    spec, seq, flows = moving
    write_flow_dir(flows, tmp_path)
    assert (tmp_path / "flow_t3_ref1.flo").is_file()
    p = FileFlowProvider(tmp_path)
    for key, f in flows.items():
        assert p.get_flow(seq, *key).uv.tobytes() == f.uv.tobytes()
    with pytest.raises(FlowUnavailableError, match="missing flow file"):
        p.get_backward_flow(seq, 4, 2)


# --- estimator --------------------------------------------------------------

@pytest.mark.formula
def test_estimate_identical_frames():
    a = make_texture("noise", 48, 48, seed=1)
    assert np.abs(estimate_flow(a, a).uv).mean() < 0.1


@pytest.mark.formula
def test_estimate_known_shift():
    spec = MotionSpec(num_frames=2, height=48, width=64, translation=(3, 0), seed=4)
    seq, _, _ = generate_sequence(spec)
    f = estimate_flow(seq[1], seq[2], EstimatorParams())
    inner = f.uv[6:-6, 6:-6]
    assert abs(np.median(inner[..., 0]) + 3) <= 0.5
    assert abs(np.median(inner[..., 1])) <= 0.5


@pytest.mark.formula
def test_estimate_flat_frames_is_finite():
    a = np.full((24, 24, 3), 0.4)
    assert np.all(np.isfinite(estimate_flow(a, a.copy()).uv))


def test_estimate_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        estimate_flow(np.zeros((16, 16, 3)), np.zeros((16, 17, 3)))


def test_estimator_params_validation():
    with pytest.raises(ValueError):
        EstimatorParams(levels=0)
    with pytest.raises(ValueError):
        EstimatorParams(iterations=0)


def test_estimated_provider_tags_direction(moving):
    _, seq, _ = moving
    p = EstimatedFlowProvider(EstimatorParams(levels=2, iterations=20))
    assert p.get_flow(seq, 2, 1).direction == "backward"
    assert p.get_flow(seq, 1, 2).direction == "forward"


# --- occlusion ------------------------------------------------------------------

def _const(u, v, h=8, w=8):
    return FlowField.constant(h, w, u, v)


@pytest.mark.formula
def test_occlusion_zero_flows_all_visible():
    m = occlusion_mask(_const(0, 0), _const(0, 0))
    assert m.kind == "occlusion" and np.all(m.values == 1)


@pytest.mark.formula
def test_occlusion_consistent_translation():
    assert np.all(occlusion_mask(_const(2, 0), _const(-2, 0)).values == 1)


@pytest.mark.formula
def test_occlusion_inconsistent_flow():
    # |0 + (-5,0)|^2 = 25 > 0.01 * 25 + 0.5
    assert np.all(occlusion_mask(_const(0, 0), _const(-5, 0)).values == 0)


def test_occlusion_threshold_boundary():
    # |w|^2 = 0.5 and threshold 0.01 * 0.5 + 0.5 = 0.505: still consistent
    assert np.all(occlusion_mask(_const(0, 0), _const(np.sqrt(0.5), 0)).values == 1)
    # |w|^2 = 0.52 > 0.5052
    assert np.all(occlusion_mask(_const(0, 0), _const(np.sqrt(0.52), 0)).values == 0)


def test_occlusion_mask_is_binary_for_random_flows(rng):
    fw = FlowField(rng.normal(0, 2, (12, 12, 2)).astype(np.float32))
    bw = FlowField(rng.normal(0, 2, (12, 12, 2)).astype(np.float32))
    vals = occlusion_mask(fw, bw).values
    assert set(np.unique(vals)) <= {0.0, 1.0}


def test_occlusion_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        occlusion_mask(_const(0, 0, 8, 8), _const(0, 0, 8, 9))


def test_provider_occlusion_marks_out_of_frame(moving):
    spec, seq, _ = moving
    m = AnalyticFlowProvider(spec).occlusion(seq, 1, 2)
    # frame 1 pixels move +2 into frame 2: the last two columns leave the frame
    assert np.all(m.values[:, -2:] == 0) and np.all(m.values[:, :-2] == 1)
