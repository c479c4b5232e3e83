import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eegattn import representation as rp
from eegattn.representation import ElectrodeLayout, ReprConfig, Trial
from eegattn.synth import SynthConfig, fibonacci_cap, pixel_quadrant, synth_dataset


def blob(r=32, cy=15.5, cx=15.5, sigma=3.0):
    yy, xx = np.mgrid[0:r, 0:r]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))


# ------------------------------------------------------------------ layout

def test_layout_rejects_off_sphere_and_duplicates():
    with pytest.raises(ValueError, match="unit sphere"):
        ElectrodeLayout(["a"], [[0, 0, 2.0]])
    with pytest.raises(ValueError, match="unique"):
        ElectrodeLayout(["a", "a"], [[0, 0, 1.0], [1, 0, 0]])


def test_vertex_projects_to_centre():
    lay = ElectrodeLayout(["Cz", "T"], [[0, 0, 1.0], [1, 0, 0]])
    np.testing.assert_allclose(rp.project_layout(lay, 32)[0], [15.5, 15.5])


def test_mirror_electrodes_give_mirrored_pixels():
    s = np.sqrt(0.5)
    lay = ElectrodeLayout(["a", "b"], [[0.3, s, np.sqrt(1 - 0.09 - 0.5)], [0.3, -s, np.sqrt(1 - 0.09 - 0.5)]])
    (r1, c1), (r2, c2) = rp.project_layout(lay, 32)
    assert c1 == pytest.approx(c2)
    assert r1 - 15.5 == pytest.approx(15.5 - r2)


def test_procedural_layout_fits_with_margin():
    px = rp.project_layout(fibonacci_cap(64), 32)
    assert px.min() >= 1 - 1e-9 and px.max() <= 30 + 1e-9


def test_antipode_is_rejected():
    lay = ElectrodeLayout(["a", "b"], [[0, 0, 1.0], [0, 0, -1.0]])
    with pytest.raises(ValueError, match="antipode"):
        rp.project_layout(lay, 32)


def test_layout_file_round_trip(tmp_path):
    lay = fibonacci_cap(10)
    rp.write_layout(lay, tmp_path / "l.csv")
    back = rp.read_layout(tmp_path / "l.csv")
    assert back.names == lay.names
    np.testing.assert_array_equal(back.xyz, lay.xyz)


# ------------------------------------------------------------------ segmentation

def test_constant_signal_gives_half_everywhere():
    act = rp.segment_trial(Trial(np.full((3, 130), 2.5), 0), 13)
    np.testing.assert_array_equal(act, 0.5)


def test_ramp_second_window_larger():
    act = rp.segment_trial(Trial(np.arange(101.0)[None], 0), 2)
    assert act[1, 0] > act[0, 0]


def test_burst_window_is_argmax():
    n, f = 13 * 128, 13
    x = np.zeros((2, n))
    t = np.arange(128) / 128
    x[0, 6 * 128:7 * 128] = np.sin(2 * np.pi * 10 * t)
    x[1] = 0.01 * np.sin(2 * np.pi * 3 * np.arange(n) / 128)
    act = rp.segment_trial(Trial(x, 0), f)
    assert int(np.argmax(act[:, 0])) == 6  # window 7 of 13, zero-based 6


def test_too_short_trial_fails():
    with pytest.raises(ValueError):
        rp.segment_trial(Trial(np.ones((2, 5)), 0), 13)


# ------------------------------------------------------------------ interpolation

def test_constant_activation_fills_image():
    px = rp.project_layout(fibonacci_cap(20), 32)
    np.testing.assert_allclose(rp.interpolate_frame(np.full(20, 0.3), px, 32), 0.3)


def test_two_equidistant_electrodes_average():
    px = np.array([[10.0, 10.0], [10.0, 20.0], [0.0, 31.0], [31.0, 0.0]])
    act = np.array([0.2, 0.8, 0.0, 1.0])
    img = rp.interpolate_frame(act, px, 32, clamp=False)
    d = np.linalg.norm(px - [10.0, 15.0], axis=1)
    w = 1 / d ** 2
    assert img[10, 15] == pytest.approx(np.sum(w * act) / w.sum())
    assert img[10, 15] == pytest.approx(0.5, abs=0.1)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_idw_exact_hit_and_convexity(seed):
    rng = np.random.default_rng(seed)
    e = int(rng.integers(3, 40))
    px = rng.uniform(0, 15, size=(e, 2))
    px[0] = np.round(px[0])          # one electrode on a pixel centre
    act = rng.uniform(-1, 2, size=e)
    img = rp.interpolate_frame(act, px, 16, clamp=False)
    r, c = px[0].astype(int)
    assert img[r, c] == act[0]
    assert img.min() >= act.min() - 1e-12 and img.max() <= act.max() + 1e-12


# ------------------------------------------------------------------ optical flow

def test_identical_frames_zero_flow():
    a = blob()
    np.testing.assert_array_equal(rp.optical_flow(a, a), 0.0)


def test_translated_blob_matches_block_matching():
    a, b = blob(cx=15.5), blob(cx=16.5)
    flow = rp.optical_flow(a, b)
    ref = rp.block_match(a, b)
    inner = blob() > 0.3
    assert ref[inner, 0].mean() == pytest.approx(1.0)
    assert flow[inner, 0].mean() == pytest.approx(ref[inner, 0].mean(), abs=0.3)
    assert flow[inner, 1].mean() == pytest.approx(ref[inner, 1].mean(), abs=0.3)


def test_vertical_translation_sign():
    a, b = blob(cy=15.5), blob(cy=16.5)
    flow = rp.optical_flow(a, b)
    inner = blob() > 0.3
    assert flow[inner, 1].mean() == pytest.approx(1.0, abs=0.3)


def test_reverse_flow_is_negated():
    a, b = blob(cx=15.5), blob(cx=16.5)
    inner = blob() > 0.3
    fwd = rp.optical_flow(a, b)[inner].mean(axis=0)
    bwd = rp.optical_flow(b, a)[inner].mean(axis=0)
    np.testing.assert_allclose(fwd, -bwd, atol=0.3)


def test_flow_rejects_non_finite_and_mismatched():
    a = blob()
    with pytest.raises(ValueError):
        rp.optical_flow(a, a * np.nan)
    with pytest.raises(ValueError):
        rp.optical_flow(a, a[:-1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_flow_finite_for_finite_input(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 12, 12)) * rng.uniform(0, 100)
    assert np.isfinite(rp.optical_flow(a, b, iterations=20)).all()


# ------------------------------------------------------------------ pipeline

def test_sequence_shape_default_config():
    lay = fibonacci_cap(64)
    x = np.random.default_rng(0).normal(size=(64, 1664))
    seq = rp.build_sequence(Trial(x, 0), lay)
    assert seq.shape == (12, 32, 32, 2)


def test_constant_trial_gives_zero_flow():
    seq = rp.build_sequence(Trial(np.ones((64, 1664)), 0), fibonacci_cap(64))
    np.testing.assert_array_equal(seq, 0.0)


def test_pipeline_deterministic():
    lay = fibonacci_cap(64)
    x = np.random.default_rng(1).normal(size=(64, 1664)).astype(np.float32)
    a = rp.build_sequence(Trial(x, 0), lay, ReprConfig(iterations=30))
    b = rp.build_sequence(Trial(x.copy(), 0), lay, ReprConfig(iterations=30))
    assert a.tobytes() == b.tobytes()


@pytest.fixture(scope="module")
def small_flowset():
    cfg = SynthConfig(trials_per_class=10)
    layout, trials, regions = synth_dataset(cfg)
    return rp.build_flowset(trials, layout), regions


def test_planted_source_flow_concentrated(small_flowset):
    fs, regions = small_flowset
    rr, cc = np.mgrid[0:32, 0:32]
    pq = pixel_quadrant(rr, cc, 32)
    mag = np.linalg.norm(fs.flows, axis=-1)
    for k, q in regions.items():
        m = mag[fs.labels == k].sum(axis=(0, 1))
        assert m[pq == q].sum() / m.sum() > 0.6


# ------------------------------------------------------------------ files

def test_trial_file_round_trip(tmp_path):
    _, trials, _ = synth_dataset(SynthConfig(trials_per_class=10, channels=8, samples=130))
    rp.write_trials(trials, tmp_path / "t.nftr", 4)
    back, k = rp.read_trials(tmp_path / "t.nftr")
    assert k == 4 and len(back) == len(trials)
    for a, b in zip(trials, back):
        assert a.label == b.label
        assert a.samples.tobytes() == b.samples.tobytes()


def test_trial_file_header_layout(tmp_path):
    rp.write_trials([Trial(np.zeros((2, 3)), 1)], tmp_path / "t.nftr", 3)
    raw = (tmp_path / "t.nftr").read_bytes()
    assert raw[:4] == b"NFTR"
    assert np.frombuffer(raw[4:28], "<u4").tolist() == [1, 1, 2, 3, 3, 128]
    assert len(raw) == 28 + 4 + 4 * 6


def test_flow_file_round_trip_and_errors(tmp_path, small_flowset):
    fs, _ = small_flowset
    path = tmp_path / "f.nffl"
    rp.write_flows(fs, path)
    back = rp.read_flows(path)
    assert back.flows.tobytes() == fs.flows.tobytes()
    np.testing.assert_array_equal(back.labels, fs.labels)
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    (tmp_path / "v.nffl").write_bytes(bytes(raw))
    with pytest.raises(rp.FormatError, match="version"):
        rp.read_flows(tmp_path / "v.nffl")
    (tmp_path / "t.nffl").write_bytes(path.read_bytes()[:-5])
    with pytest.raises(rp.FormatError, match="t.nffl"):
        rp.read_flows(tmp_path / "t.nffl")
