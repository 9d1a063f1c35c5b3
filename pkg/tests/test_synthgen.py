import hashlib

import numpy as np
import pytest

from arrayssl.dsp import frame_to_stft
from arrayssl.errors import FormatError, LabelError, SceneError
from arrayssl.synthgen import (
    MODULATIONS,
    LabeledCapture,
    SceneSpec,
    SignalSpec,
    labels_to_target,
    load_capture,
    make_capture_set,
    occupied_width,
    random_scene,
    read_rfcap,
    read_rflab,
    rfcap_size,
    rrc_pulse,
    synth_frame,
    target_to_labels,
    write_rfcap,
    write_rflab,
)

F = 512
L = 32 * F


def mean_psd(frame, n_bins=F):
    s = frame_to_stft(frame, frame.shape[1] // n_bins, n_bins)
    return (s[0::2] ** 2 + s[1::2] ** 2).mean(axis=(0, 1))


def occupied_99(psd, floor):
    # no clipping: floor-subtracted noise averages out instead of piling up
    q = psd - floor
    c = np.cumsum(q) / q.sum()
    return int(np.argmax(c >= 0.995) - np.argmax(c >= 0.005) + 1)


def test_noise_only_variance():
    frame, labels = synth_frame(SceneSpec(4, L, F, noise_power=2.0), seed=0)
    assert labels == []
    z = frame[..., 0].astype(np.float64) + 1j * frame[..., 1]
    var = np.mean(np.abs(z) ** 2, axis=1)
    np.testing.assert_allclose(var, 2.0, rtol=0.05)


@pytest.mark.parametrize("mod", MODULATIONS)
def test_band_energy_concentration(mod):
    lo, hi = 200, 264
    frame, labels = synth_frame(SceneSpec(4, L, F, 1.0, [SignalSpec.from_edges(lo, hi, 30.0, mod)]), seed=1)
    assert labels == [(lo, hi)]
    psd = mean_psd(frame)
    floor = np.median(np.r_[psd[: lo - 20], psd[hi + 20:]])
    excess = np.clip(psd - floor, 0, None)
    assert excess[lo - 2: hi + 2].sum() / excess.sum() >= 0.95


@pytest.mark.parametrize("mod", MODULATIONS)
@pytest.mark.parametrize("edges", [(40, 80), (100, 164), (200, 460)])
def test_occupied_bandwidth_matches_label(mod, edges):
    lo, hi = edges
    frame, _ = synth_frame(SceneSpec(2, L, F, 1.0, [SignalSpec.from_edges(lo, hi, 20.0, mod)]), seed=2)
    psd = mean_psd(frame)
    floor = np.median(np.r_[psd[: max(lo - 20, 1)], psd[hi + 20:]])
    assert abs(occupied_99(psd, floor) - (hi - lo)) <= 0.1 * (hi - lo)


def test_rrc_occupied_width_closed_forms():
    # the roll-off is flat to third order at its edge, so this end is ill-conditioned
    assert occupied_width(0.35, 1.0) == pytest.approx(1.35, abs=1e-5)
    assert occupied_width(0.35, 0.65) == pytest.approx(0.65, abs=1e-9)  # flat part only
    # numeric integral of the raised-cosine spectrum over the 99% band
    f = np.linspace(-0.675, 0.675, 200_001)
    a = 0.325
    spec = np.where(np.abs(f) <= a, 1.0, 0.5 * (1 + np.cos(np.pi / 0.35 * (np.abs(f) - a))))
    half = occupied_width() / 2
    inside = np.trapezoid(spec * (np.abs(f) <= half), f)
    assert inside / np.trapezoid(spec, f) == pytest.approx(0.99, abs=1e-4)


def test_rrc_pulse_zero_crossings():
    # RRC (unlike RC) does not vanish at integer symbols, but its autocorrelation does
    t = np.arange(-40, 40, 1 / 16)
    p = rrc_pulse(t)
    for k in (1, 2, 3):
        lag = k * 16
        assert abs(np.sum(p[lag:] * p[:-lag])) / np.sum(p * p) < 1e-2
    assert np.all(np.isfinite(p))


def test_cross_antenna_phase():
    spec = SceneSpec(2, L, F, 1.0, [SignalSpec.from_edges(100, 140, 30.0)], gains=np.array([[1.0, 1j]]))
    frame, _ = synth_frame(spec, seed=3)
    s = frame_to_stft(frame, L // F, F)
    x0, x1 = s[0] + 1j * s[1], s[2] + 1j * s[3]
    cross = np.sum(x1 * np.conj(x0), axis=0)
    k = int(np.argmax(np.abs(cross)))
    assert 100 <= k < 140
    assert abs(np.angle(cross[k]) - np.pi / 2) < 0.1


def test_scene_validation():
    with pytest.raises(SceneError):
        synth_frame(SceneSpec(4, L, F, 1.0, [SignalSpec(100, 20), SignalSpec(100, 40)]))
    with pytest.raises(SceneError):
        synth_frame(SceneSpec(4, L, F, 1.0, [SignalSpec(5, 40)]))
    with pytest.raises(SceneError):
        synth_frame(SceneSpec(4, 1000, F))


def test_random_scene_respects_invariants():
    rng = np.random.default_rng(4)
    for _ in range(200):
        scene = random_scene(rng, 4, L, F)
        scene.validate()
        assert 1 <= scene.n_signals <= 6
        for s in scene.signals:
            assert 8 <= s.bandwidth_bins <= F // 2
            assert 5 <= s.snr_db <= 25


def test_target_examples():
    t = labels_to_target([(0, 2048)], 2048)
    assert t[1024] == 1.0 and np.count_nonzero(t) == 1
    t = labels_to_target([(1000, 1100)], 2048)
    assert t[1050] == pytest.approx(100 / 2048) == pytest.approx(0.048828, abs=1e-6)
    assert not np.any(labels_to_target([], 2048))


def test_target_center_floor_and_collision():
    assert labels_to_target([(3, 8)], 16)[5] == pytest.approx(5 / 16)
    with pytest.raises(LabelError):
        labels_to_target([(0, 10), (2, 8)], 16)
    with pytest.raises(LabelError):
        labels_to_target([(4, 4)], 16)


def test_target_round_trip():
    cap = make_capture_set(20, 2, 4 * 256, 256, seed=5)
    for lab, t in zip(cap.labels, cap.targets()):
        got = sorted(target_to_labels(t))
        want = sorted(((lo + hi) // 2, float(hi - lo)) for lo, hi in lab)
        assert [c for c, _ in got] == [c for c, _ in want]
        np.testing.assert_allclose([b for _, b in got], [b for _, b in want], rtol=1e-6)


def test_capture_set_determinism(tmp_path):
    a = make_capture_set(4, 4, 2048, 256, seed=6).save(tmp_path / "a")
    b = make_capture_set(4, 4, 2048, 256, seed=6).save(tmp_path / "b")
    for pa, pb in zip(a, b):
        assert hashlib.sha256(pa.read_bytes()).digest() == hashlib.sha256(pb.read_bytes()).digest()
    c = make_capture_set(4, 4, 2048, 256, seed=7)
    assert not np.array_equal(c.frames, read_rfcap(a[0]))


def test_downstream_sized_set():
    cap = make_capture_set(77, 4, 1024, 128, seed=0)
    assert cap.frames.shape == (77, 4, 1024, 2)
    assert len(cap.labels) == 77


def test_rfcap_size_formula(tmp_path):
    frames = make_capture_set(10, 4, 16384, 512, seed=8).frames
    path = tmp_path / "x.rfcap"
    write_rfcap(path, frames)
    assert path.stat().st_size == rfcap_size(10, 4, 16384) == 16 + 10 * 4 * 16384 * 2 * 4
    raw = path.read_bytes()
    assert raw[:4] == b"RFC1"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [10, 4, 16384]
    assert np.array_equal(read_rfcap(path), frames)


def test_rfcap_errors(tmp_path):
    frames = np.zeros((2, 1, 8, 2), np.float32)
    path = tmp_path / "x.rfcap"
    write_rfcap(path, frames)
    raw = path.read_bytes()
    (tmp_path / "bad.rfcap").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.rfcap").write_bytes(raw[:-4])
    (tmp_path / "tiny.rfcap").write_bytes(raw[:6])
    for name in ("bad", "short", "tiny"):
        with pytest.raises(FormatError):
            read_rfcap(tmp_path / f"{name}.rfcap")


def test_rflab_round_trip_and_errors(tmp_path):
    labels = [[(1, 5), (10, 30)], [], [(0, 64)]]
    path = tmp_path / "x.rflab"
    write_rflab(path, labels)
    assert path.read_text().splitlines() == ["0: 1,5; 10,30", "1:", "2: 0,64"]
    assert read_rflab(path) == labels
    path.write_text("0: 1,5\n2: 3,4\n")
    with pytest.raises(FormatError, match=":2:"):
        read_rflab(path)
    path.write_text("0: 1;5\n")
    with pytest.raises(FormatError, match=":1:"):
        read_rflab(path)


def test_load_capture_checks_counts(tmp_path):
    cap = LabeledCapture(np.zeros((2, 1, 8, 2), np.float32), [[(0, 2)], []], 4)
    c, lab = cap.save(tmp_path / "s")
    got = load_capture(c, lab, 4)
    assert got.labels == cap.labels
    write_rflab(lab, [[]])
    with pytest.raises(FormatError):
        load_capture(c, lab, 4)
