"""Synthetic labeled multichannel wideband captures.

Each frame is a sum of band-limited emitters seen by ``A`` antennas through
one complex gain per (signal, antenna) pair, plus independent complex white
noise on every antenna. Band edges are known by construction and are
expressed in STFT analysis bins of an ``F``-bin transform.

Frequency convention: bin ``k`` of ``F`` is normalized frequency ``k / F``
cycles/sample (natural DFT order, no fftshift).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, LabelError, SceneError

MODULATIONS = ("filtered-noise", "qpsk-rrc")
RRC_ROLLOFF = 0.35
RRC_SPAN = 8  # symbols on each side of the pulse centre

RFCAP_MAGIC = b"RFC1"
RFCAP_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class SignalSpec:
    center_bin: int
    bandwidth_bins: int
    snr_db: float = 20.0
    modulation: str = "filtered-noise"

    @property
    def lo(self) -> int:
        return self.center_bin - self.bandwidth_bins // 2

    @property
    def hi(self) -> int:
        return self.lo + self.bandwidth_bins

    @classmethod
    def from_edges(cls, lo: int, hi: int, snr_db: float = 20.0, modulation: str = "filtered-noise"):
        return cls((lo + hi) // 2, hi - lo, snr_db, modulation)


@dataclass
class SceneSpec:
    """One frame's worth of emitters.

    ``gains`` is an optional ``[n_signals, n_antennas]`` complex array; when
    omitted each antenna gets a uniform random phase and a +/-10% amplitude
    jitter per signal.
    """

    n_antennas: int = 4
    n_samples: int = 65536
    n_bins: int = 2048
    noise_power: float = 1.0
    signals: list[SignalSpec] = field(default_factory=list)
    gains: np.ndarray | None = None

    @property
    def n_signals(self) -> int:
        return len(self.signals)

    def validate(self) -> None:
        if self.n_antennas < 1 or self.n_bins < 2 or self.n_samples < self.n_bins:
            raise SceneError(f"bad geometry A={self.n_antennas} L={self.n_samples} F={self.n_bins}")
        if self.n_samples % self.n_bins:
            raise SceneError(f"L={self.n_samples} is not divisible by F={self.n_bins}")
        if self.noise_power < 0:
            raise SceneError(f"noise power must be >= 0, got {self.noise_power}")
        centers = set()
        for s in self.signals:
            if s.modulation not in MODULATIONS:
                raise SceneError(f"unknown modulation {s.modulation!r}")
            if s.bandwidth_bins < 1 or s.lo < 0 or s.hi > self.n_bins:
                raise SceneError(f"band [{s.lo}, {s.hi}) of {s} is outside [0, {self.n_bins})")
            if s.center_bin in centers:
                raise SceneError(f"two signals share center bin {s.center_bin}")
            centers.add(s.center_bin)
        if self.gains is not None and np.shape(self.gains) != (self.n_signals, self.n_antennas):
            raise SceneError(f"gains shape {np.shape(self.gains)} != ({self.n_signals}, {self.n_antennas})")

    def labels(self) -> list[tuple[int, int]]:
        return [(s.lo, s.hi) for s in self.signals]


def rrc_pulse(tau, beta: float = RRC_ROLLOFF) -> np.ndarray:
    """Root-raised-cosine impulse response at ``tau`` symbol periods."""
    tau = np.asarray(tau, dtype=np.float64)
    out = np.empty_like(tau)
    at_zero = np.isclose(tau, 0.0)
    at_sing = np.isclose(np.abs(tau), 1.0 / (4.0 * beta))
    rest = ~(at_zero | at_sing)
    t = tau[rest]
    out[rest] = (np.sin(np.pi * t * (1 - beta)) + 4 * beta * t * np.cos(np.pi * t * (1 + beta))) / (
        np.pi * t * (1 - (4 * beta * t) ** 2)
    )
    out[at_zero] = 1 - beta + 4 * beta / np.pi
    out[at_sing] = (beta / np.sqrt(2)) * (
        (1 + 2 / np.pi) * np.sin(np.pi / (4 * beta)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta))
    )
    return out


def _filtered_noise(rng, length: int, n_bins: int, lo: int, hi: int) -> np.ndarray:
    # flat complex Gaussian spectrum on exactly the bins [lo, hi) of the F-bin grid
    per_bin = length // n_bins
    spec = np.zeros(length, dtype=np.complex128)
    k = np.arange(lo * per_bin, hi * per_bin)
    spec[k] = rng.standard_normal(k.size) + 1j * rng.standard_normal(k.size)
    return np.fft.ifft(spec)


def occupied_width(beta: float = RRC_ROLLOFF, fraction: float = 0.99) -> float:
    """Width, in symbol rates, of the centred band holding ``fraction`` of an RRC signal's power.

    The power spectrum is the raised-cosine shape: flat to ``(1-beta)/2``,
    cosine roll-off to ``(1+beta)/2``, unit total area.
    """
    a = (1 - beta) / 2

    def inside(half):  # power in [-half, half]
        if half <= a:
            return 2 * half
        u = min(half, (1 + beta) / 2) - a
        return 2 * (a + 0.5 * u + beta / (2 * np.pi) * np.sin(np.pi * u / beta))

    lo, hi = 0.0, (1 + beta) / 2
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if inside(mid) < fraction else (lo, mid)
    return 2 * hi


def _qpsk_rrc(rng, length: int, n_bins: int, lo: int, hi: int) -> np.ndarray:
    # symbol rate set so the 99% occupied bandwidth equals the labeled width
    symbol_rate = (hi - lo) / n_bins / occupied_width()  # symbols per sample
    n_sym = int(np.ceil(length * symbol_rate)) + 2 * RRC_SPAN + 1
    symbols = (rng.choice([-1.0, 1.0], n_sym) + 1j * rng.choice([-1.0, 1.0], n_sym)) / np.sqrt(2)
    pos = np.arange(length) * symbol_rate + RRC_SPAN  # sample times in symbol units
    base = np.floor(pos).astype(np.int64)
    out = np.zeros(length, dtype=np.complex128)
    for j in range(-RRC_SPAN, RRC_SPAN + 1):
        k = base + j
        out += symbols[k] * rrc_pulse(pos - k)
    fc = 0.5 * (lo + hi) / n_bins
    return out * np.exp(2j * np.pi * fc * np.arange(length))


def _make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def synth_frame(spec: SceneSpec, seed=None) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Render one ``[A, L, 2]`` float32 frame and its ``(lo, hi)`` band edges.

    Signal power is set from ``snr_db`` relative to the noise power falling
    inside the signal's own band, i.e. ``noise_power * bandwidth / F``.
    """
    spec.validate()
    rng = _make_rng(seed)
    a, length, n_bins = spec.n_antennas, spec.n_samples, spec.n_bins
    if spec.gains is None:
        phases = rng.uniform(0.0, 2 * np.pi, size=(spec.n_signals, a))
        amps = 1.0 + rng.uniform(-0.1, 0.1, size=(spec.n_signals, a))
        gains = amps * np.exp(1j * phases)
    else:
        gains = np.asarray(spec.gains, dtype=np.complex128)

    z = np.zeros((a, length), dtype=np.complex128)
    for i, s in enumerate(spec.signals):
        maker = _filtered_noise if s.modulation == "filtered-noise" else _qpsk_rrc
        wave = maker(rng, length, n_bins, s.lo, s.hi)
        power = np.mean(np.abs(wave) ** 2)
        target = 10 ** (s.snr_db / 10) * spec.noise_power * s.bandwidth_bins / n_bins
        if power > 0:
            wave *= np.sqrt(target / power)
        z += gains[i][:, None] * wave[None, :]
    sigma = np.sqrt(spec.noise_power / 2)
    z += sigma * (rng.standard_normal((a, length)) + 1j * rng.standard_normal((a, length)))
    frame = np.stack([z.real, z.imag], axis=-1).astype(np.float32)
    return frame, spec.labels()


def random_scene(
    rng: np.random.Generator,
    n_antennas: int = 4,
    n_samples: int = 65536,
    n_bins: int = 2048,
    n_signals: tuple[int, int] = (1, 6),
    bandwidth: tuple[int, int] | None = None,
    snr_db: tuple[float, float] = (5.0, 25.0),
    modulations: Sequence[str] = MODULATIONS,
    noise_power: float = 1.0,
) -> SceneSpec:
    """Draw a scene with distinct center bins and bands inside ``[0, F)``."""
    bw_lo, bw_hi = bandwidth if bandwidth is not None else (8, n_bins // 2)
    bw_lo, bw_hi = max(1, min(bw_lo, n_bins)), max(1, min(bw_hi, n_bins))
    count = int(rng.integers(n_signals[0], n_signals[1] + 1))
    signals, centers = [], set()
    for _ in range(count):
        for _attempt in range(100):
            bw = int(rng.integers(bw_lo, bw_hi + 1))
            lo = int(rng.integers(0, n_bins - bw + 1))
            sig = SignalSpec.from_edges(lo, lo + bw, float(rng.uniform(*snr_db)),
                                        str(modulations[int(rng.integers(len(modulations)))]))
            if sig.center_bin not in centers:
                break
        else:
            raise SceneError("could not place a signal with a free center bin")
        centers.add(sig.center_bin)
        signals.append(sig)
    return SceneSpec(n_antennas, n_samples, n_bins, noise_power, signals)


def labels_to_target(labels, n_bins: int) -> np.ndarray:
    """Bandwidth regression target: ``(hi - lo) / F`` at bin ``floor((lo + hi) / 2)``."""
    target = np.zeros(n_bins, dtype=np.float32)
    seen = set()
    for lo, hi in labels:
        if not (0 <= lo < hi <= n_bins):
            raise LabelError(f"band edges ({lo}, {hi}) violate 0 <= lo < hi <= {n_bins}")
        c = (lo + hi) // 2
        if c in seen:
            raise LabelError(f"two labels map to center bin {c}")
        seen.add(c)
        target[c] = (hi - lo) / n_bins
    return target


def target_to_labels(target) -> list[tuple[int, float]]:
    """Inverse view of a target: ``(center_bin, occupied_bins)`` for each nonzero bin."""
    target = np.asarray(target)
    n_bins = target.shape[-1]
    return [(int(i), float(target[i]) * n_bins) for i in np.flatnonzero(target)]


@dataclass
class LabeledCapture:
    frames: np.ndarray  # [n_frames, A, L, 2] float32
    labels: list[list[tuple[int, int]]]
    n_bins: int = 2048

    def targets(self) -> np.ndarray:
        return np.stack([labels_to_target(lab, self.n_bins) for lab in self.labels]) if self.labels else \
            np.zeros((0, self.n_bins), dtype=np.float32)

    def save(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        cap, lab = stem.with_suffix(".rfcap"), stem.with_suffix(".rflab")
        write_rfcap(cap, self.frames)
        write_rflab(lab, self.labels)
        return cap, lab


def make_capture_set(
    n_frames: int,
    n_antennas: int = 4,
    n_samples: int = 65536,
    n_bins: int = 2048,
    seed: int = 0,
    n_signals: tuple[int, int] = (1, 6),
    bandwidth: tuple[int, int] | None = None,
    snr_db: tuple[float, float] = (5.0, 25.0),
    noise_power: float = 1.0,
) -> LabeledCapture:
    """Deterministic labeled capture set; frame ``i`` uses substream ``(seed, i)``."""
    if n_frames < 1:
        raise SceneError(f"need at least one frame, got {n_frames}")
    frames = np.empty((n_frames, n_antennas, n_samples, 2), dtype=np.float32)
    labels = []
    for i in range(n_frames):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        scene = random_scene(rng, n_antennas, n_samples, n_bins, n_signals, bandwidth, snr_db,
                             noise_power=noise_power)
        frames[i], lab = synth_frame(scene, rng)
        labels.append(lab)
    return LabeledCapture(frames, labels, n_bins)


# -- file formats ---------------------------------------------------------
def rfcap_size(n_frames: int, n_antennas: int, n_samples: int) -> int:
    return RFCAP_HEADER.size + n_frames * n_antennas * n_samples * 2 * 4


def write_rfcap(path, frames) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[-1] != 2:
        raise FormatError(f"capture frames must be [n, A, L, 2], got {frames.shape}")
    n, a, length, _ = frames.shape
    with open(path, "wb") as fh:
        fh.write(RFCAP_HEADER.pack(RFCAP_MAGIC, n, a, length))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_rfcap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < RFCAP_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, n, a, length = RFCAP_HEADER.unpack_from(raw)
    if magic != RFCAP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {RFCAP_MAGIC!r}")
    expected = rfcap_size(n, a, length)
    if len(raw) != expected:
        raise FormatError(f"{path}: {len(raw)} bytes on disk, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=RFCAP_HEADER.size)
    return data.reshape(n, a, length, 2).astype(np.float32)


def write_rflab(path, labels) -> None:
    lines = []
    for i, lab in enumerate(labels):
        body = "; ".join(f"{int(lo)},{int(hi)}" for lo, hi in lab)
        lines.append(f"{i}: {body}".rstrip())
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_rflab(path) -> list[list[tuple[int, int]]]:
    labels: list[list[tuple[int, int]]] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        head, sep, body = line.partition(":")
        try:
            idx = int(head)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad frame index {head!r}") from None
        if not sep or idx != len(labels):
            raise FormatError(f"{path}:{lineno}: expected 'frame_index: lo,hi; ...' for frame {len(labels)}")
        pairs = []
        for item in filter(None, (p.strip() for p in body.split(";"))):
            try:
                lo, hi = (int(v) for v in item.split(","))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad band edge pair {item!r}") from None
            pairs.append((lo, hi))
        labels.append(pairs)
    return labels


def load_capture(capture_path, labels_path=None, n_bins: int = 2048) -> LabeledCapture:
    frames = read_rfcap(capture_path)
    labels = read_rflab(labels_path) if labels_path is not None else [[] for _ in range(len(frames))]
    if len(labels) != len(frames):
        raise FormatError(f"{labels_path}: {len(labels)} label lines for {len(frames)} frames")
    return LabeledCapture(frames, labels, n_bins)
