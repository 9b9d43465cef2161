"""Seeded simulation of long, partially overlapped, reverberant meetings.

Rooms and RIRs follow the usual shoebox image method; speakers are placed on a
timeline whose frame-level overlap ratio is tuned to a target while never
letting more than two people talk at once.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt

from pathlib import Path

from dpcss.dsp import HOP, SAMPLE_RATE, Waveform, num_frames, read_wav, write_wav
from dpcss.metrics import overlap_ratio

logger = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
SINC_TAPS = 40
MAX_ROOM_TRIES = 1000
MAX_UTTERANCES = 1000
MAX_OVERLAP_FRACTION = 0.8
REDRAWS = 20
HIGHPASS_HZ = 100.0


class GeometryError(ValueError):
    pass


class SchedulingError(ValueError):
    pass


@dataclass
class RoomSpec:
    dims: tuple[float, float, float]  # width, length, height in metres
    mic: tuple[float, float, float]
    sources: list[tuple[float, float, float]]
    rt60: float
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.rt60 <= 0:
            raise GeometryError(f"rt60 must be positive, got {self.rt60}")
        for name, pos in [("mic", self.mic)] + [(f"source {i}", s) for i, s in enumerate(self.sources)]:
            if not all(0.0 < p < d for p, d in zip(pos, self.dims)):
                raise GeometryError(f"{name} at {pos} is not strictly inside room {self.dims}")

    @property
    def volume(self) -> float:
        w, l, h = self.dims
        return w * l * h

    @property
    def surface(self) -> float:
        w, l, h = self.dims
        return 2.0 * (w * l + w * h + l * h)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "mic": list(self.mic),
            "sources": [list(s) for s in self.sources],
            "rt60": self.rt60,
            "sample_rate": self.sample_rate,
        }


def sabine_reflection_coefficient(room: RoomSpec, c: float = SPEED_OF_SOUND) -> float:
    """beta = sqrt(1 - alpha) with Sabine's mean absorption alpha = 24 ln(10) V / (c S rt60)."""
    alpha = 24.0 * np.log(10.0) * room.volume / (c * room.surface * room.rt60)
    return float(np.sqrt(max(1.0 - alpha, 0.0)))


def _fibonacci_directions(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azim = np.pi * (1.0 + 5 ** 0.5) * i
    return np.stack([np.cos(azim) * np.sin(polar), np.sin(azim) * np.sin(polar), np.cos(polar)], axis=1)


_DIRECTIONS = _fibonacci_directions(600)


def expected_decay_rt60(room: RoomSpec, beta: float, direct_distance: float, c: float = SPEED_OF_SOUND) -> float:
    """T20 of the expected energy decay curve of a shoebox image lattice.

    An image seen along unit direction u at path length d has undergone about
    d * sum_i |u_i| / L_i reflections; images fill space at one per room volume.
    The curve includes the unit-energy direct path so the fit range matches
    what :func:`schroeder_rt60` sees on a generated response.
    """
    if beta <= 0.0:
        return 0.0
    log_b = np.log(beta)
    if log_b >= 0.0:
        return np.inf
    rate = (np.abs(_DIRECTIONS) / np.asarray(room.dims)).sum(axis=1)
    k = 2.0 * c * log_b
    t0 = direct_distance / c
    span = 12.0 / (-k * rate.min())  # ~50 dB of the slowest direction
    t = np.linspace(t0, t0 + span, 600)
    tail = 4.0 * np.pi * direct_distance ** 2 * c / room.volume * np.mean(
        np.exp(k * np.outer(t, rate)) / (-k * rate), axis=1
    )
    edc = 10.0 * np.log10(tail / (tail[0] + 1.0) + 1e-300)
    sel = (edc <= -5.0) & (edc >= -25.0)
    if sel.sum() < 3:
        return 0.0
    slope, _ = np.polyfit(t[sel], edc[sel], 1)
    return float(-60.0 / slope)


def reflection_coefficient(room: RoomSpec, direct_distance: float = 1.0, c: float = SPEED_OF_SOUND,
                           iters: int = 40) -> float:
    """Wall reflection coefficient whose image-method decay matches ``room.rt60``.

    Bisects beta (in log space) against :func:`expected_decay_rt60`.  Sabine's
    inversion is the cruder closed form; on random rooms it leaves the fitted
    decay up to ~60 % off, which this removes.
    """
    lo, hi = -12.0, -1e-6
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if expected_decay_rt60(room, float(np.exp(mid)), direct_distance, c) > room.rt60:
            hi = mid
        else:
            lo = mid
    return float(np.exp(0.5 * (lo + hi)))


def sample_room(rng: np.random.Generator, n_sources: int = 2, sample_rate: int = SAMPLE_RATE) -> RoomSpec:
    """Draw a room: walls 2-12 m, height 2.5-4.5 m, mic in the central 2 x 2 m
    at 0.4-1.2 m, sources >= 0.5 m from walls at 1-2 m height, rt60 0.1-0.5 s."""
    for _ in range(MAX_ROOM_TRIES):
        w, l = rng.uniform(2.0, 12.0, size=2)
        h = rng.uniform(2.5, 4.5)
        mic = (
            w / 2 + rng.uniform(-1.0, 1.0),
            l / 2 + rng.uniform(-1.0, 1.0),
            rng.uniform(0.4, 1.2),
        )
        srcs = [
            (rng.uniform(0.5, w - 0.5), rng.uniform(0.5, l - 0.5), rng.uniform(1.0, 2.0))
            for _ in range(n_sources)
        ]
        rt60 = rng.uniform(0.1, 0.5)
        if all(np.linalg.norm(np.subtract(s, mic)) > 0.1 for s in srcs) and all(0 < m < d for m, d in zip(mic, (w, l, h))):
            return RoomSpec((float(w), float(l), float(h)), tuple(float(m) for m in mic),
                            [tuple(float(v) for v in s) for s in srcs], float(rt60), sample_rate)
    raise GeometryError(f"no valid room found after {MAX_ROOM_TRIES} draws")


def image_method_rir(room: RoomSpec, src, mic=None, max_order: int | None = 2, duration: float | None = None,
                     beta: float | None = None, c: float = SPEED_OF_SOUND) -> np.ndarray:
    """Image-source impulse response from ``src`` to ``mic``.

    Images up to ``max_order`` total wall reflections (and/or arriving
    within ``duration`` seconds) are summed as Hann-windowed sinc
    fractional delays with gain beta^reflections / distance.  The response is
    scaled so the direct path has unit gain.
    """
    mic = np.asarray(room.mic if mic is None else mic, dtype=np.float64)
    src = np.asarray(src, dtype=np.float64)
    dims = np.asarray(room.dims, dtype=np.float64)
    if max_order is None and duration is None:
        raise ValueError("need max_order or duration to bound the image set")
    if max_order is not None and max_order < 0:
        raise ValueError(f"max_order must be >= 0, got {max_order}")
    direct = np.linalg.norm(src - mic)
    if direct < 1e-6:
        raise GeometryError("source and microphone coincide")
    fs = room.sample_rate
    b = reflection_coefficient(room, direct, c) if beta is None else float(beta)

    if duration is not None:
        reach = np.ceil(duration * c / (2.0 * dims)).astype(int) + 1
    else:
        reach = np.full(3, max_order)
    if max_order is not None:
        reach = np.minimum(reach, max_order)
    grids = [np.arange(-n, n + 1) for n in reach]

    delays, gains, orders = [], [], []
    for parity in product((0, 1), repeat=3):
        p = np.asarray(parity)
        rx, ry, rz = np.meshgrid(*grids, indexing="ij")
        r = np.stack([rx.ravel(), ry.ravel(), rz.ravel()], axis=1)
        order = (np.abs(r - p) + np.abs(r)).sum(axis=1)
        keep = np.ones(len(r), dtype=bool) if max_order is None else order <= max_order
        r, order = r[keep], order[keep]
        pos = (1 - 2 * p) * src + 2 * r * dims
        dist = np.linalg.norm(pos - mic, axis=1)
        if duration is not None:
            inside = dist / c <= duration
            dist, order = dist[inside], order[inside]
        with np.errstate(divide="ignore"):
            gain = np.where(order == 0, 1.0, b ** order.astype(np.float64)) * direct / dist
        delays.append(dist / c * fs)
        gains.append(gain)
        orders.append(order)
    tau = np.concatenate(delays)
    amp = np.concatenate(gains)
    amp[~np.isfinite(amp)] = 0.0

    half = SINC_TAPS // 2
    length = int(np.ceil(tau.max())) + half + 1
    h = np.zeros(length)
    base = np.floor(tau).astype(int)
    offs = np.arange(-half + 1, half + 1)
    n = base[:, None] + offs[None, :]
    frac = n - tau[:, None]
    taps = 0.5 * (1.0 + np.cos(2.0 * np.pi * frac / SINC_TAPS)) * np.sinc(frac)
    vals = amp[:, None] * taps
    is_direct = np.concatenate(orders) == 0
    sos = butter(2, HIGHPASS_HZ, btype="highpass", fs=fs, output="sos")
    for sel, highpass in ((is_direct, False), (~is_direct, True)):
        part = np.zeros(length)
        ok = (n >= 0) & sel[:, None]
        np.add.at(part, n[ok], vals[ok])
        # all images are in phase, so dense late arrivals pile up at DC unless removed
        h += sosfilt(sos, part) if highpass else part
    return h


def schroeder_rt60(h: np.ndarray, fs: int = SAMPLE_RATE, lo_db: float = -5.0, hi_db: float = -25.0) -> float:
    """T20-style reverberation time from the backward-integrated energy decay curve."""
    energy = np.cumsum((h ** 2)[::-1])[::-1]
    edc = 10.0 * np.log10(energy / energy[0] + 1e-300)
    sel = (edc <= lo_db) & (edc >= hi_db)
    if sel.sum() < 2:
        raise ValueError("decay curve too short for the requested fit range")
    t = np.arange(len(h))[sel] / fs
    slope, _ = np.polyfit(t, edc[sel], 1)
    return float(-60.0 / slope)


# -- sources ----------------------------------------------------------------------
def speaker_bands(n_speakers: int, bands_per_speaker: int = 4, lo: float = 100.0, hi: float = 7600.0,
                  guard: float = 0.2) -> list[list[tuple[float, float]]]:
    """Interleaved, disjoint frequency bands per speaker with guard gaps."""
    n = n_speakers * bands_per_speaker
    edges = np.linspace(lo, hi, n + 1)
    out: list[list[tuple[float, float]]] = [[] for _ in range(n_speakers)]
    for j in range(n):
        width = edges[j + 1] - edges[j]
        out[j % n_speakers].append((float(edges[j] + guard * width), float(edges[j + 1] - guard * width)))
    return out


def band_noise(rng: np.random.Generator, n_samples: int, bands, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    spec = rng.normal(size=n_samples // 2 + 1) + 1j * rng.normal(size=n_samples // 2 + 1)
    freqs = np.fft.rfftfreq(n_samples, 1.0 / sample_rate)
    keep = np.zeros_like(freqs, dtype=bool)
    for lo, hi in bands:
        keep |= (freqs >= lo) & (freqs <= hi)
    return np.fft.irfft(spec * keep, n=n_samples)


def syllable_envelope(rng: np.random.Generator, n_samples: int, rate_hz: float = 4.0,
                      sample_rate: int = SAMPLE_RATE, floor: float = 0.2) -> np.ndarray:
    n_knots = max(int(n_samples / sample_rate * rate_hz) + 2, 2)
    knots = np.abs(rng.normal(size=n_knots))
    env = np.interp(np.linspace(0, n_knots - 1, n_samples), np.arange(n_knots), knots)
    return floor + env / max(env.max(), 1e-12)


def normalize_rms(x: np.ndarray, target: float = 0.1) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x))
    return x if rms == 0 else x * (target / rms)


def make_toy_sources(rng: np.random.Generator, n_speakers: int, utterance_len: float,
                     sample_rate: int = SAMPLE_RATE, bands_per_speaker: int = 4) -> list[Waveform]:
    """Band-limited, syllable-modulated noise per speaker on disjoint bands, RMS 0.1."""
    if n_speakers < 2:
        raise ValueError(f"need at least two speakers, got {n_speakers}")
    n = int(round(utterance_len * sample_rate))
    out = []
    for bands in speaker_bands(n_speakers, bands_per_speaker):
        x = band_noise(rng, n, bands, sample_rate) * syllable_envelope(rng, n, sample_rate=sample_rate)
        out.append(Waveform(normalize_rms(x), sample_rate))
    return out


def make_signature_sources(rng: np.random.Generator, n_speakers: int, seconds: float, n_bands: int = 16,
                           sample_rate: int = SAMPLE_RATE, lo: float = 200.0, hi: float = 7000.0,
                           guard: float = 0.2) -> tuple[list[Waveform], list[list[int]]]:
    """Sources whose band sets are drawn per recording and stay fixed through it.

    The ``n_bands`` narrow bands are dealt out at random, so which bands belong
    together differs between recordings, and every band carries its own
    envelope: bands of one speaker are not co-modulated.  Grouping bands into
    speakers therefore needs evidence from stretches where a speaker talks alone.
    """
    if n_bands < n_speakers:
        raise ValueError(f"need at least {n_speakers} bands, got {n_bands}")
    edges = np.linspace(lo, hi, n_bands + 1)
    owner = rng.permutation(np.arange(n_bands) % n_speakers)
    n = int(round(seconds * sample_rate))
    out, assignment = [], []
    for spk in range(n_speakers):
        bands = [int(j) for j in np.flatnonzero(owner == spk)]
        x = np.zeros(n)
        for j in bands:
            width = edges[j + 1] - edges[j]
            band = [(edges[j] + guard * width, edges[j + 1] - guard * width)]
            x += normalize_rms(band_noise(rng, n, band, sample_rate)) * syllable_envelope(rng, n, sample_rate=sample_rate)
        out.append(Waveform(normalize_rms(x), sample_rate))
        assignment.append(bands)
    return out, assignment


# -- meetings -----------------------------------------------------------------------
@dataclass
class Utterance:
    speaker: int
    onset: int
    length: int
    gain: float
    source_offset: int = 0


@dataclass
class MeetingScenario:
    mixture: Waveform
    refs: list[Waveform]
    noise: np.ndarray
    activity: np.ndarray  # speakers x frames
    schedule: list[Utterance]
    room: RoomSpec
    target_overlap: float
    noise_snr: float | None
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def realized_overlap(self) -> float:
        return overlap_ratio(self.activity)

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "sample_rate": self.mixture.sample_rate,
            "n_samples": len(self.mixture),
            "duration": self.mixture.duration,
            "n_speakers": len(self.refs),
            "target_overlap": self.target_overlap,
            "realized_overlap": self.realized_overlap,
            "noise_snr_db": self.noise_snr,
            "room": self.room.to_dict(),
            "schedule": [
                {"speaker": u.speaker, "onset": u.onset, "length": u.length, "gain": u.gain,
                 "source_offset": u.source_offset}
                for u in self.schedule
            ],
            **self.extra,
        }


def utterance_activity(schedule: list[Utterance], n_speakers: int, n_frames: int, hop: int = HOP) -> np.ndarray:
    """Frame t is active for an utterance when its centre sample t * hop lies inside the span."""
    centres = hop * np.arange(n_frames)
    act = np.zeros((n_speakers, n_frames), dtype=bool)
    for u in schedule:
        act[u.speaker] |= (centres >= u.onset) & (centres < u.onset + u.length)
    return act


def place_utterances(lengths: list[int], alpha: float) -> list[int]:
    """Onsets for a chain where utterance i overlaps i-1 by alpha times the largest
    allowed overlap: at most 80 % of utterance i (so it keeps a solo tail for the
    next one) and at most the part of i-1 not already overlapped (so no more than
    two utterances are ever active)."""
    onsets: list[int] = []
    ends: list[int] = []
    for i, n in enumerate(lengths):
        if i == 0:
            onsets.append(0)
        else:
            prev2 = ends[i - 2] if i >= 2 else 0
            room_left = min(int(MAX_OVERLAP_FRACTION * n), ends[i - 1] - prev2)
            onsets.append(ends[i - 1] - int(alpha * room_left))
        ends.append(onsets[-1] + n)
    return onsets


def _ratio_for(lengths, speakers, alpha, n_speakers, hop) -> float:
    onsets = place_utterances(lengths, alpha)
    sched = [Utterance(s, o, n, 1.0) for s, o, n in zip(speakers, onsets, lengths)]
    total = max(o + n for o, n in zip(onsets, lengths))
    return overlap_ratio(utterance_activity(sched, n_speakers, num_frames(total, hop), hop))


def schedule_overlap(lengths: list[int], speakers: list[int], target: float, n_speakers: int,
                     hop: int = HOP, tol: float = 0.05) -> tuple[list[int], float]:
    """Bisect the overlap fraction so the frame-level overlap ratio meets ``target``."""
    if target <= 0:
        return place_utterances(lengths, 0.0), 0.0
    hi_ratio = _ratio_for(lengths, speakers, 1.0, n_speakers, hop)
    if hi_ratio < target - tol:
        raise SchedulingError(
            f"target overlap {target:.3f} infeasible: {len(lengths)} utterances reach at most {hi_ratio:.3f}"
        )
    lo, hi = 0.0, 1.0
    best_alpha, best_ratio = 1.0, hi_ratio
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        r = _ratio_for(lengths, speakers, mid, n_speakers, hop)
        if abs(r - target) < abs(best_ratio - target):
            best_alpha, best_ratio = mid, r
        if r < target:
            lo = mid
        else:
            hi = mid
    if abs(best_ratio - target) > tol:
        raise SchedulingError(f"could only reach overlap {best_ratio:.3f} for target {target:.3f}")
    return place_utterances(lengths, best_alpha), best_ratio


def simulate_meeting(room: RoomSpec, sources: list[Waveform], target_overlap: float, duration: float,
                     noise_snr: float | None, rng: np.random.Generator, *, max_order: int = 2,
                     utterance_range: tuple[float, float] = (1.5, 4.0), gain_db: float = 3.0,
                     seed: int | None = None) -> MeetingScenario:
    """Place utterances cut from each speaker's source material, reverberate and mix.

    ``sources[i]`` is speaker i's signal (its RIR uses ``room.sources[i]``).
    Utterances alternate between speakers; consecutive ones overlap so the
    realised frame-level overlap ratio is within 0.05 of ``target_overlap``.
    White Gaussian noise is scaled against the reverberant clean mixture;
    ``noise_snr=None`` adds none.
    """
    n_spk = len(sources)
    if n_spk < 2:
        raise SchedulingError("a meeting needs at least two speakers")
    if len(room.sources) < n_spk:
        raise GeometryError(f"room has {len(room.sources)} source positions for {n_spk} speakers")
    fs = room.sample_rate
    for s in sources:
        if s.sample_rate != fs:
            raise SchedulingError(f"source at {s.sample_rate} Hz in a {fs} Hz simulation")

    lo_len, hi_len = (int(round(v * fs)) for v in utterance_range)
    budget = duration * fs * (1.0 + target_overlap)
    lengths: list[int] = []
    speakers: list[int] = []

    def draw():
        n = int(rng.integers(lo_len, hi_len + 1))
        choices = [s for s in range(n_spk) if not speakers or s != speakers[-1]]
        spk = int(rng.choice(choices))
        lengths.append(min(n, len(sources[spk])))
        speakers.append(spk)

    def reachable() -> bool:
        return target_overlap <= 0 or _ratio_for(lengths, speakers, 1.0, n_spk, HOP) >= target_overlap + 0.01

    # the chain's edges are solo, so a short turn list may not reach a high target:
    # redraw a few times, letting each draw grow to twice its base size, before extending freely
    for _ in range(REDRAWS):
        lengths.clear()
        speakers.clear()
        while sum(lengths) < budget or len(lengths) < 2:
            draw()
        base = len(lengths)
        while not reachable() and len(lengths) < 2 * base:
            draw()
        if reachable():
            break
    while not reachable():
        if len(lengths) >= MAX_UTTERANCES:
            raise SchedulingError(f"target overlap {target_overlap:.3f} unreachable with {MAX_UTTERANCES} utterances")
        draw()
    onsets, _ = schedule_overlap(lengths, speakers, target_overlap, n_spk)

    schedule = []
    for spk, onset, n in zip(speakers, onsets, lengths):
        offset = int(rng.integers(0, len(sources[spk]) - n + 1))
        gain = float(10 ** (rng.uniform(-gain_db, gain_db) / 20.0))
        schedule.append(Utterance(spk, int(onset), int(n), gain, offset))

    rirs = [image_method_rir(room, room.sources[i], max_order=max_order) for i in range(n_spk)]
    end = max(u.onset + u.length for u in schedule)
    total = end + max(len(h) for h in rirs) - 1
    refs = np.zeros((n_spk, total))
    for u in schedule:
        dry = np.zeros(total)
        dry[u.onset:u.onset + u.length] = u.gain * sources[u.speaker].samples[u.source_offset:u.source_offset + u.length]
        refs[u.speaker] += dry
    for i in range(n_spk):
        refs[i] = fftconvolve(refs[i], rirs[i])[:total]
    clean = refs.sum(axis=0)
    if noise_snr is None:
        noise = np.zeros(total)
    else:
        noise = rng.normal(size=total)
        noise *= np.sqrt(np.mean(clean ** 2) / (np.mean(noise ** 2) * 10 ** (noise_snr / 10.0)))
    mixture = clean + noise
    activity = utterance_activity(schedule, n_spk, num_frames(total))
    return MeetingScenario(
        Waveform(mixture, fs), [Waveform(r, fs) for r in refs], noise, activity, schedule, room,
        float(target_overlap), noise_snr, seed,
    )


def random_meeting(seed: int, *, n_speakers: int = 2, duration: float = 12.0,
                   overlap_range: tuple[float, float] = (0.5, 0.8),
                   noise_range: tuple[float, float] | None = (0.0, 20.0), max_order: int = 2,
                   utterance_range: tuple[float, float] = (1.5, 4.0),
                   sources: list[Waveform] | None = None, source_dir=None) -> MeetingScenario:
    """One fully seeded desk-scale meeting with toy sources, WAVs drawn from
    ``source_dir``, or the given sources."""
    rng = np.random.default_rng(seed)
    room = sample_room(rng, n_speakers)
    if sources is None and source_dir is not None:
        sources = load_source_dir(source_dir, n_speakers, rng)
    if sources is None:
        sources = make_toy_sources(rng, n_speakers, max(utterance_range[1] * 3, 10.0))
    target = float(rng.uniform(*overlap_range))
    snr_db = None if noise_range is None else float(rng.uniform(*noise_range))
    return simulate_meeting(room, sources, target, duration, snr_db, rng, max_order=max_order,
                            utterance_range=utterance_range, seed=seed)


# -- dataset directories -------------------------------------------------------------
def save_scenario(scn: MeetingScenario, directory) -> Path:
    """Write mixture.wav, ref<i>.wav, noise.wav (32-bit float) and manifest.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    fs = scn.mixture.sample_rate
    write_wav(d / "mixture.wav", scn.mixture)
    for i, r in enumerate(scn.refs, start=1):
        write_wav(d / f"ref{i}.wav", r)
    write_wav(d / "noise.wav", Waveform(scn.noise, fs))
    (d / "manifest.json").write_text(json.dumps(scn.manifest(), indent=1, sort_keys=True) + "\n")
    return d


def load_scenario(directory) -> MeetingScenario:
    d = Path(directory)
    try:
        man = json.loads((d / "manifest.json").read_text())
    except OSError as exc:
        raise SchedulingError(f"{d}: missing manifest.json ({exc})") from exc
    mixture = read_wav(d / "mixture.wav")
    n_spk = int(man["n_speakers"])
    refs = []
    for i in range(1, n_spk + 1):
        path = d / f"ref{i}.wav"
        if not path.exists():
            raise SchedulingError(f"{d}: reference {path.name} missing")
        refs.append(read_wav(path))
    noise = read_wav(d / "noise.wav").samples if (d / "noise.wav").exists() else np.zeros(len(mixture))
    schedule = [Utterance(**u) for u in man["schedule"]]
    room_d = man["room"]
    room = RoomSpec(tuple(room_d["dims"]), tuple(room_d["mic"]), [tuple(s) for s in room_d["sources"]],
                    room_d["rt60"], room_d["sample_rate"])
    activity = utterance_activity(schedule, n_spk, num_frames(len(mixture)))
    return MeetingScenario(mixture, refs, noise, activity, schedule, room, man["target_overlap"],
                           man["noise_snr_db"], man.get("seed"))


def list_scenarios(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise SchedulingError(f"dataset directory {d} does not exist")
    return sorted(p.parent for p in d.glob("*/manifest.json"))


def load_source_dir(directory, n_speakers: int, rng: np.random.Generator) -> list[Waveform]:
    """Pick ``n_speakers`` distinct WAV files from a directory as speaker sources."""
    files = sorted(Path(directory).glob("*.wav"))
    if len(files) < n_speakers:
        raise SchedulingError(f"{directory}: need {n_speakers} WAV files, found {len(files)}")
    pick = rng.choice(len(files), size=n_speakers, replace=False)
    return [read_wav(files[i]) for i in sorted(pick)]
