"""Training objectives, evaluation metrics and analytic compute accounting."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from dpcss.config import SeparatorConfig
from dpcss.dsp import Spectrogram, Waveform, num_frames
from dpcss.pipeline import num_windows
from dpcss.tensor import ShapeError, Tensor

SNR_FLOOR = 1e-10  # caps the SNR at 100 dB
PSM_EPS = 1e-8


class MetricError(ValueError):
    pass


def _samples(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


# -- masks ---------------------------------------------------------------------
def psm_target(src_spec, mix_spec, clip: bool = True) -> np.ndarray:
    """Phase-sensitive mask |S| / |Y| * cos(angle(S) - angle(Y)), clipped to [0, 1]."""
    s = src_spec.values if isinstance(src_spec, Spectrogram) else np.asarray(src_spec)
    y = mix_spec.values if isinstance(mix_spec, Spectrogram) else np.asarray(mix_spec)
    if s.shape != y.shape:
        raise ShapeError(f"source spectrum {s.shape} vs mixture spectrum {y.shape}")
    mask = np.abs(s) / np.maximum(np.abs(y), PSM_EPS) * np.cos(np.angle(s) - np.angle(y))
    return np.clip(mask, 0.0, 1.0) if clip else mask


# -- SNR and PIT ---------------------------------------------------------------
def snr(est, ref) -> float:
    """10 log10(|ref|^2 / |ref - est|^2) in dB, error energy floored at 1e-10 |ref|^2."""
    e, r = _samples(est), _samples(ref)
    if e.shape != r.shape:
        raise ShapeError(f"estimate length {e.shape} != reference length {r.shape}")
    ref_energy = float(np.dot(r, r))
    if ref_energy <= 0.0:
        raise MetricError("SNR undefined for an all-zero reference")
    diff = r - e
    err = max(float(np.dot(diff, diff)), SNR_FLOOR * ref_energy)
    return 10.0 * np.log10(ref_energy / err)


@dataclass
class PitResult:
    permutation: tuple[int, ...]  # refs[permutation[c]] is matched with ests[c]
    snrs: tuple[float, ...]
    loss: float

    @property
    def swapped(self) -> bool:
        return self.permutation != tuple(range(len(self.permutation)))


def pit_loss(ests, refs) -> PitResult:
    """Window-level PIT over the time-domain SNR: pick the pairing with best mean SNR."""
    if len(ests) != len(refs):
        raise ShapeError(f"{len(ests)} estimates vs {len(refs)} references")
    n = len(ests)
    table = np.array([[snr(ests[i], refs[j]) for j in range(n)] for i in range(n)])
    best = None
    for perm in itertools.permutations(range(n)):
        pair = tuple(float(table[i, perm[i]]) for i in range(n))
        loss = -float(np.mean(pair))
        if best is None or loss < best.loss:
            best = PitResult(perm, pair, loss)
    return best


def pit_snr_objective(est: Tensor, refs: np.ndarray, floor: float = 1e-4, weights: np.ndarray | None = None):
    """Differentiable window-PIT loss for batched two-output estimates.

    ``est`` is [W, 2, S] and ``refs`` [W, 2, S].  Per pairing the SNR is
    ``10 log10((|r|^2 + t) / (|r - e|^2 + 1e-10 |r|^2 + t))`` with
    ``t = floor * (|r_1|^2 + |r_2|^2)`` so windows where one reference is
    silent stay finite.  Returns the mean over windows of the best
    pairing's negated mean SNR, and the chosen permutations.
    """
    if est.shape != refs.shape or est.shape[1] != 2:
        raise ShapeError(f"estimates {est.shape} vs references {refs.shape}")
    w = est.shape[0]
    ref_e = (refs * refs).sum(axis=-1)  # W x 2
    tau = floor * ref_e.sum(axis=1, keepdims=True)
    tau = np.maximum(tau, 1e-20)
    e = est.data
    scores = np.empty((w, 2))
    for k, perm in enumerate(((0, 1), (1, 0))):
        diff = refs[:, list(perm)] - e
        err = (diff * diff).sum(-1)
        num = ref_e[:, list(perm)] + tau
        scores[:, k] = (10 * np.log10(num / (err + SNR_FLOOR * ref_e[:, list(perm)] + tau))).mean(axis=1)
    choice = np.argmax(scores, axis=1)  # ties keep identity
    perm_idx = np.where(choice[:, None] == 0, [[0, 1]], [[1, 0]])
    matched_refs = np.take_along_axis(refs, perm_idx[:, :, None], axis=1)
    matched_e = (matched_refs * matched_refs).sum(-1)
    diff = est - matched_refs
    err = (diff * diff).sum(axis=-1)
    snr_db = ((err + (SNR_FLOOR * matched_e + tau)).log() * (-10.0 / np.log(10.0))
              + 10.0 * np.log10(matched_e + tau))
    per_window = snr_db.mean(axis=1)
    if weights is None:
        loss = -per_window.mean()
    else:
        loss = -(per_window * (weights / weights.sum())).sum()
    return loss, perm_idx


# -- overlap statistics ---------------------------------------------------------
def overlap_ratio(activity: np.ndarray) -> float:
    """Frames with >= 2 active speakers over frames with >= 1 active speaker."""
    act = np.asarray(activity, dtype=bool)
    if act.ndim != 2:
        raise ShapeError(f"activity must be speakers x frames, got {act.shape}")
    count = act.sum(axis=0)
    active = int((count >= 1).sum())
    if active == 0:
        raise MetricError("overlap ratio undefined: no active frames")
    return int((count >= 2).sum()) / active


BUCKETS = ("0", "0-25", "25-50", "50-75", "75-100")


def overlap_bucket(ratio: float) -> str:
    """Half-open buckets: exactly 0, (0, .25), [.25, .5), [.5, .75), [.75, 1]."""
    if ratio <= 0.0:
        return "0"
    if ratio < 0.25:
        return "0-25"
    if ratio < 0.5:
        return "25-50"
    if ratio < 0.75:
        return "50-75"
    return "75-100"


def window_overlap_ratios(activity: np.ndarray, window: int, hop: int) -> np.ndarray:
    """Overlap ratio of each window's non-padded frames (NaN if the window is silent)."""
    act = np.asarray(activity, dtype=bool)
    if act.ndim != 2:
        raise MetricError("per-speaker activity masks (speakers x frames) are required")
    n = act.shape[1]
    b = num_windows(n, window, hop)
    out = np.full(b, np.nan)
    for i in range(b):
        seg = act[:, i * hop:min(i * hop + window, n)]
        count = seg.sum(axis=0)
        active = (count >= 1).sum()
        if active:
            out[i] = (count >= 2).sum() / active
    return out


@dataclass
class BucketReport:
    means: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    silent_windows: int = 0

    def rows(self) -> list[dict]:
        return [{"bucket": k, "mean_snr_db": self.means.get(k), "count": self.counts.get(k, 0)} for k in BUCKETS]


def window_snr_report(window_snrs, ratios) -> BucketReport:
    """Mean window SNR per overlap bucket; windows with undefined ratio are counted as silent."""
    snrs = np.asarray(window_snrs, dtype=np.float64)
    ratios = np.asarray(ratios, dtype=np.float64)
    if snrs.shape != ratios.shape:
        raise ShapeError(f"{snrs.shape} SNRs vs {ratios.shape} overlap ratios")
    groups: dict[str, list[float]] = {k: [] for k in BUCKETS}
    silent = 0
    for value, ratio in zip(snrs, ratios):
        if np.isnan(ratio):
            silent += 1
            continue
        groups[overlap_bucket(float(ratio))].append(float(value))
    report = BucketReport(silent_windows=silent)
    for k, vals in groups.items():
        report.counts[k] = len(vals)
        report.means[k] = float(np.mean(vals)) if vals else None
    return report


# -- parameter and MAC accounting --------------------------------------------------
@dataclass
class LayerCost:
    name: str
    params: int
    macs: int = 0


@dataclass
class ComputeReport:
    layers: list[LayerCost]
    workload: dict = field(default_factory=dict)
    convention: str = (
        "MACs: linear in*out per frame; LSTM 4*(in*h + h*h) per frame per direction; "
        "attention 4*T*d^2 (Q,K,V,O) + 2*T^2*d per sequence; FFN 2*T*d*ff; "
        "conv Cin*Cout*k per output frame, transposed conv per input frame; "
        "nonlinearities, norms, softmax and biases not counted"
    )

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def giga_macs(self) -> float:
        return self.total_macs / 1e9

    def records(self) -> list[dict]:
        return [{"layer": l.name, "params": l.params, "macs": l.macs} for l in self.layers]


def _linear_params(i: int, o: int) -> int:
    return i * o + o


def _lstm_params(i: int, h: int) -> int:
    return 4 * h * (i + h) + 4 * h


def _rnn_sublayer_params(n: int, h: int, bidirectional: bool) -> int:
    dirs = 2 if bidirectional else 1
    return dirs * _lstm_params(n, h) + _linear_params(dirs * h, n) + 2 * n


def _transformer_params(d: int, ff: int) -> int:
    # Q, V, O projections with bias, K without; FFN; two layer norms
    return 4 * d * d + 3 * d + d * ff + ff + ff * d + d + 4 * d


def _rnn_sublayer_macs(n: int, h: int, bidirectional: bool, frames: int) -> int:
    dirs = 2 if bidirectional else 1
    return frames * (dirs * 4 * (n * h + h * h) + dirs * h * n)


def _transformer_macs(d: int, ff: int, seq_len: int, n_seqs: int) -> int:
    per_seq = 4 * seq_len * d * d + 2 * seq_len * seq_len * d + 2 * seq_len * d * ff
    return n_seqs * per_seq


def _analyse(cfg: SeparatorConfig, n_win: int) -> list[LayerCost]:
    f, n, c = cfg.n_bins, cfg.feature_dim, cfg.n_outputs
    k = cfg.window_frames
    frames = n_win * k
    layers = [LayerCost("embed", _linear_params(f, n), frames * f * n)]
    h = cfg.rnn_hidden
    if cfg.arch == "blstm-baseline":
        for i in range(cfg.repeats):
            layers.append(LayerCost(f"blstm{i}", _rnn_sublayer_params(n, h, True),
                                    _rnn_sublayer_macs(n, h, True, frames)))
    elif cfg.arch == "dp-blstm":
        for i in range(cfg.repeats):
            layers.append(LayerCost(f"block{i}.local", _rnn_sublayer_params(n, h, True),
                                    _rnn_sublayer_macs(n, h, True, frames)))
            bi = not cfg.online
            layers.append(LayerCost(f"block{i}.global", _rnn_sublayer_params(n, h, bi),
                                    _rnn_sublayer_macs(n, h, bi, frames)))
    elif cfg.arch == "transformer-baseline":
        for i in range(cfg.repeats):
            layers.append(LayerCost(f"transformer{i}", _transformer_params(n, cfg.ff_dim),
                                    _transformer_macs(n, cfg.ff_dim, k, n_win)))
    else:
        lam = cfg.sampling_factor if cfg.is_boosted else 1
        inner = -(-k // lam) * lam
        reduced = inner // lam if lam > 1 else k
        for i in range(cfg.repeats):
            kk = reduced if (cfg.is_boosted and 0 < i < cfg.repeats - 1) else k
            layers.append(LayerCost(f"block{i}.local", _transformer_params(n, cfg.ff_dim),
                                    _transformer_macs(n, cfg.ff_dim, kk, n_win)))
            layers.append(LayerCost(f"block{i}.global", _transformer_params(n, cfg.ff_dim),
                                    _transformer_macs(n, cfg.ff_dim, n_win, kk)))
            if cfg.is_boosted and i == 0:
                kc = cfg.conv_kernel
                layers.append(LayerCost("down_conv", n * n * kc + n, n_win * reduced * n * n * kc))
            if cfg.is_boosted and i == cfg.repeats - 2:
                kc = cfg.conv_kernel
                layers.append(LayerCost("up_conv", n * n * kc + n, n_win * reduced * n * n * kc))
    layers.append(LayerCost("mask_head", _linear_params(n, c * f), frames * n * c * f))
    return layers


def workload_frames(duration_s: float, sample_rate: int = 16000, hop: int = 256) -> int:
    return num_frames(int(round(duration_s * sample_rate)), hop)


def count_params(cfg: SeparatorConfig) -> ComputeReport:
    """Exact parameter counts per layer (MAC fields are zero)."""
    layers = [LayerCost(l.name, l.params, 0) for l in _analyse(cfg, 1)]
    return ComputeReport(layers, {})


def count_macs(cfg: SeparatorConfig, n_frames: int, window: int | None = None,
               hop: int | None = None) -> ComputeReport:
    """Analytic MACs for processing ``n_frames`` STFT frames cut into windows."""
    if window is not None or hop is not None:
        cfg = replace(cfg, window_frames=window or cfg.window_frames,
                      hop_frames=hop or (window or cfg.window_frames) // 2)
    n_win = num_windows(n_frames, cfg.window_frames, cfg.hop_frames)
    return ComputeReport(
        _analyse(cfg, n_win),
        {"frames": n_frames, "window_frames": cfg.window_frames, "hop_frames": cfg.hop_frames, "windows": n_win},
    )
