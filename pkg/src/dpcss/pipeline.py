"""Segmentation, dual-path separation and stitching.

Shapes follow the usual CSS notation: a recording has ``L`` STFT frames and
``F`` bins; segmentation cuts ``B`` windows of ``K`` frames with hop ``P``;
the separator works on ``B x K x N`` features and returns two ``B x K x F``
masks per recording.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from dpcss.config import ConfigError, SeparatorConfig
from dpcss.dsp import Spectrogram, Waveform, masked_resynthesis, stft
from dpcss.layers import (
    BLSTM,
    Conv1d,
    ConvTranspose1d,
    LayerNorm,
    Linear,
    Module,
    TransformerEncoderParams,
    UniLSTM,
)
from dpcss.tensor import ShapeError, Tensor, conv_output_length, getitem, pad_axis, swapaxes

logger = logging.getLogger(__name__)


# -- segmentation -------------------------------------------------------------
def num_windows(n_frames: int, window: int, hop: int) -> int:
    return -(-max(n_frames - window, 0) // hop) + 1


def window_index(n_frames: int, window: int, hop: int) -> tuple[np.ndarray, int]:
    """Frame index array [B, K] into the right-padded sequence, and the pad length."""
    b = num_windows(n_frames, window, hop)
    pad = (b - 1) * hop + window - n_frames
    idx = hop * np.arange(b)[:, None] + np.arange(window)[None, :]
    return idx, pad


@dataclass
class WindowedFeature:
    tensor: Tensor  # B x K x X
    window_frames: int
    hop_frames: int
    n_frames: int
    pad: int
    valid: np.ndarray  # B x K, False on padded frames
    no_overlap: bool = False  # P == K: stitching has no shared region to align on

    @property
    def n_windows(self) -> int:
        return self.tensor.shape[0]


def segment(feature, window: int, hop: int) -> WindowedFeature:
    """Cut [L, X] into right-zero-padded windows [B, K, X]."""
    if window <= 0:
        raise ConfigError(f"window size must be positive, got {window}")
    if hop > window:
        raise ConfigError(f"hop {hop} larger than window {window}: windows would not overlap")
    if hop <= 0:
        raise ConfigError(f"hop must be positive, got {hop}")
    x = feature if isinstance(feature, Tensor) else Tensor(feature)
    n_frames = x.shape[0]
    idx, pad = window_index(n_frames, window, hop)
    padded = pad_axis(x, 0, pad, 0) if pad else x
    windows = getitem(padded, idx)
    valid = idx < n_frames
    if hop == window:
        logger.warning("hop == window (%d): no overlap, stitching cannot align permutations", window)
    return WindowedFeature(windows, window, hop, n_frames, pad, valid, hop == window)


def segment_array(values: np.ndarray, window: int, hop: int) -> np.ndarray:
    """Numpy counterpart of :func:`segment` (works for complex spectra)."""
    n_frames = values.shape[0]
    idx, pad = window_index(n_frames, window, hop)
    padded = np.concatenate([values, np.zeros((pad,) + values.shape[1:], values.dtype)]) if pad else values
    return padded[idx]


# -- dual-path blocks ---------------------------------------------------------
class ResidualSequenceLayer(Module):
    """x + LN(FC(f(x))): a recurrent layer with its bottleneck projection."""

    def __init__(self, layer: Module, feature_dim: int, rng: np.random.Generator):
        self.layer = layer
        self.fc = Linear(layer.output_dim, feature_dim, rng)
        self.norm = LayerNorm(feature_dim)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.norm(self.fc(self.layer(x)))


def dp_block_forward(t_in: Tensor, local_layer, global_layer, fc_local=None, ln_local=None,
                     fc_global=None, ln_global=None) -> Tensor:
    """One local-then-global pass over B x K x N.

    The local layer sees B sequences of length K; the global layer sees K
    sequences of length B (frame k of every window).  When FC/LN modules are
    given, each pass is wrapped as ``x + LN(FC(layer(x)))``; otherwise the
    layer is expected to carry its own residual path (transformer layers).
    """
    if t_in.ndim != 3:
        raise ShapeError(f"dp block expects B x K x N input, got {t_in.shape}")

    def wrap(layer, fc, ln, x):
        if fc is None:
            return layer(x)
        return x + ln(fc(layer(x)))

    local_out = wrap(local_layer, fc_local, ln_local, t_in)
    across = swapaxes(local_out, 0, 1)  # K x B x N
    global_out = wrap(global_layer, fc_global, ln_global, across)
    return swapaxes(global_out, 0, 1)


class DPBlock(Module):
    def __init__(self, local_layer: Module, global_layer: Module):
        self.local = local_layer
        self.global_ = global_layer

    def __call__(self, x: Tensor) -> Tensor:
        return dp_block_forward(x, self.local, self.global_)


# -- separator ----------------------------------------------------------------
def _rnn_sublayer(cfg: SeparatorConfig, rng, unidirectional: bool = False) -> ResidualSequenceLayer:
    n, h = cfg.feature_dim, cfg.rnn_hidden
    inner = UniLSTM(n, h, rng) if unidirectional else BLSTM(n, h, rng)
    return ResidualSequenceLayer(inner, n, rng)


def _transformer(cfg: SeparatorConfig, rng) -> TransformerEncoderParams:
    return TransformerEncoderParams(cfg.feature_dim, cfg.n_heads, cfg.ff_dim, rng)


class Separator(Module):
    """Window-level mask estimator for every architecture in :data:`dpcss.config.ARCHS`."""

    def __init__(self, cfg: SeparatorConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        f, n = cfg.n_bins, cfg.feature_dim
        self.embed = Linear(f, n, rng)
        self.layers: list[Module] = []
        self.blocks: list[DPBlock] = []
        self.down = None
        self.up = None
        if cfg.arch == "blstm-baseline":
            self.layers = [_rnn_sublayer(cfg, rng) for _ in range(cfg.repeats)]
        elif cfg.arch == "transformer-baseline":
            self.layers = [_transformer(cfg, rng) for _ in range(cfg.repeats)]
        elif cfg.arch == "dp-blstm":
            self.blocks = [
                DPBlock(_rnn_sublayer(cfg, rng), _rnn_sublayer(cfg, rng, unidirectional=cfg.online))
                for _ in range(cfg.repeats)
            ]
        else:
            self.blocks = [DPBlock(_transformer(cfg, rng), _transformer(cfg, rng)) for _ in range(cfg.repeats)]
        if cfg.is_boosted:
            lam, k = cfg.sampling_factor, cfg.conv_kernel
            pad = k // 2
            self.inner_window = -(-cfg.window_frames // lam) * lam  # K rounded up to a multiple of lambda
            reduced = conv_output_length(self.inner_window, k, lam, pad)
            out_pad = self.inner_window - ((reduced - 1) * lam - 2 * pad + k)
            if not 0 <= out_pad < lam:
                raise ConfigError(
                    f"cannot restore {self.inner_window} frames from {reduced} with kernel {k}, stride {lam}"
                )
            self.reduced_window = reduced
            self.down = Conv1d(n, n, k, lam, pad, rng)
            self.up = ConvTranspose1d(n, n, k, lam, pad, out_pad, rng)
        self.head = Linear(n, cfg.n_outputs * f, rng)

    def _resample(self, conv, x: Tensor) -> Tensor:
        # conv along the K axis: B x K x N -> B x N x K -> conv -> B x K' x N
        return swapaxes(conv(swapaxes(x, 1, 2)), 1, 2)

    def features(self, window_magnitudes: np.ndarray) -> Tensor:
        return self.embed(Tensor(np.log1p(window_magnitudes)))

    def forward_windows(self, window_magnitudes: np.ndarray) -> Tensor:
        """Masks [B, K, C, F] (ReLU output) for magnitude windows [B, K, F]."""
        cfg = self.cfg
        if window_magnitudes.ndim != 3 or window_magnitudes.shape[2] != cfg.n_bins:
            raise ShapeError(f"expected B x K x {cfg.n_bins} magnitudes, got {window_magnitudes.shape}")
        x = self.features(window_magnitudes)
        for layer in self.layers:
            x = layer(x)
        if self.blocks:
            if self.down is None:
                for block in self.blocks:
                    x = block(x)
            else:
                k = x.shape[1]
                x = self.blocks[0](x)
                if self.inner_window != k:
                    x = pad_axis(x, 0, self.inner_window - k, 1)
                x = self._resample(self.down, x)
                for block in self.blocks[1:-1]:
                    x = block(x)
                x = self._resample(self.up, x)
                if self.inner_window != k:
                    x = x[:, :k]
                x = self.blocks[-1](x)
        masks = self.head(x).relu()
        b, k = window_magnitudes.shape[:2]
        return masks.reshape(b, k, cfg.n_outputs, cfg.n_bins)


@dataclass
class WindowOutputs:
    masks: Tensor  # B x K x C x F
    magnitudes: np.ndarray  # B x K x F, mixture |D_b|
    valid: np.ndarray  # B x K
    window_frames: int
    hop_frames: int
    n_frames: int

    @property
    def estimates(self) -> Tensor:
        """Masked magnitudes S_b^c, B x K x C x F."""
        return self.masks * self.magnitudes[:, :, None, :]

    def mask(self, c: int) -> np.ndarray:
        return self.masks.data[:, :, c]


def separator_forward(spec, cfg: SeparatorConfig, model: Separator) -> WindowOutputs:
    """Segment a recording's magnitude spectrum and estimate per-window masks."""
    magnitude = spec.magnitude if isinstance(spec, Spectrogram) else np.asarray(
        spec.data if isinstance(spec, Tensor) else spec, dtype=np.float64)
    if magnitude.ndim != 2 or magnitude.shape[1] != cfg.n_bins:
        raise ShapeError(f"expected L x {cfg.n_bins} magnitude spectrum, got {magnitude.shape}")
    if model.cfg.arch != cfg.arch or model.cfg.feature_dim != cfg.feature_dim:
        raise ConfigError("model parameters were built for a different configuration")
    windows = segment_array(magnitude, cfg.window_frames, cfg.hop_frames)
    idx, _ = window_index(magnitude.shape[0], cfg.window_frames, cfg.hop_frames)
    masks = model.forward_windows(windows)
    return WindowOutputs(masks, windows, idx < magnitude.shape[0], cfg.window_frames, cfg.hop_frames,
                         magnitude.shape[0])


# -- stitching ------------------------------------------------------------------
@dataclass
class StitchedStreams:
    masks: np.ndarray  # C x L x F
    permutations: list[tuple[int, ...]]
    similarities: list[tuple[float, float]] = field(default_factory=list)  # (keep, swap) per adjacent pair

    @property
    def margins(self) -> list[float]:
        return [abs(a - b) for a, b in self.similarities]


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a.ravel(), b.ravel()) / (na * nb))


def crossfade_weights(n_windows: int, window: int, hop: int) -> np.ndarray:
    """Per-window frame weights [B, K] with linear ramps over the shared regions."""
    shared = window - hop
    w = np.ones((n_windows, window))
    if shared <= 0 or n_windows == 1:
        return w
    up = np.arange(1, shared + 1) / (shared + 1)
    w[1:, :shared] *= up
    w[:-1, window - shared:] *= up[::-1]
    return w


def stitch(masks: np.ndarray, window: int, hop: int, n_frames: int, features: np.ndarray | None = None) -> StitchedStreams:
    """Align window output permutations left to right and overlap-add into streams.

    ``masks`` is [B, K, 2, F].  Adjacent windows are compared on their shared
    K - P frames by the summed cosine similarity of matched outputs (masks, or
    ``features`` such as masked magnitudes when given); the better of keep/swap
    is composed with the running permutation.  Shared frames are merged with a
    linear crossfade.
    """
    if hop >= window:
        raise ConfigError(f"stitching needs overlapping windows (hop {hop} >= window {window})")
    masks = np.asarray(masks)
    n_win, k, c, f = masks.shape
    if c != 2:
        raise ShapeError(f"stitching supports two outputs, got {c}")
    compare = masks if features is None else np.asarray(features)
    shared = window - hop
    idx, _ = window_index(n_frames, window, hop)
    valid = idx < n_frames

    perms: list[tuple[int, ...]] = [(0, 1)]
    sims: list[tuple[float, float]] = []
    for b in range(1, n_win):
        rows = valid[b, :shared]
        prev = compare[b - 1][hop:][:, list(perms[-1])][rows]
        cur = compare[b, :shared][rows]
        keep = _cosine(prev[:, 0], cur[:, 0]) + _cosine(prev[:, 1], cur[:, 1])
        swap = _cosine(prev[:, 0], cur[:, 1]) + _cosine(prev[:, 1], cur[:, 0])
        sims.append((keep, swap))
        perms.append((1, 0) if swap > keep else (0, 1))

    aligned = np.stack([masks[b][:, list(p)] for b, p in enumerate(perms)])  # B x K x 2 x F
    weights = crossfade_weights(n_win, window, hop) * valid
    total_len = (n_win - 1) * hop + window
    acc = np.zeros((total_len, 2, f))
    norm = np.zeros(total_len)
    for b in range(n_win):
        acc[b * hop:b * hop + window] += weights[b][:, None, None] * aligned[b]
        norm[b * hop:b * hop + window] += weights[b]
    acc = acc[:n_frames] / norm[:n_frames, None, None]
    return StitchedStreams(np.ascontiguousarray(acc.transpose(1, 0, 2)), perms, sims)


# -- end-to-end -------------------------------------------------------------------
def separate_recording(w: Waveform, cfg: SeparatorConfig, model: Separator | None, *,
                       unit_mask: bool = False, window_masks: np.ndarray | None = None):
    """STFT -> window masks -> stitch -> mixture-phase resynthesis of two streams.

    ``unit_mask`` forces every mask to one and ``window_masks`` substitutes
    externally supplied [B, K, 2, F] masks (oracle debugging); otherwise the
    model estimates the masks.
    """
    t0 = time.perf_counter()
    spec = stft(w, cfg.fft_size, cfg.hop)
    mag = spec.magnitude
    windows = segment_array(mag, cfg.window_frames, cfg.hop_frames)
    if window_masks is not None:
        masks = np.asarray(window_masks, dtype=np.float64)
    elif unit_mask:
        masks = np.ones(windows.shape[:2] + (2, windows.shape[2]))
    else:
        if model is None:
            raise ConfigError("no model given and no debug mask mode selected")
        masks = separator_forward(mag, cfg, model).masks.data
    t1 = time.perf_counter()
    features = masks * windows[:, :, None, :] if cfg.stitch_on == "magnitude" else None
    if masks.shape[0] == 1 or cfg.hop_frames < cfg.window_frames:
        streams = stitch(masks, cfg.window_frames, cfg.hop_frames, spec.frames, features)
    else:
        # no shared region: keep each window's own order
        streams = stitch_without_alignment(masks, cfg.window_frames, spec.frames)
    outs = [masked_resynthesis(spec, streams.masks[c]) for c in range(2)]
    t2 = time.perf_counter()
    report = {
        "n_frames": spec.frames,
        "n_windows": int(masks.shape[0]),
        "window_frames": cfg.window_frames,
        "hop_frames": cfg.hop_frames,
        "permutations": [list(p) for p in streams.permutations],
        "similarities": [list(s) for s in streams.similarities],
        "similarity_margins": streams.margins,
        "seconds_separation": t1 - t0,
        "seconds_stitch_resynthesis": t2 - t1,
    }
    return outs[0], outs[1], report


def stitch_without_alignment(masks: np.ndarray, window: int, n_frames: int) -> StitchedStreams:
    n_win = masks.shape[0]
    flat = masks.transpose(2, 0, 1, 3).reshape(2, n_win * window, -1)[:, :n_frames]
    return StitchedStreams(np.ascontiguousarray(flat), [(0, 1)] * n_win, [])
