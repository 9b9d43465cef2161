"""Window-level PIT training with Adam, warm-up / plateau schedules and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dpcss.checkpoint import load_checkpoint, save_checkpoint
from dpcss.config import SeparatorConfig, TrainConfig
from dpcss.dsp import masked_window_synthesis, stft, window_synthesis
from dpcss.metrics import pit_loss, pit_snr_objective, psm_target, snr, window_overlap_ratios
from dpcss.pipeline import Separator, segment_array, window_index
from dpcss.tensor import Tensor, swapaxes

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
RNN_LR = 1e-3
TRANSFORMER_LR = 2e-3
ACTIVE_FRACTION = 1e-4  # -40 dB


class TrainingError(RuntimeError):
    pass


# -- data -------------------------------------------------------------------------
@dataclass
class WindowDataset:
    """Mixture STFT windows and the references they should separate into.

    ``mix`` is [W, K, F] complex and ``ref_spec`` [W, 2, K, F] the matching
    reference frames.  ``refs`` [W, 2, S], S = (K - 1) * hop + fft_size, is the
    plain overlap-add of those frames, the time-domain training target.
    """

    mix: np.ndarray
    ref_spec: np.ndarray
    valid: np.ndarray  # W x K
    overlap: np.ndarray | None = None  # per-window overlap ratio (NaN when unknown)
    source: np.ndarray | None = None  # recording id per window
    fft_size: int = 512
    hop: int = 256

    def __post_init__(self):
        w = len(self.mix)
        if self.ref_spec.shape != (w, 2) + self.mix.shape[1:]:
            raise TrainingError(f"reference spectra {self.ref_spec.shape} do not match mixture windows {self.mix.shape}")
        if self.overlap is None:
            self.overlap = np.full(w, np.nan)
        if self.source is None:
            self.source = np.zeros(w, dtype=int)
        self.refs = window_synthesis(self.ref_spec, self.fft_size, self.hop)

    def __len__(self) -> int:
        return len(self.mix)

    def subset(self, idx) -> "WindowDataset":
        idx = np.asarray(idx, dtype=int)
        return WindowDataset(self.mix[idx], self.ref_spec[idx], self.valid[idx], self.overlap[idx],
                             self.source[idx], self.fft_size, self.hop)

    @staticmethod
    def concat(parts: list["WindowDataset"]) -> "WindowDataset":
        if not parts:
            raise TrainingError("no windows to train on")
        return WindowDataset(*(np.concatenate([getattr(p, k) for p in parts]) for k in
                               ("mix", "ref_spec", "valid", "overlap", "source")),
                             parts[0].fft_size, parts[0].hop)


def windows_from_signals(mixture: np.ndarray, refs: list[np.ndarray], window: int, hop_frames: int,
                         activity: np.ndarray | None = None, fft_size: int = 512, hop: int = 256,
                         source_id: int = 0, min_energy: float = 0.0) -> WindowDataset:
    """Segment one recording into training windows.

    Each window keeps the two speakers with the most reference energy inside it
    (order by speaker index).  Windows whose mixture energy is at most
    ``min_energy`` are dropped.
    """
    mix_spec = stft(mixture, fft_size, hop).values
    ref_specs = np.stack([stft(r, fft_size, hop).values for r in refs])
    mix_w = segment_array(mix_spec, window, hop_frames)
    ref_w = np.stack([segment_array(sp, window, hop_frames) for sp in ref_specs], axis=1)  # W x spk x K x F
    if ref_w.shape[1] < 2:
        ref_w = np.concatenate([ref_w, np.zeros_like(ref_w)], axis=1)
    energy = (np.abs(ref_w) ** 2).sum(axis=(2, 3))
    top = np.sort(np.argsort(-energy, axis=1, kind="stable")[:, :2], axis=1)
    pair = np.take_along_axis(ref_w, top[:, :, None, None], axis=1)
    idx, _ = window_index(mix_spec.shape[0], window, hop_frames)
    valid = idx < mix_spec.shape[0]
    overlap = (window_overlap_ratios(activity, window, hop_frames) if activity is not None
               else np.full(len(mix_w), np.nan))
    keep = (np.abs(mix_w) ** 2).sum(axis=(1, 2)) > min_energy
    return WindowDataset(mix_w[keep], pair[keep], valid[keep], overlap[keep],
                         np.full(int(keep.sum()), source_id), fft_size, hop)


def windows_from_scenario(scn, window: int, hop_frames: int, source_id: int = 0) -> WindowDataset:
    return windows_from_signals(scn.mixture.samples, [r.samples for r in scn.refs], window, hop_frames,
                                scn.activity, source_id=source_id)


# -- loss ---------------------------------------------------------------------------
def window_estimates(model: Separator, mix: np.ndarray) -> Tensor:
    """Time-domain window estimates [W, 2, S] from masked mixture windows."""
    masks = model.forward_windows(np.abs(mix))  # W x K x 2 x F
    per_output = swapaxes(masks, 1, 2)  # W x 2 x K x F
    mix2 = np.broadcast_to(mix[:, None], per_output.shape)
    return masked_window_synthesis(per_output, mix2, model.cfg.fft_size, model.cfg.hop)


def batch_loss(model: Separator, batch: WindowDataset, floor: float) -> tuple[Tensor, np.ndarray]:
    est = window_estimates(model, batch.mix)
    return pit_snr_objective(est, batch.refs, floor)


def window_snrs_from_estimates(est: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Per-window SNR in dB: PIT mean over both outputs when both references are
    active, the better output against the only active reference otherwise, and
    NaN for silent windows.  A reference counts as active when it holds more
    than ``ACTIVE_FRACTION`` of the window's reference energy."""
    out = np.full(len(est), np.nan)
    energy = (refs ** 2).sum(-1)
    for i in range(len(est)):
        total = energy[i].sum()
        active = np.flatnonzero(energy[i] > ACTIVE_FRACTION * total) if total > 0 else []
        if len(active) == 2:
            out[i] = -pit_loss(list(est[i]), list(refs[i])).loss
        elif len(active) == 1:
            out[i] = max(snr(est[i, c], refs[i, active[0]]) for c in range(est.shape[1]))
    return out


def evaluate_window_snr(model: Separator, data: WindowDataset, chunk_windows: int = 8) -> np.ndarray:
    """Per-window PIT SNR of the model, run chunk by chunk (consecutive windows per recording)."""
    out = np.full(len(data), np.nan)
    for c in make_chunks(data, chunk_windows):
        est = window_estimates(model, data.mix[c]).data
        out[c] = window_snrs_from_estimates(est, data.refs[c])
    return out


def oracle_window_snr(data: WindowDataset) -> np.ndarray:
    """Window SNR obtained with clipped phase-sensitive masks computed from the references."""
    masks = np.stack([psm_target(data.ref_spec[:, c], data.mix) for c in range(2)], axis=1)
    est = window_synthesis(masks * data.mix[:, None], data.fft_size, data.hop)
    return window_snrs_from_estimates(est, data.refs)


def oracle_masks(data: WindowDataset) -> np.ndarray:
    """Clipped phase-sensitive masks [W, K, 2, F] of the window references."""
    return np.stack([psm_target(data.ref_spec[:, c], data.mix) for c in range(2)], axis=2)


def mixture_window_snr(data: WindowDataset) -> np.ndarray:
    """Window SNR of using the mixture itself for both outputs."""
    est = window_synthesis(np.stack([data.mix, data.mix], axis=1), data.fft_size, data.hop)
    return window_snrs_from_estimates(est, data.refs)


# -- optimiser ------------------------------------------------------------------------
@dataclass
class OptimizerState:
    base_lr: float
    schedule: str  # "warmup" | "plateau"
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    val_losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise TrainingError(f"learning rate must be positive, got {self.base_lr}")

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{k}": v for k, v in self.m.items()}
        out.update({f"optim.v.{k}": v for k, v in self.v.items()})
        out["optim.step"] = np.array([self.step], dtype=np.float64)
        out["optim.base_lr"] = np.array([self.base_lr])
        out["optim.val_losses"] = np.asarray(self.val_losses, dtype=np.float64)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], schedule: str) -> "OptimizerState":
        st = cls(float(arrays["optim.base_lr"][0]), schedule)
        st.step = int(arrays["optim.step"][0])
        st.val_losses = [float(x) for x in arrays["optim.val_losses"]]
        for key, val in arrays.items():
            if key.startswith("optim.m."):
                st.m[key[len("optim.m."):]] = val.copy()
            elif key.startswith("optim.v."):
                st.v[key[len("optim.v."):]] = val.copy()
        return st


def default_learning_rate(cfg: SeparatorConfig) -> float:
    return RNN_LR if cfg.is_rnn else TRANSFORMER_LR


def default_schedule(cfg: SeparatorConfig) -> str:
    return "plateau" if cfg.is_rnn else "warmup"


def warmup_lr(base: float, step: int, warmup: int) -> float:
    """base * min(step^-0.5, step * warmup^-1.5) * warmup^0.5: linear ramp to base at ``warmup``."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    return base * min(step ** -0.5, step * warmup ** -1.5) * warmup ** 0.5


def plateau_lr(base: float, val_losses: list[float], decay: float = 0.9) -> float:
    """Multiply by ``decay`` once for every epoch whose validation loss did not improve."""
    lr, best = base, np.inf
    for loss in val_losses:
        if loss < best:
            best = loss
        else:
            lr *= decay
    return lr


def lr_schedule(step: int, val_losses: list[float], state: OptimizerState, tcfg: TrainConfig) -> float:
    if state.schedule == "warmup":
        return warmup_lr(state.base_lr, step, tcfg.warmup_steps)
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    return plateau_lr(state.base_lr, val_losses, tcfg.plateau_decay)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global norm is at most ``max_norm``; returns the norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """In-place Adam update with bias correction."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradient at step {state.step + 1} in: {', '.join(bad[:5])}")
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter {name} shape {p.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


# -- loop ---------------------------------------------------------------------------
@dataclass
class TrainResult:
    model: Separator
    history: list[dict]
    best_val: float
    best_state: dict[str, np.ndarray]
    state: OptimizerState
    step_losses: list[float]


def make_chunks(data: WindowDataset, chunk_windows: int) -> list[np.ndarray]:
    """Runs of up to ``chunk_windows`` consecutive windows that never cross recordings."""
    chunks = []
    for src in dict.fromkeys(data.source.tolist()):
        idx = np.flatnonzero(data.source == src)
        chunks.extend(idx[s:s + chunk_windows] for s in range(0, len(idx), chunk_windows))
    return chunks


def batch_chunks(n_chunks: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Chunk ids for global step ``step`` (0-based); depends only on (seed, step)."""
    per_pass = -(-n_chunks // batch_size)
    pass_id, slot = divmod(step, per_pass)
    order = np.random.default_rng([seed, pass_id]).permutation(n_chunks)
    return order[slot * batch_size:(slot + 1) * batch_size]


def chunked_loss(model: Separator, data: WindowDataset, chunks: list[np.ndarray], floor: float) -> Tensor:
    """Window-weighted mean of the PIT loss of each chunk, one forward pass per chunk."""
    total_windows = sum(len(c) for c in chunks)
    loss = None
    for c in chunks:
        part, _ = batch_loss(model, data.subset(c), floor)
        part = part * (len(c) / total_windows)
        loss = part if loss is None else loss + part
    return loss


def train(cfg: SeparatorConfig, tcfg: TrainConfig, train_set: WindowDataset, val_set: WindowDataset | None = None,
          *, model: Separator | None = None, out_dir: str | Path | None = None, resume: str | Path | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Optimise the separator with window-level PIT.

    Validation runs every ``epoch_steps`` steps (one data pass by default); the
    plateau schedule and the best-model selection use those validation losses.
    ``max_steps`` stops early (e.g. to test resumption) without changing the
    schedule.
    """
    if len(train_set) == 0:
        raise TrainingError("empty training set")
    val_set = val_set if val_set is not None and len(val_set) else train_set
    model = model if model is not None else Separator(cfg)
    params = dict(model.named_parameters())
    schedule = tcfg.schedule or default_schedule(cfg)
    state = OptimizerState(tcfg.learning_rate or default_learning_rate(cfg), schedule)
    history: list[dict] = []
    best_val, best_state = np.inf, model.state_dict()
    top_states: list[tuple[float, dict]] = []
    if resume is not None:
        arrays = load_checkpoint(resume)
        model.load_state_dict({k: v for k, v in arrays.items() if k in params})
        state = OptimizerState.from_arrays(arrays, schedule)
        sidecar = Path(str(resume) + ".history.json")
        history = json.loads(sidecar.read_text()) if sidecar.exists() else []
        best_val = float(arrays["train.best_val"][0]) if "train.best_val" in arrays else np.inf
        best_state = {k[len("best."):]: v for k, v in arrays.items() if k.startswith("best.")} or model.state_dict()

    chunks = make_chunks(train_set, tcfg.chunk_windows)
    val_chunks = make_chunks(val_set, tcfg.chunk_windows)
    per_pass = -(-len(chunks) // tcfg.batch_size)
    epoch_steps = tcfg.epoch_steps or per_pass
    total = tcfg.steps if tcfg.epochs is None else tcfg.epochs * epoch_steps
    stop = total if max_steps is None else min(total, max_steps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    step_losses: list[float] = []
    epoch_losses: list[float] = []
    while state.step < stop:
        step = state.step  # 0-based index of the step about to run
        picked = [chunks[i] for i in batch_chunks(len(chunks), tcfg.batch_size, tcfg.seed, step)]
        model.zero_grad()
        loss = chunked_loss(model, train_set, picked, tcfg.snr_floor)
        value = float(loss.data)
        if not np.isfinite(value):
            ids = np.concatenate(picked).tolist()
            raise TrainingError(f"non-finite loss at step {step + 1} (batch windows {ids})")
        loss.backward()
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for k, p in params.items()}
        clip_gradients(grads, tcfg.grad_clip)
        lr = lr_schedule(step + 1, state.val_losses, state, tcfg)
        adam_step(params, grads, state, lr)
        step_losses.append(value)
        epoch_losses.append(value)

        if state.step % epoch_steps == 0 or state.step == total:
            val = validation_loss(model, val_set, val_chunks, tcfg.snr_floor)
            state.val_losses.append(val)
            record = {
                "epoch": len(state.val_losses),
                "step": state.step,
                "lr": lr,
                "train_loss": float(np.mean(epoch_losses)),
                "val_loss": val,
            }
            history.append(record)
            logger.info("epoch %(epoch)d step %(step)d lr %(lr).3g train %(train_loss).3f val %(val_loss).3f", record)
            epoch_losses = []
            if val < best_val:
                best_val, best_state = val, model.state_dict()
            if tcfg.average_best > 0:
                top_states.append((val, model.state_dict()))
                top_states = sorted(top_states, key=lambda t: t[0])[:tcfg.average_best]
            if out is not None:
                write_training_state(out, model, state, history, best_val, best_state)

    if tcfg.average_best > 0 and top_states:
        best_state = average_states([s for _, s in top_states])
        if out is not None:
            save_checkpoint(out / "averaged.ckpt", best_state)
    return TrainResult(model, history, best_val, best_state, state, step_losses)


def validation_loss(model: Separator, data: WindowDataset, chunks: list[np.ndarray], floor: float) -> float:
    return float(chunked_loss(model, data, chunks, floor).data)


def write_training_state(out: Path, model: Separator, state: OptimizerState, history: list[dict],
                         best_val: float, best_state: dict[str, np.ndarray]) -> None:
    last = dict(model.state_dict())
    last.update(state.arrays())
    last["train.best_val"] = np.array([best_val])
    last.update({f"best.{k}": v for k, v in best_state.items()})
    save_checkpoint(out / "last.ckpt", last)
    save_checkpoint(out / "best.ckpt", best_state)
    text = json.dumps(history, indent=1)
    (out / "last.ckpt.history.json").write_text(text)
    with open(out / "history.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")


def average_states(states: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Element-wise mean of several parameter sets with identical names and shapes."""
    if not states:
        raise TrainingError("nothing to average")
    keys = list(states[0])
    for s in states[1:]:
        if list(s) != keys:
            raise TrainingError("checkpoints to average have different parameter sets")
    return {k: np.mean([s[k] for s in states], axis=0) for k in keys}
