"""Sequence-modelling layers on top of :mod:`dpcss.tensor`.

Layers hold their parameters as ``Tensor`` attributes and are plain callables.
``Module.named_parameters`` walks attributes in definition order, which fixes
the checkpoint layout.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from dpcss.tensor import (
    ShapeError,
    Tensor,
    concat,
    conv1d,
    layer_norm,
    matmul,
    softmax,
    transposed_conv1d,
)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr


def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# -- linear ----------------------------------------------------------------
def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; ``weight`` is [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input feature {x.shape[-1]} != weight rows {weight.shape[0]}")
    y = matmul(x, weight)
    return y if bias is None else y + bias


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.in_dim, self.out_dim = in_dim, out_dim
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = _uniform(rng, (in_dim, out_dim), bound)
        self.bias = _uniform(rng, (out_dim,), bound) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


# -- LSTM ------------------------------------------------------------------
class LstmParams(Module):
    """One LSTM direction.

    ``weight`` is [input_dim + hidden_dim, 4 * hidden_dim] acting on the
    concatenation [x_t, h_{t-1}]; gate column blocks are ordered
    (input, forget, cell, output).
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        bound = 1.0 / np.sqrt(hidden_dim)
        self.weight = _uniform(rng, (input_dim + hidden_dim, 4 * hidden_dim), bound)
        bias = rng.uniform(-bound, bound, size=4 * hidden_dim)
        bias[hidden_dim:2 * hidden_dim] = 1.0
        self.bias = Tensor(bias, requires_grad=True)

    def __call__(self, x: Tensor, direction: str = "forward") -> Tensor:
        return lstm_forward(x, self, direction)


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def lstm_forward(x: Tensor, params: LstmParams, direction: str = "forward") -> Tensor:
    """Run an LSTM over x[S, T, in] from zero state; returns hidden states [S, T, hidden].

    ``direction="backward"`` consumes the time-reversed sequence and returns
    outputs in the original time order.  The recurrence is a single graph node
    with hand-written backpropagation through time.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if x.ndim != 3 or x.shape[2] != params.input_dim:
        raise ShapeError(f"lstm: expected [S, T, {params.input_dim}] input, got {x.shape}")
    n_in, h = params.input_dim, params.hidden_dim
    w = params.weight.data
    b = params.bias.data
    xs = x.data[:, ::-1] if direction == "backward" else x.data
    s, t_len, _ = xs.shape
    w_x, w_h = w[:n_in], w[n_in:]

    xproj = xs @ w_x + b  # S, T, 4h
    hs = np.zeros((s, t_len + 1, h))
    cs = np.zeros((s, t_len + 1, h))
    gates = np.empty((s, t_len, 4 * h))
    for t in range(t_len):
        z = xproj[:, t] + hs[:, t] @ w_h
        ifo = _sigmoid(z[:, np.r_[0:2 * h, 3 * h:4 * h]])
        i, f, o = ifo[:, :h], ifo[:, h:2 * h], ifo[:, 2 * h:]
        g = np.tanh(z[:, 2 * h:3 * h])
        c = f * cs[:, t] + i * g
        cs[:, t + 1] = c
        hs[:, t + 1] = o * np.tanh(c)
        gates[:, t, :h], gates[:, t, h:2 * h] = i, f
        gates[:, t, 2 * h:3 * h], gates[:, t, 3 * h:] = g, o
    out = hs[:, 1:]
    if direction == "backward":
        out = out[:, ::-1]

    def backward(gout):
        if direction == "backward":
            gout = gout[:, ::-1]
        dz_all = np.empty((s, t_len, 4 * h))
        dh_next = np.zeros((s, h))
        dc_next = np.zeros((s, h))
        for t in range(t_len - 1, -1, -1):
            i, f = gates[:, t, :h], gates[:, t, h:2 * h]
            g, o = gates[:, t, 2 * h:3 * h], gates[:, t, 3 * h:]
            tc = np.tanh(cs[:, t + 1])
            dh = gout[:, t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dz_all[:, t]
            dz[:, :h] = dc * g * i * (1.0 - i)
            dz[:, h:2 * h] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, 2 * h:3 * h] = dc * i * (1.0 - g * g)
            dz[:, 3 * h:] = do * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ w_h.T
        gw_x = np.einsum("sti,stj->ij", xs, dz_all, optimize=True)
        gw_h = np.einsum("sti,stj->ij", hs[:, :-1], dz_all, optimize=True)
        gb = dz_all.sum(axis=(0, 1))
        gx = dz_all @ w_x.T
        if direction == "backward":
            gx = gx[:, ::-1]
        return np.ascontiguousarray(gx), np.concatenate([gw_x, gw_h]), gb

    return Tensor.record(np.ascontiguousarray(out), (x, params.weight, params.bias), backward)


def blstm_forward(x: Tensor, fwd: LstmParams, bwd: LstmParams) -> Tensor:
    """Bidirectional LSTM: [forward outputs ; backward outputs] on the feature axis."""
    if fwd.hidden_dim != bwd.hidden_dim:
        raise ShapeError(f"blstm: hidden sizes differ ({fwd.hidden_dim} vs {bwd.hidden_dim})")
    return concat([lstm_forward(x, fwd, "forward"), lstm_forward(x, bwd, "backward")], axis=-1)


class BLSTM(Module):
    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.fwd = LstmParams(input_dim, hidden_dim, rng)
        self.bwd = LstmParams(input_dim, hidden_dim, rng)
        self.output_dim = 2 * hidden_dim

    def __call__(self, x: Tensor) -> Tensor:
        return blstm_forward(x, self.fwd, self.bwd)


class UniLSTM(Module):
    """Forward-only LSTM; used as the causal global layer of the online model."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.cell = LstmParams(input_dim, hidden_dim, rng)
        self.output_dim = hidden_dim

    def __call__(self, x: Tensor) -> Tensor:
        return lstm_forward(x, self.cell, "forward")


# -- transformer encoder -------------------------------------------------------
class TransformerEncoderParams(Module):
    def __init__(self, d_model: int, n_heads: int, ff_dim: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ShapeError(f"attention dim {d_model} not divisible by {n_heads} heads")
        self.d_model, self.n_heads, self.ff_dim = d_model, n_heads, ff_dim
        xb = np.sqrt(6.0 / (2 * d_model))
        self.w_q = _uniform(rng, (d_model, d_model), xb)
        self.b_q = Tensor(np.zeros(d_model), requires_grad=True)
        # no key bias: it shifts every score in a softmax row equally and has zero gradient
        self.w_k = _uniform(rng, (d_model, d_model), xb)
        self.w_v = _uniform(rng, (d_model, d_model), xb)
        self.b_v = Tensor(np.zeros(d_model), requires_grad=True)
        self.w_o = _uniform(rng, (d_model, d_model), xb)
        self.b_o = Tensor(np.zeros(d_model), requires_grad=True)
        self.norm1 = LayerNorm(d_model)
        self.w_1 = _uniform(rng, (d_model, ff_dim), np.sqrt(6.0 / (d_model + ff_dim)))
        self.b_1 = Tensor(np.zeros(ff_dim), requires_grad=True)
        self.w_2 = _uniform(rng, (ff_dim, d_model), np.sqrt(6.0 / (d_model + ff_dim)))
        self.b_2 = Tensor(np.zeros(d_model), requires_grad=True)
        self.norm2 = LayerNorm(d_model)
        self.output_dim = d_model

    def __call__(self, x: Tensor, causal: bool = False) -> Tensor:
        return transformer_encoder_forward(x, self, causal)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    s, t, d = x.shape
    return x.reshape(s, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def self_attention(x: Tensor, p: TransformerEncoderParams, causal: bool = False,
                   return_weights: bool = False):
    """Multi-head scaled dot-product self-attention over x[S, T, d]."""
    s, t, d = x.shape
    nh = p.n_heads
    q = _split_heads(linear(x, p.w_q, p.b_q), nh)
    k = _split_heads(linear(x, p.w_k), nh)
    v = _split_heads(linear(x, p.w_v, p.b_v), nh)
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d // nh))
    if causal:
        future = np.triu(np.ones((t, t), dtype=bool), k=1)
        scores = scores + np.where(future, -1e30, 0.0)
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, v).transpose(0, 2, 1, 3).reshape(s, t, d)
    out = linear(ctx, p.w_o, p.b_o)
    if return_weights:
        return out, weights.data
    return out


def transformer_encoder_forward(x: Tensor, params: TransformerEncoderParams,
                                causal: bool = False) -> Tensor:
    """Post-norm encoder layer: LN(x + MHSA(x)) then LN(y + FFN(y)); no positional encoding."""
    if x.ndim != 3 or x.shape[-1] != params.d_model:
        raise ShapeError(f"transformer: expected [S, T, {params.d_model}] input, got {x.shape}")
    y = params.norm1(x + self_attention(x, params, causal))
    ff = linear(linear(y, params.w_1, params.b_1).relu(), params.w_2, params.b_2)
    return params.norm2(y + ff)


# -- 1-D (transposed) convolution along time -----------------------------------
class Conv1d(Module):
    def __init__(self, channels_in: int, channels_out: int, kernel: int, stride: int,
                 padding: int, rng: np.random.Generator):
        self.stride, self.padding = stride, padding
        bound = 1.0 / np.sqrt(channels_in * kernel)
        self.weight = _uniform(rng, (channels_out, channels_in, kernel), bound)
        self.bias = _uniform(rng, (channels_out,), bound)

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose1d(Module):
    def __init__(self, channels_in: int, channels_out: int, kernel: int, stride: int,
                 padding: int, output_padding: int, rng: np.random.Generator):
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        bound = 1.0 / np.sqrt(channels_out * kernel)
        self.weight = _uniform(rng, (channels_in, channels_out, kernel), bound)
        self.bias = _uniform(rng, (channels_out,), bound)

    def __call__(self, x: Tensor) -> Tensor:
        return transposed_conv1d(x, self.weight, self.bias, self.stride, self.padding,
                                 self.output_padding)
