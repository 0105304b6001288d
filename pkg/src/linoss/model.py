"""Full sequence model: encoder, oscillator blocks, decoder, task heads.

The architecture is a stack of width-preserving blocks between an affine
encoder and decoder.  Each block runs the oscillator layer on its input
sequence, reads the position half out through c_out (plus the d_thru
feedthrough), applies GELU then a gated linear unit, and adds the block input
back as a skip connection:

    u_out = glu(gelu(c_out y + d_thru u_in)) + u_in

Everything except the recurrence itself is position-wise, so the whole
forward pass is vectorized over batch and time; the recurrence runs through
the scan module.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf, expit

from .dynamics import (
    EffectiveA,
    LayerParams,
    build_transition,
    forcing_sequence,
    init_params,
)
from .scan import solve_recurrence_arrays
from .validation import as_float_array, check_finite

__all__ = [
    "BlockParams",
    "ModelParams",
    "UniversalityBlock",
    "gelu",
    "gelu_grad",
    "glu",
    "layer_forward",
    "block_forward",
    "model_forward",
    "head_classify",
    "head_forecast",
    "universality_block_forward",
    "sine_bank",
    "init_model_params",
    "flatten_params",
    "unflatten_params",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class BlockParams:
    """One block: the oscillator layer plus the two GLU matrices (q x q)."""

    layer: LayerParams
    glu_w1: np.ndarray
    glu_w2: np.ndarray

    def __post_init__(self):
        q = self.layer.c_out.shape[0]
        for name in ("glu_w1", "glu_w2"):
            arr = as_float_array(getattr(self, name), name)
            check_finite(arr, name)
            if arr.shape != (q, q):
                raise ValueError(f"{name} must be ({q}, {q}), got {arr.shape}")
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class ModelParams:
    """Encoder, block stack, decoder."""

    enc_w: np.ndarray
    enc_b: np.ndarray
    blocks: tuple[BlockParams, ...]
    dec_w: np.ndarray
    dec_b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if len(self.blocks) < 1:
            raise ValueError("model needs at least one block")
        for name in ("enc_w", "enc_b", "dec_w", "dec_b"):
            arr = as_float_array(getattr(self, name), name)
            check_finite(arr, name)
            object.__setattr__(self, name, arr)
        h = self.enc_w.shape[0]
        for i, blk in enumerate(self.blocks):
            if blk.layer.b_in.shape[1] != h or blk.layer.c_out.shape[0] != h:
                raise ValueError(f"block {i} does not preserve width {h}")
        if self.dec_w.shape[1] != h:
            raise ValueError("decoder width does not match the block stack")

    @property
    def hidden_dim(self) -> int:
        return self.enc_w.shape[0]


@dataclass(frozen=True)
class UniversalityBlock:
    """A single oscillator bank with an MLP readout z = W sigma(W~ y + b~).

    With w_tilde stacking +/- frequency rows and w_out differencing them, the
    relu pair reproduces A y exactly, which is how the block computes windowed
    sine transforms of its input.
    """

    a: EffectiveA
    b_in: np.ndarray    # (m, p)
    bias: np.ndarray    # (m,)
    w_tilde: np.ndarray # (mt, m)
    b_tilde: np.ndarray # (mt,)
    w_out: np.ndarray   # (q, mt)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU x * Phi(x) via erf; no tanh approximation."""
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx gelu = Phi(x) + x phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    phi = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * phi


def glu(w1: np.ndarray, w2: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Gated linear unit sigmoid(w1 x) * (w2 x), position-wise."""
    x = np.asarray(x, dtype=np.float64)
    return expit(x @ w1.T) * (x @ w2.T)


def layer_forward(
    params: LayerParams,
    scheme: str,
    inputs,
    mode: str = "parallel",
    chunk_size: int | None = None,
):
    """Run the oscillator layer over a sequence (or batch of sequences).

    inputs has shape (..., T, p).  Returns (states, readout) with states
    (..., T, 2m) in [z; y] order and readout (..., T, q) where
    readout_n = c_out y_n + d_thru u_n.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim < 2:
        raise ValueError("inputs must have shape (..., time, channels)")
    if inputs.shape[-1] != params.b_in.shape[1]:
        raise ValueError(
            f"input width {inputs.shape[-1]} does not match layer width "
            f"{params.b_in.shape[1]}"
        )
    trans = build_transition(params.effective_a(), params.dt, scheme)
    g = inputs @ params.b_in.T + params.bias
    forcings = forcing_sequence(trans, g)
    # scan wants time first
    f_t = np.ascontiguousarray(np.moveaxis(forcings, -2, 0))
    states_t = solve_recurrence_arrays(trans, f_t, mode=mode, chunk_size=chunk_size)
    states = np.moveaxis(states_t, 0, -2)
    y = states[..., params.state_dim :]
    readout = y @ params.c_out.T + inputs @ params.d_thru.T
    return states, readout


def block_forward(
    block: BlockParams,
    scheme: str,
    seq_in,
    mode: str = "parallel",
    chunk_size: int | None = None,
) -> np.ndarray:
    """One block: recurrence readout -> GELU -> GLU -> skip."""
    seq_in = np.asarray(seq_in, dtype=np.float64)
    q = block.layer.c_out.shape[0]
    if seq_in.shape[-1] != q:
        raise ValueError(f"block width mismatch: input {seq_in.shape[-1]}, block {q}")
    _, readout = layer_forward(block.layer, scheme, seq_in, mode, chunk_size)
    return glu(block.glu_w1, block.glu_w2, gelu(readout)) + seq_in


def model_forward(
    params: ModelParams,
    scheme: str,
    inputs,
    mode: str = "parallel",
    chunk_size: int | None = None,
) -> np.ndarray:
    """Encode, run the block stack, decode; shape (..., T, p_in) -> (..., T, out)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    u = inputs @ params.enc_w.T + params.enc_b
    for block in params.blocks:
        u = block_forward(block, scheme, u, mode, chunk_size)
    return u @ params.dec_w.T + params.dec_b


def head_classify(outputs, lengths=None) -> np.ndarray:
    """The output at each sequence's true final step."""
    outputs = np.asarray(outputs, dtype=np.float64)
    if lengths is None:
        return outputs[..., -1, :]
    lengths = np.asarray(lengths)
    idx = lengths - 1
    return outputs[np.arange(outputs.shape[0]), idx, :]


def head_forecast(outputs, l1: int, l2: int) -> np.ndarray:
    """The forecast window outputs[l1 : l1+l2); requires length l1+l2."""
    outputs = np.asarray(outputs, dtype=np.float64)
    if outputs.shape[-2] != l1 + l2:
        raise ValueError(
            f"sequence length {outputs.shape[-2]} does not equal l1+l2 = {l1 + l2}"
        )
    return outputs[..., l1 : l1 + l2, :]


def universality_block_forward(ub: UniversalityBlock, inputs, dt_fine: float) -> np.ndarray:
    """Integrate the oscillator bank at step dt_fine and apply the MLP readout.

    inputs are samples u(t_n) on the grid t_n = n*dt_fine, n = 1..N, with the
    state starting from rest at t_0 = 0.  Returns the readout on the same grid.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    trans = build_transition(ub.a, dt_fine, "imex")
    g = inputs @ ub.b_in.T + ub.bias
    forcings = forcing_sequence(trans, g)
    states = solve_recurrence_arrays(trans, forcings, mode="parallel")
    y = states[..., ub.a.diag.shape[0] :]
    pre = y @ ub.w_tilde.T + ub.b_tilde
    hidden = np.maximum(pre, 0.0) if ub.activation == "relu" else np.tanh(pre)
    return hidden @ ub.w_out.T


def sine_bank(freqs, input_dim: int = 1) -> UniversalityBlock:
    """A block whose i-th output approximates the windowed sine transform
    of the input at frequency freqs[i].

    Each mode oscillates at its frequency (state matrix entry freq**2); the
    +/- relu pair w_out @ relu(w_tilde y) collapses to freq * y, which tracks
    integral of u(t - s) sin(freq s) ds over the elapsed window.
    """
    freqs = as_float_array(freqs, "freqs")
    if np.any(freqs <= 0):
        raise ValueError("frequencies must be positive")
    m = freqs.shape[0]
    w_tilde = np.concatenate([np.diag(freqs), -np.diag(freqs)])
    w_out = np.concatenate([np.eye(m), -np.eye(m)], axis=1)
    return UniversalityBlock(
        a=EffectiveA(diag=freqs * freqs),
        b_in=np.ones((m, input_dim)),
        bias=np.zeros(m),
        w_tilde=w_tilde,
        b_tilde=np.zeros(2 * m),
        w_out=w_out,
        activation="relu",
    )


def init_model_params(
    p_in: int,
    hidden: int,
    state: int,
    out: int,
    n_blocks: int,
    dt: float,
    init_mode: str = "uniform01",
    param_mode: str = "relu",
    seed=0,
) -> ModelParams:
    """Draw a fresh model; one shared generator so a single seed fixes everything."""
    if min(p_in, hidden, state, out, n_blocks) <= 0:
        raise ValueError("model dimensions must all be positive")
    rng = np.random.default_rng(seed)

    def dense(rows, cols):
        bound = 1.0 / np.sqrt(cols)
        return rng.uniform(-bound, bound, (rows, cols))

    enc_w = dense(hidden, p_in)
    blocks = []
    for _ in range(n_blocks):
        layer = init_params((state, hidden, hidden), dt, init_mode, rng, param_mode)
        blocks.append(
            BlockParams(layer=layer, glu_w1=dense(hidden, hidden), glu_w2=dense(hidden, hidden))
        )
    return ModelParams(
        enc_w=enc_w,
        enc_b=np.zeros(hidden),
        blocks=tuple(blocks),
        dec_w=dense(out, hidden),
        dec_b=np.zeros(out),
    )


# Canonical parameter-array order, used by the optimizer, gradients, and the
# checkpoint format: enc_w, enc_b, then per block i the layer arrays
# (a_hat, b_in, c_out, d_thru, bias) and the two GLU matrices, then dec_w,
# dec_b.

_LAYER_FIELDS = ("a_hat", "b_in", "c_out", "d_thru", "bias")


def flatten_params(params: ModelParams) -> dict[str, np.ndarray]:
    flat: dict[str, np.ndarray] = {"enc_w": params.enc_w, "enc_b": params.enc_b}
    for i, blk in enumerate(params.blocks):
        for field in _LAYER_FIELDS:
            flat[f"block{i}.{field}"] = getattr(blk.layer, field)
        flat[f"block{i}.glu_w1"] = blk.glu_w1
        flat[f"block{i}.glu_w2"] = blk.glu_w2
    flat["dec_w"] = params.dec_w
    flat["dec_b"] = params.dec_b
    return flat


def unflatten_params(
    flat: dict[str, np.ndarray], dt: float, param_mode: str
) -> ModelParams:
    n_blocks = 0
    while f"block{n_blocks}.a_hat" in flat:
        n_blocks += 1
    if n_blocks == 0:
        raise ValueError("no block arrays found")
    blocks = []
    for i in range(n_blocks):
        layer = LayerParams(
            a_hat=flat[f"block{i}.a_hat"],
            b_in=flat[f"block{i}.b_in"],
            c_out=flat[f"block{i}.c_out"],
            d_thru=flat[f"block{i}.d_thru"],
            bias=flat[f"block{i}.bias"],
            dt=dt,
            param_mode=param_mode,
        )
        blocks.append(
            BlockParams(layer=layer, glu_w1=flat[f"block{i}.glu_w1"], glu_w2=flat[f"block{i}.glu_w2"])
        )
    return ModelParams(
        enc_w=flat["enc_w"],
        enc_b=flat["enc_b"],
        blocks=tuple(blocks),
        dec_w=flat["dec_w"],
        dec_b=flat["dec_b"],
    )
