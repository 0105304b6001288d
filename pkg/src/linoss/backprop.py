"""Reverse-mode gradients for the whole model, derived by hand.

The only non-position-wise piece is the linear recurrence x_n = M x_{n-1} + F_n.
Its adjoint is itself a linear recurrence, run backward with the transposed
blocks:

    lam_n = cot_x_n + M^T lam_{n+1},        lam_N = cot_x_N

so the backward pass reuses the scan module (time-reversed, m12/m21 swapped)
and enjoys the same parallel evaluation as the forward pass.  cot_F_n = lam_n,
and the transition-block cotangents accumulate lam_n (x_{n-1})^T mode-wise.
dt is a fixed hyperparameter and gets no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .dynamics import DiscreteTransition, LayerParams, build_transition, forcing_sequence
from .model import (
    BlockParams,
    ModelParams,
    flatten_params,
    gelu,
    gelu_grad,
)
from .scan import _auto_chunk, scan_arrays_parallel, scan_arrays_sequential

__all__ = [
    "LayerCache",
    "ModelCache",
    "adjoint_recurrence",
    "reconstruct_states_imex",
    "layer_backward",
    "model_forward_cached",
    "model_backward",
    "finite_diff_check",
    "report_passed",
]


def _sum_to_vec(prod: np.ndarray) -> np.ndarray:
    """Sum an elementwise product over every axis except the last."""
    return prod.sum(axis=tuple(range(prod.ndim - 1)))


def _outer_sum(cot: np.ndarray, act: np.ndarray) -> np.ndarray:
    """Accumulated outer product: sum over batch and time of cot_i act_j."""
    return np.einsum("...i,...j->ij", cot, act, optimize=True)


def _run_scan(mat_stack: np.ndarray, vecs: np.ndarray, mode: str, chunk_size):
    """Inclusive scan of a shared (4, m) matrix against time-first vecs."""
    n = vecs.shape[0]
    batch_ndim = vecs.ndim - 2
    shape = (n,) + (1,) * batch_ndim + mat_stack.shape
    mats = np.broadcast_to(mat_stack[(None,) * (1 + batch_ndim)], shape)
    if mode == "sequential":
        _, out = scan_arrays_sequential(mats, vecs, need_mats=False)
    else:
        _, out = scan_arrays_parallel(
            mats, vecs, chunk_size if chunk_size else _auto_chunk(n), need_mats=False
        )
    return out


def adjoint_recurrence(
    trans: DiscreteTransition,
    states: np.ndarray,
    cot_states: np.ndarray,
    mode: str = "parallel",
    chunk_size: int | None = None,
):
    """Backward sweep through the recurrence.

    states and cot_states have shape (..., T, 2m).  Returns
    (cot_blocks, cot_forcings): cot_blocks is the (4, m) stack of cotangents
    of the transition diagonals (m11, m12, m21, m22 order), cot_forcings has
    the shape of cot_states.
    """
    states = np.asarray(states, dtype=np.float64)
    cot_states = np.asarray(cot_states, dtype=np.float64)
    if states.shape != cot_states.shape:
        raise ValueError(
            f"states shape {states.shape} and cotangent shape "
            f"{cot_states.shape} differ"
        )
    m = trans.state_dim
    mat = trans.mat()
    mat_t = np.stack([mat[0], mat[2], mat[1], mat[3]])

    rev = np.ascontiguousarray(np.moveaxis(cot_states, -2, 0)[::-1])
    lam_rev = _run_scan(mat_t, rev, mode, chunk_size)
    lam = np.moveaxis(lam_rev[::-1], 0, -2)

    # x_n = M x_{n-1} + F_n couples lam_n with x_{n-1}; x_0 = 0 drops n = 1
    lz, ly = lam[..., 1:, :m], lam[..., 1:, m:]
    pz, py = states[..., :-1, :m], states[..., :-1, m:]
    if states.shape[-2] > 1:
        cot_blocks = np.stack(
            [
                _sum_to_vec(lz * pz),
                _sum_to_vec(lz * py),
                _sum_to_vec(ly * pz),
                _sum_to_vec(ly * py),
            ]
        )
    else:
        cot_blocks = np.zeros((4, m))
    return cot_blocks, lam


def reconstruct_states_imex(
    trans: DiscreteTransition, final_state: np.ndarray, forcings: np.ndarray
) -> np.ndarray:
    """Rebuild the state sequence backward from x_N by exact inversion.

    The implicit-explicit blocks have determinant one, so
    x_{n-1} = M^{-1} (x_n - F_n) with M^{-1} = [[m22, -m12], [-m21, m11]]
    reverses the recurrence to rounding.  forcings has time on axis -2.
    """
    if trans.scheme != "imex":
        raise ValueError("exact reversal is only available for scheme 'imex'")
    m = trans.state_dim
    n = forcings.shape[-2]
    states = np.empty_like(forcings)
    states[..., n - 1, :] = final_state
    cur = np.asarray(final_state, dtype=np.float64)
    for i in range(n - 1, 0, -1):
        wz = cur[..., :m] - forcings[..., i, :m]
        wy = cur[..., m:] - forcings[..., i, m:]
        prev_z = trans.m22 * wz - trans.m12 * wy
        prev_y = -trans.m21 * wz + trans.m11 * wy
        cur = np.concatenate([prev_z, prev_y], axis=-1)
        states[..., i - 1, :] = cur
    return states


def _cot_a_from_blocks(
    trans: DiscreteTransition,
    a_diag: np.ndarray,
    cot_blocks: np.ndarray,
    cot_fzn: np.ndarray,
    cot_fyn: np.ndarray,
    cot_fznext,
) -> np.ndarray:
    """Chain the block and forcing-coefficient cotangents into cot_A."""
    dt = trans.dt
    c11, c12, c21, c22 = cot_blocks
    if trans.scheme == "im":
        s = trans.m11
        cot_s = (
            c11 + c22 - dt * a_diag * c12 + dt * c21 + dt * cot_fzn + dt * dt * cot_fyn
        )
        return -dt * s * c12 - dt * dt * s * s * cot_s
    if trans.scheme == "imex":
        return -dt * c12 - dt * dt * c22
    # vv: m11 = m22 = 1 - (dt^2/2) A, m12 = -dt A + (dt^3/4) A^2,
    #     fz_n = dt/2 - (dt^3/4) A; m21 and the other coefficients are constant
    return (
        -0.5 * dt * dt * (c11 + c22)
        + (-dt + 0.5 * dt**3 * a_diag) * c12
        - 0.25 * dt**3 * cot_fzn
    )


def _cot_a_hat(params: LayerParams, cot_a: np.ndarray) -> np.ndarray:
    if params.param_mode == "relu":
        # subgradient at exactly 0 is 0
        return np.where(params.a_hat > 0, cot_a, 0.0)
    return 2.0 * params.a_hat * cot_a


@dataclass
class LayerCache:
    """Forward tape of one oscillator layer."""

    u_in: np.ndarray
    g: np.ndarray
    r: np.ndarray
    states: np.ndarray | None
    final_state: np.ndarray


@dataclass
class ModelCache:
    """Forward tape of the whole model: per-block layer tapes plus the
    pre-gelu readouts are enough; cheap position-wise values are recomputed."""

    inputs: np.ndarray
    encoded: np.ndarray
    layers: list[LayerCache]
    final: np.ndarray


def _layer_forward_tape(
    params: LayerParams,
    scheme: str,
    u_in: np.ndarray,
    mode: str,
    chunk_size,
    store_states: bool,
) -> LayerCache:
    trans = build_transition(params.effective_a(), params.dt, scheme)
    g = u_in @ params.b_in.T + params.bias
    forcings = forcing_sequence(trans, g)
    f_t = np.ascontiguousarray(np.moveaxis(forcings, -2, 0))
    states_t = _run_scan(trans.mat(), f_t, mode, chunk_size)
    states = np.moveaxis(states_t, 0, -2)
    y = states[..., params.state_dim :]
    r = y @ params.c_out.T + u_in @ params.d_thru.T
    final = np.ascontiguousarray(states[..., -1, :])
    return LayerCache(
        u_in=u_in,
        g=g,
        r=r,
        states=states if store_states else None,
        final_state=final,
    )


def model_forward_cached(
    params: ModelParams,
    scheme: str,
    inputs,
    mode: str = "parallel",
    chunk_size: int | None = None,
    store_states: bool = True,
):
    """Forward pass recording what the backward pass needs.

    store_states=False keeps only each layer's final state (valid for scheme
    'imex', whose steps are exactly invertible); model_backward then needs
    recompute='imex-reversal'.
    """
    if not store_states and scheme != "imex":
        raise ValueError("dropping stored states requires scheme 'imex'")
    inputs = np.asarray(inputs, dtype=np.float64)
    encoded = inputs @ params.enc_w.T + params.enc_b
    u = encoded
    layers = []
    for blk in params.blocks:
        tape = _layer_forward_tape(blk.layer, scheme, u, mode, chunk_size, store_states)
        a1 = gelu(tape.r)
        u = expit(a1 @ blk.glu_w1.T) * (a1 @ blk.glu_w2.T) + u
        layers.append(tape)
    outputs = u @ params.dec_w.T + params.dec_b
    return outputs, ModelCache(inputs=inputs, encoded=encoded, layers=layers, final=u)


def layer_backward(
    params: LayerParams,
    scheme: str,
    cache: LayerCache,
    cot_r: np.ndarray,
    mode: str = "parallel",
    chunk_size: int | None = None,
    recompute: str | None = None,
):
    """Gradients of the oscillator layer; returns (grads, cot_u_in)."""
    m = params.state_dim
    trans = build_transition(params.effective_a(), params.dt, scheme)
    states = cache.states
    if recompute == "imex-reversal":
        forcings = forcing_sequence(trans, cache.g)
        states = reconstruct_states_imex(trans, cache.final_state, forcings)
    elif recompute is not None:
        raise ValueError(f"unknown recompute mode {recompute!r}")
    elif states is None:
        raise ValueError("no stored states; run backward with recompute='imex-reversal'")
    y = states[..., m:]

    cot_y = cot_r @ params.c_out
    grads = {
        "c_out": _outer_sum(cot_r, y),
        "d_thru": _outer_sum(cot_r, cache.u_in),
    }
    cot_u = cot_r @ params.d_thru

    cot_states = np.concatenate([np.zeros_like(cot_y), cot_y], axis=-1)
    cot_blocks, lam = adjoint_recurrence(trans, states, cot_states, mode, chunk_size)
    cot_fz, cot_fy = lam[..., :m], lam[..., m:]

    cot_fyn = _sum_to_vec(cot_fy * cache.g)
    if trans.scheme == "vv":
        g_next = np.concatenate(
            [cache.g[..., 1:, :], cache.g[..., -1:, :]], axis=-2
        )
        cot_fzn = _sum_to_vec(cot_fz * cache.g)
        cot_fznext = _sum_to_vec(cot_fz * g_next)
        cot_g = trans.fz_n * cot_fz + trans.fy_n * cot_fy
        # the one-ahead read of g: g_{i+1} feeds F_i, and the replicated
        # final drive feeds F_{N-1} a second time
        cot_g[..., 1:, :] += trans.fz_next * cot_fz[..., :-1, :]
        cot_g[..., -1, :] += trans.fz_next * cot_fz[..., -1, :]
    else:
        cot_fzn = _sum_to_vec(cot_fz * cache.g)
        cot_fznext = None
        cot_g = trans.fz_n * cot_fz + trans.fy_n * cot_fy

    grads["bias"] = _sum_to_vec(cot_g)
    grads["b_in"] = _outer_sum(cot_g, cache.u_in)
    cot_u = cot_u + cot_g @ params.b_in

    cot_a = _cot_a_from_blocks(trans, params.effective_a().diag, cot_blocks, cot_fzn, cot_fyn, cot_fznext)
    grads["a_hat"] = _cot_a_hat(params, cot_a)
    return grads, cot_u


def _block_backward(
    block: BlockParams,
    scheme: str,
    cache: LayerCache,
    cot_out: np.ndarray,
    mode: str,
    chunk_size,
    recompute,
):
    a1 = gelu(cache.r)
    p1 = a1 @ block.glu_w1.T
    p2 = a1 @ block.glu_w2.T
    sg = expit(p1)

    cot_p2 = cot_out * sg
    cot_p1 = cot_out * p2 * sg * (1.0 - sg)
    grads = {
        "glu_w1": _outer_sum(cot_p1, a1),
        "glu_w2": _outer_sum(cot_p2, a1),
    }
    cot_a1 = cot_p1 @ block.glu_w1 + cot_p2 @ block.glu_w2
    cot_r = cot_a1 * gelu_grad(cache.r)
    layer_grads, cot_u = layer_backward(
        block.layer, scheme, cache, cot_r, mode, chunk_size, recompute
    )
    grads.update(layer_grads)
    # the skip path passes cot_out straight through
    return grads, cot_u + cot_out


def model_backward(
    params: ModelParams,
    scheme: str,
    cache: ModelCache,
    cot_outputs,
    mode: str = "parallel",
    chunk_size: int | None = None,
    recompute: str | None = None,
) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. every parameter array.

    cot_outputs is the loss cotangent of model_forward's output array.
    Returns a dict keyed like flatten_params.  recompute='imex-reversal'
    rebuilds layer states from their final values instead of reading the
    stored arrays.
    """
    cot_outputs = np.asarray(cot_outputs, dtype=np.float64)
    if not np.all(np.isfinite(cot_outputs)):
        raise ValueError("non-finite loss cotangent; refusing to run backward")
    grads: dict[str, np.ndarray] = {
        "dec_w": _outer_sum(cot_outputs, cache.final),
        "dec_b": _sum_to_vec(cot_outputs),
    }
    cot_u = cot_outputs @ params.dec_w
    for i in range(len(params.blocks) - 1, -1, -1):
        block_grads, cot_u = _block_backward(
            params.blocks[i], scheme, cache.layers[i], cot_u, mode, chunk_size, recompute
        )
        for field, value in block_grads.items():
            grads[f"block{i}.{field}"] = value
    grads["enc_w"] = _outer_sum(cot_u, cache.inputs)
    grads["enc_b"] = _sum_to_vec(cot_u)
    return grads


def finite_diff_check(
    loss_fn,
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    step: float = 1e-6,
    tolerance: float = 1e-5,
    abs_floor: float = 1e-8,
    max_coords: int = 200,
    seed=0,
    skip: dict[str, np.ndarray] | None = None,
) -> dict[str, dict]:
    """Central-difference audit of an analytic gradient.

    loss_fn maps a params dict to a scalar.  Checks at most max_coords
    random coordinates per array (all of them for small arrays); skip[name]
    marks coordinates to leave out (e.g. near a relu kink).  A coordinate
    passes when |fd - analytic| <= max(tolerance * scale, abs_floor) with
    scale = max(|fd|, |analytic|).
    """
    rng = np.random.default_rng(seed)
    report: dict[str, dict] = {}
    for name in sorted(params):
        base = params[name]
        grad = analytic[name]
        if grad.shape != base.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        flat_skip = None if skip is None or name not in skip else skip[name].ravel()
        size = base.size
        coords = np.arange(size)
        if flat_skip is not None:
            coords = coords[~flat_skip]
        if coords.size > max_coords:
            coords = rng.choice(coords, size=max_coords, replace=False)
        max_abs = 0.0
        max_rel = 0.0
        ok = True
        worst = None
        for c in coords:
            bumped = dict(params)
            plus = base.copy().ravel()
            plus[c] += step
            bumped[name] = plus.reshape(base.shape)
            f_plus = loss_fn(bumped)
            minus = base.copy().ravel()
            minus[c] -= step
            bumped[name] = minus.reshape(base.shape)
            f_minus = loss_fn(bumped)
            fd = (f_plus - f_minus) / (2.0 * step)
            an = grad.ravel()[c]
            err = abs(fd - an)
            scale = max(abs(fd), abs(an))
            rel = err / scale if scale > 0 else 0.0
            if err > max_abs:
                max_abs = err
            if rel > max_rel and err > abs_floor:
                max_rel = rel
                worst = (int(c), float(fd), float(an))
            if err > max(tolerance * scale, abs_floor):
                ok = False
        report[name] = {
            "checked": int(coords.size),
            "max_abs_err": max_abs,
            "max_rel_err": max_rel,
            "worst": worst,
            "passed": ok,
        }
    return report


def report_passed(report: dict[str, dict]) -> bool:
    return all(entry["passed"] for entry in report.values())
