"""Associative prefix scans over (block-diagonal matrix, vector) pairs.

The scanned element is a pair (M, F): M a 2x2 grid of diagonal m-blocks
stored as a (4, m) array in row order [m11, m12, m21, m22], F a 2m-vector.
The binary operation

    combine(a, b) = (b.M @ a.M,  b.M @ a.F + b.F)

is associative, and the inclusive prefix scan of [(M, F_1), ..., (M, F_N)]
leaves the solution of x_n = M x_{n-1} + F_n with x_0 = 0 in the vector slot
of element n.

Two evaluation strategies produce the same prefixes:

* sequential: a strict left-to-right fold (the reference semantics),
* parallel:   a chunked two-pass scan.  Each fixed-size chunk is scanned
  left-to-right (vectorized across chunks), the per-chunk aggregates are
  scanned with a stride-doubling pass of log2(#chunks) sweeps, and each
  chunk's incoming prefix is then combined into its local results in one
  broadcast step.

For a fixed chunk_size the parallel evaluation tree is fixed, so repeated
runs are bit-identical.  Across the two modes the grouping of floating-point
operations differs, so results agree to ~1e-12, not bitwise; with a single
chunk (chunk_size >= N) the parallel path runs the sequential fold and the
outputs are bitwise equal.

Vector slots may carry extra batch axes between the time axis and the 2m
axis; matrices then keep singleton axes in those positions so the matrix half
of the combine cost is shared across the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DiscreteTransition, State

__all__ = [
    "ScanElement",
    "identity_element",
    "combine",
    "scan_sequential",
    "scan_parallel",
    "solve_recurrence",
    "solve_recurrence_arrays",
]


@dataclass(frozen=True)
class ScanElement:
    """One (matrix, vector) pair; mat is (4, m), vec is (2m,)."""

    mat: np.ndarray
    vec: np.ndarray

    def __post_init__(self):
        mat = np.asarray(self.mat, dtype=np.float64)
        vec = np.asarray(self.vec, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] != 4:
            raise ValueError(f"mat must have shape (4, m), got {mat.shape}")
        if vec.shape[-1] != 2 * mat.shape[1]:
            raise ValueError(
                f"vec length {vec.shape[-1]} does not match 2*m = {2 * mat.shape[1]}"
            )
        object.__setattr__(self, "mat", mat)
        object.__setattr__(self, "vec", vec)


def identity_element(m: int) -> ScanElement:
    mat = np.zeros((4, m))
    mat[0] = 1.0
    mat[3] = 1.0
    return ScanElement(mat=mat, vec=np.zeros(2 * m))


# --- array kernels -------------------------------------------------------
# mats: (..., 4, m); vecs: (..., 2m).  _mat_mul(a, b) is the product
# "b after a" (i.e. b @ a); _mat_vec applies a matrix to a vector.

def _mat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a11, a12, a21, a22 = a[..., 0, :], a[..., 1, :], a[..., 2, :], a[..., 3, :]
    b11, b12, b21, b22 = b[..., 0, :], b[..., 1, :], b[..., 2, :], b[..., 3, :]
    return np.stack(
        [
            b11 * a11 + b12 * a21,
            b11 * a12 + b12 * a22,
            b21 * a11 + b22 * a21,
            b21 * a12 + b22 * a22,
        ],
        axis=-2,
    )


def _mat_vec(mat: np.ndarray, vec: np.ndarray) -> np.ndarray:
    m = mat.shape[-1]
    vz, vy = vec[..., :m], vec[..., m:]
    top = mat[..., 0, :] * vz + mat[..., 1, :] * vy
    bot = mat[..., 2, :] * vz + mat[..., 3, :] * vy
    return np.concatenate([top, bot], axis=-1)


def combine(a: ScanElement, b: ScanElement) -> ScanElement:
    """The associative operation; O(m) via the diagonal-block structure."""
    if a.mat.shape != b.mat.shape:
        raise ValueError(f"element widths differ: {a.mat.shape} vs {b.mat.shape}")
    return ScanElement(mat=_mat_mul(a.mat, b.mat), vec=_mat_vec(b.mat, a.vec) + b.vec)


def _check_nonempty(n: int) -> None:
    if n == 0:
        raise ValueError("scan input must be nonempty")


def scan_arrays_sequential(mats: np.ndarray, vecs: np.ndarray, need_mats: bool = True):
    """Left-to-right inclusive scan on stacked arrays; the reference fold."""
    n = mats.shape[0]
    _check_nonempty(n)
    out_vecs = np.empty_like(vecs)
    out_vecs[0] = vecs[0]
    for i in range(1, n):
        out_vecs[i] = _mat_vec(mats[i], out_vecs[i - 1]) + vecs[i]
    out_mats = None
    if need_mats:
        out_mats = np.empty_like(mats)
        out_mats[0] = mats[0]
        for i in range(1, n):
            out_mats[i] = _mat_mul(out_mats[i - 1], mats[i])
    return out_mats, out_vecs


def _auto_chunk(n: int) -> int:
    return max(1, int(np.sqrt(n)))


def scan_arrays_parallel(
    mats: np.ndarray, vecs: np.ndarray, chunk_size: int, need_mats: bool = True
):
    """Chunked two-pass inclusive scan on stacked arrays."""
    n = mats.shape[0]
    _check_nonempty(n)
    if chunk_size <= 0:
        raise ValueError("chunk_size must be a positive integer")
    if chunk_size >= n:
        return scan_arrays_sequential(mats, vecs, need_mats=need_mats)

    n_chunks = -(-n // chunk_size)
    pad = n_chunks * chunk_size - n
    if pad:
        # identity padding at the tail: prefixes of real positions are unchanged
        pad_mats = np.zeros((pad,) + mats.shape[1:])
        pad_mats[..., 0, :] = 1.0
        pad_mats[..., 3, :] = 1.0
        mats = np.concatenate([mats, pad_mats])
        vecs = np.concatenate([vecs, np.zeros((pad,) + vecs.shape[1:])])

    cm = mats.reshape((n_chunks, chunk_size) + mats.shape[1:]).copy()
    cv = vecs.reshape((n_chunks, chunk_size) + vecs.shape[1:]).copy()

    # pass 1: strict left-to-right scan inside every chunk, all chunks at once.
    # The vec update reads the not-yet-overwritten element matrix at j.
    for j in range(1, chunk_size):
        cv[:, j] = _mat_vec(cm[:, j], cv[:, j - 1]) + cv[:, j]
        cm[:, j] = _mat_mul(cm[:, j - 1], cm[:, j])

    # pass 2: stride-doubling scan over the chunk aggregates (fixed tree)
    agg_m = cm[:, -1].copy()
    agg_v = cv[:, -1].copy()
    stride = 1
    while stride < n_chunks:
        prev_m = agg_m.copy()
        prev_v = agg_v.copy()
        agg_v[stride:] = _mat_vec(prev_m[stride:], prev_v[:-stride]) + prev_v[stride:]
        agg_m[stride:] = _mat_mul(prev_m[:-stride], prev_m[stride:])
        stride *= 2

    # pass 3: fold each chunk's incoming prefix into its local results
    cv[1:] = _mat_vec(cm[1:], agg_v[:-1, None]) + cv[1:]
    if need_mats:
        cm[1:] = _mat_mul(agg_m[:-1, None], cm[1:])

    out_vecs = cv.reshape(vecs.shape)[:n]
    out_mats = cm.reshape(mats.shape)[:n] if need_mats else None
    return out_mats, out_vecs


def _stack_elements(elems):
    elems = list(elems)
    _check_nonempty(len(elems))
    mats = np.stack([e.mat for e in elems])
    vecs = np.stack([e.vec for e in elems])
    return mats, vecs


def scan_sequential(elems) -> list[ScanElement]:
    """Inclusive prefix scan by left-to-right folding."""
    mats, vecs = _stack_elements(elems)
    out_mats, out_vecs = scan_arrays_sequential(mats, vecs)
    return [ScanElement(m, v) for m, v in zip(out_mats, out_vecs)]


def scan_parallel(elems, chunk_size: int) -> list[ScanElement]:
    """Inclusive prefix scan by the chunked two-pass strategy.

    Same mathematical result as scan_sequential; bit-identical across runs
    for a fixed chunk_size.
    """
    mats, vecs = _stack_elements(elems)
    out_mats, out_vecs = scan_arrays_parallel(mats, vecs, chunk_size)
    return [ScanElement(m, v) for m, v in zip(out_mats, out_vecs)]


def solve_recurrence_arrays(
    trans: DiscreteTransition,
    forcings: np.ndarray,
    mode: str = "parallel",
    chunk_size: int | None = None,
) -> np.ndarray:
    """States x_1..x_N of x_n = M x_{n-1} + F_n, x_0 = 0, as one array.

    forcings has time first: (N, ..., 2m), batch axes in the middle.  The
    shared transition matrix is given singleton batch axes so its share of the
    combine cost does not scale with the batch.
    """
    forcings = np.asarray(forcings, dtype=np.float64)
    if forcings.ndim < 1:
        raise ValueError("forcings must have a time axis")
    n = forcings.shape[0]
    _check_nonempty(n)
    batch_ndim = max(forcings.ndim - 2, 0)
    shape = (n,) + (1,) * batch_ndim + (4, trans.state_dim)
    # read-only broadcast view; the parallel path copies before mutating
    mats = np.broadcast_to(trans.mat()[(None,) * (1 + batch_ndim)], shape)
    if mode == "sequential":
        _, states = scan_arrays_sequential(mats, forcings, need_mats=False)
    elif mode == "parallel":
        _, states = scan_arrays_parallel(
            mats, forcings, chunk_size if chunk_size else _auto_chunk(n), need_mats=False
        )
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return states


def solve_recurrence(
    trans: DiscreteTransition,
    forcings,
    mode: str = "parallel",
    chunk_size: int | None = None,
) -> list[State]:
    """Solve the layer recurrence for a single sequence of forcing vectors."""
    forcings = np.asarray(forcings, dtype=np.float64)
    states = solve_recurrence_arrays(trans, forcings, mode=mode, chunk_size=chunk_size)
    return [State.from_vector(x) for x in states]
