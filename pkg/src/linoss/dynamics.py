"""Diagonal oscillator core: parameterization and one-step transition assembly.

A layer is a bank of m independent second-order modes y'' = -A y + B u + b
with diagonal nonnegative A, integrated by one of three schemes:

* ``im``    fully implicit step; contracts energy (dissipative),
* ``imex``  implicit in the position update only; preserves a discrete
  energy exactly (symplectic),
* ``vv``    velocity Verlet; also symplectic.

The first-order state is x = [z; y] with the velocity-like half z first for
every scheme.  All transition matrices are 2x2 grids of diagonal m-blocks and
are stored as four length-m vectors; nothing in this module ever materializes
a dense 2m x 2m matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import as_float_array, check_finite

__all__ = [
    "SCHEMES",
    "PARAM_MODES",
    "INIT_MODES",
    "EffectiveA",
    "DiscreteTransition",
    "State",
    "LayerParams",
    "parameterize_A",
    "build_transition",
    "assemble_forcing",
    "forcing_from_drive",
    "forcing_sequence",
    "step",
    "init_params",
]

SCHEMES = ("im", "imex", "vv")
PARAM_MODES = ("relu", "squared")
INIT_MODES = ("uniform01", "gaussian")


@dataclass(frozen=True)
class EffectiveA:
    """Nonnegative diagonal of the state matrix, after parameterization."""

    diag: np.ndarray
    mode: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "diag", as_float_array(self.diag, "A diagonal"))
        if self.diag.ndim != 1:
            raise ValueError(f"A diagonal must be a vector, got shape {self.diag.shape}")
        check_finite(self.diag, "A diagonal")
        if np.any(self.diag < 0):
            raise ValueError("stability precondition violated: A has a negative entry")


@dataclass(frozen=True)
class DiscreteTransition:
    """One-step transition for a chosen scheme.

    ``m11, m12, m21, m22`` are the diagonal blocks of the transition matrix in
    [z; y] ordering (m11 maps z to z, m12 maps y to z, and so on).  The f*
    vectors are the elementwise coefficients that turn the drive g_n = B u_n + b
    into the step forcing: f_z = fz_n * g_n (+ fz_next * g_{n+1} for vv),
    f_y = fy_n * g_n.
    """

    scheme: str
    dt: float
    m11: np.ndarray
    m12: np.ndarray
    m21: np.ndarray
    m22: np.ndarray
    fz_n: np.ndarray
    fy_n: np.ndarray
    fz_next: np.ndarray | None = None

    @property
    def state_dim(self) -> int:
        return self.m11.shape[0]

    def mat(self) -> np.ndarray:
        """The four diagonal blocks stacked as a (4, m) array."""
        return np.stack([self.m11, self.m12, self.m21, self.m22])


@dataclass(frozen=True)
class State:
    """State of the oscillator bank: velocity half z, position half y."""

    z: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z", as_float_array(self.z, "z"))
        object.__setattr__(self, "y", as_float_array(self.y, "y"))
        if self.z.shape != self.y.shape or self.z.ndim != 1:
            raise ValueError(
                f"z and y must be equal-length vectors, got {self.z.shape} and {self.y.shape}"
            )
        check_finite(self.z, "z")
        check_finite(self.y, "y")

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "State":
        x = as_float_array(x, "state vector")
        m = x.shape[-1] // 2
        return cls(z=x[..., :m], y=x[..., m:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.z, self.y])


@dataclass(frozen=True)
class LayerParams:
    """Weights of one oscillator layer.

    a_hat is the raw (unconstrained) diagonal; the effective state matrix is
    relu(a_hat) or a_hat**2 depending on param_mode.  b_in drives the modes
    from the input, c_out reads the position half out, d_thru is the direct
    input-to-readout term, bias shifts the drive.
    """

    a_hat: np.ndarray  # (m,)
    b_in: np.ndarray   # (m, p)
    c_out: np.ndarray  # (q, m)
    d_thru: np.ndarray # (q, p)
    bias: np.ndarray   # (m,)
    dt: float
    param_mode: str = "relu"

    def __post_init__(self):
        for name in ("a_hat", "b_in", "c_out", "d_thru", "bias"):
            arr = as_float_array(getattr(self, name), name)
            check_finite(arr, name)
            object.__setattr__(self, name, arr)
        m = self.a_hat.shape[0]
        p = self.b_in.shape[1]
        q = self.c_out.shape[0]
        if self.a_hat.ndim != 1 or self.bias.shape != (m,):
            raise ValueError("a_hat and bias must be length-m vectors")
        if self.b_in.shape != (m, p) or self.c_out.shape != (q, m) or self.d_thru.shape != (q, p):
            raise ValueError(
                f"inconsistent layer shapes: b_in {self.b_in.shape}, "
                f"c_out {self.c_out.shape}, d_thru {self.d_thru.shape}"
            )
        if not (0.0 < self.dt <= 1.0):
            raise ValueError(f"dt must lie in (0, 1], got {self.dt}")
        if self.param_mode not in PARAM_MODES:
            raise ValueError(f"unknown param_mode {self.param_mode!r}")

    @property
    def state_dim(self) -> int:
        return self.a_hat.shape[0]

    def effective_a(self) -> EffectiveA:
        return parameterize_A(self.a_hat, self.param_mode)


def parameterize_A(a_hat, mode: str) -> EffectiveA:
    """Map the raw diagonal to a nonnegative one: relu(a_hat) or a_hat**2."""
    a_hat = as_float_array(a_hat, "a_hat")
    check_finite(a_hat, "a_hat")
    if mode == "relu":
        diag = np.maximum(a_hat, 0.0)
    elif mode == "squared":
        diag = a_hat * a_hat
    else:
        raise ValueError(f"unknown parameterization mode {mode!r}")
    return EffectiveA(diag=diag, mode=mode)


def build_transition(a, dt: float, scheme: str) -> DiscreteTransition:
    """Assemble the diagonal-block one-step matrix and forcing coefficients.

    Cost is O(m).  For the implicit scheme the inverse of the step matrix is
    applied through its diagonal Schur factor s = 1 / (1 + dt^2 a), never by
    dense inversion.
    """
    diag = a.diag if isinstance(a, EffectiveA) else as_float_array(a, "A diagonal")
    if np.any(diag < 0):
        raise ValueError("stability precondition violated: A has a negative entry")
    if not (0.0 < dt <= 1.0):
        raise ValueError(f"dt must lie in (0, 1], got {dt}")
    dt = float(dt)
    ones = np.ones_like(diag)

    if scheme == "im":
        s = 1.0 / (1.0 + dt * dt * diag)
        return DiscreteTransition(
            scheme=scheme, dt=dt,
            m11=s, m12=-dt * diag * s, m21=dt * s, m22=s.copy(),
            fz_n=dt * s, fy_n=dt * dt * s,
        )
    if scheme == "imex":
        return DiscreteTransition(
            scheme=scheme, dt=dt,
            m11=ones, m12=-dt * diag, m21=dt * ones, m22=1.0 - dt * dt * diag,
            fz_n=dt * ones, fy_n=dt * dt * ones,
        )
    if scheme == "vv":
        half = 1.0 - 0.5 * dt * dt * diag
        return DiscreteTransition(
            scheme=scheme, dt=dt,
            m11=half, m12=-dt * diag * (1.0 - 0.25 * dt * dt * diag),
            m21=dt * ones, m22=half.copy(),
            fz_n=0.5 * dt * ones - 0.25 * dt**3 * diag,
            fy_n=0.5 * dt * dt * ones,
            fz_next=0.5 * dt * ones,
        )
    raise ValueError(f"unknown scheme {scheme!r}")


def forcing_from_drive(trans: DiscreteTransition, g, g_next=None) -> np.ndarray:
    """Turn drive vectors g_n = B u_n + b into a step forcing [f_z; f_y].

    Broadcasts over leading axes of g.  g_next is required exactly when the
    scheme is vv (its velocity update looks one sample ahead).
    """
    g = np.asarray(g, dtype=np.float64)
    if trans.scheme == "vv":
        if g_next is None:
            raise ValueError("scheme 'vv' requires the next input sample u_next")
        g_next = np.asarray(g_next, dtype=np.float64)
        f_z = trans.fz_n * g + trans.fz_next * g_next
    else:
        if g_next is not None:
            raise ValueError(f"scheme {trans.scheme!r} takes no u_next")
        f_z = trans.fz_n * g
    f_y = trans.fy_n * g
    return np.concatenate([f_z, f_y], axis=-1)


def forcing_sequence(trans: DiscreteTransition, g_seq: np.ndarray) -> np.ndarray:
    """Forcings for a whole drive sequence, time on the second-to-last axis.

    For vv the final step needs a sample past the end; the last drive is
    replicated (u_{N+1} := u_N).
    """
    g_seq = np.asarray(g_seq, dtype=np.float64)
    if trans.scheme == "vv":
        g_next = np.concatenate([g_seq[..., 1:, :], g_seq[..., -1:, :]], axis=-2)
        return forcing_from_drive(trans, g_seq, g_next)
    return forcing_from_drive(trans, g_seq)


def assemble_forcing(trans: DiscreteTransition, b_in, u_n, u_next=None) -> np.ndarray:
    """Step forcing from a raw input sample: the drive is b_in @ u_n (no bias)."""
    b_in = as_float_array(b_in, "b_in")
    g = b_in @ as_float_array(u_n, "u_n")
    g_next = None
    if u_next is not None:
        g_next = b_in @ as_float_array(u_next, "u_next")
    return forcing_from_drive(trans, g, g_next)


def step(trans: DiscreteTransition, x_prev: State, f) -> State:
    """One recurrence step x_n = M x_{n-1} + f in O(m)."""
    f = np.asarray(f, dtype=np.float64)
    if np.ndim(f) == 0:
        f = np.zeros(2 * trans.state_dim) + f
    m = trans.state_dim
    z = trans.m11 * x_prev.z + trans.m12 * x_prev.y + f[:m]
    y = trans.m21 * x_prev.z + trans.m22 * x_prev.y + f[m:]
    return State(z=z, y=y)


def init_params(
    dims: tuple[int, int, int],
    dt: float,
    init_mode: str,
    seed,
    param_mode: str = "relu",
) -> LayerParams:
    """Draw fresh layer weights.

    dims is (m, p, q): state width, input width, readout width.  a_hat comes
    from U[0,1] (uniform01) or the standard normal (gaussian); the gaussian
    draw only makes sense with the squared parameterization, since relu would
    silence roughly half the modes, so that combination is rejected.  The
    dense matrices use U(-1/sqrt(fan_in), 1/sqrt(fan_in)); the drive bias
    starts at zero.
    """
    m, p, q = dims
    if min(m, p, q) <= 0:
        raise ValueError(f"dims must be positive, got {dims}")
    if init_mode not in INIT_MODES:
        raise ValueError(f"unknown init_mode {init_mode!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    if init_mode == "gaussian":
        if param_mode == "relu":
            raise ValueError(
                "incompatible: ReLU would disable ~half the dimensions; "
                "use param_mode='squared' with gaussian init"
            )
        a_hat = rng.standard_normal(m)
    else:
        a_hat = rng.uniform(0.0, 1.0, m)

    def dense(rows, cols, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, (rows, cols))

    return LayerParams(
        a_hat=a_hat,
        b_in=dense(m, p, p),
        c_out=dense(q, m, m),
        d_thru=dense(q, p, p),
        bias=np.zeros(m),
        dt=float(dt),
        param_mode=param_mode,
    )
