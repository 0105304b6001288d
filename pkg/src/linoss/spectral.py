"""Eigenspectrum analysis, magnitude moments, and energy functionals.

Everything here works per decoupled 2x2 mode of the block transition matrix;
nothing ever assembles the full 2m x 2m matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import EffectiveA, build_transition
from .validation import as_float_array

__all__ = [
    "SpectrumReport",
    "eigvals_im",
    "eigvals_imex",
    "eigvals_numeric",
    "moment_im",
    "moment_mc",
    "hamiltonian",
    "imex_invariant",
    "spectrum_report",
]


def _diag_of(a) -> np.ndarray:
    if isinstance(a, EffectiveA):
        return a.diag
    arr = as_float_array(a, "A")
    if np.any(arr < 0):
        raise ValueError("state matrix diagonal must be nonnegative")
    return arr


def _paired(upper: np.ndarray) -> np.ndarray:
    """Stack m upper-half-plane values with their conjugates (j and j+m pair)."""
    return np.concatenate([upper, np.conj(upper)])


def eigvals_im(a, dt: float) -> np.ndarray:
    """Closed-form eigenvalues of the implicit one-step map.

    Per mode k: lambda = s +/- i dt sqrt(A_k) s with s = 1/(1 + dt^2 A_k),
    so |lambda|^2 = s <= 1 always.
    """
    diag = _diag_of(a)
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = 1.0 / (1.0 + dt * dt * diag)
    return _paired(s + 1j * dt * np.sqrt(diag) * s)


def eigvals_imex(a, dt: float) -> np.ndarray:
    """Closed-form eigenvalues of the implicit-explicit one-step map.

    Requires A > 0 elementwise and dt <= 2/sqrt(max A); then every modulus is
    exactly 1: lambda = (2 - dt^2 A)/2 +/- (i/2) sqrt(dt^2 A (4 - dt^2 A)).
    """
    diag = _diag_of(a)
    if dt <= 0:
        raise ValueError("dt must be positive")
    bad = np.flatnonzero(diag <= 0)
    if bad.size:
        raise ValueError(
            f"unit-modulus spectrum needs strictly positive A; mode {bad[0]} "
            f"has A = {diag[bad[0]]}"
        )
    x = dt * dt * diag
    bad = np.flatnonzero(x > 4.0)
    if bad.size:
        k = bad[0]
        raise ValueError(
            f"step size too large for mode {k}: dt^2 A = {x[k]:.6g} > 4 "
            f"(requires dt <= 2/sqrt(max A))"
        )
    # x(4-x) >= 0 in-domain; clamp rounding residue at the boundary
    root = np.sqrt(np.maximum(x * (4.0 - x), 0.0))
    return _paired(0.5 * (2.0 - x) + 0.5j * root)


def eigvals_numeric(scheme: str, a, dt: float) -> np.ndarray:
    """Dense per-mode 2x2 eigendecomposition; works for every scheme.

    This is the oracle the closed forms are checked against, and the only
    eigenvalue path for the leapfrog scheme.
    """
    diag = _diag_of(a)
    trans = build_transition(EffectiveA(diag), dt, scheme)
    m = diag.shape[0]
    blocks = np.empty((m, 2, 2))
    blocks[:, 0, 0] = trans.m11
    blocks[:, 0, 1] = trans.m12
    blocks[:, 1, 0] = trans.m21
    blocks[:, 1, 1] = trans.m22
    vals = np.linalg.eigvals(blocks)  # (m, 2)
    # put the nonnegative-imaginary root first to match the pairing convention
    first = np.where(vals[:, 0].imag >= 0, vals[:, 0], vals[:, 1])
    second = np.where(vals[:, 0].imag >= 0, vals[:, 1], vals[:, 0])
    return np.concatenate([first, second])


def moment_im(n_power: int, dt: float, a_max: float) -> float:
    """Average of |lambda|^n over A ~ U([0, a_max]) for the implicit scheme.

    Closed form ((1+x)^(1-n/2) - 1) / (x (1 - n/2)) with x = dt^2 a_max; the
    removable singularity at n = 2 evaluates to ln(1+x)/x.
    """
    if n_power < 0 or int(n_power) != n_power:
        raise ValueError("moment order must be a nonnegative integer")
    if dt <= 0 or a_max <= 0:
        raise ValueError("dt and a_max must be positive")
    if n_power == 0:
        return 1.0
    x = dt * dt * a_max
    expo = 1.0 - n_power / 2.0
    if abs(expo) < 1e-12:
        return float(np.log1p(x) / x)
    return float(((1.0 + x) ** expo - 1.0) / (x * expo))


def moment_mc(n_power: int, dt: float, a_max: float, samples: int, seed=0) -> float:
    """Monte Carlo estimate of the same moment: |lambda| = (1 + dt^2 A)^(-1/2)."""
    if samples < 1:
        raise ValueError("samples must be positive")
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.0, a_max, samples)
    s = 1.0 / (1.0 + dt * dt * a)
    with np.errstate(under="ignore"):
        return float(np.mean(s ** (n_power / 2.0)))


def hamiltonian(y, z, a, b_in=None, u=None) -> float:
    """Energy 1/2 sum_k (A_k y_k^2 + z_k^2 - 2 (B u)_k y_k).

    With no input (b_in or u omitted) the forcing term drops.
    """
    y = as_float_array(y, "y")
    z = as_float_array(z, "z")
    diag = _diag_of(a)
    total = 0.5 * float(np.sum(diag * y * y + z * z))
    if b_in is not None and u is not None:
        drive = np.asarray(b_in, dtype=np.float64) @ np.asarray(u, dtype=np.float64)
        total -= float(np.sum(drive * y))
    return total


def imex_invariant(y, z, a, dt: float) -> float:
    """The quadratic 1/2 sum (z^2 + A y^2 - dt A z y), conserved exactly
    (to rounding) by free implicit-explicit steps; the continuous energy
    oscillates within an O(dt) band around it."""
    y = as_float_array(y, "y")
    z = as_float_array(z, "z")
    diag = _diag_of(a)
    return 0.5 * float(np.sum(z * z + diag * y * y - dt * diag * z * y))


@dataclass(frozen=True)
class SpectrumReport:
    """Eigenvalues of one transition matrix plus summary statistics."""

    scheme: str
    dt: float
    eigenvalues: np.ndarray = field(repr=False)
    max_modulus: float = 0.0
    min_modulus: float = 0.0

    def rows(self):
        """(index, real, imag, modulus) tuples for tabular output."""
        for i, lam in enumerate(self.eigenvalues):
            yield i, lam.real, lam.imag, abs(lam)


def spectrum_report(scheme: str, a, dt: float) -> SpectrumReport:
    """Eigenvalues via the closed form where one exists, else numerically."""
    if scheme == "im":
        vals = eigvals_im(a, dt)
    elif scheme == "imex":
        vals = eigvals_imex(a, dt)
    else:
        vals = eigvals_numeric(scheme, a, dt)
    mods = np.abs(vals)
    return SpectrumReport(
        scheme=scheme,
        dt=dt,
        eigenvalues=vals,
        max_modulus=float(mods.max()),
        min_modulus=float(mods.min()),
    )
