"""Filtered split bundles on P^1 and their numeric invariants.

A filtration is a nested chain of subbundles ``0 < F_1 < ... < F_m = F``
of a split bundle ``F = O(e_1) + ... + O(e_r)``.  Each step is recorded by
its split sub-degrees and a polynomial inclusion matrix into ``F``; the
``tau`` parameters weight the steps in the slope.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GridPoints, QuadratureRule


class FiltrationError(ValueError):
    pass


def _as_poly(coeffs):
    arr = np.asarray(coeffs, dtype=complex)
    if arr.ndim != 1 or arr.size == 0:
        raise FiltrationError("polynomial entries must be nonempty 1-d coefficient lists")
    return tuple(complex(c) for c in arr)


@dataclass(frozen=True)
class FiltrationStep:
    """One inclusion ``F_i -> F``: sub-degrees and an r x r_i polynomial matrix.

    ``matrix[j][l]`` holds ascending coefficients of the entry mapping the
    l-th sub-summand ``O(a_l)`` into the j-th ambient summand ``O(e_j)``;
    its degree may not exceed ``e_j - a_l``.
    """

    sub_degrees: tuple
    matrix: tuple

    @property
    def rank(self):
        return len(self.sub_degrees)

    @property
    def degree(self):
        return int(sum(self.sub_degrees))


@dataclass(frozen=True)
class FiltrationSpec:
    """Split degrees of the ambient bundle, the steps, and the tau weights."""

    degrees: tuple
    steps: tuple = ()
    tau: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "degrees", tuple(int(e) for e in self.degrees))
        steps = tuple(
            s if isinstance(s, FiltrationStep) else
            FiltrationStep(tuple(int(a) for a in s[0]),
                           tuple(tuple(_as_poly(p) for p in row) for row in s[1]))
            for s in self.steps
        )
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "tau", tuple(float(t) for t in self.tau))
        self._validate()

    def _validate(self):
        r = self.rank
        if r == 0:
            raise FiltrationError("ambient bundle must have positive rank")
        if len(self.tau) != len(self.steps):
            raise FiltrationError("need one tau per filtration step")
        if any(t < 0 for t in self.tau):
            raise FiltrationError("tau parameters must be nonnegative")
        prev = 0
        for i, s in enumerate(self.steps):
            if s.rank <= prev or s.rank >= r:
                raise FiltrationError("step ranks must satisfy 0 < r_1 < ... < r_{m-1} < r")
            prev = s.rank
            if len(s.matrix) != r:
                raise FiltrationError("inclusion matrix must have one row per ambient summand")
            for j, row in enumerate(s.matrix):
                if len(row) != s.rank:
                    raise FiltrationError("inclusion matrix must have one column per sub-summand")
                for l, p in enumerate(row):
                    maxdeg = self.degrees[j] - s.sub_degrees[l]
                    if maxdeg < 0:
                        if any(c != 0 for c in p):
                            raise FiltrationError(
                                f"step {i}: entry ({j},{l}) must vanish (negative Hom degree)")
                    elif len(p) - 1 > maxdeg and any(c != 0 for c in p[maxdeg + 1:]):
                        raise FiltrationError(
                            f"step {i}: entry ({j},{l}) exceeds Hom degree {maxdeg}")

    @property
    def rank(self):
        return len(self.degrees)

    @property
    def length(self):
        return len(self.steps) + 1

    @property
    def degree(self):
        return int(sum(self.degrees))

    @property
    def sub_ranks(self):
        return tuple(s.rank for s in self.steps)

    def step_matrix(self, i: int, pts: GridPoints) -> np.ndarray:
        """Evaluate the i-th inclusion matrix, shape (npts, r, r_i), owner frames.

        In chart 1 each entry is the reversed (homogenized) polynomial in w.
        """
        s = self.steps[i]
        n = len(pts)
        out = np.zeros((n, self.rank, s.rank), dtype=complex)
        z = pts.zeta
        in0 = pts.chart == 0
        for j in range(self.rank):
            for l in range(s.rank):
                p = np.asarray(s.matrix[j][l], dtype=complex)
                d = self.degrees[j] - s.sub_degrees[l]
                if d < 0:
                    continue
                full = np.zeros(d + 1, dtype=complex)
                full[: min(len(p), d + 1)] = p[: d + 1]
                vals0 = np.polyval(full[::-1], z)
                vals1 = np.polyval(full, z)  # reversed coefficients = w-chart form
                out[:, j, l] = np.where(in0, vals0, vals1)
        return out


# -- invariants --------------------------------------------------------------


def tau_slope(spec: FiltrationSpec) -> float:
    """tau-slope: (deg F + sum tau_i r_i) / r."""
    extra = sum(t * s.rank for t, s in zip(spec.tau, spec.steps))
    return (spec.degree + extra) / spec.rank


def tilde_tau(spec: FiltrationSpec) -> np.ndarray:
    """Graded weights: last entry is mu_tau, earlier ones mu_tau - sum_{j>=i} tau_j."""
    mu = tau_slope(spec)
    m = spec.length
    out = np.empty(m)
    out[m - 1] = mu
    for i in range(m - 1):
        out[i] = mu - sum(spec.tau[i:])
    return out


def graded_ranks(spec: FiltrationSpec) -> np.ndarray:
    ranks = list(spec.sub_ranks) + [spec.rank]
    return np.diff([0] + ranks)


def hilbert_poly(spec: FiltrationSpec, k: int) -> int:
    """chi(F otimes L^k) on P^1 by Riemann-Roch; equals the basis dimension."""
    if any(e + k < 0 for e in spec.degrees):
        raise FiltrationError("k below the global-generation threshold")
    return int(sum(e + k + 1 for e in spec.degrees))


@dataclass(frozen=True)
class ParamSchedule:
    """The k-dependent parameters of the balanced problem (V = 1 units)."""

    k: int
    N: int
    eps: tuple          # eps_1 .. eps_{m-1}
    eps0: float
    eps_k: float        # the large normalization chi / (Vr - V sum eps_j r_j)
    tau_tilde: tuple
    mu_tau: float
    spec: FiltrationSpec

    @property
    def balanced_constant(self):
        """RHS constant of the balanced equation, (N + eps_k sum eps_j r_j)/(r V)."""
        s = sum(e * r for e, r in zip(self.eps, self.spec.sub_ranks))
        return (self.N + self.eps_k * s) / self.spec.rank

    @property
    def eps_weights(self):
        """The products eps_k * eps_j weighting the flag projections."""
        return tuple(self.eps_k * e for e in self.eps)

    @property
    def fs_factor(self):
        """Leading FS normalization N / (Vr - V sum eps_j r_j)."""
        denom = self.spec.rank - sum(e * r for e, r in zip(self.eps, self.spec.sub_ranks))
        return self.N / denom


def schedule(spec: FiltrationSpec, k: int) -> ParamSchedule:
    """Slope-stability schedule: eps_i = tau_i / k, eps_0 the complement.

    Fails when ``sum eps_i >= 1`` (k too small for the given tau).
    """
    if k < 0 or (k == 0 and spec.steps):
        raise FiltrationError("k must be positive (nonnegative for plain bundles)")
    eps = tuple(t / k for t in spec.tau)
    if sum(eps) >= 1.0:
        raise FiltrationError(f"k={k} too small for tau={spec.tau}: sum eps >= 1")
    eps0 = 1.0 - sum(eps)
    n = hilbert_poly(spec, k)
    denom = spec.rank - sum(e * s.rank for e, s in zip(eps, spec.steps))
    eps_k = n / denom
    return ParamSchedule(k=k, N=n, eps=eps, eps0=eps0, eps_k=eps_k,
                         tau_tilde=tuple(tilde_tau(spec)), mu_tau=tau_slope(spec),
                         spec=spec)


# -- pointwise flag sanity ----------------------------------------------------


def check_flags(spec: FiltrationSpec, rule: QuadratureRule, tol: float = 1e-8):
    """Verify full column rank and nestedness of the steps on the grid."""
    pts = rule.points
    mats = [spec.step_matrix(i, pts) for i in range(len(spec.steps))]
    for i, phi in enumerate(mats):
        sv = np.linalg.svd(phi, compute_uv=False)
        if np.any(sv[:, -1] <= tol * (1.0 + sv[:, 0])):
            p = int(np.argmin(sv[:, -1]))
            raise FiltrationError(f"step {i} drops rank near grid point {p}")
    for i in range(len(mats) - 1):
        a, b = mats[i], mats[i + 1]
        # column span of a must lie in column span of b pointwise
        q, _ = np.linalg.qr(b)
        res = a - q @ (np.conj(np.swapaxes(q, 1, 2)) @ a)
        if np.abs(res).max() > tol * (1.0 + np.abs(a).max()):
            raise FiltrationError(f"step {i} is not contained in step {i + 1}")


# -- stock examples -----------------------------------------------------------


def line_bundle(d: int) -> FiltrationSpec:
    return FiltrationSpec(degrees=(d,))


def direct_sum(*degrees) -> FiltrationSpec:
    return FiltrationSpec(degrees=tuple(degrees))


def split_pair(a: int, b: int, tau1: float) -> FiltrationSpec:
    """O(a) inside O(a)+O(b) as the first summand."""
    step = ((a,), (([1.0],), ([0.0],)))
    return FiltrationSpec(degrees=(a, b), steps=(step,), tau=(tau1,))


def euler_filtration(tau1: float) -> FiltrationSpec:
    """The Euler line O(0) inside O(1)+O(1), embedded by (1, z)."""
    step = ((0,), (([1.0],), ([0.0, 1.0],)))
    return FiltrationSpec(degrees=(1, 1), steps=(step,), tau=(tau1,))
