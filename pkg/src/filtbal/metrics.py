"""Gram metrics, the quotient/FS/Hilb maps, Bergman kernels, moment diagnostics.

Conventions.  A Gram metric is the matrix ``H[i,j] = <s_j, s_i>`` so that
coefficient columns pair as ``<s a, s b> = b^H H a``.  Fiber metrics are
per-point matrices ``h`` pairing ``<X, Y>_h = Y^H h X`` in the owning chart
frame.  The quotient metric of ``(E, H)`` is ``(E H^-1 E^H)^-1`` and the
projection-corrected FS metric is

    FS = N / (Vr - V sum eps_j r_j) * h_quot (Id - sum eps_j pi_j),

with ``pi_j`` the ``h_quot``-orthogonal flag projections (the correction is
flag-upper-triangular, so FS and h_quot induce the same projections; this
compatibility is asserted in the tests).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .filtration import FiltrationSpec, ParamSchedule
from .geometry import GridPoints, QuadratureRule
from .sections import build_basis, eval_basis, reference_metric


class MetricError(ValueError):
    pass


class ConditioningWarning(UserWarning):
    pass


EIG_FLOOR = 1e-13


def hermitize(a):
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def hermitian_power(h, power, floor=EIG_FLOOR):
    """Eigendecomposition power of a Hermitian matrix with an eigenvalue floor.

    Returns (result, floored) where ``floored`` reports whether any
    eigenvalue had to be clipped (near-degenerate Gram).
    """
    w, v = np.linalg.eigh(hermitize(h))
    lim = floor * np.max(np.abs(w))
    floored = bool(np.any(w < lim))
    w = np.maximum(w, lim)
    return (v * w**power) @ np.conj(v.T), floored


@dataclass
class GramMetric:
    """Hermitian positive-definite inner product on the twisted section space."""

    spec: FiltrationSpec
    k: int
    matrix: np.ndarray
    conditioning_warning: bool = False

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=complex)
        n = self.matrix.shape[0]
        if self.matrix.shape != (n, n):
            raise MetricError("Gram matrix must be square")
        dev = np.abs(self.matrix - self.matrix.conj().T).max()
        if dev > 1e-12 * max(np.abs(self.matrix).max(), 1.0):
            raise MetricError(f"Gram matrix is not Hermitian (deviation {dev:.2e})")
        self.matrix = hermitize(self.matrix)

    @property
    def dimension(self):
        return self.matrix.shape[0]

    def inverse(self):
        inv, floored = hermitian_power(self.matrix, -1.0)
        if floored:
            warnings.warn("Gram metric nearly degenerate; eigenvalues floored",
                          ConditioningWarning, stacklevel=2)
        return inv, floored

    def inv_sqrt(self):
        m, floored = hermitian_power(self.matrix, -0.5)
        return m, floored

    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.matrix).min())

    def normalized(self, trace=None):
        t = np.trace(self.matrix).real
        target = self.dimension if trace is None else trace
        return GramMetric(self.spec, self.k, self.matrix * (target / t))


# -- bundle evaluation context -------------------------------------------------


class FlagContext:
    """Cached flag matrices and their orthonormal complements on the grid."""

    def __init__(self, spec: FiltrationSpec, rule: QuadratureRule):
        self.flags = [spec.step_matrix(i, rule.points) for i in range(len(spec.steps))]
        # rows of each complement span W_i^perp (euclidean) pointwise
        self.complements = []
        for phi in self.flags:
            u, _, _ = np.linalg.svd(phi)
            self.complements.append(np.conj(np.swapaxes(u[:, :, phi.shape[2]:], 1, 2)))


def flag_context(spec: FiltrationSpec, rule: QuadratureRule) -> FlagContext:
    key = ("flags", spec)
    if key not in rule._cache:
        rule._cache[key] = FlagContext(spec, rule)
    return rule._cache[key]


class BundleContext:
    """Cached pointwise evaluation data for (spec, k) on a quadrature rule."""

    def __init__(self, spec: FiltrationSpec, k: int, rule: QuadratureRule):
        self.spec = spec
        self.k = k
        self.rule = rule
        self.basis = build_basis(spec, k)
        self.E = eval_basis(self.basis, rule.points)
        fc = flag_context(spec, rule)
        self.flags = fc.flags
        self.complements = fc.complements


def bundle_context(spec: FiltrationSpec, k: int, rule: QuadratureRule) -> BundleContext:
    key = ("bundle", spec, k)
    if key not in rule._cache:
        rule._cache[key] = BundleContext(spec, k, rule)
    return rule._cache[key]


# -- fiber metric fields ---------------------------------------------------------


@dataclass
class FiberMetricField:
    """Sampled r x r Hermitian metric on F otimes L^k over a quadrature grid.

    ``evaluator`` (optional) produces the same matrices at arbitrary points,
    which is what the finite-difference curvature code consumes.  Fields with
    closed-form Chern data may also carry ``connection_evaluator`` (returning
    ``h^-1 d_z h``) and ``curvature_evaluator`` (the ``dbar(h^-1 d h)``
    coefficient); consumers fall back to finite differences otherwise.
    """

    spec: FiltrationSpec
    k: int
    rule: QuadratureRule
    samples: np.ndarray = None
    evaluator: "callable | None" = None
    connection_evaluator: "callable | None" = None
    curvature_evaluator: "callable | None" = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.samples is None:
            if self.evaluator is None:
                raise MetricError("need samples or an evaluator")
            self.samples = self.evaluator(self.rule.points)
        self.samples = hermitize(np.asarray(self.samples, dtype=complex))

    @property
    def rank(self):
        return self.spec.rank

    def at(self, pts: GridPoints):
        if self.evaluator is None:
            raise MetricError("field carries no off-grid evaluator")
        return hermitize(self.evaluator(pts))

    def projections(self):
        """Flag projections w.r.t. this metric at the grid points (cached)."""
        if "proj" not in self._cache:
            self._cache["proj"] = flag_projections(self.spec, self.samples,
                                                   self.rule.points, rule=self.rule)
        return self._cache["proj"]

    def untwisted(self):
        """The metric on F obtained by stripping the reference L^k weight."""
        return self.twisted(-self.k) if self.k else self

    def twisted(self, dk: int):
        """Tensor by the dk-th power of the reference line-bundle metric."""
        if dk == 0:
            return self
        ev = conn = curv = None
        if self.evaluator is not None:
            base = self.evaluator
            ev = lambda pts: base(pts) * (pts.one_plus_abs2**(-dk))[:, None, None]
        if self.connection_evaluator is not None:
            base_conn = self.connection_evaluator
            eye = np.eye(self.rank)

            def conn(pts):
                shift = -dk * np.conj(pts.zeta) / pts.one_plus_abs2
                return base_conn(pts) + shift[:, None, None] * eye

        if self.curvature_evaluator is not None:
            base_curv = self.curvature_evaluator
            eye2 = np.eye(self.rank)

            def curv(pts):
                shift = -dk / pts.one_plus_abs2**2
                return base_curv(pts) + shift[:, None, None] * eye2

        samples = self.samples * (self.rule.points.one_plus_abs2**(-dk))[:, None, None]
        return FiberMetricField(self.spec, self.k + dk, self.rule, samples, ev,
                                connection_evaluator=conn, curvature_evaluator=curv)

    def scaled(self, c: float):
        ev = None
        if self.evaluator is not None:
            base = self.evaluator
            ev = lambda pts: c * base(pts)
        return FiberMetricField(self.spec, self.k, self.rule, c * self.samples, ev,
                                connection_evaluator=self.connection_evaluator,
                                curvature_evaluator=self.curvature_evaluator)

    def conformal(self, f):
        """Multiply by e^f for a scalar field carrying a spectral expansion."""
        ev = None
        if self.evaluator is not None and getattr(f, "expansion", None) is not None:
            base = self.evaluator
            expansion = f.expansion
            ev = lambda pts: base(pts) * np.exp(expansion.at(pts).real)[:, None, None]
        samples = self.samples * np.exp(np.asarray(f.values).real)[:, None, None]
        return FiberMetricField(self.spec, self.k, self.rule, samples, ev)

    def deformed(self, eta_eval):
        """The metric ``h(Id + eta)`` for a pointwise endomorphism evaluator."""
        base = self.evaluator
        r = self.rank

        def ev(pts):
            eye = np.eye(r)
            return base(pts) @ (eye + eta_eval(pts))

        samples = self.samples @ (np.eye(r) + eta_eval(self.rule.points))
        return FiberMetricField(self.spec, self.k, self.rule, samples,
                                ev if base is not None else None)


def reference_field(spec: FiltrationSpec, k: int, rule: QuadratureRule) -> FiberMetricField:
    """Product of round metrics on the split summands of F otimes L^k.

    Carries closed-form connection and curvature evaluators (the twists are
    diag(e_j + k), so both are diagonal rational expressions).
    """
    twists = np.array([e + k for e in spec.degrees], dtype=float)

    def conn(pts):
        base = -np.conj(pts.zeta) / pts.one_plus_abs2
        out = np.zeros((len(pts), spec.rank, spec.rank), dtype=complex)
        idx = np.arange(spec.rank)
        out[:, idx, idx] = base[:, None] * twists
        return out

    def curv(pts):
        base = -1.0 / pts.one_plus_abs2**2
        out = np.zeros((len(pts), spec.rank, spec.rank), dtype=complex)
        idx = np.arange(spec.rank)
        out[:, idx, idx] = base[:, None] * twists
        return out

    return FiberMetricField(spec, k, rule,
                            evaluator=lambda pts: reference_metric(spec, k, pts),
                            connection_evaluator=conn, curvature_evaluator=curv)


# -- pointwise constructions -----------------------------------------------------


def quotient_metric(H: GramMetric, pts: GridPoints, E=None) -> np.ndarray:
    """Minimal-norm-lift metric ``(E H^-1 E^H)^-1`` at each point."""
    if E is None:
        E = eval_basis(build_basis(H.spec, H.k), pts)
    hinv, _ = hermitian_power(H.matrix, -1.0)
    m = np.einsum("pri,ij,psj->prs", E, hinv, E.conj())
    sv = np.linalg.svd(m, compute_uv=False)
    bad = sv[:, -1] <= 1e-14 * sv[:, 0]
    if np.any(bad):
        raise MetricError(f"evaluation rank-deficient at point index {int(np.argmax(bad))}")
    return hermitize(np.linalg.inv(m))


def flag_projections(spec: FiltrationSpec, h: np.ndarray, pts: GridPoints,
                     rule=None) -> list:
    """h-orthogonal projections onto the flag subspaces, one (n,r,r) per step."""
    out = []
    for i in range(len(spec.steps)):
        if rule is not None and pts is rule.points:
            phi = flag_context(spec, rule).flags[i]
        else:
            phi = spec.step_matrix(i, pts)
        a = np.einsum("prl,prs,psm->plm", phi.conj(), h, phi)
        sv = np.linalg.svd(a, compute_uv=False)
        if np.any(sv[:, -1] <= 1e-14 * sv[:, 0]):
            raise MetricError(f"degenerate flag at step {i}")
        ainv = np.linalg.inv(a)
        out.append(np.einsum("prl,plm,psm,pst->prt", phi, ainv, phi.conj(), h))
    return out


def fs_metric(H: GramMetric, sched: ParamSchedule, rule: QuadratureRule) -> FiberMetricField:
    """Projection-corrected FS metric of a Gram metric, with off-grid evaluator."""
    if sum(sched.eps) >= 1.0:
        raise MetricError("schedule violates sum eps_j < 1")
    spec, k = H.spec, H.k
    ctx = bundle_context(spec, k, rule)
    hmat = H.matrix.copy()

    def ev(pts, E=None):
        hq = quotient_metric(H, pts, E=E)
        mat = hq
        if spec.steps:
            pis = flag_projections(spec, hq, pts, rule=rule)
            corr = np.eye(spec.rank) - sum(e * p for e, p in zip(sched.eps, pis))
            mat = hq @ corr
        return sched.fs_factor * hermitize(mat)

    samples = ev(rule.points, E=ctx.E)
    fld = FiberMetricField(spec, k, rule, samples, lambda pts: ev(pts))
    fld._cache["gram_source"] = hmat
    return fld


def hilb(fieldh: FiberMetricField, rule: QuadratureRule = None) -> GramMetric:
    """L2 Gram of the twisted section basis against a fiber metric."""
    rule = rule or fieldh.rule
    if rule is not fieldh.rule:
        raise MetricError("field sampled on a different quadrature rule")
    ctx = bundle_context(fieldh.spec, fieldh.k, rule)
    g = np.einsum("p,pri,prs,psj->ij", rule.weights, ctx.E.conj(), fieldh.samples, ctx.E)
    return GramMetric(fieldh.spec, fieldh.k, hermitize(g))


def bergman(fieldh: FiberMetricField, H_ref: GramMetric = None) -> np.ndarray:
    """Generalized density of states ``E G^-1 E^H h`` with G the Hilb Gram."""
    rule = fieldh.rule
    ctx = bundle_context(fieldh.spec, fieldh.k, rule)
    G = H_ref if H_ref is not None else hilb(fieldh)
    ginv, _ = hermitian_power(G.matrix, -1.0)
    m = np.einsum("pri,ij,psj->prs", ctx.E, ginv, ctx.E.conj())
    return m @ fieldh.samples


def pi_tau_operator(spec: FiltrationSpec, fieldh: FiberMetricField,
                    eta: np.ndarray) -> np.ndarray:
    """The flag-commutator operator ``sum tau_i pi_i eta (Id - pi_i)`` pointwise."""
    eta = np.asarray(eta, dtype=complex)
    out = np.zeros_like(eta)
    eye = np.eye(spec.rank)
    for t, pi in zip(spec.tau, fieldh.projections()):
        out += t * (pi @ eta @ (eye - pi))
    return out


# -- moment map / balanced residuals ----------------------------------------------


@dataclass
class MomentResidual:
    """Both faces of the balanced condition for one Gram metric."""

    pointwise_sup: float
    pointwise_rel: float
    pointwise_field: np.ndarray
    fin_matrix: np.ndarray
    fin_norm: float
    mu_matrix: np.ndarray
    constant: float


def moment_residual(H: GramMetric, sched: ParamSchedule, rule: QuadratureRule,
                    fs_field: FiberMetricField = None,
                    hilb_gram: GramMetric = None) -> MomentResidual:
    """Residual of the balanced equation at FS(H), in both formulations.

    The pointwise form is ``B + eps_k sum eps_j pi_j - Gamma Id`` for the FS
    metric of H; the finite-dimensional form is ``H^-1/2 Hilb(FS(H)) H^-1/2 - Id``.
    Both vanish together exactly at a balanced Gram.
    """
    fld = fs_field if fs_field is not None else fs_metric(H, sched, rule)
    G1 = hilb_gram if hilb_gram is not None else hilb(fld)
    B = bergman(fld, H_ref=G1)
    gamma = sched.balanced_constant
    res = B.copy()
    for wgt, pi in zip(sched.eps_weights, fld.projections()):
        res = res + wgt * pi
    res -= gamma * np.eye(H.spec.rank)
    ev = np.linalg.eigvals(res)
    sup = float(np.abs(ev).max())

    c, _ = H.inv_sqrt()
    fin = c @ G1.matrix @ c - np.eye(H.dimension)
    fin = hermitize(fin)
    fin_norm = float(np.abs(np.linalg.eigvalsh(fin)).max())
    mu = (fin - (np.trace(fin) / H.dimension) * np.eye(H.dimension)) / sched.fs_factor
    return MomentResidual(pointwise_sup=sup, pointwise_rel=sup / gamma,
                          pointwise_field=res, fin_matrix=fin, fin_norm=fin_norm,
                          mu_matrix=hermitize(mu), constant=gamma)


# -- Kempf-Ness style functionals ---------------------------------------------------


def _compressed_logdets(H: GramMetric, sched: ParamSchedule, rule: QuadratureRule,
                        gmat: np.ndarray) -> list:
    """log det of the quotient-compressed evaluation Grams, one array per factor."""
    ctx = bundle_context(H.spec, H.k, rule)
    c, _ = H.inv_sqrt()
    basis_map = c @ gmat
    out = []
    for j in range(H.spec.length):
        if j == 0:
            t = np.einsum("pri,ij->prj", ctx.E, basis_map)
        else:
            t = np.einsum("pqr,pri,ij->pqj", ctx.complements[j - 1], ctx.E, basis_map)
        m = t @ np.conj(np.swapaxes(t, 1, 2))
        sign, logdet = np.linalg.slogdet(m)
        out.append(logdet)
    return out


def kn_functional(H: GramMetric, sched: ParamSchedule, rule: QuadratureRule,
                  direction: np.ndarray, t: float) -> float:
    """Kempf-Ness value along ``exp(t S)`` acting on the H-orthonormal frame.

    ``direction`` must be trace-free Hermitian; the functional vanishes at
    t = 0 and its derivative there pairs with the moment residual.
    """
    s = np.asarray(direction)
    if abs(np.trace(s)) > 1e-10 * max(1.0, np.abs(s).max()):
        raise MetricError("direction must be trace free")
    g = expm(t * hermitize(s))
    base = _compressed_logdets(H, sched, rule, np.eye(H.dimension))
    moved = _compressed_logdets(H, sched, rule, g)
    weights = (sched.eps0,) + sched.eps
    total = 0.0
    for w, b, m in zip(weights, base, moved):
        total += 0.5 * w * rule.integrate(m - b)
    return float(total)


def gieseker_functional(H: GramMetric, sched: ParamSchedule, rule: QuadratureRule,
                        direction: np.ndarray, t: float) -> float:
    """log-of-integral companion functional along the same rays (diagnostic only)."""
    s = np.asarray(direction)
    g = expm(t * hermitize(s))
    base = _compressed_logdets(H, sched, rule, np.eye(H.dimension))
    moved = _compressed_logdets(H, sched, rule, g)
    weights = (sched.eps0,) + sched.eps
    total = 0.0
    for w, b, m in zip(weights, base, moved):
        total += w * np.log(rule.integrate(np.exp(m - b)))
    return float(total)
