"""Balanced-metric fixed-point driver and Hermite-Einstein diagnostics.

The driver iterates ``H -> Hilb(FS(H))`` (trace-rescaled, optionally damped)
and declares convergence on the relative moment residual.  Non-convergence
is recorded, not raised: on destabilized inputs the iteration degenerates
and the smallest-eigenvalue collapse is itself the diagnostic.

Curvature contractions are measured by Richardson-extrapolated centered
finite differences of the metric samples in the owning chart, always on the
untwisted field (twisting by the reference line-bundle metric shifts the
contraction by exactly k).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .filtration import FiltrationSpec, ParamSchedule, schedule, tau_slope, tilde_tau
from .geometry import QuadratureRule, ScalarField
from .metrics import (FiberMetricField, GramMetric, MetricError, bergman, fs_metric,
                      hilb, moment_residual)


# -- fixed point iteration ----------------------------------------------------


def random_hpd(n: int, rng, amplitude: float = 0.5) -> np.ndarray:
    """A well-conditioned random Hermitian positive-definite matrix, trace n."""
    m = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    h = np.eye(n) + amplitude * (m @ m.conj().T) / n
    return h * (n / np.trace(h).real)


def t_step(H: GramMetric, sched: ParamSchedule, rule: QuadratureRule) -> GramMetric:
    """One Hilb(FS(.)) step, rescaled to preserve the trace."""
    fld = fs_metric(H, sched, rule)
    g = hilb(fld)
    scale = np.trace(H.matrix).real / np.trace(g.matrix).real
    return GramMetric(H.spec, H.k, scale * g.matrix)


@dataclass
class BalancedDiagnostics:
    """Verbatim per-iteration record of one balanced solve."""

    k: int
    tol: float
    damping: float
    seed: "int | None"
    converged: bool = False
    iterations: int = 0
    moment_rel: list = field(default_factory=list)
    moment_abs: list = field(default_factory=list)
    gram_change: list = field(default_factory=list)
    min_eig_ratio: list = field(default_factory=list)
    eigen_collapse: bool = False
    conditioning_warnings: int = 0
    wall_time: float = 0.0

    def collapse_factor(self, window: int = 200):
        """Decay factor of the normalized smallest eigenvalue over the last window."""
        seq = self.min_eig_ratio
        if not seq:
            return 1.0
        tail = seq[-(window + 1):]
        return float(tail[0] / max(tail[-1], 1e-300))


def solve_balanced(spec: FiltrationSpec, k: int, rule: QuadratureRule,
                   tol: float = 1e-8, max_iter: int = 2000, damping: float = 1.0,
                   seed: "int | None" = 0, start: np.ndarray = None,
                   collapse_threshold: float = 10.0):
    """Fixed-point iteration toward a k-balanced Gram metric.

    Returns ``(GramMetric, BalancedDiagnostics)``.  Convergence is declared
    on the relative moment residual (pointwise sup over the balanced
    constant); on failure the result is flagged, never raised.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    sched = schedule(spec, k)
    n = sched.N
    if start is not None:
        h = np.asarray(start, dtype=complex)
    else:
        rng = np.random.default_rng(seed)
        h = random_hpd(n, rng)
    H = GramMetric(spec, k, h).normalized()
    diag = BalancedDiagnostics(k=k, tol=tol, damping=damping, seed=seed)
    t0 = time.perf_counter()
    for it in range(max_iter + 1):
        fld = fs_metric(H, sched, rule)
        g1 = hilb(fld)
        res = moment_residual(H, sched, rule, fs_field=fld, hilb_gram=g1)
        eig_ratio = H.min_eigenvalue() * n / np.trace(H.matrix).real
        diag.moment_rel.append(res.pointwise_rel)
        diag.moment_abs.append(res.pointwise_sup)
        diag.min_eig_ratio.append(eig_ratio)
        if eig_ratio < 1e-10:
            diag.conditioning_warnings += 1
        diag.iterations = it
        if res.pointwise_rel < tol:
            diag.converged = True
            break
        if it == max_iter:
            break
        new = g1.matrix * (np.trace(H.matrix).real / np.trace(g1.matrix).real)
        stepped = (1.0 - damping) * H.matrix + damping * new
        diag.gram_change.append(
            float(np.abs(stepped - H.matrix).max() / max(np.abs(H.matrix).max(), 1e-300)))
        H = GramMetric(spec, k, stepped)
    diag.wall_time = time.perf_counter() - t0
    # a converged run cannot have collapsed; for the rest, sustained decay of
    # the normalized smallest eigenvalue over the trailing window is the signature
    diag.eigen_collapse = (not diag.converged
                           and diag.collapse_factor() >= collapse_threshold)
    return H, diag


def euler_line_projector(pts):
    """Projection onto the tautological line span(1, z) inside O(1)+O(1)."""
    n = len(pts)
    v = np.empty((n, 2), dtype=complex)
    v[:, 0] = np.where(pts.chart == 0, 1.0, pts.zeta)
    v[:, 1] = np.where(pts.chart == 0, pts.zeta, 1.0)
    nrm = (np.abs(v) ** 2).sum(axis=1)
    return np.einsum("pr,ps->prs", v, v.conj()) / nrm[:, None, None]


def euler_he_field(rule: QuadratureRule, tau1: float = 1.0) -> FiberMetricField:
    """The HE metric of the Euler filtration: ``ref (Id - tau1/2 P)``.

    P is the projector onto the Euler line; positivity requires ``tau1 < 2``,
    which is exactly the stable range of the filtration.
    """
    from .filtration import euler_filtration
    from .metrics import reference_metric

    if not 0 <= tau1 < 2:
        raise ValueError("the ansatz degenerates outside 0 <= tau1 < 2")
    spec = euler_filtration(tau1)

    def ev(pts):
        p = euler_line_projector(pts)
        return reference_metric(spec, 0, pts) @ (np.eye(2) - 0.5 * tau1 * p)

    return FiberMetricField(spec, 0, rule, evaluator=ev)


# -- curvature by finite differences -------------------------------------------


def curvature_contraction(fld: FiberMetricField, pts=None, step: float = 1e-2):
    """Degree-calibrated curvature contraction of a metric field.

    Computes ``-(1+|zeta|^2)^2 dbar(h^-1 d h)`` per point by nested centered
    differences in the owning chart, Richardson-extrapolated over two steps.
    Needs the field's off-grid evaluator; fields on high twists should be
    untwisted first (the twist contributes exactly ``k``).
    """
    if pts is None:
        pts = fld.rule.points

    def connection(q, d):
        h0 = fld.at(q)
        hp = fld.at(q.shifted(d))
        hm = fld.at(q.shifted(-d))
        hip = fld.at(q.shifted(1j * d))
        him = fld.at(q.shifted(-1j * d))
        dzh = ((hp - hm) - 1j * (hip - him)) / (4.0 * d)
        return np.linalg.solve(h0, dzh)

    def contraction(d):
        ap = connection(pts.shifted(d), d)
        am = connection(pts.shifted(-d), d)
        aip = connection(pts.shifted(1j * d), d)
        aim = connection(pts.shifted(-1j * d), d)
        dzbar_a = ((ap - am) + 1j * (aip - aim)) / (4.0 * d)
        return -(pts.one_plus_abs2**2)[:, None, None] * dzbar_a

    lam = (4.0 * contraction(step / 2.0) - contraction(step)) / 3.0
    return lam


@dataclass
class HEResidual:
    sup: float
    mean: float
    pointwise: np.ndarray
    form_agreement: float
    mu_tau: float


def he_residual(spec: FiltrationSpec, fld: FiberMetricField,
                lam: np.ndarray = None) -> HEResidual:
    """Deviation from the tau-Hermite-Einstein equation for an untwisted field.

    Both the step form ``lam + sum tau_i pi_i - mu Id`` and the graded form
    ``lam - sum tautilde_i (pi_i - pi_{i-1})`` are evaluated; they agree
    identically and the deviation between them is reported as a cross-check.
    """
    if fld.k != 0:
        fld = fld.untwisted()
    if lam is None:
        lam = curvature_contraction(fld)
    pis = fld.projections()
    r = spec.rank
    eye = np.eye(r)
    mu = tau_slope(spec)
    res = lam - mu * eye
    for t, pi in zip(spec.tau, pis):
        res = res + t * pi

    tt = tilde_tau(spec)
    chain = [np.zeros_like(lam[0])] + list(pis) + [np.broadcast_to(eye, lam.shape)]
    res2 = lam.copy().astype(complex)
    for i in range(spec.length):
        res2 = res2 - tt[i] * (chain[i + 1] - chain[i])
    agree = float(np.abs(res - res2).max())

    ev = np.linalg.eigvals(res)
    sup = float(np.abs(ev).max())
    mean = float(fld.rule.integrate(np.abs(ev).max(axis=1)))
    return HEResidual(sup=sup, mean=mean, pointwise=res, form_agreement=agree, mu_tau=mu)


def degree_identity(fld: FiberMetricField, lam: np.ndarray = None) -> float:
    """Chern-Weil check: the mean trace of the contraction equals deg F."""
    if lam is None:
        lam = curvature_contraction(fld)
    tr = np.trace(lam, axis1=1, axis2=2).real
    return float(fld.rule.integrate(tr))


# -- conformal normalization ----------------------------------------------------


@dataclass
class ConformalReport:
    before: HEResidual
    after: HEResidual
    lambda_bar: float
    factor: ScalarField


def conformal_normalize(spec: FiltrationSpec, fld: FiberMetricField,
                        strict: bool = True):
    """Rescale a conformally HE field to kill the scalar defect.

    Extracts ``lambda_h = tr(lam + sum tau pi)/r``, solves the Poisson
    problem for the conformal factor and returns ``e^f h`` together with a
    before/after report.  With ``strict`` the field is rejected when the
    defect is visibly non-scalar.
    """
    if fld.k != 0:
        fld = fld.untwisted()
    lam = curvature_contraction(fld)
    t = lam.astype(complex).copy()
    for tau, pi in zip(spec.tau, fld.projections()):
        t = t + tau * pi
    r = spec.rank
    lam_h = np.trace(t, axis1=1, axis2=2).real / r
    off = t - lam_h[:, None, None] * np.eye(r)
    off_size = float(np.abs(off).max())
    rule = fld.rule
    lam_bar = float(rule.integrate(lam_h))
    scalar_size = float(np.abs(lam_h - lam_bar).max())
    if strict and off_size > 10.0 * scalar_size + 1e-10 * max(1.0, abs(lam_bar)):
        raise MetricError("not conformally HE: defect is not approximately scalar")

    rhs = ScalarField(rule, lam_h - lam_bar)
    f = geometry.poisson_solve(rhs, tol=1e-6)
    before = he_residual(spec, fld, lam=lam)
    out = fld.conformal(f)
    after = he_residual(spec, out)
    return out, ConformalReport(before=before, after=after, lambda_bar=lam_bar, factor=f)


# -- Bergman expansion ------------------------------------------------------------


@dataclass
class BergmanFit:
    k_list: tuple
    leading_dev: float        # max |a(p) - Id|
    c1: np.ndarray            # fitted k^0 coefficient field
    c1_dev: float             # sup |c1 - (halfS Id + lam)|
    remainder_slope: float
    remainders: tuple
    half_scal: float


def bergman_expansion_check(spec: FiltrationSpec, fld: FiberMetricField,
                            k_list, rule: QuadratureRule) -> BergmanFit:
    """Fit the density-of-states ladder ``B_k = a k + c1 + c2/k`` pointwise.

    Verifies the first-order coefficient against ``halfS Id + lam`` with the
    calibrated half-scalar constant, and measures the decay slope of the
    remainder ``B_k - k Id - (halfS Id + lam)`` on a log-log fit.
    """
    k_list = tuple(int(k) for k in k_list)
    if len(k_list) < 4:
        raise ValueError("need at least 4 ladder points")
    if fld.k != 0:
        fld = fld.untwisted()
    bs = []
    for k in k_list:
        twisted = fld.twisted(k)
        bs.append(bergman(twisted))
    stack = np.stack(bs)                       # (nk, n, r, r)
    ks = np.array(k_list, dtype=float)
    design = np.stack([ks, np.ones_like(ks), 1.0 / ks], axis=1)
    flat = stack.reshape(len(k_list), -1)
    coef, *_ = np.linalg.lstsq(design, flat, rcond=None)
    shape = stack.shape[1:]
    a = coef[0].reshape(shape)
    c1 = coef[1].reshape(shape)

    eye = np.eye(spec.rank)
    lam = curvature_contraction(fld)
    half = geometry.half_scalar_calibrated(rule)
    target = half * eye + lam
    leading_dev = float(np.abs(a - eye).max())
    c1_dev = float(np.abs(c1 - target).max())

    rems = []
    for k, b in zip(k_list, bs):
        rems.append(float(np.abs(b - k * eye - target).max()))
    rems_arr = np.array(rems)
    if np.all(rems_arr > 1e-12):
        d2 = np.stack([np.log(ks), np.ones_like(ks)], axis=1)
        slope, *_ = np.linalg.lstsq(d2, np.log(rems_arr), rcond=None)
        rem_slope = float(slope[0])
    else:
        rem_slope = float("nan")
    return BergmanFit(k_list=k_list, leading_dev=leading_dev, c1=c1, c1_dev=c1_dev,
                      remainder_slope=rem_slope, remainders=tuple(rems), half_scal=half)


# -- convergence study --------------------------------------------------------------


@dataclass
class StudyRow:
    k: int
    converged: bool
    iterations: int
    moment_rel: float
    he_sup: float
    he_mean: float
    eigen_collapse: bool


@dataclass
class StudyTable:
    rows: list
    fitted_exponent: float

    def he_values(self):
        return [r.he_sup for r in self.rows]


def convergence_study(spec: FiltrationSpec, k_list, rule: QuadratureRule,
                      tol, max_iter: int = 4000, damping: float = 1.0,
                      seed: int = 0) -> StudyTable:
    """Solve per k, conformally normalize the FS limit, record HE residuals.

    ``tol`` may be a float or a callable ``k -> tol`` (polystable borderline
    examples have a k-dependent residual floor).  Failures become rows with
    ``converged=False``; the decay exponent is fitted on the successful rows.
    """
    rows = []
    for k in k_list:
        tk = tol(k) if callable(tol) else tol
        sch = schedule(spec, k)
        H, diag = solve_balanced(spec, k, rule, tol=tk, max_iter=max_iter,
                                 damping=damping, seed=seed)
        fld = fs_metric(H, sch, rule)
        normalized, _rep = conformal_normalize(spec, fld.untwisted(), strict=False)
        he = he_residual(spec, normalized)
        rows.append(StudyRow(k=k, converged=diag.converged, iterations=diag.iterations,
                             moment_rel=diag.moment_rel[-1], he_sup=he.sup,
                             he_mean=he.mean, eigen_collapse=diag.eigen_collapse))
    good = [r for r in rows if r.converged and r.he_sup > 0]
    if len(good) >= 2:
        lk = np.log([r.k for r in good])
        lv = np.log([r.he_sup for r in good])
        d = np.stack([lk, np.ones_like(lk)], axis=1)
        coef, *_ = np.linalg.lstsq(d, lv, rcond=None)
        exponent = float(coef[0])
    else:
        exponent = float("nan")
    return StudyTable(rows=rows, fitted_exponent=exponent)
