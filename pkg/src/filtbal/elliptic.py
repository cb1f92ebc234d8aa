"""Elliptic endomorphism equations and the first-order almost-balanced fix.

The second-order operator ``u -> i Lambda dbar d u / 2pi + Psi(u)`` (with the
Chern connection of a background metric h) is discretized by least-squares
collocation in the quantized space spanned by ``t_A <., t_B>_h`` for a basis
``t_A`` of sections at an auxiliary twist.  On such basis fields the
covariant derivatives are available in closed form from the monomial
derivatives plus the finite-difference connection of h, so the operator is
applied pointwise without any grid stencils; the space is closed under the
h-adjoint, which keeps Hermitian problems Hermitian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .balanced import curvature_contraction
from .filtration import FiltrationSpec, schedule
from .geometry import GridPoints, QuadratureRule
from .metrics import (FiberMetricField, GramMetric, bergman, flag_projections,
                      hermitize, hilb)
from .sections import build_basis, eval_basis


class EllipticError(RuntimeError):
    pass


@dataclass
class EndoField:
    """An endomorphism field of F; optionally a member of a quantized space."""

    spec: FiltrationSpec
    rule: QuadratureRule
    samples: np.ndarray
    coeffs: np.ndarray = None
    space: "QuantizedEndoSpace | None" = None

    def at(self, pts: GridPoints):
        if self.space is None or self.coeffs is None:
            raise EllipticError("field is not attached to a quantized space")
        return self.space.evaluate(self.coeffs, pts)

    def flag_preservation(self, metric: FiberMetricField) -> float:
        """sup of ``(Id - pi_i) u pi_i`` over steps; 0 means flag preserving."""
        worst = 0.0
        eye = np.eye(self.spec.rank)
        for pi in metric.projections():
            dev = np.abs((eye - pi) @ self.samples @ pi).max()
            worst = max(worst, float(dev))
        return worst

    def hermitian_defect(self, metric: FiberMetricField) -> float:
        """sup deviation from h-self-adjointness, ``u - h^-1 u^H h``."""
        h = metric.samples
        adj = np.linalg.solve(h, np.conj(np.swapaxes(self.samples, 1, 2)) @ h)
        return float(np.abs(self.samples - adj).max())


def _connection_fd(fld: FiberMetricField, pts: GridPoints, step: float):
    """Richardson-extrapolated ``h^-1 d_z h`` at the given points."""

    def once(d):
        h0 = fld.at(pts)
        hp = fld.at(pts.shifted(d))
        hm = fld.at(pts.shifted(-d))
        hip = fld.at(pts.shifted(1j * d))
        him = fld.at(pts.shifted(-1j * d))
        dzh = ((hp - hm) - 1j * (hip - him)) / (4.0 * d)
        return np.linalg.solve(h0, dzh)

    return (4.0 * once(step / 2.0) - once(step)) / 3.0


class QuantizedEndoSpace:
    """span{t_A <., t_B>_h} with pointwise closed-form operator application."""

    def __init__(self, spec: FiltrationSpec, h: FiberMetricField, kappa: int,
                 rule: QuadratureRule, fd_step: float = 8e-3):
        if h.evaluator is None:
            raise EllipticError("background metric needs an off-grid evaluator")
        self.spec = spec
        self.rule = rule
        self.kappa = int(kappa)
        self.h = h.untwisted()
        self.hk = self.h.twisted(self.kappa)
        basis = build_basis(spec, self.kappa)
        self.nsec = basis.dimension
        pts = rule.points
        self.T = eval_basis(basis, pts)
        self.Tp = eval_basis(basis, pts, derivative=True)
        self.opa2 = pts.one_plus_abs2**2
        if self.hk.connection_evaluator is not None:
            self.A = self.hk.connection_evaluator(pts)
        else:
            self.A = _connection_fd(self.hk, pts, fd_step)
        if self.hk.curvature_evaluator is not None:
            self.Fhat = self.hk.curvature_evaluator(pts)
        else:
            lam = curvature_contraction(self.hk, pts=pts, step=fd_step)
            self.Fhat = -lam / self.opa2[:, None, None]
        self.D = self.Tp + self.A @ self.T

    @property
    def dim(self):
        return self.nsec**2

    def field(self, coeffs) -> EndoField:
        c = np.asarray(coeffs, dtype=complex).reshape(self.nsec, self.nsec)
        u = np.einsum("pra,ab,psb,pst->prt", self.T, c, self.T.conj(), self.hk.samples)
        return EndoField(self.spec, self.rule, u, coeffs=c, space=self)

    def evaluate(self, coeffs, pts: GridPoints):
        c = np.asarray(coeffs, dtype=complex).reshape(self.nsec, self.nsec)
        basis = build_basis(self.spec, self.kappa)
        t = eval_basis(basis, pts)
        hk = self.hk.at(pts)
        return np.einsum("pra,ab,psb,pst->prt", t, c, t.conj(), hk)

    def laplace(self, coeffs) -> np.ndarray:
        """The calibrated Bochner operator on a member field, pointwise."""
        c = np.asarray(coeffs, dtype=complex).reshape(self.nsec, self.nsec)
        hk = self.hk.samples
        u = np.einsum("pra,ab,psb,pst->prt", self.T, c, self.T.conj(), hk)
        dd = np.einsum("pra,ab,psb,pst->prt", self.D, c, self.D.conj(), hk)
        return -self.opa2[:, None, None] * (self.Fhat @ u + dd)

    def hermitize_coeffs(self, coeffs):
        c = np.asarray(coeffs, dtype=complex).reshape(self.nsec, self.nsec)
        return 0.5 * (c + c.conj().T)

    def identity_coeffs(self):
        """Representation of Id in the span: solve ``T c T^H = h^-1`` in least squares.

        Exact whenever h^-1 lies in the span of the pointwise section products
        (true for reference and quotient-type metrics at matching twist).
        """
        if "id_coeffs" not in self.__dict__:
            target = np.linalg.inv(self.hk.samples)
            rows = np.einsum("pra,psb->prsab", self.T, self.T.conj())
            m = rows.reshape(len(self.rule) * self.spec.rank**2, self.nsec**2)
            w = np.repeat(np.sqrt(self.rule.weights), self.spec.rank**2)
            sol, *_ = np.linalg.lstsq(m * w[:, None], target.reshape(-1) * w,
                                      rcond=None)
            self.__dict__["id_coeffs"] = sol.reshape(self.nsec, self.nsec)
        return self.__dict__["id_coeffs"]


def _pi_tau_psi(spec: FiltrationSpec, h: FiberMetricField, d1: float = 1.0):
    pis = h.projections()
    eye = np.eye(spec.rank)

    def psi(u):
        out = np.zeros_like(u)
        for t, pi in zip(spec.tau, pis):
            out = out + t * (pi @ u @ (eye - pi))
        return d1 * out

    return psi


def operator_matrix(space: QuantizedEndoSpace, psi=None) -> np.ndarray:
    """Weighted collocation matrix of ``laplace + psi`` over the quantized span."""
    n = space.nsec
    rule = space.rule
    r = space.spec.rank
    cols = np.empty((len(rule) * r * r, n * n), dtype=complex)
    for a in range(n):
        for b in range(n):
            c = np.zeros((n, n))
            c[a, b] = 1.0
            lu = space.laplace(c)
            if psi is not None:
                lu = lu + psi(space.field(c).samples)
            cols[:, a * n + b] = lu.reshape(-1)
    w = np.repeat(np.sqrt(rule.weights), r * r)
    return cols * w[:, None]


@dataclass
class EllipticReport:
    residual_sup: float
    residual_l2: float
    kernel_dim: int
    smallest_kept_sv: float
    hermitian_defect: float


def elliptic_solve(spec: FiltrationSpec, h: FiberMetricField, q_samples: np.ndarray,
                   use_pi_tau: bool = True, kappa: int = 6, rule: QuadratureRule = None,
                   tol: float = 1e-7, strict: bool = True, psi=None):
    """Solve ``i Lambda dbar d Q' / 2pi + Psi(Q') = Q`` in the quantized span.

    ``Psi`` defaults to the tau-weighted flag commutator of the background
    metric (or zero when the filtration is trivial / use_pi_tau is False).
    The right-hand side must be trace free on average whenever the identity
    lies in the kernel; the solution is returned in the mean-trace gauge.
    Raises on residual stagnation above ``tol`` unless ``strict=False``.
    """
    rule = rule or h.rule
    space = QuantizedEndoSpace(spec, h, kappa, rule)
    if use_pi_tau and spec.steps and psi is None:
        psi = _pi_tau_psi(spec, space.h)
    q = np.asarray(q_samples, dtype=complex)

    # Fredholm condition when Id is in the kernel of the full operator
    eye = np.eye(spec.rank)
    psi_id = psi(np.broadcast_to(eye, q.shape).copy()) if psi is not None else 0.0
    id_in_kernel = psi is None or np.abs(psi_id).max() < 1e-12
    tr_mean = rule.integrate(np.trace(q, axis1=1, axis2=2))
    if id_in_kernel and abs(tr_mean) > 1e-8 * max(1.0, np.abs(q).max()):
        raise EllipticError(f"mean trace of the source must vanish, got {tr_mean:.3e}")

    m = operator_matrix(space, psi)
    w = np.repeat(np.sqrt(rule.weights), spec.rank**2)
    b = q.reshape(-1) * w
    sv = np.linalg.svd(m, compute_uv=False)
    cutoff = 1e-9 * sv[0]
    kernel_dim = int((sv <= cutoff).sum())
    sol, *_ = np.linalg.lstsq(m, b, rcond=1e-9)
    c = sol.reshape(space.nsec, space.nsec)

    if id_in_kernel:
        # mean-trace gauge
        u0 = space.field(c)
        tr = rule.integrate(np.trace(u0.samples, axis1=1, axis2=2)) / spec.rank
        c = c - tr * space.identity_coeffs()
    out = space.field(c)

    lu = space.laplace(c)
    if psi is not None:
        lu = lu + psi(out.samples)
    res = lu - q
    res_sup = float(np.abs(res).max())
    res_l2 = float(np.sqrt(rule.integrate(np.sum(np.abs(res) ** 2, axis=(1, 2))).real))
    if strict and res_sup > tol:
        raise EllipticError(f"solver stagnation: residual {res_sup:.3e} above {tol:.1e}")
    report = EllipticReport(residual_sup=res_sup, residual_l2=res_l2,
                            kernel_dim=kernel_dim,
                            smallest_kept_sv=float(sv[sv > cutoff][-1] / sv[0]),
                            hermitian_defect=out.hermitian_defect(space.h))
    return out, report


# -- almost balanced correction ---------------------------------------------------


@dataclass
class CorrectionReport:
    k: int
    d1_measured: float
    residual_before: float
    residual_after: float
    eta_hermitian_defect: float
    solve_residual: float
    eta_norm: float


def balanced_residual_field(spec: FiltrationSpec, h: FiberMetricField, k: int,
                            rule: QuadratureRule):
    """Pointwise residual of the k-th balanced equation for a fiber metric."""
    sched = schedule(spec, k)
    hk = h.untwisted().twisted(k)
    g = hilb(hk)
    b = bergman(hk, H_ref=g)
    res = b.astype(complex)
    for wgt, pi in zip(sched.eps_weights, hk.projections()):
        res = res + wgt * pi
    res -= sched.balanced_constant * np.eye(spec.rank)
    sup = float(np.abs(np.linalg.eigvals(res)).max())
    return res, sup, sched


def almost_balanced_correction(spec: FiltrationSpec, h: FiberMetricField, k: int,
                               rule: QuadratureRule = None, kappa: int = 6,
                               he_tolerance: float = 1e-4):
    """One linearized step ``h -> h (Id + eta/k)`` toward the balanced equation.

    The right-hand side is the measured residual of the balanced equation at
    ``h`` (no closed-form expansion coefficients); the linearized operator is
    the calibrated Bochner Laplacian plus the flag commutator with unit
    weight, the value the schedule forces asymptotically (recomputed and
    checked here).  Returns the corrected field and a before/after report.
    """
    from .balanced import he_residual

    rule = rule or h.rule
    h0 = h.untwisted()
    he = he_residual(spec, h0)
    if he.sup > he_tolerance:
        raise EllipticError(f"input field is not numerically HE: residual {he.sup:.2e}")

    res, pre_sup, sched = balanced_residual_field(spec, h0, k, rule)

    # d1 = lim eps_k / k, recomputed from the schedule by Richardson in 1/k
    d1k = sched.eps_k / k
    s2 = schedule(spec, 2 * k)
    d1_extrap = 2.0 * (s2.eps_k / (2 * k)) - d1k
    if abs(d1_extrap - 1.0) > 5e-2:
        raise EllipticError(f"schedule coefficient d1 = {d1_extrap:.4f} is not 1")

    eta, rep = elliptic_solve(spec, h0, -k * res, use_pi_tau=True, kappa=kappa,
                              rule=rule, strict=False)
    c = eta.space.hermitize_coeffs(eta.coeffs)
    eta = eta.space.field(c)
    space = eta.space

    def eta_eval(pts):
        return space.evaluate(c, pts) / k

    corrected = h0.deformed(eta_eval)
    _, post_sup, _ = balanced_residual_field(spec, corrected, k, rule)
    report = CorrectionReport(k=k, d1_measured=float(d1_extrap),
                              residual_before=pre_sup, residual_after=post_sup,
                              eta_hermitian_defect=eta.hermitian_defect(space.h),
                              solve_residual=rep.residual_sup,
                              eta_norm=float(np.abs(eta.samples).max()))
    return corrected, eta, report
