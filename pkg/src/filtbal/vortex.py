"""Coupled vortex chains, Kazdan-Warner solves, and the Witten-triple stand-in.

Only abelian chains (one line bundle per node) are solved directly: the
unknowns are conformal factors ``f_i`` against the reference metrics and the
system couples the calibrated curvatures ``d_i - lap f_i`` with the Higgs
densities ``|phi_i|^2``.  All right-hand-side constants are the caller's
slope-unit parameters; the integrated identities (the vortex Chern-Weil)
are exposed by the solvability screen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .geometry import GridPoints, QuadratureRule, ScalarField


class VortexError(ValueError):
    pass


@dataclass(frozen=True)
class ChainSpec:
    """Line-bundle degrees d_0..d_m, connecting polynomials, slope parameters.

    ``morphisms[i]`` holds ascending coefficients of ``phi_{i+1}`` mapping the
    node ``i+1`` bundle into the node ``i`` bundle (degree at most
    ``d_i - d_{i+1}``); an all-zero tuple disconnects the nodes.
    """

    degrees: tuple
    morphisms: tuple
    tau_prime: tuple

    def __post_init__(self):
        object.__setattr__(self, "degrees", tuple(int(d) for d in self.degrees))
        object.__setattr__(self, "morphisms",
                           tuple(tuple(complex(c) for c in m) for m in self.morphisms))
        object.__setattr__(self, "tau_prime", tuple(float(t) for t in self.tau_prime))
        m = len(self.degrees) - 1
        if m < 0 or len(self.morphisms) != m or len(self.tau_prime) != m + 1:
            raise VortexError("need m+1 degrees, m morphisms, m+1 parameters")
        for i, coeffs in enumerate(self.morphisms):
            maxdeg = self.degrees[i] - self.degrees[i + 1]
            if any(c != 0 for c in coeffs) and (maxdeg < 0 or len(coeffs) - 1 > maxdeg):
                raise VortexError(f"morphism {i + 1} exceeds Hom degree {maxdeg}")

    @property
    def nodes(self):
        return len(self.degrees)

    def morphism_active(self, i):
        """Whether phi_{i+1} (connecting nodes i and i+1) is nonzero."""
        return any(c != 0 for c in self.morphisms[i])

    def components(self):
        """Connected components of the chain graph, as tuples of node indices."""
        comps, cur = [], [0]
        for i in range(self.nodes - 1):
            if self.morphism_active(i):
                cur.append(i + 1)
            else:
                comps.append(tuple(cur))
                cur = [i + 1]
        comps.append(tuple(cur))
        return comps


def morphism_density(chain: ChainSpec, i: int, pts: GridPoints) -> np.ndarray:
    """Reference-metric Higgs density ``|phi_{i+1}|^2`` at the points."""
    coeffs = np.asarray(chain.morphisms[i], dtype=complex)
    d = chain.degrees[i] - chain.degrees[i + 1]
    if d < 0 or not chain.morphism_active(i):
        return np.zeros(len(pts))
    full = np.zeros(d + 1, dtype=complex)
    full[: min(len(coeffs), d + 1)] = coeffs[: d + 1]
    vals0 = np.polyval(full[::-1], pts.zeta)
    vals1 = np.polyval(full, pts.zeta)
    vals = np.where(pts.chart == 0, vals0, vals1)
    return (np.abs(vals) ** 2) * pts.one_plus_abs2 ** (-d)


# -- solvability screen ------------------------------------------------------------


@dataclass
class ScreenReport:
    implied_masses: tuple        # implied integral |phi_i|^2, i = 1..m
    constraint_residual: float   # the remaining integrated identity at node 0
    feasible: bool
    notes: tuple


def degree_screen(chain: ChainSpec, tol: float = 1e-9) -> ScreenReport:
    """Integrate the chain equations termwise and back-substitute the masses.

    Infeasible parameter sets (negative implied ``integral |phi|^2`` or a
    mass carried by a vanishing morphism) are flagged, never raised.
    """
    m = chain.nodes - 1
    implied = [0.0] * (m + 1)  # implied[i] = integral |phi_i|^2 for i >= 1
    for i in range(m, 0, -1):
        upper = implied[i + 1] if i < m else 0.0
        implied[i] = upper + 2.0 * (chain.degrees[i] - chain.tau_prime[i])
    upper1 = implied[1] if m >= 1 else 0.0
    residual = chain.degrees[0] + 0.5 * upper1 - chain.tau_prime[0]
    notes = []
    feasible = abs(residual) <= tol
    if not feasible:
        notes.append(f"integrated identity fails at node 0 by {residual:.3e}")
    for i in range(1, m + 1):
        if implied[i] < -tol:
            feasible = False
            notes.append(f"implied integral |phi_{i}|^2 = {implied[i]:.3e} < 0")
        if implied[i] > tol and not chain.morphism_active(i - 1):
            feasible = False
            notes.append(f"node link {i} carries mass {implied[i]:.3e} but phi_{i} = 0")
        if abs(implied[i]) <= tol and chain.morphism_active(i - 1):
            feasible = False
            notes.append(f"phi_{i} is nonzero but its implied mass vanishes")
    return ScreenReport(implied_masses=tuple(implied[1:]), constraint_residual=residual,
                        feasible=feasible, notes=tuple(notes))


# -- the coupled solve ---------------------------------------------------------------


@dataclass
class VortexSolution:
    chain: ChainSpec
    factors: list                 # ScalarField conformal exponents f_i
    residual_sup: tuple           # per equation
    higgs_masses: tuple           # measured integral |phi_i|^2_h
    newton_history: list
    converged: bool


def _laplacian_matrix(rule: QuadratureRule):
    key = "lap_matrix"
    if key not in rule._cache:
        basis = rule.harmonics()
        mat = (basis.S * basis.eigenvalues) @ basis.SW
        rule._cache[key] = mat.real
    return rule._cache[key]


def chain_vortex_solve(chain: ChainSpec, rule: QuadratureRule, tol: float = 1e-10,
                       max_iter: int = 40) -> VortexSolution:
    """Newton iteration with line search on the coupled scalar vortex system.

    Equations: ``d_i - lap f_i + (|phi_{i+1}|^2_h - |phi_i|^2_h)/2 = tau'_i``.
    The factors are represented in the real spherical-harmonic basis (the
    grid Laplacian is singular on unresolved frequencies); the all-nodes
    constant shift in each connected component is gauge, pinned by a
    bordered mean constraint.  Convergence is declared on the grid residual.
    """
    screen = degree_screen(chain)
    if not screen.feasible:
        raise VortexError("parameter set fails the degree screen: " + "; ".join(screen.notes))
    nn = chain.nodes
    npts = len(rule)
    pts = rule.points
    g = [morphism_density(chain, i, pts) for i in range(nn - 1)]
    basis = rule.harmonics()
    s_mat, sw_mat, eigs = basis.real_basis()
    nmodes = s_mat.shape[1]

    def residual(fs):
        out = np.empty((nn, npts))
        for i in range(nn):
            r = np.full(npts, chain.degrees[i] - chain.tau_prime[i], dtype=float)
            if i < nn - 1:
                r = r + 0.5 * g[i] * np.exp(fs[i] - fs[i + 1])
            if i > 0:
                r = r - 0.5 * g[i - 1] * np.exp(fs[i - 1] - fs[i])
            out[i] = r
        return out  # the -lap f_i part is added in coefficient space

    def grid_residual(coeffs):
        fs = coeffs @ s_mat.T
        res = residual(fs)
        res -= (coeffs * eigs) @ s_mat.T
        return fs, res

    comps = chain.components()
    coeffs = np.zeros((nn, nmodes))
    history = []
    converged = False
    for _ in range(max_iter):
        fs, res = grid_residual(coeffs)
        norm = float(np.abs(res).max())
        history.append(norm)
        if norm < tol:
            converged = True
            break
        size = nn * nmodes
        jac = np.zeros((size + len(comps), size + len(comps)))
        rhs = np.zeros(size + len(comps))
        for i in range(nn):
            sl = slice(i * nmodes, (i + 1) * nmodes)
            jac[sl, sl] -= np.diag(eigs)
            if i < nn - 1:
                e = 0.5 * g[i] * np.exp(fs[i] - fs[i + 1])
                blk = sw_mat @ (e[:, None] * s_mat)
                jac[sl, sl] += blk
                jac[sl, (i + 1) * nmodes:(i + 2) * nmodes] -= blk
            if i > 0:
                e = 0.5 * g[i - 1] * np.exp(fs[i - 1] - fs[i])
                blk = sw_mat @ (e[:, None] * s_mat)
                jac[sl, sl] += blk
                jac[sl, (i - 1) * nmodes:i * nmodes] -= blk
            rhs[sl] = -(sw_mat @ res[i])
        for c, comp in enumerate(comps):
            for i in comp:
                jac[size + c, i * nmodes] = 1.0
                jac[i * nmodes, size + c] = 1.0
        try:
            step = np.linalg.solve(jac, rhs)[:size].reshape(nn, nmodes)
        except np.linalg.LinAlgError as exc:
            raise VortexError(f"Newton linearization is singular: {exc}")
        s = 1.0
        while s > 1e-6:
            _, trial_res = grid_residual(coeffs + s * step)
            if np.abs(trial_res).max() < norm * (1.0 - 1e-4 * s) + 1e-15:
                break
            s *= 0.5
        else:
            raise VortexError("Newton line search exhausted")
        coeffs = coeffs + s * step
    fs, res = grid_residual(coeffs)
    if not converged and np.abs(res).max() >= tol:
        raise VortexError(f"Newton did not converge: residual {np.abs(res).max():.3e}")

    fields = []
    for i in range(nn):
        coeff = basis.analyze(fs[i])
        fields.append(ScalarField(rule, fs[i], expansion=basis.expansion(coeff)))
    masses = []
    for i in range(nn - 1):
        masses.append(float(rule.integrate(g[i] * np.exp(fs[i] - fs[i + 1]))))
    return VortexSolution(chain=chain, factors=fields,
                          residual_sup=tuple(float(np.abs(r).max()) for r in res),
                          higgs_masses=tuple(masses), newton_history=history,
                          converged=True)


def solution_curvatures(sol: VortexSolution) -> list:
    """Calibrated curvature fields ``d_i - lap f_i`` of a chain solution."""
    out = []
    for d, f in zip(sol.chain.degrees, sol.factors):
        lap = geometry.laplacian(f)
        out.append(ScalarField(f.rule, d - lap.values))
    return out


# -- Kazdan-Warner ---------------------------------------------------------------------


@dataclass
class KWSolution:
    f: ScalarField
    residual_sup: float
    newton_history: list


def kazdan_warner_solve(a: ScalarField, b: ScalarField, tol: float = 1e-10,
                        max_iter: int = 50, start: np.ndarray = None) -> KWSolution:
    """Solve ``lap f + A e^f = B`` for positive A and positive-mean B."""
    av = np.asarray(a.values, dtype=float)
    bv = np.asarray(b.values, dtype=float)
    rule = a.rule
    if np.any(av <= 0):
        raise VortexError("A must be positive pointwise")
    if rule.integrate(bv) <= 0:
        raise VortexError("integral of B must be positive")
    lap = _laplacian_matrix(rule)
    f = np.zeros(len(rule)) if start is None else np.array(start, dtype=float)
    history = []
    for _ in range(max_iter):
        res = lap @ f + av * np.exp(f) - bv
        norm = float(np.abs(res).max())
        history.append(norm)
        if norm < tol:
            basis = rule.harmonics()
            fld = ScalarField(rule, f, expansion=basis.expansion(basis.analyze(f)))
            return KWSolution(f=fld, residual_sup=norm, newton_history=history)
        jac = lap + np.diag(av * np.exp(f))
        step = np.linalg.solve(jac, -res)
        s = 1.0
        while s > 1e-6:
            trial = f + s * step
            tnorm = np.abs(lap @ trial + av * np.exp(trial) - bv).max()
            if tnorm < norm * (1.0 - 1e-4 * s) + 1e-15:
                break
            s *= 0.5
        else:
            raise VortexError("Kazdan-Warner line search exhausted")
        f = f + s * step
    raise VortexError(f"Kazdan-Warner Newton did not converge; last residual {history[-1]:.3e}")


# -- Witten triple stand-in ---------------------------------------------------------


@dataclass
class WittenTripleData:
    chain: ChainSpec
    solution: VortexSolution
    coupling: ScalarField          # |phi|^2_h - |theta|^2_h, must be positive
    kw_a: ScalarField
    kw_b: ScalarField
    kw: "KWSolution | None"


def vafa_witten_translate(beta: float, deg_canonical: int, deg_line: int,
                          theta, phi, rule: QuadratureRule,
                          alpha0: float = None, solve_kw: bool = True):
    """Assemble the special-triple chain (K, L, O) and its conformal KW step.

    ``theta`` maps the line bundle into the canonical stand-in, ``phi`` is the
    section of the line bundle (must be nonvanishing in the special regime
    ``deg L < beta``).  ``alpha0`` defaults to slightly above ``deg K``;
    equality is required when ``theta`` vanishes identically.
    """
    theta = tuple(complex(c) for c in np.atleast_1d(theta))
    phi = tuple(complex(c) for c in np.atleast_1d(phi))
    theta_zero = all(c == 0 for c in theta)
    if beta <= deg_line:
        raise VortexError("special triple needs beta above the line-bundle degree")
    if all(c == 0 for c in phi):
        raise VortexError("special triple needs a nonzero section phi")
    if alpha0 is None:
        alpha0 = float(deg_canonical) if theta_zero else deg_canonical + 0.25
    if theta_zero and alpha0 != deg_canonical:
        raise VortexError("with theta = 0 the canonical node decouples; alpha0 must equal its degree")
    if not theta_zero and alpha0 <= deg_canonical:
        raise VortexError("need alpha0 above deg K for a positive theta mass")

    tau2 = deg_canonical + deg_line - alpha0 - beta
    chain = ChainSpec(degrees=(deg_canonical, deg_line, 0),
                      morphisms=(theta, phi), tau_prime=(alpha0, beta, tau2))
    sol = chain_vortex_solve(chain, rule)
    pts = rule.points
    g_theta = morphism_density(chain, 0, pts)
    g_phi = morphism_density(chain, 1, pts)
    f0, f1, f2 = (f.values for f in sol.factors)
    coupling = g_phi * np.exp(f1 - f2) - g_theta * np.exp(f0 - f1)
    if np.any(coupling <= 0):
        raise VortexError("the triple coupling |phi|^2 - |theta|^2 is not positive")
    coupling_f = ScalarField(rule, coupling)
    lam1 = solution_curvatures(sol)[1]
    kw_a = ScalarField(rule, 0.5 * coupling)
    kw_b = ScalarField(rule, beta - lam1.values)
    kw = kazdan_warner_solve(kw_a, kw_b) if solve_kw else None
    return WittenTripleData(chain=chain, solution=sol, coupling=coupling_f,
                            kw_a=kw_a, kw_b=kw_b, kw=kw)


def almost_vortex_residual(degree: int, phi, f: ScalarField, u: ScalarField,
                           lam: float):
    """Residual of the pair equation with a frozen trivialization factor.

    Evaluates ``lam(e^f ref) + e^{-u} |phi|^2_{e^f ref} - lam`` for a rank-1
    pair; no solver is attached (the conformal-change obstruction is real).
    """
    rule = f.rule
    pts = rule.points
    coeffs = np.asarray(np.atleast_1d(phi), dtype=complex)
    full = np.zeros(degree + 1, dtype=complex)
    full[: min(len(coeffs), degree + 1)] = coeffs[: degree + 1]
    vals0 = np.polyval(full[::-1], pts.zeta)
    vals1 = np.polyval(full, pts.zeta)
    vals = np.where(pts.chart == 0, vals0, vals1)
    gphi = (np.abs(vals) ** 2) * pts.one_plus_abs2 ** (-degree)
    lapf = geometry.laplacian(f)
    res = degree - lapf.values + np.exp(f.values - u.values) * gphi - lam
    return ScalarField(rule, res), float(np.abs(res).max())
