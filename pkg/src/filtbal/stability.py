"""Slope/Gieseker stability evidence and Hilbert-Mumford weights.

Stability is only ever certified relative to an explicit finite candidate
family (summand sub-bundles, the filtration steps themselves, randomized
line-bundle images); the aggregate verdict says so.  Induced sub-ranks are
measured pointwise at seeded sample points, which computes the generic
(sheaf-theoretic) intersection ranks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .filtration import FiltrationSpec, ParamSchedule, tau_slope
from .geometry import GridPoints


class StabilityError(ValueError):
    pass


@dataclass(frozen=True)
class SubfiltrationCandidate:
    """A rank r' subsheaf with its induced intersection ranks with the flag."""

    label: str
    rank: int
    degree: int
    induced_ranks: tuple    # r(F' cap F_i) for each step i
    sub_degrees: tuple      # split degrees of F' (for h^0 counts)

    def __post_init__(self):
        ind = self.induced_ranks
        if any(b < a for a, b in zip(ind, ind[1:])):
            raise StabilityError("induced ranks must be nondecreasing")
        if any(i > self.rank for i in ind):
            raise StabilityError("induced ranks cannot exceed the candidate rank")


def _sample_points(seed=0, count=7):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=count) + 1j * rng.normal(size=count)
    return GridPoints(z, np.zeros(count, dtype=int))


def _generic_rank(mats):
    """Generic (max over sample points) numerical rank of a stacked family."""
    sv = np.linalg.svd(mats, compute_uv=False)
    ranks = (sv > 1e-8 * sv[:, :1]).sum(axis=1)
    return int(ranks.max())


def induced_ranks(spec: FiltrationSpec, columns: np.ndarray, rank: int,
                  pts: GridPoints) -> tuple:
    """Generic intersection ranks of a candidate with each flag step.

    ``columns``: (npts, r, rank) pointwise spanning columns of the candidate.
    Uses r(F' cap F_i) = r' + r_i - rank[F' | F_i] at generic points.
    """
    out = []
    for i, step in enumerate(spec.steps):
        phi = spec.step_matrix(i, pts)
        stack = np.concatenate([columns, phi], axis=2)
        out.append(rank + step.rank - _generic_rank(stack))
    return tuple(out)


def summand_candidate(spec: FiltrationSpec, indices, pts=None) -> SubfiltrationCandidate:
    indices = tuple(sorted(indices))
    if not 0 < len(indices) < spec.rank:
        raise StabilityError("summand subset must be proper and nonempty")
    pts = pts if pts is not None else _sample_points()
    cols = np.zeros((len(pts), spec.rank, len(indices)), dtype=complex)
    for c, j in enumerate(indices):
        cols[:, j, c] = 1.0
    ind = induced_ranks(spec, cols, len(indices), pts)
    degs = tuple(spec.degrees[j] for j in indices)
    return SubfiltrationCandidate(label=f"summand{indices}", rank=len(indices),
                                  degree=int(sum(degs)), induced_ranks=ind,
                                  sub_degrees=degs)


def step_candidate(spec: FiltrationSpec, i: int, pts=None) -> SubfiltrationCandidate:
    step = spec.steps[i]
    pts = pts if pts is not None else _sample_points()
    cols = spec.step_matrix(i, pts)
    ind = induced_ranks(spec, cols, step.rank, pts)
    return SubfiltrationCandidate(label=f"step{i + 1}", rank=step.rank,
                                  degree=step.degree, induced_ranks=ind,
                                  sub_degrees=step.sub_degrees)


def line_image_candidate(spec: FiltrationSpec, a: int, rng, pts=None):
    """The image of a randomized polynomial map O(a) -> F (generically saturated)."""
    if all(e < a for e in spec.degrees):
        return None
    pts = pts if pts is not None else _sample_points()
    cols = np.zeros((len(pts), spec.rank, 1), dtype=complex)
    for j, e in enumerate(spec.degrees):
        d = e - a
        if d < 0:
            continue
        coeff = rng.normal(size=d + 1) + 1j * rng.normal(size=d + 1)
        vals0 = np.polyval(coeff[::-1], pts.zeta)
        vals1 = np.polyval(coeff, pts.zeta)
        cols[:, j, 0] = np.where(pts.chart == 0, vals0, vals1)
    ind = induced_ranks(spec, cols, 1, pts)
    return SubfiltrationCandidate(label=f"image O({a})", rank=1, degree=a,
                                  induced_ranks=ind, sub_degrees=(a,))


def candidate_family(spec: FiltrationSpec, seed: int = 0, images_per_degree: int = 3):
    """The logged default family: summand subsets, steps, random line images."""
    from itertools import combinations

    rng = np.random.default_rng(seed)
    pts = _sample_points(seed)
    out = []
    for size in range(1, spec.rank):
        for idx in combinations(range(spec.rank), size):
            out.append(summand_candidate(spec, idx, pts))
    for i in range(len(spec.steps)):
        out.append(step_candidate(spec, i, pts))
    for a in range(min(spec.degrees) - 1, max(spec.degrees) + 1):
        for _ in range(images_per_degree):
            cand = line_image_candidate(spec, a, rng, pts)
            if cand is not None:
                out.append(cand)
    return out


# -- slope verdicts -----------------------------------------------------------


@dataclass
class CandidateVerdict:
    candidate: SubfiltrationCandidate
    mu: float
    classification: str   # "strict" | "borderline" | "destabilizing"


@dataclass
class StabilityReport:
    mu_tau: float
    verdicts: list
    aggregate: str
    witness: "SubfiltrationCandidate | None"


def slope_verdict(spec: FiltrationSpec, candidates, tol: float = 1e-9) -> StabilityReport:
    """Classify each candidate by its tau-slope against the ambient slope.

    The aggregate is evidence only: "unstable (witness)" on any destabilizer,
    otherwise stability *relative to the tested family*; semistable ties are
    never promoted to stable.
    """
    if not candidates:
        raise StabilityError("empty candidate list")
    mu = tau_slope(spec)
    verdicts = []
    witness = None
    borderline = False
    for cand in candidates:
        extra = sum(t * ri for t, ri in zip(spec.tau, cand.induced_ranks))
        mu_c = (cand.degree + extra) / cand.rank
        if mu_c > mu + tol:
            cls = "destabilizing"
            if witness is None:
                witness = cand
        elif mu_c >= mu - tol:
            cls = "borderline"
            borderline = True
        else:
            cls = "strict"
        verdicts.append(CandidateVerdict(candidate=cand, mu=mu_c, classification=cls))
    if witness is not None:
        aggregate = f"unstable (witness: {witness.label})"
    elif borderline:
        aggregate = "semistable-borderline relative to tested family"
    else:
        aggregate = "stable relative to tested family"
    return StabilityReport(mu_tau=mu, verdicts=verdicts, aggregate=aggregate,
                           witness=witness)


# -- Hilbert-Mumford weights -----------------------------------------------------


def hm_weight(sched: ParamSchedule, dim_sub: int, rank_generated: int,
              induced: tuple) -> float:
    """Signed GIT weight of the one-parameter subgroup attached to a subspace.

    Negative values are the stable direction.  ``dim_sub`` is dim V',
    ``rank_generated`` the rank of the subsheaf V' generates, ``induced``
    its intersection ranks with the flag steps.
    """
    n = sched.N
    spec = sched.spec
    r = spec.rank
    if not 0 < dim_sub < n:
        raise StabilityError("need 0 < dim V' < dim V")
    induced = tuple(induced)
    if len(induced) != len(spec.steps):
        raise StabilityError("need one induced rank per step")
    if any(b < a for a, b in zip(induced, induced[1:])) or any(
            i > min(rank_generated, s.rank) for i, s in zip(induced, spec.steps)):
        raise StabilityError("inconsistent induced ranks")
    eps_total = sched.eps0 + sum(sched.eps)
    w = eps_total * (dim_sub * r - n * rank_generated)
    for e, s, ind in zip(sched.eps, spec.steps, induced):
        w += e * (n * ind - dim_sub * s.rank)
    return float(w)


def candidate_hm_weight(sched: ParamSchedule, cand: SubfiltrationCandidate) -> float:
    """HM weight of V' = H^0(F' otimes L^k) for a candidate subsheaf."""
    dim_sub = int(sum(a + sched.k + 1 for a in cand.sub_degrees))
    return hm_weight(sched, dim_sub, cand.rank, cand.induced_ranks)


# -- Gieseker comparison ------------------------------------------------------------


@dataclass
class GiesekerComparison:
    k_values: tuple
    lhs: tuple             # P'(k)/r'
    rhs: tuple             # P(k)/r
    strict_for_all: bool
    crossover: "int | None"


def gieseker_compare(spec: FiltrationSpec, cand: SubfiltrationCandidate,
                     k_values, weights=None) -> GiesekerComparison:
    """Reduced R-corrected Hilbert-polynomial comparison over a k-range.

    ``weights`` are the constant R_i (degree < 1 on a curve); they default
    to the spec's tau, the slope-stability specialization.
    """
    ws = tuple(weights) if weights is not None else spec.tau
    ks = tuple(int(k) for k in k_values)
    lhs, rhs = [], []
    for k in ks:
        chi_sub = cand.degree + cand.rank * (k + 1)
        chi_amb = spec.degree + spec.rank * (k + 1)
        p_sub = chi_sub + sum(w * ri for w, ri in zip(ws, cand.induced_ranks))
        p_amb = chi_amb + sum(w * s.rank for w, s in zip(ws, spec.steps))
        lhs.append(p_sub / cand.rank)
        rhs.append(p_amb / spec.rank)
    strict = all(a < b for a, b in zip(lhs, rhs))
    crossover = None
    signs = [a < b for a, b in zip(lhs, rhs)]
    for prev, cur, k in zip(signs, signs[1:], ks[1:]):
        if prev != cur:
            crossover = k
            break
    return GiesekerComparison(k_values=ks, lhs=tuple(lhs), rhs=tuple(rhs),
                              strict_for_all=strict, crossover=crossover)
