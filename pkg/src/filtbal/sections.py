"""Monomial bases of H^0(F otimes L^k) for split bundles and their evaluation.

Sections of ``O(e) otimes L^k = O(e+k)`` are polynomials of degree at most
``e+k`` in the chart-0 coordinate.  The basis is ordered summand-major,
exponent-ascending, and evaluation matrices are produced in the frame of
each point's owning chart (chart 1 sees the reversed monomial ``w^{e+k-t}``).
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .filtration import FiltrationError, FiltrationSpec, hilbert_poly
from .geometry import GridPoints, QuadratureRule


class SectionError(ValueError):
    pass


@dataclass(frozen=True)
class SectionBasis:
    """Monomial basis of the twisted section space, summand-major ordering."""

    spec: FiltrationSpec
    k: int
    counts: tuple
    offsets: tuple

    @property
    def dimension(self):
        return int(sum(self.counts))

    @property
    def labels(self):
        out = []
        for j, c in enumerate(self.counts):
            out.extend((j, t) for t in range(c))
        return out


def build_basis(spec: FiltrationSpec, k: int) -> SectionBasis:
    """Monomial basis of H^0(F otimes L^k); requires every twist nonnegative."""
    for j, e in enumerate(spec.degrees):
        if e + k < 0:
            raise SectionError(f"summand {j} with degree {e} has no sections at k={k}")
    counts = tuple(e + k + 1 for e in spec.degrees)
    offsets = tuple(int(x) for x in np.concatenate([[0], np.cumsum(counts)[:-1]]))
    basis = SectionBasis(spec=spec, k=k, counts=counts, offsets=offsets)
    assert basis.dimension == hilbert_poly(spec, k)
    return basis


def eval_basis(basis: SectionBasis, pts: GridPoints, derivative: bool = False) -> np.ndarray:
    """Evaluation matrices E(p), shape (npts, r, N), in the owning chart frame.

    With ``derivative=True`` returns d/dzeta of each entry instead (still in
    the owning chart; used by the quantized elliptic solver).
    """
    n = len(pts)
    r = basis.spec.rank
    out = np.zeros((n, r, basis.dimension), dtype=complex)
    z = pts.zeta
    in0 = pts.chart == 0
    for j, (e, off) in enumerate(zip(basis.spec.degrees, basis.offsets)):
        d = e + basis.k
        for t in range(d + 1):
            if not derivative:
                v0 = z**t
                v1 = z ** (d - t)
            else:
                v0 = t * z ** (t - 1) if t >= 1 else np.zeros_like(z)
                v1 = (d - t) * z ** (d - t - 1) if d - t >= 1 else np.zeros_like(z)
            out[:, j, off + t] = np.where(in0, v0, v1)
    return out


def frame_change(spec: FiltrationSpec, k: int, pts: GridPoints) -> np.ndarray:
    """Diagonal transition g with v_chart1 = g * v_chart0 at each point, (npts, r).

    Entry j is ``w^{e_j+k}`` with w the chart-1 coordinate of the point; only
    meaningful away from the two poles.
    """
    w = np.where(pts.chart == 0, 1.0 / pts.zeta, pts.zeta)
    return np.stack([w ** (e + k) for e in spec.degrees], axis=1)


def gram_exact(m: int) -> np.ndarray:
    """Exact L2 Gram of the monomial basis of O(m): diag 1/((m+1) C(m,i))."""
    if m < 0:
        raise SectionError("degree must be nonnegative")
    diag = np.array([1.0 / ((m + 1) * comb(m, i)) for i in range(m + 1)])
    return np.diag(diag).astype(complex)


def gram_reference(spec: FiltrationSpec, k: int) -> np.ndarray:
    """Block-diagonal exact Gram of the product reference metric on F otimes L^k."""
    blocks = [gram_exact(e + k) for e in spec.degrees]
    n = sum(b.shape[0] for b in blocks)
    out = np.zeros((n, n), dtype=complex)
    pos = 0
    for b in blocks:
        s = b.shape[0]
        out[pos:pos + s, pos:pos + s] = b
        pos += s
    return out


def gram_quadrature(basis: SectionBasis, rule: QuadratureRule,
                    weight=None, force_chart=None) -> np.ndarray:
    """Gram matrix against the product reference metric, by quadrature.

    ``weight`` multiplies the reference fiber metric pointwise (a positive
    scalar array).  ``force_chart`` evaluates everything in a single chart
    frame, for the chart-independence check.
    """
    pts = rule.points
    if force_chart is not None:
        zeta = np.where(pts.chart == force_chart, pts.zeta, 1.0 / pts.zeta)
        pts = GridPoints(zeta, np.full(len(pts), force_chart))
    e = eval_basis(basis, pts)
    href = reference_metric(basis.spec, basis.k, pts)
    if weight is not None:
        href = href * np.asarray(weight)[:, None, None]
    ew = np.einsum("p,prs,psj->prj", rule.weights, href, e)
    return np.einsum("pri,prj->ij", e.conj(), ew)


def reference_metric(spec: FiltrationSpec, k: int, pts: GridPoints) -> np.ndarray:
    """Product round metric on F otimes L^k in the owning chart frame, (npts, r, r)."""
    opa = pts.one_plus_abs2
    diag = np.stack([opa ** (-(e + k)) for e in spec.degrees], axis=1)
    n, r = diag.shape
    out = np.zeros((n, r, r), dtype=complex)
    idx = np.arange(r)
    out[:, idx, idx] = diag
    return out
