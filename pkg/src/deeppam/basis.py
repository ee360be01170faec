"""B-spline bases, difference penalties and sum-to-zero reparametrization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BasisConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplineSpec:
    """Equidistant B-spline basis on ``range``.

    ``n_basis == 1`` is a degenerate single constant basis function; it has
    no penalty and contributes no columns once centered.
    """

    n_basis: int = 10
    range: tuple[float, float] = (0.0, 1.0)
    degree: int = 3
    penalty_order: int = 2

    def __post_init__(self):
        lo, hi = self.range
        object.__setattr__(self, "range", (float(lo), float(hi)))
        if not lo < hi:
            raise BasisConfigError(f"empty spline range {self.range}")
        if self.degree < 0:
            raise BasisConfigError("degree must be non-negative")
        if self.n_basis < self.degree + 1:
            raise BasisConfigError(
                f"n_basis={self.n_basis} is below degree + 1 = {self.degree + 1}")
        if self.n_basis > 1 and not 0 < self.penalty_order < self.n_basis:
            raise BasisConfigError(
                f"penalty_order must lie in [1, {self.n_basis - 1}], got {self.penalty_order}")

    @property
    def degenerate(self) -> bool:
        return self.n_basis == 1

    def knots(self) -> np.ndarray:
        """Equidistant knots, extended by ``degree`` spans beyond each end."""
        lo, hi = self.range
        n_spans = self.n_basis - self.degree
        dx = (hi - lo) / n_spans
        return lo + dx * np.arange(-self.degree, n_spans + self.degree + 1)

    def to_dict(self) -> dict:
        return {"n_basis": self.n_basis, "range": list(self.range),
                "degree": self.degree, "penalty_order": self.penalty_order}

    @classmethod
    def from_dict(cls, d: dict) -> "SplineSpec":
        return cls(n_basis=int(d["n_basis"]), range=tuple(d["range"]),
                   degree=int(d.get("degree", 3)), penalty_order=int(d.get("penalty_order", 2)))


def _basis_funs(knots, degree, span, x):
    """Non-zero basis values N[k-degree..k] at x for spans k (vectorized Cox-de Boor)."""
    n = x.size
    values = np.zeros((n, degree + 1))
    values[:, 0] = 1.0
    left = np.empty((n, degree + 1))
    right = np.empty((n, degree + 1))
    for p in range(1, degree + 1):
        left[:, p] = x - knots[span + 1 - p]
        right[:, p] = knots[span + p] - x
        saved = np.zeros(n)
        for r in range(p):
            temp = values[:, r] / (right[:, r + 1] + left[:, p - r])
            values[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, p - r] * temp
        values[:, p] = saved
    return values


def bspline_design(x, spec: SplineSpec, deriv: int = 0) -> np.ndarray:
    """Evaluate the basis (or its first derivative) at ``x``.

    Returns an array of shape ``(len(x), spec.n_basis)``. Values outside
    ``spec.range`` are clamped to it. Intervals are left-open, so a point
    sitting exactly on a knot belongs to the span on its left.
    """
    if deriv not in (0, 1):
        raise BasisConfigError("only deriv 0 and 1 are supported")
    lo, hi = spec.range
    x = np.clip(np.asarray(x, dtype=float).ravel(), lo, hi)
    p = spec.degree
    m = spec.n_basis
    knots = spec.knots()
    span = np.searchsorted(knots, x, side="left") - 1
    span = np.clip(span, p, m - 1)
    out = np.zeros((x.size, m))
    rows = np.arange(x.size)[:, None]
    cols = span[:, None] - p + np.arange(p + 1)[None, :]
    if deriv == 0:
        out[rows, cols] = _basis_funs(knots, p, span, x)
        return out
    if p == 0:
        return out
    # B'_{k,p} = p/(t_{k+p}-t_k) B_{k,p-1} - p/(t_{k+p+1}-t_{k+1}) B_{k+1,p-1}
    lower = _basis_funs(knots, p - 1, span, x)  # B_{span-p+1 .. span, p-1}
    idx = span[:, None] - p + 1 + np.arange(p)[None, :]
    scaled = p * lower / (knots[idx + p] - knots[idx])
    d = np.zeros((x.size, p + 1))
    d[:, 1:] += scaled
    d[:, :-1] -= scaled
    out[rows, cols] = d
    return out


def difference_matrix(m: int, order: int) -> np.ndarray:
    """Order-th forward difference operator of shape ``(m - order, m)``."""
    if not 0 < order < m:
        raise BasisConfigError(f"difference order must lie in [1, {m - 1}], got {order}")
    return np.diff(np.eye(m), n=order, axis=0)


def difference_penalty(m: int, order: int) -> np.ndarray:
    """Penalty matrix ``D.T @ D`` for neighbouring-coefficient differences."""
    d = difference_matrix(m, order)
    return d.T @ d


def center_constraint(design: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Absorb a sum-to-zero constraint into the design.

    Returns ``(design @ Z, Z)`` where the ``M - 1`` columns of ``Z`` span the
    null space of the design's column sums, so every reparametrized column
    sums to zero. Coefficients map back as ``theta = Z @ theta_centered``.
    """
    design = np.asarray(design, dtype=float)
    if design.ndim != 2 or design.shape[1] < 2:
        raise BasisConfigError("centering needs a design with at least 2 columns")
    sums = design.sum(axis=0)[:, None]
    q, _ = np.linalg.qr(sums, mode="complete")
    z = q[:, 1:]
    return design @ z, z
