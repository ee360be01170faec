"""Piecewise exponential additive models.

The log hazard of PED row ``(i, j)`` is ``B_ij @ w`` with design columns
ordered as intercept, centered baseline smooth of the interval time, linear
terms, then centered smooths of features. Coefficients minimize the
penalized Poisson negative log-likelihood with ``log t_ij`` as offset.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .basis import SplineSpec, bspline_design, center_constraint, difference_penalty
from .ped import CutPoints, PedData

logger = logging.getLogger(__name__)

PSI_GRID = np.logspace(-4, 4, 13)
ETA_CLAMP = 30.0


class PamConfigError(ValueError):
    pass


class FittingError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


# -- structured specification ------------------------------------------------


@dataclass(frozen=True)
class Intercept:
    pass


@dataclass(frozen=True)
class Linear:
    feature: str


@dataclass(frozen=True)
class Smooth:
    feature: str
    n_basis: int = 8
    degree: int = 3
    penalty_order: int = 2
    range: tuple[float, float] | None = None


@dataclass(frozen=True)
class Baseline:
    n_basis: int = 10
    degree: int = 3
    penalty_order: int = 2


@dataclass(frozen=True)
class StructuredSpec:
    terms: tuple

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if sum(isinstance(t, Intercept) for t in self.terms) != 1:
            raise PamConfigError("spec needs exactly one intercept")
        if sum(isinstance(t, Baseline) for t in self.terms) != 1:
            raise PamConfigError("spec needs exactly one baseline term")

    @property
    def baseline(self) -> Baseline:
        return next(t for t in self.terms if isinstance(t, Baseline))

    @property
    def features(self) -> list[str]:
        return [t.feature for t in self.terms if isinstance(t, (Linear, Smooth))]

    @classmethod
    def standard(cls, linear=(), smooth=(), baseline_basis=10) -> "StructuredSpec":
        terms = [Intercept(), Baseline(n_basis=baseline_basis)]
        terms += [Linear(f) for f in linear]
        terms += [Smooth(f) if isinstance(f, str) else f for f in smooth]
        return cls(tuple(terms))

    def to_dict(self) -> dict:
        out = []
        for t in self.terms:
            if isinstance(t, Intercept):
                out.append({"type": "intercept"})
            elif isinstance(t, Linear):
                out.append({"type": "linear", "feature": t.feature})
            elif isinstance(t, Smooth):
                out.append({"type": "smooth", "feature": t.feature, "n_basis": t.n_basis,
                            "degree": t.degree, "penalty_order": t.penalty_order,
                            "range": list(t.range) if t.range else None})
            else:
                out.append({"type": "baseline", "n_basis": t.n_basis, "degree": t.degree,
                            "penalty_order": t.penalty_order})
        return {"terms": out}

    @classmethod
    def from_dict(cls, d: dict) -> "StructuredSpec":
        terms = []
        for t in d["terms"]:
            kind = t["type"]
            if kind == "intercept":
                terms.append(Intercept())
            elif kind == "linear":
                terms.append(Linear(t["feature"]))
            elif kind == "smooth":
                rng = tuple(t["range"]) if t.get("range") else None
                terms.append(Smooth(t["feature"], int(t.get("n_basis", 8)), int(t.get("degree", 3)),
                                    int(t.get("penalty_order", 2)), rng))
            elif kind == "baseline":
                terms.append(Baseline(int(t.get("n_basis", 10)), int(t.get("degree", 3)),
                                      int(t.get("penalty_order", 2))))
            else:
                raise PamConfigError(f"unknown term type {kind!r}")
        return cls(tuple(terms))


# -- design ------------------------------------------------------------------


@dataclass
class Block:
    """A contiguous group of design columns belonging to one term."""

    name: str
    kind: str
    cols: slice
    feature: str | None = None
    spline: SplineSpec | None = None
    z: np.ndarray | None = None
    penalty: np.ndarray | None = None  # in centered coordinates

    @property
    def penalized(self) -> bool:
        return self.penalty is not None


@dataclass
class DesignMap:
    """Column layout of a structured design, including centering transforms.

    Built once from training PED data and reused to evaluate the design on
    new rows.
    """

    blocks: list[Block]
    feature_names: tuple[str, ...]
    n_cols: int

    @property
    def penalized_blocks(self) -> list[Block]:
        return [b for b in self.blocks if b.penalized]

    @property
    def time_cols(self) -> slice:
        """Columns that depend on interval time only (intercept + baseline)."""
        stop = max(b.cols.stop for b in self.blocks if b.kind in ("intercept", "baseline"))
        return slice(0, stop)

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def penalty_matrix(self, psi) -> np.ndarray:
        """Block-diagonal ``sum_l psi_l S_l`` over all design columns."""
        s = np.zeros((self.n_cols, self.n_cols))
        for p, b in zip(np.atleast_1d(psi), self.penalized_blocks):
            s[b.cols, b.cols] += p * b.penalty
        return s

    def time_matrix(self, t_j) -> np.ndarray:
        t_j = np.asarray(t_j, dtype=float).ravel()
        out = np.zeros((t_j.size, self.time_cols.stop))
        for b in self.blocks:
            if b.kind == "intercept":
                out[:, b.cols] = 1.0
            elif b.kind == "baseline":
                out[:, b.cols] = bspline_design(t_j, b.spline) @ b.z
        return out

    def feature_matrix(self, features) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=float))
        start = self.time_cols.stop
        out = np.zeros((features.shape[0], self.n_cols - start))
        for b in self.blocks:
            if b.kind not in ("linear", "smooth"):
                continue
            x = features[:, self.feature_names.index(b.feature)]
            cols = slice(b.cols.start - start, b.cols.stop - start)
            if b.kind == "linear":
                out[:, cols] = x[:, None]
            else:
                out[:, cols] = bspline_design(x, b.spline) @ b.z
        return out

    def matrix(self, t_j, features) -> np.ndarray:
        return np.hstack([self.time_matrix(t_j), self.feature_matrix(features)])

    def to_dict(self) -> dict:
        blocks = []
        for b in self.blocks:
            blocks.append({
                "name": b.name, "kind": b.kind, "cols": [b.cols.start, b.cols.stop],
                "feature": b.feature,
                "spline": b.spline.to_dict() if b.spline else None,
                "z": b.z.tolist() if b.z is not None else None,
                "penalty": b.penalty.tolist() if b.penalty is not None else None,
            })
        return {"blocks": blocks, "feature_names": list(self.feature_names), "n_cols": self.n_cols}

    @classmethod
    def from_dict(cls, d: dict) -> "DesignMap":
        blocks = []
        for b in d["blocks"]:
            blocks.append(Block(
                name=b["name"], kind=b["kind"], cols=slice(*b["cols"]), feature=b["feature"],
                spline=SplineSpec.from_dict(b["spline"]) if b["spline"] else None,
                z=np.array(b["z"], dtype=float) if b["z"] is not None else None,
                penalty=np.array(b["penalty"], dtype=float) if b["penalty"] is not None else None,
            ))
        return cls(blocks, tuple(d["feature_names"]), int(d["n_cols"]))


def _centered_smooth(x, spline: SplineSpec):
    raw = bspline_design(x, spline)
    if spline.degenerate:
        return np.zeros((x.size, 0)), np.zeros((1, 0)), None
    design, z = center_constraint(raw)
    penalty = z.T @ difference_penalty(spline.n_basis, spline.penalty_order) @ z
    return design, z, penalty


def build_design(ped: PedData, spec: StructuredSpec) -> tuple[np.ndarray, DesignMap]:
    """Assemble the structured design matrix for ``ped`` and its column map."""
    for f in spec.features:
        if f not in ped.feature_names:
            raise PamConfigError(f"unknown feature {f!r}; available: {list(ped.feature_names)}")

    parts: list[np.ndarray] = [np.ones((len(ped), 1))]
    blocks = [Block("intercept", "intercept", slice(0, 1))]
    col = 1

    base = spec.baseline
    spline = SplineSpec(base.n_basis, (0.0, ped.cuts.horizon), base.degree, base.penalty_order)
    design, z, penalty = _centered_smooth(ped.t_j, spline)
    if design.shape[1]:
        parts.append(design)
        blocks.append(Block("baseline", "baseline", slice(col, col + design.shape[1]),
                            spline=spline, z=z, penalty=penalty))
        col += design.shape[1]

    for t in spec.terms:
        if isinstance(t, Linear):
            parts.append(ped.feature(t.feature)[:, None])
            blocks.append(Block(f"linear({t.feature})", "linear", slice(col, col + 1),
                                feature=t.feature))
            col += 1
    for t in spec.terms:
        if isinstance(t, Smooth):
            x = ped.feature(t.feature)
            rng = t.range or (float(x.min()), float(x.max()))
            spline = SplineSpec(t.n_basis, rng, t.degree, t.penalty_order)
            design, z, penalty = _centered_smooth(x, spline)
            parts.append(design)
            blocks.append(Block(f"smooth({t.feature})", "smooth", slice(col, col + design.shape[1]),
                                feature=t.feature, spline=spline, z=z, penalty=penalty))
            col += design.shape[1]

    return np.hstack(parts), DesignMap(blocks, ped.feature_names, col)


# -- objective ---------------------------------------------------------------


def poisson_nll(eta, t_risk, status) -> float:
    """``-sum(delta * (eta + log t) - t * exp(eta))``."""
    eta = np.asarray(eta, dtype=float)
    bad = np.flatnonzero(~np.isfinite(eta))
    if bad.size:
        raise NumericError(f"non-finite linear predictor at row {bad[0]}")
    return float(np.sum(t_risk * np.exp(eta)) - np.sum(status * (eta + np.log(t_risk))))


def penalty_value(w, psi, penalties: DesignMap) -> float:
    w = np.asarray(w, dtype=float)
    return float(w @ penalties.penalty_matrix(psi) @ w)


def penalized_nll(w, design, t_risk, status, psi, penalties: DesignMap) -> float:
    """Penalized negative Poisson log-likelihood with log exposure offset."""
    eta = design @ w
    return poisson_nll(eta, t_risk, status) + penalty_value(w, psi, penalties)


def penalized_nll_grad(w, design, t_risk, status, psi, penalties: DesignMap) -> np.ndarray:
    mu = t_risk * np.exp(design @ w)
    return design.T @ (mu - status) + 2.0 * penalties.penalty_matrix(psi) @ w


# -- fitting -----------------------------------------------------------------


@dataclass
class PamFit:
    w: np.ndarray
    spec: StructuredSpec
    psi: np.ndarray
    design_map: DesignMap
    cuts: CutPoints
    converged: bool
    final_penalized_nll: float
    n_iter: int
    gradient_norm: float = np.nan
    psi_path: list = field(default_factory=list)

    @property
    def penalties(self) -> np.ndarray:
        return self.design_map.penalty_matrix(self.psi)

    def coef(self, name: str) -> np.ndarray:
        return self.w[self.design_map.block(name).cols]

    def roughness(self, name: str) -> float:
        """``theta' S theta`` of a smooth on its centered coefficients."""
        b = self.design_map.block(name)
        theta = self.w[b.cols]
        return float(theta @ b.penalty @ theta)

    def smooth_values(self, name: str, x) -> np.ndarray:
        b = self.design_map.block(name)
        return bspline_design(x, b.spline) @ b.z @ self.w[b.cols]

    # predictions

    def time_effect(self, t_j=None) -> np.ndarray:
        """Intercept plus baseline smooth at interval times (default: every cut)."""
        if t_j is None:
            t_j = self.cuts.cuts[1:]
        return self.design_map.time_matrix(t_j) @ self.w[self.design_map.time_cols]

    def feature_effect(self, features) -> np.ndarray:
        return self.design_map.feature_matrix(features) @ self.w[self.design_map.time_cols.stop:]

    def log_hazard(self, features, times) -> np.ndarray:
        """Log hazard matrix of shape ``(n_subjects, len(times))``."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        idx = self.cuts.interval_index(times)
        base = self.time_effect()[idx]
        return self.feature_effect(features)[:, None] + base[None, :]

    def survival(self, features, times) -> np.ndarray:
        return survival_from_log_hazard(self.cuts, self.time_effect(),
                                        self.feature_effect(features), times)

    def to_dict(self) -> dict:
        return {
            "kind": "pam",
            "spec": self.spec.to_dict(),
            "w": self.w.tolist(),
            "psi": np.atleast_1d(self.psi).tolist(),
            "cuts": self.cuts.cuts.tolist(),
            "design_map": self.design_map.to_dict(),
            "converged": bool(self.converged),
            "final_penalized_nll": self.final_penalized_nll,
            "n_iter": self.n_iter,
            "gradient_norm": self.gradient_norm,
            "psi_path": self.psi_path,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "PamFit":
        return cls(
            w=np.array(d["w"], dtype=float),
            spec=StructuredSpec.from_dict(d["spec"]),
            psi=np.array(d["psi"], dtype=float),
            design_map=DesignMap.from_dict(d["design_map"]),
            cuts=CutPoints(d["cuts"]),
            converged=bool(d["converged"]),
            final_penalized_nll=float(d["final_penalized_nll"]),
            n_iter=int(d["n_iter"]),
            gradient_norm=float(d.get("gradient_norm", np.nan)),
            psi_path=d.get("psi_path", []),
        )


def survival_from_log_hazard(cuts: CutPoints, time_effect, subject_effect, times) -> np.ndarray:
    """Survival under a piecewise-constant, proportional log hazard.

    ``time_effect[j]`` is the log hazard part of interval ``j`` shared by all
    subjects and ``subject_effect[i]`` the time-constant part of subject
    ``i``. Past the last cut the last interval's hazard continues.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    k = cuts.cuts
    h0 = np.exp(time_effect)
    cum = np.concatenate([[0.0], np.cumsum(h0 * np.diff(k))])
    idx = cuts.interval_index(times)
    base_cum = cum[idx] + h0[idx] * (np.maximum(times, 0.0) - k[idx])
    base_cum = np.where(times <= 0, 0.0, base_cum)
    return np.exp(-np.exp(np.asarray(subject_effect, dtype=float))[:, None] * base_cum[None, :])


def predict_hazard(fit: PamFit, features, t: float) -> float:
    return float(np.exp(fit.log_hazard(np.atleast_2d(features), [t])[0, 0]))


def predict_survival(fit: PamFit, features, t: float) -> float:
    return float(fit.survival(np.atleast_2d(features), [t])[0, 0])


def _newton(design, t_risk, status, s_psi, w0, max_iter=200):
    """Minimize the penalized Poisson nll; returns (w, converged, obj, n_iter, gnorm)."""
    log_t = np.log(t_risk)
    const = float(status @ log_t)

    def objective(w, clamp=True):
        eta = design @ w
        if clamp:
            eta = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
        return float(t_risk @ np.exp(eta) - status @ eta) - const + float(w @ s_psi @ w)

    w = np.array(w0, dtype=float)
    obj = objective(w)
    converged = False
    gnorm = np.inf
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        mu = t_risk * np.exp(np.clip(design @ w, -ETA_CLAMP, ETA_CLAMP))
        grad = design.T @ (mu - status) + 2.0 * s_psi @ w
        gnorm = float(np.linalg.norm(grad))
        if gnorm < 1e-8:
            converged = True
            break
        hess = (design * mu[:, None]).T @ design + 2.0 * s_psi
        step = _solve(hess, grad)
        alpha = 1.0
        for _ in range(60):
            w_new = w - alpha * step
            obj_new = objective(w_new)
            if obj_new <= obj:
                break
            alpha *= 0.5
        else:
            # no descent along the Newton direction: numerically at the optimum
            converged = gnorm <= 1e-6 * (1.0 + abs(obj))
            break
        rel = abs(obj - obj_new) / (1.0 + abs(obj))
        w, obj = w_new, obj_new
        if rel < 1e-9:
            mu = t_risk * np.exp(design @ w)
            gnorm = float(np.linalg.norm(design.T @ (mu - status) + 2.0 * s_psi @ w))
            if gnorm <= 1e-6 * (1.0 + abs(obj)):
                converged = True
                break
    final = objective(w, clamp=False)
    if not np.isfinite(final):
        raise NumericError("non-finite objective at the final iterate")
    return w, converged, final, n_iter, gnorm


def _solve(hess, grad):
    try:
        return np.linalg.solve(_chol_checked(hess), grad)
    except np.linalg.LinAlgError:
        ridge = hess + 1e-8 * np.eye(hess.shape[0])
        try:
            return np.linalg.solve(_chol_checked(ridge), grad)
        except np.linalg.LinAlgError as exc:
            raise FittingError("singular Hessian after ridge fallback") from exc


def _chol_checked(h):
    np.linalg.cholesky(h)  # raises LinAlgError when not positive definite
    return h


def _initial_w(design_map: DesignMap, t_risk, status):
    w = np.zeros(design_map.n_cols)
    w[0] = np.log(status.sum() / t_risk.sum())
    return w


def fit_pam(ped: PedData, spec: StructuredSpec, psi="select", *, val: PedData | None = None,
            grid: Sequence[float] = PSI_GRID, max_iter: int = 200) -> PamFit:
    """Fit a PAM.

    Parameters
    ----------
    ped : PedData
        Training data in PED layout.
    spec : StructuredSpec
        Additive predictor.
    psi : array-like or "select"
        Smoothing parameters, one per penalized block (baseline first, then
        feature smooths). ``"select"`` runs a coordinate-wise search over
        ``grid`` minimizing the unpenalized nll on ``val``; ties go to the
        larger value.
    val : PedData, optional
        Validation data cut at the training cut points; required for
        ``psi="select"``.
    """
    if len(ped) == 0:
        raise FittingError("empty PED data")
    if ped.status.sum() == 0:
        raise FittingError("no events")
    design, dmap = build_design(ped, spec)
    t_risk = ped.t_risk.astype(float)
    status = ped.status.astype(float)
    n_pen = len(dmap.penalized_blocks)
    w0 = _initial_w(dmap, t_risk, status)

    path = []
    if isinstance(psi, str):
        if psi != "select":
            raise PamConfigError(f"unknown smoothing strategy {psi!r}")
        if n_pen == 0:
            psi_vec = np.zeros(0)
        else:
            if val is None:
                raise PamConfigError("psi selection needs validation data")
            val_design = dmap.matrix(val.t_j, val.features)
            psi_vec, path = _select_psi(design, t_risk, status, dmap, val_design, val, grid, w0)
    else:
        psi_vec = np.atleast_1d(np.asarray(psi, dtype=float))
        if psi_vec.size != n_pen:
            raise PamConfigError(f"expected {n_pen} smoothing parameters, got {psi_vec.size}")
        if np.any(psi_vec < 0):
            raise PamConfigError("smoothing parameters must be non-negative")

    w, converged, obj, n_iter, gnorm = _newton(design, t_risk, status,
                                              dmap.penalty_matrix(psi_vec), w0, max_iter)
    if not converged:
        logger.warning("PAM fit did not converge after %d iterations (|grad|=%.3g)", n_iter, gnorm)
    return PamFit(w=w, spec=spec, psi=psi_vec, design_map=dmap, cuts=ped.cuts,
                  converged=converged, final_penalized_nll=obj, n_iter=n_iter,
                  gradient_norm=gnorm, psi_path=path)


def _select_psi(design, t_risk, status, dmap, val_design, val, grid, w0):
    grid = np.sort(np.asarray(grid, dtype=float))
    n_pen = len(dmap.penalized_blocks)
    psi = np.ones(n_pen)
    path = []
    w_start = w0
    for _ in range(3 if n_pen > 1 else 1):
        changed = False
        for l in range(n_pen):
            scores = []
            for value in grid:
                trial = psi.copy()
                trial[l] = value
                w, *_ = _newton(design, t_risk, status, dmap.penalty_matrix(trial), w_start)
                scores.append(poisson_nll(val_design @ w, val.t_risk, val.status))
            scores = np.array(scores)
            tol = 1e-10 * (1.0 + abs(scores.min()))
            best = grid[np.flatnonzero(scores <= scores.min() + tol).max()]
            path.append({"block": l, "grid": grid.tolist(), "val_nll": scores.tolist(),
                         "chosen": float(best)})
            if best != psi[l]:
                changed = True
            psi[l] = best
        if not changed:
            break
    return psi, path


def load_pam(text: str) -> PamFit:
    return PamFit.from_dict(json.loads(text))
