"""Kaplan-Meier curves and IPCW (integrated) Brier scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EvaluationError(ValueError):
    pass


class StepFunction:
    """Right-continuous step function on ``[0, inf)``.

    ``values[0]`` holds before the first knot and ``values[k]`` on
    ``[knots[k-1], knots[k])``; the last value extends to infinity.
    """

    def __init__(self, knots, values):
        knots = np.asarray(knots, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.size != knots.size + 1:
            raise EvaluationError("values must have one more entry than knots")
        if np.any(np.diff(knots) <= 0):
            raise EvaluationError("knots must be strictly increasing")
        self.knots = knots
        self.values = values

    def __call__(self, t) -> np.ndarray:
        return self.values[np.searchsorted(self.knots, t, side="right")]

    def left(self, t) -> np.ndarray:
        """Left limit ``f(t-)``."""
        return self.values[np.searchsorted(self.knots, t, side="left")]


def kaplan_meier(times, status) -> StepFunction:
    """Product-limit survival estimate.

    Subjects censored at an event time stay in that time's risk set.
    """
    times = np.asarray(times, dtype=float)
    status = np.asarray(status, dtype=int)
    if times.size == 0:
        raise EvaluationError("kaplan_meier needs at least one record")
    event_times = np.unique(times[status == 1])
    if event_times.size == 0:
        return StepFunction([], [1.0])
    sorted_times = np.sort(times)
    at_risk = times.size - np.searchsorted(sorted_times, event_times, side="left")
    deaths = np.array([np.sum((times == t) & (status == 1)) for t in event_times])
    surv = np.cumprod(1.0 - deaths / at_risk)
    return StepFunction(event_times, np.concatenate([[1.0], surv]))


def km_of_records(records, flip: bool = False) -> StepFunction:
    times = np.array([r.time for r in records], dtype=float)
    status = np.array([r.status for r in records], dtype=int)
    return kaplan_meier(times, 1 - status if flip else status)


def censoring_km(records) -> StepFunction:
    """KM of the censoring distribution (status flipped)."""
    return km_of_records(records, flip=True)


@dataclass
class BrierResult:
    times: np.ndarray
    bs: np.ndarray
    ibs: float
    tau: float
    n_dropped: int = 0


def _arrays(test):
    if isinstance(test, tuple):
        times, status = test
        return np.asarray(times, dtype=float), np.asarray(status, dtype=int)
    return (np.array([r.time for r in test], dtype=float),
            np.array([r.status for r in test], dtype=int))


def brier_components(times, status, surv, t: float, cens_km: StepFunction):
    """Per-subject IPCW squared errors at ``t`` and a mask of usable subjects.

    ``surv`` holds the predicted ``S(t | x_i)``. Subjects needing a weight
    where the censoring survival is 0 are marked unusable.
    """
    died = (times <= t) & (status == 1)
    alive = times > t
    g_event = cens_km.left(times)
    g_t = float(cens_km(t))
    usable = np.ones(times.size, dtype=bool)
    usable &= ~(died & (g_event <= 0))
    usable &= ~(alive & (g_t <= 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        contrib = np.where(died, surv ** 2 / g_event, 0.0)
        contrib = contrib + np.where(alive, (1.0 - surv) ** 2 / g_t, 0.0)
    return np.where(usable, contrib, 0.0), usable


def brier_score(test, predictor, t: float, cens_km: StepFunction, return_dropped=False):
    """IPCW Brier score at ``t``.

    ``test`` is a record sequence (or a ``(times, status)`` pair when
    ``predictor`` is an array); ``predictor(test, times)`` returns the
    ``(n, len(times))`` survival matrix, or ``predictor`` is that matrix's
    column at ``t``.
    """
    times, status = _arrays(test)
    if callable(predictor):
        surv = np.asarray(predictor(test, np.array([t])))[:, 0]
    else:
        surv = np.asarray(predictor, dtype=float)
    contrib, usable = brier_components(times, status, surv, t, cens_km)
    if not usable.any():
        raise EvaluationError("no mass")
    score = float(contrib[usable].sum() / usable.sum())
    dropped = int((~usable).sum())
    return (score, dropped) if return_dropped else score


def ibs_grid(test, tau: float) -> np.ndarray:
    times, status = _arrays(test)
    events = np.unique(times[(status == 1) & (times <= tau) & (times > 0)])
    if events.size == 0:
        raise EvaluationError(f"no test event times in (0, {tau}]")
    return np.concatenate([[0.0], events])


def brier_curve(test, predictor, tau: float, cens_km: StepFunction, grid=None) -> BrierResult:
    """Brier scores on ``{0} + test event times <= tau`` and their time average.

    The integral uses the trapezoid rule and is divided by ``tau``.
    """
    if not tau > 0:
        raise EvaluationError("tau must be positive")
    grid = ibs_grid(test, tau) if grid is None else np.asarray(grid, dtype=float)
    times, status = _arrays(test)
    surv = np.asarray(predictor(test, grid))
    bs = np.empty(grid.size)
    dropped = 0
    for k, t in enumerate(grid):
        contrib, usable = brier_components(times, status, surv[:, k], t, cens_km)
        if not usable.any():
            raise EvaluationError("no mass")
        bs[k] = contrib[usable].sum() / usable.sum()
        dropped = max(dropped, int((~usable).sum()))
    ibs = float(np.sum(np.diff(grid) * (bs[1:] + bs[:-1]) / 2.0) / tau)
    return BrierResult(grid, bs, ibs, float(tau), dropped)


def integrated_brier(test, predictor, tau: float, cens_km: StepFunction) -> float:
    return brier_curve(test, predictor, tau, cens_km).ibs


def relative_ibs(model_ibs: float, reference_ibs: float) -> float:
    """Signed relative difference in percent."""
    if reference_ibs == 0:
        raise EvaluationError("reference IBS is zero")
    return 100.0 * (model_ibs - reference_ibs) / reference_ibs


def quartile_horizons(records, probs=(0.25, 0.5, 0.75)) -> np.ndarray:
    """Quantiles of the uncensored times of ``records``."""
    times, status = _arrays(records)
    events = times[status == 1]
    if events.size == 0:
        raise EvaluationError("no events to take quartiles from")
    return np.quantile(events, probs)


def km_predictor(km: StepFunction):
    def predict(records, times):
        return np.tile(km(np.asarray(times, dtype=float)), (len(records), 1))
    return predict
