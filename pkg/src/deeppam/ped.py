"""Survival records and the piecewise-exponential data (PED) layout.

Right-censored records are split at a set of cut points into one row per
subject and interval at risk. Each row carries the interval status and the
time at risk, which enters a Poisson model as a log offset.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np


class PedError(ValueError):
    """Invalid survival data or cut points."""


@dataclass(frozen=True)
class SurvivalRecord:
    """One subject: observed time, status, tabular features, optional cloud."""

    id: int
    time: float
    status: int
    features: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cloud: np.ndarray | None = None
    true_class: int | None = None

    def __post_init__(self):
        if not np.isfinite(self.time) or self.time <= 0:
            raise PedError(f"nonpositive time for subject {self.id}: {self.time}")
        if self.status not in (0, 1):
            raise PedError(f"status must be 0 or 1, got {self.status}")
        object.__setattr__(self, "features", np.asarray(self.features, dtype=float).ravel())
        if self.cloud is not None:
            cloud = np.asarray(self.cloud, dtype=float)
            if cloud.ndim != 2 or cloud.shape[1] != 3:
                raise PedError(f"cloud must have shape (n_points, 3), got {cloud.shape}")
            if not np.all(np.isfinite(cloud)):
                raise PedError(f"non-finite cloud coordinates for subject {self.id}")
            object.__setattr__(self, "cloud", cloud)


class CutPoints:
    """Strictly increasing interval boundaries starting at 0."""

    def __init__(self, cuts):
        cuts = np.asarray(cuts, dtype=float).ravel()
        if cuts.size < 2:
            raise PedError("cut points need at least one interval")
        if cuts[0] != 0.0:
            raise PedError("first cut point must be 0")
        if np.any(np.diff(cuts) <= 0):
            raise PedError("cut points must be strictly increasing")
        cuts.setflags(write=False)
        self.cuts = cuts

    @property
    def n_intervals(self) -> int:
        return self.cuts.size - 1

    @property
    def horizon(self) -> float:
        return float(self.cuts[-1])

    def interval_index(self, t) -> np.ndarray:
        """0-based index of the interval ``(k_{j-1}, k_j]`` holding ``t``.

        Values past the last cut map to the last interval; ``t <= 0`` maps to
        the first.
        """
        idx = np.searchsorted(self.cuts[1:], np.asarray(t, dtype=float), side="left")
        return np.clip(idx, 0, self.n_intervals - 1)

    def __len__(self):
        return self.cuts.size

    def __eq__(self, other):
        return isinstance(other, CutPoints) and np.array_equal(self.cuts, other.cuts)

    def __repr__(self):
        return f"CutPoints(J={self.n_intervals}, horizon={self.horizon:g})"


class PedRow(NamedTuple):
    id: int
    j: int
    t_j: float
    t_risk: float
    status: int
    features: np.ndarray


@dataclass
class PedData:
    """Column-oriented PED table.

    Rows are ordered by subject (in input order) and then by interval.
    ``subject`` holds the position of each row's source record, which is
    what the deep model uses to broadcast per-subject latent features.
    """

    id: np.ndarray
    j: np.ndarray
    t_j: np.ndarray
    t_risk: np.ndarray
    status: np.ndarray
    features: np.ndarray
    cuts: CutPoints
    feature_names: tuple[str, ...]
    subject: np.ndarray
    n_subjects: int

    def __len__(self):
        return self.id.size

    def rows(self) -> Iterator[PedRow]:
        for r in range(len(self)):
            yield PedRow(int(self.id[r]), int(self.j[r]), float(self.t_j[r]),
                         float(self.t_risk[r]), int(self.status[r]), self.features[r])

    def feature(self, name: str) -> np.ndarray:
        try:
            col = self.feature_names.index(name)
        except ValueError:
            raise KeyError(f"unknown feature {name!r}") from None
        return self.features[:, col]

    def subject_slices(self) -> list[slice]:
        """Row range of every subject (rows are contiguous per subject)."""
        bounds = np.searchsorted(self.subject, np.arange(self.n_subjects + 1), side="left")
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def make_cut_points(records: Sequence[SurvivalRecord], strategy="event-times", *,
                    n_intervals: int | None = None, t_max: float | None = None) -> CutPoints:
    """Build cut points.

    ``strategy="event-times"`` uses 0 plus the unique event times;
    ``strategy="grid"`` uses ``n_intervals + 1`` equidistant points on
    ``[0, t_max]``. A tuple ``("grid", J, t_max)`` is accepted as shorthand.
    """
    if isinstance(strategy, tuple):
        strategy, n_intervals, t_max = strategy
    if strategy == "event-times":
        events = np.array([r.time for r in records if r.status == 1], dtype=float)
        if events.size == 0:
            raise PedError("no events")
        return CutPoints(np.concatenate([[0.0], np.unique(events)]))
    if strategy == "grid":
        if n_intervals is None or t_max is None or n_intervals <= 0 or not t_max > 0:
            raise PedError("invalid grid")
        return CutPoints(np.linspace(0.0, float(t_max), int(n_intervals) + 1))
    raise PedError(f"unknown cut strategy {strategy!r}")


def transform_to_ped(records: Sequence[SurvivalRecord], cuts: CutPoints,
                     feature_names: Sequence[str] | None = None) -> PedData:
    """Split records into PED rows over ``cuts``.

    Times beyond the last cut are truncated there with status 0.
    """
    n = len(records)
    times = np.array([r.time for r in records], dtype=float)
    status = np.array([r.status for r in records], dtype=np.int64)
    if np.any(~(times > 0)):
        raise PedError("nonpositive time")
    n_feat = records[0].features.size if n else 0
    if feature_names is None:
        feature_names = tuple(f"x{k + 1}" for k in range(n_feat))
    feature_names = tuple(feature_names)
    if n and any(r.features.size != len(feature_names) for r in records):
        raise PedError("feature vectors do not match feature_names")

    k = cuts.cuts
    truncated = times > cuts.horizon
    # number of intervals at risk: first j with t <= k_j
    n_rows = np.where(truncated, cuts.n_intervals,
                      np.searchsorted(k[1:], times, side="left") + 1)
    subject = np.repeat(np.arange(n), n_rows)
    offsets = np.concatenate([[0], np.cumsum(n_rows)])
    j = np.arange(subject.size) - offsets[subject] + 1
    stop = np.minimum(times[subject], k[j])
    t_risk = stop - k[j - 1]
    last = j == n_rows[subject]
    row_status = np.where(last & ~truncated[subject], status[subject], 0)
    features = (np.stack([r.features for r in records]) if n
                else np.zeros((0, len(feature_names))))
    ids = np.array([r.id for r in records], dtype=np.int64)
    return PedData(
        id=ids[subject] if n else np.zeros(0, dtype=np.int64),
        j=j.astype(np.int64),
        t_j=k[j],
        t_risk=t_risk,
        status=row_status.astype(np.int64),
        features=features[subject] if n else features,
        cuts=cuts,
        feature_names=feature_names,
        subject=subject,
        n_subjects=n,
    )


def export_ped(ped: PedData, path) -> Path:
    """Write ``ped`` as CSV sorted by (id, j); floats keep 17 significant digits."""
    path = Path(path)
    order = np.lexsort((ped.j, ped.id))
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "j", "t_j", "t_risk", "status", *ped.feature_names])
        for r in order:
            writer.writerow([
                int(ped.id[r]), int(ped.j[r]), repr(float(ped.t_j[r])),
                repr(float(ped.t_risk[r])), int(ped.status[r]),
                *(repr(float(v)) for v in ped.features[r]),
            ])
    return path


def read_ped_csv(path) -> dict[str, np.ndarray]:
    """Read a PED CSV back into named columns."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    cols = {}
    for c, name in enumerate(header):
        values = [row[c] for row in rows]
        if name in ("id", "j", "status"):
            cols[name] = np.array(values, dtype=np.int64)
        else:
            cols[name] = np.array(values, dtype=float)
    return cols
