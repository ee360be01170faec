"""Synthetic benchmark: shape point clouds, tabular features, survival times.

Each subject belongs to one of three latent shape classes (sphere, cube,
cylinder). The class shifts the log hazard through dummy effects, but a
model only sees the class through the subject's point cloud.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .ped import SurvivalRecord

N_CLASSES = 3
CLASS_NAMES = ("sphere", "cube", "cylinder")


@dataclass(frozen=True)
class SimConfig:
    n_train: int = 1008
    n_val: int = 144
    n_test: int = 216
    n_points: int = 1024
    beta: tuple[float, float] = (-0.25, 0.3)
    gamma: tuple[float, float] = (0.5, -1.0)
    # log baseline hazard: intercept + curvature * (t - center)^2
    baseline_coefs: tuple[float, float, float] = (-0.5, -0.1, 4.0)
    admin_cens: float = 10.0
    cens_rate: float = 0.02
    noise_halfwidth: float = 0.01
    grid_step: float = 0.005
    seed: int = 0

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test", "n_points"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.cens_rate < 0:
            raise ValueError("cens_rate must be non-negative")
        if self.admin_cens <= 0 or self.grid_step <= 0:
            raise ValueError("admin_cens and grid_step must be positive")
        for name in ("beta", "gamma", "baseline_coefs"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    @property
    def n_total(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: tuple(v) if isinstance(v, list) else v
                      for k, v in d.items() if k in names})


# -- point clouds ------------------------------------------------------------


def _sphere(n, rng):
    p = rng.standard_normal((n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def _cube(n, rng, half=1.0):
    face = rng.integers(0, 6, size=n)
    p = rng.uniform(-half, half, size=(n, 3))
    axis = face % 3
    p[np.arange(n), axis] = np.where(face < 3, half, -half)
    return p


def _cylinder(n, rng, radius=0.6, height=2.0):
    side_area = 2 * np.pi * radius * height
    cap_area = np.pi * radius ** 2
    on_side = rng.uniform(size=n) < side_area / (side_area + 2 * cap_area)
    phi = rng.uniform(0, 2 * np.pi, size=n)
    r = np.where(on_side, radius, radius * np.sqrt(rng.uniform(size=n)))
    z = np.where(on_side, rng.uniform(-height / 2, height / 2, size=n),
                 np.where(rng.uniform(size=n) < 0.5, height / 2, -height / 2))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


_SHAPES = (_sphere, _cube, _cylinder)


def normalize_cloud(cloud: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale to unit maximum point norm."""
    centered = cloud - cloud.mean(axis=0)
    return centered / np.linalg.norm(centered, axis=1).max()


def sample_surface(class_id: int, n_points: int, rng) -> np.ndarray:
    """Raw (un-normalized) uniform surface samples of a class shape."""
    if class_id not in range(N_CLASSES):
        raise ValueError(f"class_id must be in 0..{N_CLASSES - 1}, got {class_id}")
    return _SHAPES[class_id](n_points, rng)


def jitter_cloud(cloud: np.ndarray, halfwidth: float, rng) -> np.ndarray:
    """Add uniform per-coordinate noise then renormalize."""
    if halfwidth > 0:
        cloud = cloud + rng.uniform(-halfwidth, halfwidth, size=cloud.shape)
    return normalize_cloud(cloud)


def generate_cloud(class_id: int, n_points: int, rng, noise_halfwidth: float = 0.0) -> np.ndarray:
    """Sample a normalized cloud of ``n_points`` points for ``class_id``."""
    return jitter_cloud(sample_surface(class_id, n_points, rng), noise_halfwidth, rng)


# -- hazard and times --------------------------------------------------------


def log_hazard_true(t, x1, x2, class_id, cfg: SimConfig = SimConfig()):
    b0, curv, center = cfg.baseline_coefs
    t = np.asarray(t, dtype=float)
    eta = b0 + curv * (t - center) ** 2 + cfg.beta[0] * x1 + cfg.beta[1] * x2
    cls = np.asarray(class_id)
    return eta + np.where(cls == 1, cfg.gamma[0], 0.0) + np.where(cls == 2, cfg.gamma[1], 0.0)


def hazard_true(t, x1, x2, class_id, cfg: SimConfig = SimConfig()):
    return np.exp(log_hazard_true(t, x1, x2, class_id, cfg))


def invert_cumulative_hazard(hazard, target, horizon: float, grid_step: float) -> float:
    """First ``t`` with ``Lambda(t) >= target`` under a midpoint-rule hazard.

    ``hazard`` is a vectorized callable. The hazard is held constant on each
    grid cell at its midpoint value, so the cumulative hazard is piecewise
    linear and is inverted exactly within the crossing cell. Returns ``inf``
    when ``Lambda(horizon) < target``.
    """
    n_cells = int(np.ceil(horizon / grid_step - 1e-9))
    edges = np.minimum(np.arange(n_cells + 1) * grid_step, horizon)
    widths = np.diff(edges)
    rates = np.broadcast_to(hazard(edges[:-1] + widths / 2), widths.shape)
    cum = np.concatenate([[0.0], np.cumsum(rates * widths)])
    if cum[-1] < target:
        return np.inf
    k = max(int(np.searchsorted(cum, target, side="left")) - 1, 0)
    return float(edges[k] + (target - cum[k]) / rates[k])


def simulate_time(x1: float, x2: float, class_id: int, rng, grid_step: float | None = None,
                  cfg: SimConfig = SimConfig()) -> tuple[float, int]:
    """Draw an observed (time, status) pair for one subject."""
    step = cfg.grid_step if grid_step is None else grid_step
    e = rng.exponential(1.0)
    t_event = invert_cumulative_hazard(
        lambda t: hazard_true(t, x1, x2, class_id, cfg), e, cfg.admin_cens, step)
    c = rng.exponential(1.0 / cfg.cens_rate) if cfg.cens_rate > 0 else np.inf
    bound = min(c, cfg.admin_cens)
    time = min(t_event, bound)
    return float(time), int(t_event <= bound)


def subject_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-subject generators split from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def simulate_subject(idx: int, rng, cfg: SimConfig) -> SurvivalRecord:
    class_id = int(rng.integers(0, N_CLASSES))
    x1, x2 = rng.uniform(size=2)
    cloud = generate_cloud(class_id, cfg.n_points, rng)
    time, status = simulate_time(x1, x2, class_id, rng, cfg=cfg)
    return SurvivalRecord(id=idx, time=time, status=status, features=np.array([x1, x2]),
                          cloud=cloud, true_class=class_id)


def generate_dataset(cfg: SimConfig):
    """Simulate ``(train, val, test)`` record lists; deterministic in ``cfg.seed``.

    Stored clouds are noise-free; training noise is applied per epoch by the
    deep trainer.
    """
    rngs = subject_rngs(cfg.seed, cfg.n_total)
    records = [simulate_subject(i, rng, cfg) for i, rng in enumerate(rngs)]
    a, b = cfg.n_train, cfg.n_train + cfg.n_val
    return records[:a], records[a:b], records[b:]


FEATURE_NAMES = ("x1", "x2")
CLASS_FEATURES = ("class1", "class2")


def with_class_dummies(records):
    """Copies of ``records`` with the true class appended as two dummies."""
    out = []
    for r in records:
        dummies = [float(r.true_class == 1), float(r.true_class == 2)]
        out.append(dataclasses.replace(r, features=np.concatenate([r.features, dummies])))
    return out
