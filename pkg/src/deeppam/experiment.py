"""Replicated simulation study: fit the model roster, score it, aggregate."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .deepnet import DeepPamModel, TrainConfig, fit_deeppam
from .deepnet.model import params_hash
from .pam import Baseline, Intercept, Linear, PamFit, StructuredSpec, fit_pam
from .ped import SurvivalRecord, make_cut_points, transform_to_ped
from .synth import (CLASS_FEATURES, FEATURE_NAMES, N_CLASSES, SimConfig, generate_dataset,
                    log_hazard_true, with_class_dummies)

logger = logging.getLogger(__name__)

MODELS = ("km", "pam_baseline", "pam_correct", "deeppam")
QUARTILES = (0.25, 0.5, 0.75)
QUARTILE_NAMES = ("q25", "q50", "q75")
REFERENCE = "pam_correct"
HAZARD_GRID = np.arange(1, 101) / 10.0
OFFSET_TIME = 4.0
HORIZON_SOURCE = "quartiles of uncensored training event times"


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    baseline_basis: int = 10
    cut_strategy: str = "event-times"
    n_replicates: int = 10
    output_dir: str = "results"
    models: tuple[str, ...] = MODELS

    def __post_init__(self):
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be at least 1")
        unknown = set(self.models) - set(MODELS)
        if unknown:
            raise ValueError(f"unknown models {sorted(unknown)}")
        self.models = tuple(m for m in MODELS if m in self.models)

    @property
    def seed(self) -> int:
        return self.sim.seed

    def replicate(self, r: int) -> "ExperimentConfig":
        """Config of replicate ``r``: simulation and training seeds shifted by ``r``."""
        return dataclasses.replace(
            self,
            sim=dataclasses.replace(self.sim, seed=self.seed + r),
            train=dataclasses.replace(self.train, seed=self.train.seed + r),
            n_replicates=1,
        )

    def to_dict(self) -> dict:
        return {"sim": self.sim.to_dict(), "train": self.train.to_dict(),
                "baseline_basis": self.baseline_basis, "cut_strategy": self.cut_strategy,
                "n_replicates": self.n_replicates, "output_dir": str(self.output_dir),
                "models": list(self.models)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        kw = {k: v for k, v in d.items() if k not in ("sim", "train")}
        if "models" in kw:
            kw["models"] = tuple(kw["models"])
        return cls(sim=SimConfig.from_dict(d.get("sim", {})),
                   train=TrainConfig.from_dict(d.get("train", {})), **kw)


# -- model roster ------------------------------------------------------------


def baseline_spec(cfg: ExperimentConfig) -> StructuredSpec:
    return StructuredSpec((Intercept(), Baseline(n_basis=cfg.baseline_basis),
                           *(Linear(f) for f in FEATURE_NAMES)))


def correct_spec(cfg: ExperimentConfig) -> StructuredSpec:
    return StructuredSpec(baseline_spec(cfg).terms + tuple(Linear(f) for f in CLASS_FEATURES))


def make_cuts(train, cfg: ExperimentConfig):
    if cfg.cut_strategy == "event-times":
        return make_cut_points(train)
    _, n_int, t_max = cfg.cut_strategy.split(":")
    return make_cut_points(train, "grid", n_intervals=int(n_int), t_max=float(t_max))


def fit_structured(name: str, train, val, cfg: ExperimentConfig, cuts=None) -> PamFit:
    if name == "pam_correct":
        train, val = with_class_dummies(train), with_class_dummies(val)
        names, spec = FEATURE_NAMES + CLASS_FEATURES, correct_spec(cfg)
    elif name == "pam_baseline":
        names, spec = FEATURE_NAMES, baseline_spec(cfg)
    else:
        raise ValueError(f"{name} is not a structured model")
    cuts = cuts or make_cuts(train, cfg)
    ped = transform_to_ped(train, cuts, names)
    vped = transform_to_ped(val, cuts, names)
    return fit_pam(ped, spec, "select", val=vped)


def fit_roster(train, val, cfg: ExperimentConfig) -> dict:
    """Fit every configured model; DeepPAM is warm-started from the baseline PAM."""
    fitted = {}
    cuts = make_cuts(train, cfg)
    if "km" in cfg.models:
        fitted["km"] = ev.km_of_records(train)
    need_baseline = "pam_baseline" in cfg.models or "deeppam" in cfg.models
    if need_baseline:
        fitted["pam_baseline"] = fit_structured("pam_baseline", train, val, cfg, cuts)
    if "pam_correct" in cfg.models:
        fitted["pam_correct"] = fit_structured("pam_correct", train, val, cfg, cuts)
    if "deeppam" in cfg.models:
        train_cfg = dataclasses.replace(cfg.train, jitter=cfg.sim.noise_halfwidth)
        fitted["deeppam"] = fit_deeppam(train, val, train_cfg, fitted["pam_baseline"])
    return {m: fitted[m] for m in cfg.models}


def model_name(model) -> str:
    if isinstance(model, ev.StepFunction):
        return "km"
    if isinstance(model, DeepPamModel):
        return "deeppam"
    return "pam_correct" if "class1" in model.design_map.feature_names else "pam_baseline"


def _features(records, model: PamFit):
    if "class1" in model.design_map.feature_names:
        records = with_class_dummies(records)
    return np.stack([r.features for r in records])


def survival_predictor(model):
    """``predict(records, times) -> (n, len(times))`` survival matrix."""
    if isinstance(model, ev.StepFunction):
        return ev.km_predictor(model)
    if isinstance(model, DeepPamModel):
        return model.survival
    return lambda records, times: model.survival(_features(records, model), times)


def log_hazard_matrix(model, records, times) -> np.ndarray:
    if isinstance(model, ev.StepFunction):
        raise ValueError("KM has no hazard curve")
    if isinstance(model, DeepPamModel):
        return model.log_hazard(records, times)
    return model.log_hazard(_features(records, model), times)


def converged(model) -> bool:
    if isinstance(model, PamFit):
        return bool(model.converged)
    return True


# -- scoring -----------------------------------------------------------------


def score_models(fitted: dict, train, test, curves: dict | None = None) -> dict:
    """IBS per model and quartile horizon, plus relative IBS vs the reference.

    If ``curves`` is given it receives the :class:`BrierResult` of every
    ``(model, quartile)`` pair.
    """
    horizons = ev.quartile_horizons(train, QUARTILES)
    cens = ev.censoring_km(train)
    out = {"horizons": dict(zip(QUARTILE_NAMES, horizons.tolist())),
           "horizon_source": HORIZON_SOURCE, "ibs": {}, "relative_ibs": {}, "n_dropped": {}}
    for name, model in fitted.items():
        predictor = survival_predictor(model)
        results = [ev.brier_curve(test, predictor, tau, cens) for tau in horizons]
        out["ibs"][name] = {q: c.ibs for q, c in zip(QUARTILE_NAMES, results)}
        out["n_dropped"][name] = {q: c.n_dropped for q, c in zip(QUARTILE_NAMES, results)}
        if curves is not None:
            curves.update({(name, q): c for q, c in zip(QUARTILE_NAMES, results)})
    if REFERENCE in out["ibs"]:
        ref = out["ibs"][REFERENCE]
        for name, ibs in out["ibs"].items():
            out["relative_ibs"][name] = {q: ev.relative_ibs(ibs[q], ref[q]) for q in QUARTILE_NAMES}
    return out


def hazard_curves(model, test, sim: SimConfig, grid=HAZARD_GRID) -> list[dict]:
    """Per-class 5/50/95% quantiles of predicted log hazards over ``grid``."""
    lh = log_hazard_matrix(model, test, grid)
    classes = np.array([r.true_class for r in test])
    x = np.stack([r.features for r in test])
    rows = []
    for k in range(N_CLASSES):
        mask = classes == k
        if not mask.any():
            continue
        q05, q50, q95 = np.quantile(lh[mask], [0.05, 0.5, 0.95], axis=0)
        truth = np.median(log_hazard_true(grid[None, :], x[mask, 0:1], x[mask, 1:2], k, sim), axis=0)
        for g, t in enumerate(grid):
            rows.append({"class": k, "t": float(t), "q05": float(q05[g]), "median": float(q50[g]),
                         "q95": float(q95[g]), "true_hazard": float(truth[g])})
    return rows


def class_offsets(model, test, t: float = OFFSET_TIME) -> dict:
    """``median(log h | class k) - median(log h | class 0)`` at time ``t``."""
    lh = log_hazard_matrix(model, test, [t])[:, 0]
    classes = np.array([r.true_class for r in test])
    ref = np.median(lh[classes == 0])
    return {str(k): float(np.median(lh[classes == k]) - ref) for k in range(1, N_CLASSES)}


# -- files -------------------------------------------------------------------


def _fmt(v) -> str:
    return "nan" if v is None or not np.isfinite(v) else f"{v:.6f}"


def write_csv(path: Path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_ibs_csv(path, scores: dict) -> None:
    rows = []
    for name, ibs in scores["ibs"].items():
        rel = scores["relative_ibs"].get(name, {})
        for q in QUARTILE_NAMES:
            rows.append([name, q, _fmt(scores["horizons"][q]), _fmt(ibs[q]),
                         _fmt(rel.get(q, np.nan)), scores["n_dropped"][name][q]])
    write_csv(path, ["model", "quartile", "tau", "ibs", "relative_ibs", "n_dropped"], rows)


def write_brier_csv(path, curves: dict) -> None:
    rows = [[name, q, _fmt(t), _fmt(b)] for (name, q), c in curves.items()
            for t, b in zip(c.times, c.bs)]
    write_csv(path, ["model", "quartile", "t", "bs"], rows)


def write_hazard_csv(path, rows) -> None:
    cols = ["class", "t", "q05", "median", "q95", "true_hazard"]
    write_csv(path, cols, [[r["class"], _fmt(r["t"])] + [_fmt(r[c]) for c in cols[2:]]
                           for r in rows])


def model_to_json(name: str, model) -> str:
    d = model.to_dict()
    d["model"] = name
    return json.dumps(d, indent=1)


def model_from_json(text: str):
    d = json.loads(text)
    if d.get("kind") == "deeppam":
        return DeepPamModel.from_dict(d)
    return PamFit.from_dict(d)


# -- datasets ----------------------------------------------------------------

SPLITS = ("train", "val", "test")


def save_dataset(out: Path, splits: dict, sim: SimConfig) -> dict:
    out = Path(out)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    manifest = {"sim": sim.to_dict(), "counts": {}, "ids": {}, "sha256": {}}
    cloud_hash = hashlib.sha256()
    for split in SPLITS:
        records = splits[split]
        rows = [[r.id, repr(r.time), r.status, *(repr(float(v)) for v in r.features),
                 "" if r.true_class is None else r.true_class] for r in records]
        path = out / f"{split}.csv"
        write_csv(path, ["id", "time", "status", *FEATURE_NAMES, "true_class"], rows)
        manifest["counts"][split] = len(records)
        manifest["ids"][split] = [r.id for r in records]
        manifest["sha256"][f"{split}.csv"] = hashlib.sha256(path.read_bytes()).hexdigest()
        for r in records:
            if r.cloud is not None:
                np.save(out / "clouds" / f"{r.id}.npy", r.cloud)
                cloud_hash.update(r.cloud.tobytes())
    manifest["sha256"]["clouds"] = cloud_hash.hexdigest()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_dataset(path: Path) -> tuple[dict, SimConfig]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    splits = {}
    for split in SPLITS:
        records = []
        with (path / f"{split}.csv").open(newline="") as fh:
            for row in csv.DictReader(fh):
                cloud_path = path / "clouds" / f"{row['id']}.npy"
                records.append(SurvivalRecord(
                    id=int(row["id"]), time=float(row["time"]), status=int(row["status"]),
                    features=np.array([float(row[f]) for f in FEATURE_NAMES]),
                    cloud=np.load(cloud_path) if cloud_path.exists() else None,
                    true_class=int(row["true_class"]) if row["true_class"] != "" else None,
                ))
        splits[split] = records
    return splits, SimConfig.from_dict(manifest["sim"])


# -- replicates ----------------------------------------------------------------


def run_replicate(cfg: ExperimentConfig, r: int, out: Path) -> dict:
    """Simulate, fit and score replicate ``r``; writes files under ``out/rep_<r>``."""
    rcfg = cfg.replicate(r)
    rep_dir = Path(out) / f"rep_{r:02d}"
    rep_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    train, val, test = generate_dataset(rcfg.sim)
    fitted = fit_roster(train, val, rcfg)
    curves = {}
    scores = score_models(fitted, train, test, curves)
    result = {
        "replicate": r, "seed": rcfg.sim.seed, "train_seed": rcfg.train.seed,
        "converged": {m: converged(f) for m, f in fitted.items()},
        "offsets": {}, **scores,
    }
    for name, model in fitted.items():
        if name == "km":
            continue
        write_hazard_csv(rep_dir / f"hazard_{name}.csv", hazard_curves(model, test, rcfg.sim))
        result["offsets"][name] = class_offsets(model, test)
    if "deeppam" in fitted:
        m = fitted["deeppam"]
        result["deeppam"] = {"best_epoch": m.best_epoch, "epochs_run": len(m.train_log) - 1,
                             "warm_start_hash": m.warm_start_hash}
        write_csv(rep_dir / "train_log.csv", ["epoch", "train_nll", "val_nll"],
                  [[e["epoch"], _fmt(e["train_nll"]), _fmt(e["val_nll"])] for e in m.train_log])
    write_ibs_csv(rep_dir / "ibs.csv", scores)
    write_brier_csv(rep_dir / "brier.csv", curves)
    (rep_dir / "result.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    logger.info("replicate %d done in %.1fs", r, time.perf_counter() - t0)
    return result


def aggregate(results: list[dict], absolute: bool = False) -> list[list]:
    """Mean and sd of relative IBS per model and quartile (sd 0 for one replicate).

    With ``absolute`` the per-replicate values are taken in absolute value first.
    """
    models = [m for m in MODELS if all(m in res["relative_ibs"] for res in results)]
    rows = []
    for m in models:
        row = [m]
        for q in QUARTILE_NAMES:
            vals = np.array([res["relative_ibs"][m][q] for res in results])
            if absolute:
                vals = np.abs(vals)
            sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            row += [_fmt(float(vals.mean())), _fmt(sd)]
        rows.append(row)
    return rows


TABLE_HEADER = ["model", "q25_mean", "q25_sd", "q50_mean", "q50_sd", "q75_mean", "q75_sd"]


def write_table2(path, results) -> None:
    """Signed table at ``path`` plus its absolute-value companion ``<stem>_abs.csv``."""
    path = Path(path)
    write_csv(path, TABLE_HEADER, aggregate(results))
    write_csv(path.with_name(path.stem + "_abs.csv"), TABLE_HEADER, aggregate(results, absolute=True))


def load_replicate_results(out: Path) -> list[dict]:
    return [json.loads(p.read_text()) for p in sorted(Path(out).glob("rep_*/result.json"))]


def run_experiment(cfg: ExperimentConfig, out: Path | None = None) -> tuple[list[dict], bool]:
    """Run all replicates serially; returns the results and an all-converged flag.

    A failing replicate is recorded and the remaining ones still run.
    """
    out = Path(out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    results, ok = [], True
    failures = []
    for r in range(cfg.n_replicates):
        try:
            res = run_replicate(cfg, r, out)
        except (ArithmeticError, RuntimeError, ValueError) as exc:
            logger.error("replicate %d failed: %s", r, exc)
            failures.append({"replicate": r, "error": repr(exc)})
            ok = False
            continue
        ok &= all(res["converged"].values())
        results.append(res)
    if results:
        write_table2(out / "table2.csv", results)
    report = {"seeds": [cfg.seed + r for r in range(cfg.n_replicates)],
              "completed": [res["replicate"] for res in results], "failures": failures,
              "all_converged": ok}
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return results, ok


def warm_hash(fit: PamFit) -> str:
    return params_hash(fit.to_json())
