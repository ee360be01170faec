"""Joint training of DeepPAM with Adam, warm-started from a fitted PAM."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from ..pam import PamFit, poisson_nll
from ..ped import transform_to_ped
from ..synth import jitter_cloud
from .adam import Adam
from .encoder import EncoderSpec, init_params
from .model import DeepPamError, DeepPamModel, loss_and_grads, make_batch, params_hash

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    max_epochs: int = 75
    batch_size: int = 32
    patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    jitter: float = 0.01
    seed: int = 0
    encoder: EncoderSpec = EncoderSpec()

    def __post_init__(self):
        if not self.lr > 0 or self.max_epochs <= 0 or self.batch_size <= 0:
            raise ValueError("lr, max_epochs and batch_size must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if isinstance(self.encoder, dict):
            object.__setattr__(self, "encoder", EncoderSpec(**self.encoder))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _features(records, names):
    return np.stack([r.features for r in records]) if records else np.zeros((0, len(names)))


def init_model(warm: PamFit, cfg: TrainConfig, rng, warm_hash: str | None = None) -> DeepPamModel:
    return DeepPamModel(
        structured_w=warm.w.copy(),
        gamma=np.zeros(cfg.encoder.latent_dim),
        encoder_params=init_params(cfg.encoder, rng),
        encoder_spec=cfg.encoder,
        spec=warm.spec,
        design_map=warm.design_map,
        cuts=warm.cuts,
        psi=np.atleast_1d(warm.psi).copy(),
        warm_start_hash=warm_hash,
    )


def validation_nll(model: DeepPamModel, design, ped, latent) -> float:
    eta = design @ model.structured_w + (latent @ model.gamma)[ped.subject]
    return poisson_nll(eta, ped.t_risk, ped.status)


def fit_deeppam(train, val, cfg: TrainConfig, warm: PamFit) -> DeepPamModel:
    """Train DeepPAM on ``train`` records with early stopping on ``val``.

    Structured weights start at the PAM estimate, the head at zero, and the
    smoothing parameters stay fixed at the PAM's values. The returned model
    holds the parameters of the best validation epoch (epoch 0 being the
    warm start itself).
    """
    for recs in (train, val):
        if any(r.cloud is None for r in recs):
            raise DeepPamError("DeepPAM needs a point cloud for every subject")
    rng = np.random.default_rng(cfg.seed)
    model = init_model(warm, cfg, rng, params_hash(warm.to_json()))
    names = warm.design_map.feature_names

    ped = transform_to_ped(train, warm.cuts, names)
    design = warm.design_map.matrix(ped.t_j, ped.features)
    slices = ped.subject_slices()
    vped = transform_to_ped(val, warm.cuts, names)
    vdesign = warm.design_map.matrix(vped.t_j, vped.features)
    vclouds = [r.cloud for r in val]
    clean = [r.cloud for r in train]

    n = len(train)
    scale = min(cfg.batch_size, n) / n
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    best = validation_nll(model, vdesign, vped, model.latent(vclouds))
    best_params = model.copy_params()
    log = [{"epoch": 0, "train_nll": float("nan"), "train_loss": float("nan"), "val_nll": best}]
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        clouds = [jitter_cloud(c, cfg.jitter, rng) for c in clean]
        order = rng.permutation(n)
        params = model.params()
        tot_loss = tot_nll = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = make_batch(design, ped, clouds, order[start:start + cfg.batch_size], b, slices)
            loss, grads, nll = loss_and_grads(batch, model, model.psi, scale)
            opt.step(params, grads)
            tot_loss += loss
            tot_nll += nll
        val_nll = validation_nll(model, vdesign, vped, model.latent(vclouds))
        log.append({"epoch": epoch, "train_nll": tot_nll, "train_loss": tot_loss,
                    "val_nll": val_nll})
        logger.info("epoch %d train_loss %.4f val_nll %.4f", epoch, tot_loss, val_nll)
        if not np.isfinite(val_nll):
            raise TrainingError(f"validation nll diverged at epoch {epoch}: {log[-3:]}")
        if val_nll < best:
            best, best_params, stale = val_nll, model.copy_params(), 0
            model.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    model.set_params(best_params)
    model.train_log = log
    return model
