"""DeepPAM: structured PAM predictor plus a linear head on cloud latents.

For PED row ``(i, j)`` the log hazard is ``B_ij @ w + zeta_i @ gamma`` where
``zeta_i`` is the encoder output for subject ``i``'s cloud, computed once
per subject and broadcast to all of the subject's rows.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from ..pam import DesignMap, StructuredSpec, survival_from_log_hazard
from ..ped import CutPoints, PedData
from .encoder import EncoderSpec, PointEncoder


class DeepPamError(ValueError):
    pass


@dataclass
class PedBatch:
    """PED rows of a group of subjects with their clouds.

    ``row_subject`` indexes into ``clouds`` (local subject positions).
    """

    design: np.ndarray
    t_risk: np.ndarray
    status: np.ndarray
    row_subject: np.ndarray
    clouds: np.ndarray
    batch_id: int = 0

    @property
    def n_subjects(self) -> int:
        return self.clouds.shape[0]


def make_batch(design: np.ndarray, ped: PedData, clouds, subjects, batch_id=0,
               slices=None) -> PedBatch:
    """Collect the PED rows of ``subjects`` (positions into ``ped``'s records)."""
    if clouds is None or any(c is None for c in clouds):
        raise DeepPamError("DeepPAM needs a point cloud for every subject")
    if slices is None:
        slices = ped.subject_slices()
    subjects = np.asarray(subjects)
    rows = np.concatenate([np.arange(slices[s].start, slices[s].stop) for s in subjects])
    counts = np.array([slices[s].stop - slices[s].start for s in subjects])
    return PedBatch(
        design=design[rows],
        t_risk=ped.t_risk[rows].astype(float),
        status=ped.status[rows].astype(float),
        row_subject=np.repeat(np.arange(subjects.size), counts),
        clouds=np.stack([clouds[s] for s in subjects]),
        batch_id=batch_id,
    )


@dataclass
class DeepPamModel:
    structured_w: np.ndarray
    gamma: np.ndarray
    encoder_params: dict
    encoder_spec: EncoderSpec
    spec: StructuredSpec
    design_map: DesignMap
    cuts: CutPoints
    psi: np.ndarray
    train_log: list = field(default_factory=list)
    warm_start_hash: str | None = None
    best_epoch: int = 0

    def __post_init__(self):
        self.encoder = PointEncoder(self.encoder_spec)

    # parameter dict view used by the optimizer
    def params(self) -> dict[str, np.ndarray]:
        out = {"w": self.structured_w, "gamma": self.gamma}
        out.update({f"enc.{k}": v for k, v in self.encoder_params.items()})
        return out

    def set_params(self, params: dict) -> None:
        self.structured_w = params["w"]
        self.gamma = params["gamma"]
        self.encoder_params = {k[4:]: v for k, v in params.items() if k.startswith("enc.")}

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params().items()}

    # prediction on raw records

    def latent(self, clouds, chunk: int = 64) -> np.ndarray:
        clouds = list(clouds)
        if any(c is None for c in clouds):
            raise DeepPamError("DeepPAM needs a point cloud for every subject")
        out = [self.encoder.forward(np.stack(clouds[a:a + chunk]), self.encoder_params)
               for a in range(0, len(clouds), chunk)]
        return np.vstack(out) if out else np.zeros((0, self.encoder_spec.latent_dim))

    def time_effect(self, t_j=None) -> np.ndarray:
        if t_j is None:
            t_j = self.cuts.cuts[1:]
        return self.design_map.time_matrix(t_j) @ self.structured_w[self.design_map.time_cols]

    def subject_effect(self, records) -> np.ndarray:
        """Time-constant part of the log hazard: features plus latent head."""
        features = np.stack([r.features for r in records])
        structured = (self.design_map.feature_matrix(features)
                      @ self.structured_w[self.design_map.time_cols.stop:])
        return structured + self.latent([r.cloud for r in records]) @ self.gamma

    def log_hazard(self, records, times) -> np.ndarray:
        idx = self.cuts.interval_index(np.atleast_1d(times))
        return self.subject_effect(records)[:, None] + self.time_effect()[idx][None, :]

    def survival(self, records, times) -> np.ndarray:
        return survival_from_log_hazard(self.cuts, self.time_effect(),
                                        self.subject_effect(records), times)

    # serialization

    def to_dict(self) -> dict:
        return {
            "kind": "deeppam",
            "spec": self.spec.to_dict(),
            "design_map": self.design_map.to_dict(),
            "cuts": self.cuts.cuts.tolist(),
            "psi": np.atleast_1d(self.psi).tolist(),
            "structured_w": self.structured_w.tolist(),
            "gamma": self.gamma.tolist(),
            "encoder_spec": self.encoder_spec.to_dict(),
            "encoder": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                        for k, v in sorted(self.encoder_params.items())},
            "warm_start_hash": self.warm_start_hash,
            "best_epoch": self.best_epoch,
            "train_log": self.train_log,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "DeepPamModel":
        es = d["encoder_spec"]
        return cls(
            structured_w=np.array(d["structured_w"], dtype=float),
            gamma=np.array(d["gamma"], dtype=float),
            encoder_params={k: np.array(v["values"], dtype=float).reshape(v["shape"])
                            for k, v in d["encoder"].items()},
            encoder_spec=EncoderSpec(tuple(es["point_dims"]), tuple(es["global_dims"]), es["l2"]),
            spec=StructuredSpec.from_dict(d["spec"]),
            design_map=DesignMap.from_dict(d["design_map"]),
            cuts=CutPoints(d["cuts"]),
            psi=np.array(d["psi"], dtype=float),
            train_log=d.get("train_log", []),
            warm_start_hash=d.get("warm_start_hash"),
            best_epoch=int(d.get("best_epoch", 0)),
        )


def forward_batch(batch: PedBatch, model: DeepPamModel, cache: bool = False):
    """Per-row hazards of a batch; each cloud is encoded exactly once."""
    if cache:
        zeta, enc_cache = model.encoder.forward(batch.clouds, model.encoder_params, cache=True)
    else:
        zeta = model.encoder.forward(batch.clouds, model.encoder_params)
    eta = batch.design @ model.structured_w + (zeta @ model.gamma)[batch.row_subject]
    hazard = np.exp(eta)
    if cache:
        return hazard, {"eta": eta, "zeta": zeta, "encoder": enc_cache}
    return hazard


def loss_and_grads(batch: PedBatch, model: DeepPamModel, psi, penalty_scale: float = 1.0):
    """Penalized batch loss and gradients for ``w``, ``gamma`` and the encoder.

    The loss is the Poisson negative log-likelihood of the batch rows with
    ``log t_risk`` offsets, plus ``penalty_scale * w' S_psi w`` and the L2
    term on encoder weights. Returns ``(loss, grads, nll)`` where ``grads``
    uses the keys of :meth:`DeepPamModel.params`.
    """
    hazard, c = forward_batch(batch, model, cache=True)
    eta = c["eta"]
    if not np.all(np.isfinite(eta)):
        raise FloatingPointError(f"non-finite linear predictor in batch {batch.batch_id}")
    mu = batch.t_risk * hazard
    nll = float(mu.sum() - batch.status @ (eta + np.log(batch.t_risk)))
    s_psi = model.design_map.penalty_matrix(psi)
    w = model.structured_w
    pen = penalty_scale * float(w @ s_psi @ w)
    l2 = model.encoder.l2_penalty(model.encoder_params)
    loss = nll + pen + l2
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss in batch {batch.batch_id}")

    d_eta = mu - batch.status
    grads = {"w": batch.design.T @ d_eta + 2.0 * penalty_scale * s_psi @ w}
    per_subject = np.bincount(batch.row_subject, weights=d_eta, minlength=batch.n_subjects)
    grads["gamma"] = c["zeta"].T @ per_subject
    d_zeta = per_subject[:, None] * model.gamma[None, :]
    enc = model.encoder.backward(d_zeta, c["encoder"], model.encoder_params)
    for k, g in model.encoder.l2_grads(model.encoder_params).items():
        enc[k] = enc[k] + g
    grads.update({f"enc.{k}": v for k, v in enc.items()})
    return loss, grads, nll


def params_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()
