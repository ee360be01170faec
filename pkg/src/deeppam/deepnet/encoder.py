"""Point-cloud encoder: shared per-point MLP, global max pooling, global MLP.

All layers are dense with bias; hidden layers use ReLU and the final global
layer is linear so the latent features can take either sign.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    point_dims: tuple[int, ...] = (3, 32, 64)
    global_dims: tuple[int, ...] = (64, 32, 8)
    l2: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "point_dims", tuple(int(d) for d in self.point_dims))
        object.__setattr__(self, "global_dims", tuple(int(d) for d in self.global_dims))
        if self.point_dims[0] != 3:
            raise EncoderError("point MLP input must have 3 coordinates")
        if len(self.point_dims) < 2 or len(self.global_dims) < 2:
            raise EncoderError("each MLP needs at least one layer")
        if self.global_dims[0] != self.point_dims[-1]:
            raise EncoderError("global MLP input must match the pooled width")
        if self.l2 < 0:
            raise EncoderError("l2 must be non-negative")

    @property
    def latent_dim(self) -> int:
        return self.global_dims[-1]

    def layer_names(self) -> list[str]:
        return ([f"point{k}" for k in range(len(self.point_dims) - 1)]
                + [f"global{k}" for k in range(len(self.global_dims) - 1)])

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        dims = list(zip(self.point_dims[:-1], self.point_dims[1:]))
        dims += list(zip(self.global_dims[:-1], self.global_dims[1:]))
        for name, (fan_in, fan_out) in zip(self.layer_names(), dims):
            out[f"{name}.W"] = (fan_in, fan_out)
            out[f"{name}.b"] = (fan_out,)
        return out

    def to_dict(self) -> dict:
        return {"point_dims": list(self.point_dims), "global_dims": list(self.global_dims),
                "l2": self.l2}


def init_params(spec: EncoderSpec, rng) -> dict[str, np.ndarray]:
    """Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    params = {}
    for key, shape in spec.shapes().items():
        fan_in = spec.shapes()[key.rsplit(".", 1)[0] + ".W"][0]
        bound = 1.0 / np.sqrt(fan_in)
        params[key] = rng.uniform(-bound, bound, size=shape)
    return params


def zero_params(spec: EncoderSpec) -> dict[str, np.ndarray]:
    return {k: np.zeros(s) for k, s in spec.shapes().items()}


class PointEncoder:
    """Stateless forward/backward over a parameter dict.

    ``n_encoded`` counts clouds passed through :meth:`forward`.
    """

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        self.n_point = len(spec.point_dims) - 1
        self.n_global = len(spec.global_dims) - 1
        self.n_encoded = 0

    def forward(self, clouds: np.ndarray, params, cache: bool = False):
        """Encode clouds of shape ``(b, n_points, 3)`` into ``(b, U)`` latents."""
        clouds = np.asarray(clouds, dtype=float)
        if clouds.ndim != 3 or clouds.shape[2] != 3:
            raise EncoderError(f"clouds must have shape (b, n, 3), got {clouds.shape}")
        if not np.all(np.isfinite(clouds)):
            raise EncoderError("non-finite cloud coordinates")
        b, n, _ = clouds.shape
        self.n_encoded += b

        h = clouds.reshape(b * n, 3)
        for k in range(self.n_point):
            h = np.maximum(h @ params[f"point{k}.W"] + params[f"point{k}.b"], 0.0)
        h = h.reshape(b, n, -1)
        # argmax keeps the first maximum, which routes ties to the lowest index
        argmax = h.argmax(axis=1)
        g = np.take_along_axis(h, argmax[:, None, :], axis=1)[:, 0, :]

        acts = [g]
        for k in range(self.n_global):
            z = g @ params[f"global{k}.W"] + params[f"global{k}.b"]
            g = z if k == self.n_global - 1 else np.maximum(z, 0.0)
            acts.append(g)
        if not cache:
            return g
        return g, {"clouds": clouds, "argmax": argmax, "acts": acts}

    def backward(self, d_latent: np.ndarray, cache, params) -> dict[str, np.ndarray]:
        """Gradients of ``sum(d_latent * latent)`` w.r.t. every parameter.

        Only the argmax point of each pooled channel receives gradient, so the
        per-point MLP is re-run on those points alone.
        """
        grads = {}
        acts = cache["acts"]
        d = d_latent
        for k in reversed(range(self.n_global)):
            if k != self.n_global - 1:
                d = d * (acts[k + 1] > 0)
            grads[f"global{k}.W"] = acts[k].T @ d
            grads[f"global{k}.b"] = d.sum(axis=0)
            d = d @ params[f"global{k}.W"].T
        d_pooled = d  # (b, C)

        clouds, argmax = cache["clouds"], cache["argmax"]
        b, c = argmax.shape
        selected = np.take_along_axis(clouds, argmax[:, :, None], axis=1)  # (b, C, 3)
        h = selected.reshape(b * c, 3)
        point_acts = [h]
        for k in range(self.n_point):
            h = np.maximum(h @ params[f"point{k}.W"] + params[f"point{k}.b"], 0.0)
            point_acts.append(h)
        # row (i, k) is the argmax point of channel k; only that channel carries gradient
        d = np.zeros((b, c, c))
        d[:, np.arange(c), np.arange(c)] = d_pooled
        d = d.reshape(b * c, c)
        for k in reversed(range(self.n_point)):
            d = d * (point_acts[k + 1] > 0)
            grads[f"point{k}.W"] = point_acts[k].T @ d
            grads[f"point{k}.b"] = d.sum(axis=0)
            if k:
                d = d @ params[f"point{k}.W"].T
        return grads

    def l2_penalty(self, params) -> float:
        return self.spec.l2 * sum(float(np.sum(params[k] ** 2))
                                  for k in params if k.endswith(".W"))

    def l2_grads(self, params) -> dict[str, np.ndarray]:
        return {k: 2.0 * self.spec.l2 * params[k] for k in params if k.endswith(".W")}


def encode(cloud: np.ndarray, params, spec: EncoderSpec | None = None) -> np.ndarray:
    """Latent vector of a single ``(n_points, 3)`` cloud."""
    if spec is None:
        spec = spec_from_params(params)
    return PointEncoder(spec).forward(np.asarray(cloud)[None], params)[0]


def spec_from_params(params, l2: float = 0.0) -> EncoderSpec:
    n_point = sum(1 for k in params if k.startswith("point") and k.endswith(".W"))
    n_global = sum(1 for k in params if k.startswith("global") and k.endswith(".W"))
    point_dims = [params["point0.W"].shape[0]] + [params[f"point{k}.W"].shape[1]
                                                 for k in range(n_point)]
    global_dims = [params["global0.W"].shape[0]] + [params[f"global{k}.W"].shape[1]
                                                   for k in range(n_global)]
    return EncoderSpec(tuple(point_dims), tuple(global_dims), l2)
