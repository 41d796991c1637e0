"""Frame-synchronous toy ASR model.

Per frame: ``a = tanh(x @ enc_w + enc_b)``, an optional residual bottleneck
adapter ``phi = a + tanh(a @ down_w + down_b) @ up_w + up_b``, and logits
``o = irm_w * (phi @ head_w + head_b)``. ``irm_w`` is the fixed scalar the IRM
penalty differentiates through; it is never updated.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore

BASE_NAMES = ("enc_b", "enc_w", "head_b", "head_w")
ADAPTER_NAMES = ("down_b", "down_w", "up_b", "up_w")
IRM_W = "irm_w"


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int
    h: int
    V: int
    r: int = 4
    adapter_enabled: bool = False

    def __post_init__(self):
        if min(self.d, self.h, self.V, self.r) <= 0:
            raise ValueError("model dimensions must be positive")
        if self.r >= self.h:
            raise ValueError(f"adapter bottleneck r={self.r} must be < h={self.h}")


@dataclass
class ParamSet:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    freeze: frozenset = field(default_factory=frozenset)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def trainable(self) -> list[str]:
        """Names an optimizer may update: unfrozen, and never ``irm_w``."""
        return [n for n in self.names() if n not in self.freeze and n != IRM_W]

    def copy(self) -> "ParamSet":
        return ParamSet(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.freeze)

    def with_tensors(self, tensors) -> "ParamSet":
        return ParamSet(self.config, dict(tensors), self.freeze)

    def __eq__(self, other):
        if not isinstance(other, ParamSet):
            return NotImplemented
        return (
            self.config == other.config
            and self.freeze == other.freeze
            and self.names() == other.names()
            and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
        )


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init(config: ModelConfig, seed: int) -> ParamSet:
    """Fan-in uniform weights, zero biases, zero adapter up-projection.

    Base tensors are drawn before adapter tensors, so enabling the adapter
    leaves the base weights for a given seed unchanged.
    """
    rng = np.random.default_rng(seed)
    t = {
        "enc_w": _uniform(rng, config.d, (config.d, config.h)),
        "enc_b": np.zeros(config.h),
        "head_w": _uniform(rng, config.h, (config.h, config.V)),
        "head_b": np.zeros(config.V),
        IRM_W: np.ones(()),
    }
    if config.adapter_enabled:
        t.update(_adapter_tensors(config, rng))
    return ParamSet(config, t)


def _adapter_tensors(config: ModelConfig, rng) -> dict[str, np.ndarray]:
    return {
        "down_w": _uniform(rng, config.h, (config.h, config.r)),
        "down_b": np.zeros(config.r),
        "up_w": np.zeros((config.r, config.h)),
        "up_b": np.zeros(config.h),
    }


def attach_adapter(base: ParamSet, seed: int, r: int | None = None) -> ParamSet:
    """Add fresh identity adapters and freeze every base tensor."""
    config = replace(base.config, adapter_enabled=True, r=base.config.r if r is None else r)
    rng = np.random.default_rng([seed, 31337])
    tensors = {k: v.copy() for k, v in base.tensors.items() if k not in ADAPTER_NAMES}
    tensors.update(_adapter_tensors(config, rng))
    return ParamSet(config, tensors, frozenset(BASE_NAMES))


def forward(params: ParamSet | dict, features):
    """Return ``(phi, logits, ctx)`` for a ``T x d`` feature matrix."""
    t = params.tensors if isinstance(params, ParamSet) else params
    x = diffcore.as_tensor(features)
    if x.ndim != 2 or x.shape[1] != t["enc_w"].shape[0]:
        raise ShapeError(f"features shape {x.shape} incompatible with d={t['enc_w'].shape[0]}")
    pre, enc_ctx = diffcore.affine_forward(x, t["enc_w"], t["enc_b"])
    a, a_ctx = diffcore.tanh_forward(pre)
    ctx = {"enc": enc_ctx, "a": a_ctx}
    if "up_w" in t:
        dpre, ctx["down"] = diffcore.affine_forward(a, t["down_w"], t["down_b"])
        u, ctx["u"] = diffcore.tanh_forward(dpre)
        delta, ctx["up"] = diffcore.affine_forward(u, t["up_w"], t["up_b"])
        phi = a + delta
    else:
        phi = a
    z, ctx["head"] = diffcore.affine_forward(phi, t["head_w"], t["head_b"])
    w = float(t[IRM_W])
    ctx["z"] = z
    ctx["w"] = w
    return phi, w * z, ctx


def backward(ctx, grad_z, grad_w: float = 0.0) -> diffcore.GradMap:
    """Gradients of a scalar loss given its gradient wrt the head output ``z``
    (before the ``irm_w`` scaling) and any direct dependence on ``irm_w``."""
    if ctx is None:
        raise RuntimeError("backward needs the context returned by forward")
    grads: diffcore.GradMap = {IRM_W: np.asarray(float(grad_w))}
    dphi, grads["head_w"], grads["head_b"] = diffcore.affine_backward(ctx["head"], grad_z)
    da = dphi
    if "up" in ctx:
        du, grads["up_w"], grads["up_b"] = diffcore.affine_backward(ctx["up"], dphi)
        ddown = diffcore.tanh_backward(ctx["u"], du)
        da_adapter, grads["down_w"], grads["down_b"] = diffcore.affine_backward(ctx["down"], ddown)
        da = dphi + da_adapter
    dpre = diffcore.tanh_backward(ctx["a"], da)
    _, grads["enc_w"], grads["enc_b"] = diffcore.affine_backward(ctx["enc"], dpre)
    return grads


def logits_backward(ctx, grad_logits, extra_grad_w: float = 0.0) -> diffcore.GradMap:
    """Backward from a gradient wrt the logits ``o = irm_w * z``."""
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    grad_w = float(np.sum(grad_logits * ctx["z"])) + extra_grad_w
    return backward(ctx, ctx["w"] * grad_logits, grad_w)


def decode(logits) -> list[int]:
    """Per-frame argmax; ``np.argmax`` already returns the lowest index on ties."""
    logits = np.asarray(logits)
    if logits.size == 0:
        return []
    return [int(i) for i in np.argmax(logits, axis=1)]


def transcribe(params: ParamSet, features) -> list[int]:
    _, logits, _ = forward(params, features)
    return decode(logits)


# -- checkpoints ------------------------------------------------------------


def checkpoint_dict(params: ParamSet, extra: dict | None = None) -> dict:
    doc = {
        "config": asdict(params.config),
        "freeze": sorted(params.freeze),
        "params": {
            k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
            for k, v in sorted(params.tensors.items())
        },
    }
    if extra:
        doc["meta"] = extra
    return doc


def save_checkpoint(params: ParamSet, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(checkpoint_dict(params, extra), sort_keys=True) + "\n", encoding="utf-8")
    return path


def params_from_dict(doc: dict) -> ParamSet:
    config = ModelConfig(**doc["config"])
    tensors = {
        k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()
    }
    return ParamSet(config, tensors, frozenset(doc.get("freeze", ())))


def load_checkpoint(path) -> ParamSet:
    return params_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
