"""ERM, spectral decoupling, Group-DRO, IRM and their weighted fusion.

Every loss here is a weighted sum of per-frame terms. A group's loss is the
mean over its utterances of the per-utterance mean frame cross-entropy, and the
pooled ERM loss is the same mean taken over all utterances in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import diffcore, toymodel
from .accentsynth import Utterance
from .toymodel import ParamSet


class UsageError(ValueError):
    pass


class ConfigError(ValueError):
    pass


OBJECTIVES = ("erm", "sd", "dro", "irm", "fusion")


@dataclass
class GroupedBatch:
    groups: dict[int, list[Utterance]]

    def __post_init__(self):
        self.groups = {int(g): list(u) for g, u in sorted(self.groups.items())}
        if not self.groups:
            raise UsageError("empty batch")
        empty = [g for g, u in self.groups.items() if not u]
        if empty:
            raise UsageError(f"groups {empty} listed with no utterances")

    @classmethod
    def from_utterances(cls, utterances) -> "GroupedBatch":
        groups: dict[int, list[Utterance]] = {}
        for u in utterances:
            groups.setdefault(u.group, []).append(u)
        return cls(groups)

    @property
    def group_ids(self) -> list[int]:
        return list(self.groups)

    def utterances(self) -> list[Utterance]:
        return [u for g in self.groups for u in self.groups[g]]


@dataclass(frozen=True)
class FusionWeights:
    lambda_e: float = 1.0
    lambda_s: float = 0.06
    lambda_d: float = 1.0
    lambda_i: float = 0.01
    sd_lambda: float = 0.06
    sd_includes_erm: bool = True

    def __post_init__(self):
        for name in ("lambda_e", "lambda_s", "lambda_d", "lambda_i", "sd_lambda"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def __add__(self, other: "FusionWeights") -> "FusionWeights":
        if self.sd_lambda != other.sd_lambda or self.sd_includes_erm != other.sd_includes_erm:
            raise ValueError("can only add weights sharing sd_lambda and sd_includes_erm")
        return FusionWeights(
            self.lambda_e + other.lambda_e,
            self.lambda_s + other.lambda_s,
            self.lambda_d + other.lambda_d,
            self.lambda_i + other.lambda_i,
            self.sd_lambda,
            self.sd_includes_erm,
        )


@dataclass
class LossReport:
    total: float
    components: dict[str, float]
    per_group_loss: dict[int, float]
    worst_group: int
    grads: diffcore.GradMap = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "total": self.total,
            "components": dict(self.components),
            "per_group_loss": {str(g): v for g, v in self.per_group_loss.items()},
            "worst_group": self.worst_group,
        }


class _Pass:
    """One forward pass over every frame in a batch plus the frame weightings."""

    def __init__(self, params: ParamSet | Mapping[str, np.ndarray], batch: GroupedBatch):
        if not isinstance(batch, GroupedBatch):
            batch = GroupedBatch(batch)
        self.group_ids = batch.group_ids
        utts = batch.utterances()
        if any(len(u.transcript) == 0 for u in utts):
            raise UsageError("utterances must have at least one frame")
        x = np.concatenate([u.features for u in utts], axis=0)
        self.targets = np.concatenate([np.asarray(u.transcript, dtype=np.int64) for u in utts])
        lengths = np.array([len(u.transcript) for u in utts], dtype=np.float64)
        frame_group = np.concatenate([np.full(len(u.transcript), u.group) for u in utts])
        inv_len = np.repeat(1.0 / lengths, lengths.astype(np.int64))
        self.frames = x.shape[0]
        self.erm_weight = inv_len / len(utts)
        self.group_weight = {}
        for g in self.group_ids:
            mask = frame_group == g
            self.group_weight[g] = np.where(mask, inv_len / len(batch.groups[g]), 0.0)

        tensors = params.tensors if isinstance(params, ParamSet) else params
        _, self.logits, self.ctx = toymodel.forward(tensors, x)
        self.z = self.ctx["z"]
        self.w = self.ctx["w"]
        self.probs = diffcore.softmax(self.logits)
        self.ce = diffcore.frame_cross_entropy(self.logits, self.targets)
        self.err = self.probs.copy()
        self.err[np.arange(self.frames), self.targets] -= 1.0  # softmax - onehot

    # Each term returns (value, grad wrt z, direct grad wrt irm_w).

    def weighted_ce(self, weight):
        value = float(weight @ self.ce)
        grad_o = weight[:, None] * self.err
        return value, self.w * grad_o, float(np.sum(grad_o * self.z))

    def group_losses(self) -> dict[int, float]:
        return {g: float(self.group_weight[g] @ self.ce) for g in self.group_ids}

    def logit_penalty(self):
        value = float(np.sum(self.logits**2)) / self.frames
        grad_o = (2.0 / self.frames) * self.logits
        return value, self.w * grad_o, float(np.sum(grad_o * self.z))

    def irm_penalty(self):
        """sum_e (dL_e/dw)^2 with its exact gradient.

        With s_t = (p_t - y_t) . z_t and p_t = softmax(w z_t):
          ds_t/dz_j = (p_j - y_j) + w p_j (z_j - zbar_t),  zbar_t = p_t . z_t
          ds_t/dw   = p_t . z_t^2 - zbar_t^2
        """
        s = np.sum(self.err * self.z, axis=1)
        zbar = np.sum(self.probs * self.z, axis=1)
        ds_dz = self.err + self.w * self.probs * (self.z - zbar[:, None])
        ds_dw = np.sum(self.probs * self.z**2, axis=1) - zbar**2
        value = 0.0
        grad_z = np.zeros_like(self.z)
        grad_w = 0.0
        env_grads = {}
        for g in self.group_ids:
            c = self.group_weight[g]
            g_e = float(c @ s)
            env_grads[g] = g_e
            value += g_e * g_e
            grad_z += (2.0 * g_e) * c[:, None] * ds_dz
            grad_w += 2.0 * g_e * float(c @ ds_dw)
        return value, grad_z, grad_w, env_grads


def _worst(per_group: dict[int, float]) -> int:
    worst = None
    for g in sorted(per_group):
        if worst is None or per_group[g] > per_group[worst]:
            worst = g
    return worst


def _grads(p: _Pass, params, grad_z, grad_w, wrt) -> diffcore.GradMap:
    if wrt is None:
        wrt = params.trainable() if isinstance(params, ParamSet) else sorted(params)
    full = toymodel.backward(p.ctx, grad_z, grad_w)
    return {k: full[k] for k in sorted(wrt) if k in full}


def _report(p: _Pass, params, total, components, grad_z, grad_w, wrt, need_grads) -> LossReport:
    per_group = p.group_losses()
    grads = _grads(p, params, grad_z, grad_w, wrt) if need_grads else {}
    return LossReport(total, components, per_group, _worst(per_group), grads)


def _terms(p: _Pass, weights: FusionWeights):
    """Weighted fusion terms sharing one forward pass."""
    erm_v, erm_z, erm_w = p.weighted_ce(p.erm_weight)
    pen_v, pen_z, pen_w = p.logit_penalty()
    per_group = p.group_losses()
    worst = _worst(per_group)
    dro_v, dro_z, dro_w = p.weighted_ce(p.group_weight[worst])
    irm_v, irm_z, irm_w, _ = p.irm_penalty()

    inner = 1.0 if weights.sd_includes_erm else 0.0
    sd_v = inner * erm_v + weights.sd_lambda * pen_v
    components = {"erm": erm_v, "sd": sd_v, "sd_penalty": pen_v, "dro": dro_v, "irm_penalty": irm_v}
    ce_coef = weights.lambda_e + weights.lambda_s * inner
    pen_coef = weights.lambda_s * weights.sd_lambda
    total = (
        weights.lambda_e * erm_v + weights.lambda_s * sd_v + weights.lambda_d * dro_v + weights.lambda_i * irm_v
    )
    grad_z = ce_coef * erm_z + pen_coef * pen_z + weights.lambda_d * dro_z + weights.lambda_i * irm_z
    grad_w = ce_coef * erm_w + pen_coef * pen_w + weights.lambda_d * dro_w + weights.lambda_i * irm_w
    return total, components, grad_z, grad_w


def erm(params, batch, wrt=None, need_grads: bool = True) -> LossReport:
    """Pooled mean of per-utterance losses, ignoring groups."""
    p = _Pass(params, batch)
    value, gz, gw = p.weighted_ce(p.erm_weight)
    return _report(p, params, value, {"erm": value}, gz, gw, wrt, need_grads)


def sd(params, batch, lam: float = 0.06, wrt=None, need_grads: bool = True, include_erm: bool = True) -> LossReport:
    """ERM plus ``lam`` times the mean squared logit norm per frame."""
    if lam < 0:
        raise ConfigError("sd lambda must be >= 0")
    p = _Pass(params, batch)
    erm_v, erm_z, erm_w = p.weighted_ce(p.erm_weight)
    pen_v, pen_z, pen_w = p.logit_penalty()
    inner = 1.0 if include_erm else 0.0
    total = inner * erm_v + lam * pen_v
    return _report(
        p, params, total, {"erm": erm_v, "sd_penalty": pen_v},
        inner * erm_z + lam * pen_z, inner * erm_w + lam * pen_w, wrt, need_grads,
    )


def group_dro(params, batch, wrt=None, need_grads: bool = True) -> LossReport:
    """Hard max over group losses; only the worst group (lowest index on ties) carries gradient."""
    p = _Pass(params, batch)
    worst = _worst(p.group_losses())
    value, gz, gw = p.weighted_ce(p.group_weight[worst])
    return _report(p, params, value, {"dro": value}, gz, gw, wrt, need_grads)


def irm(params, batch, wrt=None, need_grads: bool = True) -> LossReport:
    """Penalty only: sum over groups of the squared loss gradient wrt ``irm_w``."""
    p = _Pass(params, batch)
    value, gz, gw, env = p.irm_penalty()
    components = {"irm_penalty": value}
    components.update({f"irm_grad_g{g}": v for g, v in env.items()})
    return _report(p, params, value, components, gz, gw, wrt, need_grads)


def fusion(params, batch, weights: FusionWeights = FusionWeights(), wrt=None, need_grads: bool = True) -> LossReport:
    """lambda_e*ERM + lambda_s*SD + lambda_d*DRO + lambda_i*IRM.

    SD carries its own ERM term unless ``weights.sd_includes_erm`` is False, so
    by default the cross-entropy coefficient is lambda_e + lambda_s.
    """
    p = _Pass(params, batch)
    total, components, gz, gw = _terms(p, weights)
    return _report(p, params, total, components, gz, gw, wrt, need_grads)


def evaluate_objective(name: str, params, batch, weights: FusionWeights = FusionWeights(), wrt=None,
                       need_grads: bool = True) -> LossReport:
    if name == "erm":
        return erm(params, batch, wrt, need_grads)
    if name == "sd":
        return sd(params, batch, weights.sd_lambda, wrt, need_grads)
    if name == "dro":
        return group_dro(params, batch, wrt, need_grads)
    if name == "irm":
        return irm(params, batch, wrt, need_grads)
    if name == "fusion":
        return fusion(params, batch, weights, wrt, need_grads)
    raise ConfigError(f"unknown objective {name!r}; expected one of {OBJECTIVES}")
