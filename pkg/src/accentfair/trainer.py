"""Two-phase training: ERM pretraining of the base model, then adapter finetuning."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import accentsynth, fairmetrics, objectives, toymodel
from .accentsynth import DatasetSplit
from .objectives import FusionWeights, GroupedBatch
from .toymodel import ModelConfig, ParamSet

log = logging.getLogger(__name__)

DEFAULT_GRID = (0.01, 0.03, 0.06, 0.1, 0.3, 0.6, 1.0)


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    phase: str = "finetune"
    objective: str = "erm"
    weights: FusionWeights = field(default_factory=FusionWeights)
    learning_rate: float = 4e-5
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_steps: int = 500
    eval_every: int = 25
    seed: int = 0
    early_stop_patience: int = 5
    sampler: str = "auto"

    def resolved_sampler(self) -> str:
        """erm/sd average over the pooled (skewed) set; group objectives need every group per batch."""
        if self.sampler != "auto":
            return self.sampler
        if self.phase == "pretrain" or self.objective in ("erm", "sd"):
            return "pooled"
        return "balanced"

    def validate(self, num_groups: int | None = None) -> None:
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"phase must be pretrain or finetune, got {self.phase!r}")
        if self.objective not in objectives.OBJECTIVES:
            raise ConfigError(f"objective must be one of {objectives.OBJECTIVES}, got {self.objective!r}")
        if self.phase == "pretrain" and self.objective != "erm":
            raise ConfigError("pretraining uses the erm objective")
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ConfigError("learning_rate must be a finite non-negative number")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_every < 1 or self.early_stop_patience < 1:
            raise ConfigError("batch_size, eval_every and early_stop_patience must be >= 1; max_steps >= 0")
        if num_groups is not None and self.objective in ("dro", "irm", "fusion") and self.batch_size < num_groups:
            raise ConfigError(
                f"objective {self.objective} needs batch_size >= num_groups ({self.batch_size} < {num_groups})"
            )
        if self.sampler not in ("auto", "pooled", "balanced"):
            raise ConfigError(f"sampler must be auto, pooled or balanced, got {self.sampler!r}")
        if self.objective in ("dro", "irm", "fusion") and self.sampler == "pooled":
            raise ConfigError(f"objective {self.objective} needs balanced group batches")
        if num_groups is not None and self.resolved_sampler() == "balanced" and self.batch_size < num_groups:
            raise ConfigError(f"balanced batches need batch_size >= num_groups ({self.batch_size} < {num_groups})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k in sorted(grads):
            g = grads[k]
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[k], self.v[k] = m, v
            tensors[k] = tensors[k] - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, tensors, grads) -> None:
        for k in sorted(grads):
            tensors[k] = tensors[k] - self.lr * grads[k]


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    return SGD(cfg.learning_rate)


@dataclass
class TrainResult:
    best: ParamSet
    best_step: int
    final: ParamSet
    log: list[dict]
    best_report: fairmetrics.FairnessReport
    steps_run: int


def _run(params: ParamSet, batches, dataset: DatasetSplit, cfg: TrainConfig, run_id: str,
         out_dir=None, metadata: dict | None = None) -> TrainResult:
    """Optimizer loop with periodic validation, best-by-macro-WER selection and early stopping."""
    params = params.copy()
    opt = make_optimizer(cfg)
    metadata = dict(metadata or {})
    entries: list[dict] = []
    run_dir = Path(out_dir) / run_id if out_dir is not None else None

    def validate(step):
        rep = fairmetrics.evaluate_split(params, dataset.validation, dict(metadata, step=step),
                                         num_groups=dataset.num_groups)
        if run_dir is not None:
            toymodel.save_checkpoint(params, run_dir / f"step_{step}.json", {"run_id": run_id, "step": step})
        return rep

    best_report = validate(0)
    entries.append({"step": 0, "loss": None, "validation": best_report.to_dict()})
    best, best_step, stale = params.copy(), 0, 0
    step = 0
    for step in range(1, cfg.max_steps + 1):
        batch = GroupedBatch(next(batches))
        report = objectives.evaluate_objective(cfg.objective, params, batch, cfg.weights)
        if not math.isfinite(report.total):
            raise DivergenceError(step, report.total)
        opt.step(params.tensors, report.grads)
        entry = {"step": step, "loss": report.summary()}
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            rep = validate(step)
            entry["validation"] = rep.to_dict()
            if rep.macro_average < best_report.macro_average:
                best, best_step, best_report, stale = params.copy(), step, rep, 0
            else:
                stale += 1
            log.debug("%s step %d: loss %.4f val macro %.2f", run_id, step, report.total, rep.macro_average)
        entries.append(entry)
        if stale >= cfg.early_stop_patience:
            log.info("%s: early stop at step %d (best step %d)", run_id, step, best_step)
            break
    if run_dir is not None:
        toymodel.save_checkpoint(best, run_dir / "best.json", {"run_id": run_id, "step": best_step})
        with (run_dir / "train_log.jsonl").open("w", encoding="utf-8") as fh:
            for e in entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")
    return TrainResult(best, best_step, params, entries, best_report, step)


def _batches(dataset: DatasetSplit, cfg: TrainConfig):
    if cfg.resolved_sampler() == "balanced":
        return accentsynth.balanced_batches(dataset.train, cfg.batch_size, cfg.seed, dataset.num_groups)
    return accentsynth.pooled_batches(dataset.train, cfg.batch_size, cfg.seed)


def pretrain(model_config: ModelConfig, dataset: DatasetSplit, cfg: TrainConfig, out_dir=None,
             run_id: str | None = None) -> TrainResult:
    """ERM on the skewed training pool with adapters disabled."""
    cfg = replace(cfg, phase="pretrain")
    cfg.validate()
    if model_config.adapter_enabled:
        model_config = replace(model_config, adapter_enabled=False)
    if (model_config.d, model_config.V) != (dataset.feature_dim, dataset.vocab_size):
        raise ConfigError("model d/V do not match the dataset")
    params = toymodel.init(model_config, cfg.seed)
    batches = _batches(dataset, cfg)
    run_id = run_id or f"pretrain-s{cfg.seed}"
    meta = {"model": f"h={model_config.h}", "objective": "erm", "seed": cfg.seed, "phase": "pretrain"}
    return _run(params, batches, dataset, cfg, run_id, out_dir, meta)


def finetune(base: ParamSet, dataset: DatasetSplit, cfg: TrainConfig, out_dir=None,
             run_id: str | None = None, r: int | None = None) -> TrainResult:
    """Train fresh adapters on balanced group batches with every base tensor frozen."""
    cfg = replace(cfg, phase="finetune")
    cfg.validate(dataset.num_groups)
    params = toymodel.attach_adapter(base, cfg.seed, r)
    batches = _batches(dataset, cfg)
    run_id = run_id or f"finetune-{cfg.objective}-s{cfg.seed}"
    meta = {"model": f"h={base.config.h}", "objective": cfg.objective, "seed": cfg.seed, "phase": "finetune"}
    return _run(params, batches, dataset, cfg, run_id, out_dir, meta)


@dataclass
class SearchResult:
    weights: FusionWeights
    score: float
    log: list[dict]


def greedy_search(
    base: ParamSet | None,
    dataset: DatasetSplit | None,
    cfg: TrainConfig,
    grid_s: Sequence[float] = DEFAULT_GRID,
    grid_i: Sequence[float] = DEFAULT_GRID,
    score_fn: Callable[[FusionWeights], float] | None = None,
) -> SearchResult:
    """Coordinate-wise search over lambda_s then lambda_i with lambda_e = lambda_d = 1.

    ``score_fn`` maps weights to a validation score (lower is better); by default
    it finetunes with the fusion objective and returns the best validation
    macro-average WER. Ties go to the smaller lambda.
    """
    if not grid_s or not grid_i:
        raise ConfigError("search grids must be non-empty")
    if score_fn is None:
        def score_fn(w):
            return finetune(base, dataset, replace(cfg, objective="fusion", weights=w)).best_report.macro_average

    start = replace(cfg.weights, lambda_e=1.0, lambda_d=1.0)
    entries: list[dict] = []

    def sweep(axis: str, grid, current: FusionWeights) -> FusionWeights:
        best_w, best_score = None, None
        for value in sorted(grid):
            w = replace(current, **{axis: float(value)})
            score = float(score_fn(w))
            entries.append({"axis": axis, "value": float(value), "score": score, "weights": asdict(w)})
            if best_score is None or score < best_score:
                best_w, best_score = w, score
        return best_w

    w = sweep("lambda_s", grid_s, start)
    w = sweep("lambda_i", grid_i, w)
    best_score = min(e["score"] for e in entries[len(grid_s):] if e["weights"] == asdict(w))
    return SearchResult(w, best_score, entries)
