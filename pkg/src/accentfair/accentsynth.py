"""Synthetic grouped "accented speech" datasets.

Every utterance is frame-synchronous: one feature frame per transcript token.
Token 0 is the word separator and the last feature coordinate is reserved for
a group-dependent spurious cue attached to one token class.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

PRNG_NAME = "numpy-PCG64"
SEPARATOR = 0
SPLITS = ("train", "validation", "test")
_SPLIT_CODE = {"train": 0, "validation": 1, "test": 2}


class ConfigError(ValueError):
    pass


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


@dataclass
class Utterance:
    id: str
    group: int
    features: np.ndarray  # T x d
    transcript: list[int]

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.id == other.id
            and self.group == other.group
            and self.transcript == other.transcript
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "group": self.group,
            "features": self.features.tolist(),
            "transcript": list(self.transcript),
        }


@dataclass
class GroupSpec:
    mixing_weight: float
    shift: list[float]
    confusion_rate: float = 0.0
    spurious_bias: float = 0.0

    def to_dict(self) -> dict:
        return {
            "mixing_weight": self.mixing_weight,
            "shift": list(self.shift),
            "confusion_rate": self.confusion_rate,
            "spurious_bias": self.spurious_bias,
        }


@dataclass
class SynthConfig:
    groups: list[GroupSpec]
    vocab_size: int = 8
    feature_dim: int = 6
    sizes: dict[str, int] = field(
        default_factory=lambda: {"train": 1000, "validation": 78, "test": 78}
    )
    noise: float = 0.3
    prototype_seed: int = 0
    words_per_utterance: tuple[int, int] = (2, 4)
    word_length: tuple[int, int] = (1, 5)
    spurious_token: int = 1

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def validate(self) -> None:
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must be >= 3 (separator plus two word tokens)")
        if self.feature_dim < 3:
            raise ConfigError("feature_dim must be >= 3 (includes the spurious coordinate)")
        if not self.groups:
            raise ConfigError("groups: at least one GroupSpec required")
        weights = [g.mixing_weight for g in self.groups]
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigError(f"mixing_weights must be non-negative and sum to 1, got sum {sum(weights)!r}")
        for i, g in enumerate(self.groups):
            if not 0.0 <= g.confusion_rate <= 1.0:
                raise ConfigError(f"group {i}: confusion_rate must lie in [0, 1]")
            if len(g.shift) != self.feature_dim:
                raise ConfigError(f"group {i}: shift has {len(g.shift)} entries, expected {self.feature_dim}")
        for name in SPLITS:
            if self.sizes.get(name, 0) < self.num_groups:
                raise ConfigError(f"sizes.{name} must be >= num_groups ({self.num_groups})")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        lo, hi = self.words_per_utterance
        if not 1 <= lo <= hi:
            raise ConfigError("words_per_utterance must satisfy 1 <= min <= max")
        lo, hi = self.word_length
        if not 1 <= lo <= hi:
            raise ConfigError("word_length must satisfy 1 <= min <= max")
        if not 1 <= self.spurious_token < self.vocab_size:
            raise ConfigError("spurious_token must be a non-separator token")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "feature_dim": self.feature_dim,
            "sizes": dict(self.sizes),
            "noise": self.noise,
            "prototype_seed": self.prototype_seed,
            "words_per_utterance": list(self.words_per_utterance),
            "word_length": list(self.word_length),
            "spurious_token": self.spurious_token,
            "groups": [g.to_dict() for g in self.groups],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        try:
            groups = [GroupSpec(**g) for g in doc["groups"]]
            cfg = cls(
                groups=groups,
                vocab_size=int(doc.get("vocab_size", 8)),
                feature_dim=int(doc.get("feature_dim", 6)),
                sizes={k: int(v) for k, v in doc.get("sizes", {}).items()},
                noise=float(doc.get("noise", 0.3)),
                prototype_seed=int(doc.get("prototype_seed", 0)),
                words_per_utterance=tuple(doc.get("words_per_utterance", (2, 4))),
                word_length=tuple(doc.get("word_length", (1, 5))),
                spurious_token=int(doc.get("spurious_token", 1)),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        cfg.validate()
        return cfg


@dataclass
class DatasetSplit:
    train: list[Utterance]
    validation: list[Utterance]
    test: list[Utterance]
    seed: int
    config: SynthConfig

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def num_groups(self) -> int:
        return self.config.num_groups

    def metadata(self) -> dict:
        return {
            "V": self.vocab_size,
            "d": self.feature_dim,
            "num_groups": self.num_groups,
            "seed": self.seed,
            "prng": PRNG_NAME,
            "groupspecs": [g.to_dict() for g in self.config.groups],
            "config": self.config.to_dict(),
        }


def default_config(num_groups: int = 26, seed: int = 0, **overrides) -> SynthConfig:
    """Evenly weighted groups with random shifts and mixed spurious cues."""
    rng = np.random.default_rng([seed, 7919])
    d = overrides.get("feature_dim", 6)
    groups = []
    for g in range(num_groups):
        shift = (0.5 * rng.standard_normal(d)).tolist() if g else [0.0] * d
        groups.append(
            GroupSpec(
                mixing_weight=1.0 / num_groups,
                shift=shift,
                confusion_rate=float(rng.uniform(0.0, 0.15)),
                spurious_bias=float(rng.choice([-1.0, 0.0, 1.0])),
            )
        )
    # Float weights must sum to 1 within 1e-9.
    groups[-1].mixing_weight = 1.0 - sum(g.mixing_weight for g in groups[:-1])
    sizes = {"train": 40 * num_groups, "validation": 4 * num_groups, "test": 4 * num_groups}
    cfg = SynthConfig(groups=groups, sizes=sizes, **overrides)
    cfg.validate()
    return cfg


def skewed_config(
    mixing=(0.8, 0.15, 0.05),
    shift_scale: float = 1.0,
    cue: float = 2.0,
    shape_seed: int = 5,
    **overrides,
) -> SynthConfig:
    """Majority group with an unshifted, positively cued token class; minorities
    get random shifts, the second group a reversed cue and later groups none."""
    params = {"vocab_size": 16, "feature_dim": 8, "noise": 0.2,
              "sizes": {"train": 600, "validation": 150, "test": 150}}
    params.update(overrides)
    d = params["feature_dim"]
    rng = np.random.default_rng(shape_seed)
    groups = [GroupSpec(mixing[0], [0.0] * d, 0.0, cue)]
    for i, w in enumerate(mixing[1:], start=1):
        shift = (shift_scale * rng.standard_normal(d)).tolist()
        groups.append(GroupSpec(w, shift, 0.0, -cue if i == 1 else 0.0))
    cfg = SynthConfig(groups=groups, **params)
    cfg.validate()
    return cfg


def largest_remainder(total: int, weights) -> list[int]:
    """Apportion ``total`` items by ``weights``; leftovers go to the largest remainders."""
    quotas = [total * w for w in weights]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def token_prototypes(vocab_size: int, feature_dim: int, prototype_seed: int) -> np.ndarray:
    """Unit-Gaussian prototype per token; the spurious coordinate is left at 0."""
    rng = np.random.default_rng([prototype_seed, vocab_size, feature_dim])
    protos = rng.standard_normal((vocab_size, feature_dim))
    protos[:, -1] = 0.0
    return protos


def confusable(token: int, vocab_size: int) -> int:
    if token == SEPARATOR:
        return SEPARATOR
    return token % (vocab_size - 1) + 1


def _transcript(rng: np.random.Generator, cfg: SynthConfig) -> list[int]:
    n_words = int(rng.integers(cfg.words_per_utterance[0], cfg.words_per_utterance[1] + 1))
    tokens: list[int] = []
    for w in range(n_words):
        if w:
            tokens.append(SEPARATOR)
        length = int(rng.integers(cfg.word_length[0], cfg.word_length[1] + 1))
        tokens.extend(int(t) for t in rng.integers(1, cfg.vocab_size, size=length))
    return tokens


def render_features(
    transcript, spec: GroupSpec, cfg: SynthConfig, protos: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    tokens = np.asarray(transcript, dtype=np.int64)
    swap = rng.random(len(tokens)) < spec.confusion_rate
    shown = np.array(
        [confusable(int(t), cfg.vocab_size) if s else int(t) for t, s in zip(tokens, swap)],
        dtype=np.int64,
    )
    feats = protos[shown] + np.asarray(spec.shift, dtype=np.float64)
    feats[:, -1] += np.where(tokens == cfg.spurious_token, spec.spurious_bias, 0.0)
    if cfg.noise > 0:
        feats = feats + cfg.noise * rng.standard_normal(feats.shape)
    return feats


def generate(config: SynthConfig, seed: int) -> DatasetSplit:
    """Build train/validation/test splits; each utterance has its own PRNG stream."""
    config.validate()
    protos = token_prototypes(config.vocab_size, config.feature_dim, config.prototype_seed)
    G = config.num_groups
    out: dict[str, list[Utterance]] = {}
    for split in SPLITS:
        if split == "train":
            counts = largest_remainder(config.sizes[split], [g.mixing_weight for g in config.groups])
            empty = [g for g, c in enumerate(counts) if c == 0]
            if empty:
                raise ConfigError(f"sizes.train too small: groups {empty} receive no training utterances")
        else:
            counts = largest_remainder(config.sizes[split], [1.0 / G] * G)
        utts = []
        index = 0
        for group, count in enumerate(counts):
            for _ in range(count):
                rng = np.random.default_rng([seed, _SPLIT_CODE[split], index])
                transcript = _transcript(rng, config)
                feats = render_features(transcript, config.groups[group], config, protos, rng)
                utts.append(Utterance(f"{split}-{index:06d}", group, feats, transcript))
                index += 1
        out[split] = utts
    return DatasetSplit(out["train"], out["validation"], out["test"], seed, config)


# -- serialization ----------------------------------------------------------


def _validate_utterance(u: Utterance, meta: dict, where: str) -> None:
    if not 0 <= u.group < meta["num_groups"]:
        raise ValidationError(f"{where}: group {u.group} outside [0, {meta['num_groups']})")
    if any(not 0 <= t < meta["V"] for t in u.transcript):
        raise ValidationError(f"{where}: token outside [0, {meta['V']})")
    if u.features.ndim != 2 or u.features.shape != (len(u.transcript), meta["d"]):
        raise ValidationError(
            f"{where}: features shape {u.features.shape} != ({len(u.transcript)}, {meta['d']})"
        )
    if not np.all(np.isfinite(u.features)):
        raise ValidationError(f"{where}: non-finite feature value")


def write_jsonl(path, utterances, metadata: dict) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(metadata, sort_keys=True) + "\n")
        for u in utterances:
            fh.write(json.dumps(u.to_record()) + "\n")


def read_jsonl(path) -> tuple[dict, list[Utterance]]:
    """Read one split file: the metadata header, then one utterance per line."""
    path = Path(path)
    utts: list[Utterance] = []
    meta = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if meta is None:
                if not isinstance(rec, dict) or not {"V", "d", "num_groups"} <= rec.keys():
                    raise ParseError(f"{path}:{lineno}: missing metadata header")
                meta = rec
                continue
            try:
                u = Utterance(
                    id=str(rec["id"]),
                    group=int(rec["group"]),
                    features=np.asarray(rec["features"], dtype=np.float64).reshape(
                        len(rec["features"]), -1 if rec["features"] else meta["d"]
                    ),
                    transcript=[int(t) for t in rec["transcript"]],
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed record ({exc})") from exc
            _validate_utterance(u, meta, f"{path}:{lineno}")
            utts.append(u)
    if meta is None:
        raise ParseError(f"{path}: empty file, metadata header required")
    return meta, utts


def write_dataset(split: DatasetSplit, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = split.metadata()
    paths = []
    for name in SPLITS:
        p = directory / f"{name}.jsonl"
        write_jsonl(p, getattr(split, name), meta)
        paths.append(p)
    return paths


def read_dataset(directory) -> DatasetSplit:
    directory = Path(directory)
    parts = {}
    meta = None
    for name in SPLITS:
        meta, parts[name] = read_jsonl(directory / f"{name}.jsonl")
    ids = [u.id for name in SPLITS for u in parts[name]]
    if len(set(ids)) != len(ids):
        raise ValidationError("splits are not disjoint by id")
    config = SynthConfig.from_dict(meta["config"])
    return DatasetSplit(parts["train"], parts["validation"], parts["test"], int(meta["seed"]), config)


# -- batching ---------------------------------------------------------------


def group_utterances(utterances) -> dict[int, list[Utterance]]:
    groups: dict[int, list[Utterance]] = {}
    for u in utterances:
        groups.setdefault(u.group, []).append(u)
    return dict(sorted(groups.items()))


def balanced_batches(
    train, batch_size: int, seed: int, num_groups: int | None = None
) -> Iterator[dict[int, list[Utterance]]]:
    """Endless stream of batches with ``batch_size // num_groups`` utterances per group.

    Each group is drawn without replacement from its own shuffled order; a group
    that runs out is reshuffled and recycled independently of the others.
    """
    by_group = group_utterances(train)
    if num_groups is None:
        num_groups = len(by_group)
    missing = [g for g in range(num_groups) if g not in by_group]
    if missing:
        raise ConfigError(f"groups {missing} have no training utterances")
    if batch_size < num_groups:
        raise ConfigError(f"batch_size {batch_size} < num_groups {num_groups}")
    per_group = batch_size // num_groups
    rng = np.random.default_rng([seed, 104729])
    orders = {g: [] for g in by_group}
    while True:
        batch = {}
        for g in sorted(by_group):
            pool = by_group[g]
            chosen = []
            while len(chosen) < per_group:
                if not orders[g]:
                    orders[g] = list(rng.permutation(len(pool)))
                chosen.append(pool[orders[g].pop(0)])
            batch[g] = chosen
        yield batch


def pooled_batches(train, batch_size: int, seed: int) -> Iterator[dict[int, list[Utterance]]]:
    """Endless stream of uniformly sampled batches from the (skewed) pool, grouped."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    train = list(train)
    if not train:
        raise ConfigError("empty training pool")
    rng = np.random.default_rng([seed, 130363])
    order: list[int] = []
    while True:
        picked = []
        while len(picked) < batch_size:
            if not order:
                order = list(rng.permutation(len(train)))
            picked.append(train[order.pop(0)])
        yield group_utterances(picked)
