"""Word error rate, per-group aggregation and fairness summaries."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import toymodel
from .accentsynth import SEPARATOR


class UndefinedMetricError(ValueError):
    pass


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class WerResult:
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        if self.ref_words == 0:
            return 0.0
        return self.errors / self.ref_words


def edit_table(ref: Sequence, hyp: Sequence) -> list[list[int]]:
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i][j] = min(diag, d[i - 1][j] + 1, d[i][j - 1] + 1)
    return d


def wer(reference: Sequence, hypothesis: Sequence) -> WerResult:
    """Unit-cost Levenshtein alignment of word sequences.

    Backtrace prefers substitution/match, then deletion, then insertion.
    """
    ref, hyp = list(reference), list(hypothesis)
    if not ref:
        if hyp:
            raise UndefinedMetricError("WER undefined for an empty reference with a non-empty hypothesis")
        return WerResult(0, 0, 0, 0)
    d = edit_table(ref, hyp)
    i, j = len(ref), len(hyp)
    s = dl = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerResult(s, dl, ins, len(ref))


def detokenize(tokens: Iterable[int], separator: int = SEPARATOR) -> list[tuple[int, ...]]:
    """Split a token sequence into words at separator tokens; empty words are dropped."""
    words, cur = [], []
    for t in tokens:
        if t == separator:
            if cur:
                words.append(tuple(cur))
            cur = []
        else:
            cur.append(int(t))
    if cur:
        words.append(tuple(cur))
    return words


@dataclass
class FairnessReport:
    per_group_wer: dict[int, float]
    macro_average: float
    min_max_gap: float
    micro_average: float
    per_group_counts: dict[int, dict[str, int]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_group_wer": {str(g): v for g, v in sorted(self.per_group_wer.items())},
            "macro_average": self.macro_average,
            "min_max_gap": self.min_max_gap,
            "micro_average": self.micro_average,
            "per_group_counts": {str(g): dict(c) for g, c in sorted(self.per_group_counts.items())},
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FairnessReport":
        return cls(
            per_group_wer={int(g): float(v) for g, v in doc["per_group_wer"].items()},
            macro_average=float(doc["macro_average"]),
            min_max_gap=float(doc["min_max_gap"]),
            micro_average=float(doc["micro_average"]),
            per_group_counts={int(g): dict(c) for g, c in doc.get("per_group_counts", {}).items()},
            metadata=dict(doc.get("metadata", {})),
        )


def macro_average(per_group_wer: dict) -> float:
    if not per_group_wer:
        raise UndefinedMetricError("no groups with defined WER")
    return sum(per_group_wer[g] for g in sorted(per_group_wer)) / len(per_group_wer)


def min_max_gap(per_group_wer: dict) -> float:
    if not per_group_wer:
        raise UndefinedMetricError("no groups with defined WER")
    return max(per_group_wer.values()) - min(per_group_wer.values())


def micro_average(source) -> float:
    """Pooled WER percentage from a report, a list of reports, or ``{group: (errors, words)}``."""
    if isinstance(source, FairnessReport):
        source = [source]
    if isinstance(source, dict):
        pairs = list(source.values())
    else:
        pairs = []
        for rep in source:
            pairs.extend((c["errors"], c["words"]) for c in rep.per_group_counts.values())
    errors = sum(e for e, _ in pairs)
    words = sum(w for _, w in pairs)
    if words == 0:
        raise UndefinedMetricError("micro-average undefined with zero reference words")
    return 100.0 * errors / words


def report_from_counts(counts: dict[int, dict[str, int]], metadata: dict | None = None) -> FairnessReport:
    """Corpus-level per-group WER (pooled errors / pooled words) plus macro, gap and micro.

    Groups with zero reference words are excluded and listed under
    ``metadata["absent_groups"]``.
    """
    metadata = dict(metadata or {})
    present = {g: c for g, c in sorted(counts.items()) if c["words"] > 0}
    absent = sorted(g for g in counts if g not in present)
    if absent:
        metadata["absent_groups"] = absent
    per_group = {g: 100.0 * c["errors"] / c["words"] for g, c in present.items()}
    return FairnessReport(
        per_group_wer=per_group,
        macro_average=macro_average(per_group),
        min_max_gap=min_max_gap(per_group),
        micro_average=micro_average({g: (c["errors"], c["words"]) for g, c in present.items()}),
        per_group_counts={g: dict(c) for g, c in sorted(counts.items())},
        metadata=metadata,
    )


def score_pairs(items) -> dict[int, dict[str, int]]:
    """Accumulate ``(group, reference_words, hypothesis_words)`` triples into per-group counts.

    Pairs with an empty reference contribute to the utterance count only; a
    non-empty hypothesis against an empty reference is counted as insertions
    under ``empty_ref_insertions`` rather than folded into WER.
    """
    counts: dict[int, dict[str, int]] = {}
    for group, ref, hyp in items:
        c = counts.setdefault(
            int(group), {"errors": 0, "words": 0, "utterances": 0, "empty_ref_insertions": 0}
        )
        c["utterances"] += 1
        if not ref:
            c["empty_ref_insertions"] += len(hyp)
            continue
        r = wer(ref, hyp)
        c["errors"] += r.errors
        c["words"] += r.ref_words
    return dict(sorted(counts.items()))


def evaluate_split(params: toymodel.ParamSet, utterances, metadata: dict | None = None,
                   num_groups: int | None = None) -> FairnessReport:
    """Decode each utterance and report per-group WER, macro average and min-max gap."""
    utterances = sorted(utterances, key=lambda u: (u.group, u.id))
    if utterances and utterances[0].features.shape[1] != params.config.d:
        raise toymodel.ShapeError("checkpoint and split disagree on feature dimension")
    items = []
    for u in utterances:
        hyp = toymodel.transcribe(params, u.features)
        items.append((u.group, detokenize(u.transcript), detokenize(hyp)))
    counts = score_pairs(items)
    if num_groups is not None:
        for g in range(num_groups):
            counts.setdefault(g, {"errors": 0, "words": 0, "utterances": 0, "empty_ref_insertions": 0})
        counts = dict(sorted(counts.items()))
    return report_from_counts(counts, metadata)


def mean_squared_logit_norm(params: toymodel.ParamSet, utterances) -> float:
    total, frames = 0.0, 0
    for u in utterances:
        _, logits, _ = toymodel.forward(params, u.features)
        total += float(np.sum(logits**2))
        frames += logits.shape[0]
    return total / frames


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise UndefinedMetricError("correlation needs two equally long sequences of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedMetricError("correlation undefined for a constant sequence")
    return float(dx @ dy) / (sx * sy)


def mean_word_length_by_group(utterances) -> dict[int, float]:
    tokens: dict[int, int] = {}
    words: dict[int, int] = {}
    for u in utterances:
        ws = detokenize(u.transcript)
        tokens[u.group] = tokens.get(u.group, 0) + sum(len(w) for w in ws)
        words[u.group] = words.get(u.group, 0) + len(ws)
    return {g: tokens[g] / words[g] for g in sorted(words) if words[g]}


def word_length_correlation(utterances, report: FairnessReport) -> float:
    """Pearson r between per-group mean word length (tokens/word) and per-group WER."""
    lengths = mean_word_length_by_group(utterances)
    groups = [g for g in sorted(report.per_group_wer) if g in lengths]
    if len(groups) < 3:
        raise UndefinedMetricError("need at least 3 groups with defined WER")
    return pearson([lengths[g] for g in groups], [report.per_group_wer[g] for g in groups])


# -- report emission ----------------------------------------------------------


def cell(micro: float, gap: float) -> str:
    return f"{micro:.1f} / {gap:.1f}"


def emit_report(reports: list[FairnessReport], fmt: str = "table") -> str:
    """Render reports as a model-by-objective grid, a per-group CSV, or JSON."""
    if not reports:
        raise ValueError("no reports to emit")
    if fmt == "json":
        return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        return _csv(reports)
    if fmt == "table":
        return _table(reports)
    raise ValueError(f"unknown format {fmt!r}")


def _csv(reports) -> str:
    groups = sorted({g for r in reports for g in r.per_group_wer} | {g for r in reports for g in r.per_group_counts})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "objective", "seed", "micro_wer", "macro_wer", "min_max_gap"]
                    + [f"wer_g{g}" for g in groups])
    for r in reports:
        md = r.metadata
        writer.writerow(
            [md.get("model", ""), md.get("objective", ""), md.get("seed", ""),
             f"{r.micro_average:.6f}", f"{r.macro_average:.6f}", f"{r.min_max_gap:.6f}"]
            + [f"{r.per_group_wer[g]:.6f}" if g in r.per_group_wer else "" for g in groups]
        )
    return buf.getvalue()


def _table(reports) -> str:
    models: list[str] = []
    objectives: list[str] = []
    cells: dict[tuple[str, str], list[FairnessReport]] = {}
    for r in reports:
        model = str(r.metadata.get("model", "model"))
        objective = str(r.metadata.get("objective", "-"))
        if model not in models:
            models.append(model)
        if objective not in objectives:
            objectives.append(objective)
        cells.setdefault((model, objective), []).append(r)
    rows = [["Model"] + objectives]
    for m in models:
        row = [m]
        for o in objectives:
            group = cells.get((m, o))
            if not group:
                row.append("-")
                continue
            row.append(cell(float(np.mean([r.micro_average for r in group])),
                            float(np.mean([r.min_max_gap for r in group]))))
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# -- audit mode ---------------------------------------------------------------


def read_pairs(path) -> list[dict]:
    """Read ``{"id", "group", "reference", "hypothesis"}`` lines."""
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec = {
                    "id": str(rec["id"]),
                    "group": int(rec["group"]),
                    "reference": str(rec["reference"]),
                    "hypothesis": str(rec["hypothesis"]),
                }
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}: line {lineno}: malformed pair record ({exc})") from exc
            records.append(rec)
    return records


def audit(records, metadata: dict | None = None) -> FairnessReport:
    records = sorted(records, key=lambda r: (r["group"], r["id"]))
    counts = score_pairs((r["group"], r["reference"].split(), r["hypothesis"].split()) for r in records)
    return report_from_counts(counts, metadata)
