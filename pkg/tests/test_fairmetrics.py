import csv
import io
import json
import statistics
from functools import lru_cache
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accentfair import fairmetrics as F
from accentfair.fairmetrics import FairnessReport

words = st.lists(st.sampled_from("abcd"), max_size=6)


def brute_distance(ref, hyp):
    """Minimum edit count by exhaustive recursion over the three operations."""
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(ref):
            return len(hyp) - j
        if j == len(hyp):
            return len(ref) - i
        return min(go(i + 1, j + 1) + (ref[i] != hyp[j]), go(i + 1, j) + 1, go(i, j + 1) + 1)
    return go(0, 0)


def test_wer_examples():
    r = F.wer("a b c".split(), "a x c".split())
    assert (r.substitutions, r.deletions, r.insertions, r.errors) == (1, 0, 0, 1)
    assert r.wer == pytest.approx(1 / 3)
    r = F.wer("a b".split(), [])
    assert (r.deletions, r.wer) == (2, 1.0)
    r = F.wer(["a"], "a b c".split())
    assert (r.insertions, r.wer) == (2, 2.0)
    assert F.wer([], []).wer == 0.0
    with pytest.raises(F.UndefinedMetricError):
        F.wer([], ["a"])


def test_backtrace_prefers_substitution():
    r = F.wer(["a"], ["b"])
    assert (r.substitutions, r.deletions, r.insertions) == (1, 0, 0)


def test_wer_exhaustive_against_brute_force():
    alphabet = "xyz"
    seqs = [s for n in range(6) for s in product(alphabet, repeat=n)]
    sample = seqs[::7]
    for ref in sample:
        if not ref:
            continue
        for hyp in sample:
            r = F.wer(ref, hyp)
            assert r.errors == brute_distance(ref, hyp)
            # the counts describe a valid alignment
            assert len(ref) - r.deletions + r.insertions == len(hyp)


@settings(max_examples=200)
@given(words, words)
def test_distance_is_symmetric(a, b):
    assert F.edit_table(a, b)[-1][-1] == F.edit_table(b, a)[-1][-1]


@settings(max_examples=200)
@given(words, words, words)
def test_triangle_inequality(a, b, c):
    d = lambda x, y: F.edit_table(x, y)[-1][-1]
    assert d(a, c) <= d(a, b) + d(b, c)


@settings(max_examples=100)
@given(words.filter(bool))
def test_identity_has_zero_wer(a):
    assert F.wer(a, a).wer == 0.0


def test_macro_and_gap_arithmetic():
    per = {0: 10.0, 1: 30.0, 2: 20.0}
    assert F.macro_average(per) == 20.0
    assert F.min_max_gap(per) == 20.0
    assert F.min_max_gap({5: 12.5}) == 0.0
    with pytest.raises(F.UndefinedMetricError):
        F.macro_average({})


def test_micro_weights_by_words_macro_does_not():
    counts = {0: {"errors": 5, "words": 10}, 1: {"errors": 100, "words": 1000}}
    rep = F.report_from_counts(counts)
    assert rep.per_group_wer == {0: 50.0, 1: 10.0}
    assert rep.macro_average == 30.0
    assert rep.micro_average == pytest.approx(100 * 105 / 1010)
    assert F.micro_average({0: (5, 10), 1: (100, 1000)}) == rep.micro_average
    assert F.micro_average([rep, rep]) == rep.micro_average


def test_per_group_wer_is_corpus_level():
    items = [(0, ["a"], ["b"]), (0, list("abcdefghij"), list("abcdefghij")), (1, ["a", "b"], ["a"])]
    rep = F.report_from_counts(F.score_pairs(items))
    # pooled 1 error / 11 words, not the mean of per-utterance rates (50%)
    assert rep.per_group_wer[0] == pytest.approx(100 / 11)
    assert rep.per_group_wer[1] == 50.0


def test_absent_groups_are_excluded_and_listed():
    counts = {0: {"errors": 1, "words": 4}, 3: {"errors": 0, "words": 0}}
    rep = F.report_from_counts(counts)
    assert list(rep.per_group_wer) == [0]
    assert rep.metadata["absent_groups"] == [3]


def test_empty_reference_pairs_are_counted_separately():
    counts = F.score_pairs([(0, [], ["x", "y"]), (0, ["a"], ["a"])])
    assert counts[0] == {"errors": 0, "words": 1, "utterances": 2, "empty_ref_insertions": 2}


def test_detokenize():
    assert F.detokenize([3, 4, 0, 0, 5, 0]) == [(3, 4), (5,)]
    assert F.detokenize([]) == []


def test_pearson():
    assert F.pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert F.pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal(20).tolist(), rng.standard_normal(20).tolist()
    assert F.pearson(x, y) == pytest.approx(statistics.correlation(x, y), abs=1e-12)
    with pytest.raises(F.UndefinedMetricError):
        F.pearson([1, 1, 1], [1, 2, 3])


def report(micro, gap, model="m", objective="erm", seed=0, per=None):
    per = per or {0: micro - gap / 2, 1: micro + gap / 2}
    return FairnessReport(per, sum(per.values()) / len(per), gap, micro,
                          {g: {"errors": 1, "words": 1} for g in per},
                          {"model": model, "objective": objective, "seed": seed})


def test_table_cell_format():
    assert F.cell(58.3, 114.0) == "58.3 / 114.0"
    text = F.emit_report([report(58.3, 114.0, model="XLSR", objective="Fusion")], "table")
    lines = text.splitlines()
    assert lines[0].split() == ["Model", "Fusion"]
    assert lines[2].split(None, 1) == ["XLSR", "58.3 / 114.0"]


def test_table_averages_seeds_and_marks_missing_cells():
    reps = [report(10.0, 4.0, seed=0), report(20.0, 8.0, seed=1), report(5.0, 1.0, model="n", objective="dro")]
    text = F.emit_report(reps, "table")
    assert "15.0 / 6.0" in text
    assert text.splitlines()[2].rstrip().endswith("-")


def test_csv_has_one_column_per_group():
    reps = [report(10.0, 4.0, per={g: float(g) for g in range(26)})]
    rows = list(csv.reader(io.StringIO(F.emit_report(reps, "csv"))))
    assert len(rows[0]) == 6 + 26 and len(rows[1]) == len(rows[0])
    assert rows[0][:6] == ["model", "objective", "seed", "micro_wer", "macro_wer", "min_max_gap"]


def test_json_round_trip():
    r = report(12.0, 3.0)
    doc = json.loads(F.emit_report([r], "json"))
    assert FairnessReport.from_dict(doc[0]) == r
    with pytest.raises(ValueError):
        F.emit_report([r], "xml")


def write_pairs(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def test_audit_identical_pairs_score_zero(tmp_path):
    rows = [{"id": str(i), "group": i % 3, "reference": "a b c", "hypothesis": "a b c"} for i in range(9)]
    rep = F.audit(F.read_pairs(write_pairs(tmp_path / "p.jsonl", rows)))
    assert rep.per_group_wer == {0: 0.0, 1: 0.0, 2: 0.0}
    assert rep.macro_average == rep.min_max_gap == 0.0


def test_audit_matches_hand_scoring(tmp_path):
    rows = [
        {"id": "1", "group": 0, "reference": "the cat sat", "hypothesis": "the bat sat"},
        {"id": "2", "group": 0, "reference": "on the mat", "hypothesis": "on mat"},
        {"id": "3", "group": 1, "reference": "hello", "hypothesis": "hello there friend"},
    ]
    rep = F.audit(F.read_pairs(write_pairs(tmp_path / "p.jsonl", rows)))
    assert rep.per_group_wer[0] == pytest.approx(100 * 2 / 6)
    assert rep.per_group_wer[1] == 200.0
    assert rep.macro_average == pytest.approx((100 / 3 + 200) / 2)
    assert rep.micro_average == pytest.approx(100 * 4 / 7)


def test_read_pairs_names_bad_line(tmp_path):
    rows = [json.dumps({"id": str(i), "group": 0, "reference": "a", "hypothesis": "a"}) for i in range(16)]
    rows.append('{"id": "x", "group": 0')
    (tmp_path / "bad.jsonl").write_text("\n".join(rows) + "\n")
    with pytest.raises(F.ParseError, match="line 17"):
        F.read_pairs(tmp_path / "bad.jsonl")


def test_word_length_correlation():
    from accentfair.accentsynth import Utterance
    utts = [Utterance(f"u{g}", g, np.zeros((n, 1)), [1] * n) for g, n in enumerate((1, 2, 3))]
    rep = F.report_from_counts({g: {"errors": g + 1, "words": 10} for g in range(3)})
    assert F.word_length_correlation(utts, rep) == pytest.approx(1.0)
    with pytest.raises(F.UndefinedMetricError):
        F.word_length_correlation(utts[:2], F.report_from_counts({g: {"errors": 1, "words": 2} for g in range(2)}))
