import json
from fractions import Fraction
from itertools import islice

import numpy as np
import pytest

from accentfair import accentsynth as A


def two_group_config(**kw):
    d = kw.pop("feature_dim", 4)
    groups = kw.pop("groups", None) or [
        A.GroupSpec(0.5, [0.0] * d, 0.0, 1.0),
        A.GroupSpec(0.5, [0.3] * d, 0.1, -1.0),
    ]
    params = dict(vocab_size=5, feature_dim=d, sizes={"train": 20, "validation": 4, "test": 4}, noise=0.1)
    params.update(kw)
    return A.SynthConfig(groups=groups, **params)


def oracle_apportion(total, weights):
    """Largest remainder with exact rational arithmetic."""
    quotas = [Fraction(total) * Fraction(w).limit_denominator(10**9) for w in weights]
    floors = [q.numerator // q.denominator for q in quotas]
    rem = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - floors[i]), i))
    for i in rem[: total - sum(floors)]:
        floors[i] += 1
    return floors


def test_largest_remainder_80_15_5_skew():
    assert A.largest_remainder(1000, [0.8, 0.15, 0.05]) == oracle_apportion(1000, [0.8, 0.15, 0.05])
    assert A.largest_remainder(1000, [0.8, 0.15, 0.05]) == [800, 150, 50]


@pytest.mark.parametrize("total", [7, 13, 101, 999])
def test_largest_remainder_within_one_of_quota(total):
    w = [0.5, 0.3, 0.15, 0.05]
    counts = A.largest_remainder(total, w)
    assert sum(counts) == total
    assert counts == oracle_apportion(total, w)
    assert all(abs(c - total * wi) < 1 for c, wi in zip(counts, w))


def test_generate_group_counts_and_invariants():
    cfg = A.skewed_config(sizes={"train": 1000, "validation": 30, "test": 30})
    ds = A.generate(cfg, 0)
    counts = np.bincount([u.group for u in ds.train], minlength=3)
    assert counts.tolist() == [800, 150, 50]
    for split in (ds.validation, ds.test):
        assert sorted({u.group for u in split}) == [0, 1, 2]
    ids = [u.id for s in (ds.train, ds.validation, ds.test) for u in s]
    assert len(ids) == len(set(ids))
    for u in ds.train[:50]:
        assert u.features.shape == (len(u.transcript), cfg.feature_dim)
        assert all(0 <= t < cfg.vocab_size for t in u.transcript)


def test_generate_is_deterministic():
    cfg = two_group_config()
    a, b = A.generate(cfg, 11), A.generate(cfg, 11)
    assert a.train == b.train and a.test == b.test
    assert A.generate(cfg, 12).train != a.train


def test_identical_groups_differ_only_by_label():
    spec = A.GroupSpec(0.5, [0.2, -0.1, 0.0, 0.4], 0.0, 0.5)
    cfg = two_group_config(groups=[spec, A.GroupSpec(**spec.to_dict())], noise=0.0)
    ds = A.generate(cfg, 0)
    protos = A.token_prototypes(cfg.vocab_size, cfg.feature_dim, cfg.prototype_seed)
    # noiseless, no confusion: every frame is a deterministic function of its token,
    # and that function is the same for both groups
    for g in (0, 1):
        for u in [u for u in ds.train if u.group == g]:
            expect = protos[u.transcript] + np.array(spec.shift)
            expect[:, -1] += np.where(np.array(u.transcript) == cfg.spurious_token, spec.spurious_bias, 0.0)
            np.testing.assert_array_equal(u.features, expect)


def test_noiseless_nearest_prototype_recovers_tokens():
    cfg = two_group_config(noise=0.0, groups=[A.GroupSpec(0.5, [0.0] * 4, 0.0, 0.7), A.GroupSpec(0.5, [1.0] * 4, 0.0, -0.7)])
    ds = A.generate(cfg, 3)
    protos = A.token_prototypes(cfg.vocab_size, cfg.feature_dim, cfg.prototype_seed)
    for u in ds.test + ds.train:
        spec = cfg.groups[u.group]
        x = u.features - np.array(spec.shift)
        x[:, -1] = 0.0  # the oracle knows the cue coordinate
        dist = ((x[:, None, :] - protos[None]) ** 2).sum(-1)
        assert dist.argmin(axis=1).tolist() == u.transcript


def test_transcripts_have_word_structure():
    ds = A.generate(two_group_config(), 0)
    for u in ds.train:
        assert u.transcript[0] != A.SEPARATOR and u.transcript[-1] != A.SEPARATOR
        words = "".join("|" if t == 0 else "x" for t in u.transcript).split("|")
        assert all(1 <= len(w) <= 5 for w in words)


def test_spurious_correlation_differs_by_group():
    ds = A.generate(A.skewed_config(), 0)
    r = {}
    for g in (0, 1, 2):
        frames = np.concatenate([u.features for u in ds.train if u.group == g])
        labels = np.concatenate([np.array(u.transcript) == 1 for u in ds.train if u.group == g]).astype(float)
        r[g] = np.corrcoef(frames[:, -1], labels)[0, 1]
    assert r[0] > 0.8 and r[1] < -0.8 and abs(r[2]) < 0.3


def test_config_errors():
    with pytest.raises(A.ConfigError, match="mixing_weights"):
        two_group_config(groups=[A.GroupSpec(0.5, [0.0] * 4), A.GroupSpec(0.4, [0.0] * 4)]).validate()
    with pytest.raises(A.ConfigError, match="sizes"):
        two_group_config(sizes={"train": 1, "validation": 4, "test": 4}).validate()
    with pytest.raises(A.ConfigError):
        two_group_config(vocab_size=2).validate()
    with pytest.raises(A.ConfigError):
        two_group_config(feature_dim=2, groups=[A.GroupSpec(1.0, [0.0, 0.0])]).validate()
    with pytest.raises(A.ConfigError, match="no training"):
        A.generate(A.skewed_config(mixing=(0.98, 0.01, 0.01), sizes={"train": 20, "validation": 3, "test": 3}), 0)


def test_jsonl_round_trip(tmp_path):
    ds = A.generate(two_group_config(), 5)
    A.write_dataset(ds, tmp_path)
    back = A.read_dataset(tmp_path)
    assert back.train == ds.train and back.validation == ds.validation and back.test == ds.test
    assert back.seed == 5 and back.config.to_dict() == ds.config.to_dict()
    header = json.loads((tmp_path / "train.jsonl").read_text().splitlines()[0])
    assert header["prng"] == A.PRNG_NAME and header["num_groups"] == 2


def test_empty_split_is_header_only(tmp_path):
    meta = {"V": 5, "d": 4, "num_groups": 2, "seed": 0}
    A.write_jsonl(tmp_path / "e.jsonl", [], meta)
    assert len((tmp_path / "e.jsonl").read_text().splitlines()) == 1
    m, utts = A.read_jsonl(tmp_path / "e.jsonl")
    assert utts == [] and m == meta


def test_read_rejects_bad_records(tmp_path):
    meta = {"V": 5, "d": 2, "num_groups": 26, "seed": 0}
    p = tmp_path / "bad.jsonl"
    good = {"id": "a", "group": 25, "features": [[0.0, 1.0]], "transcript": [1]}
    bad = dict(good, id="b", group=26)
    p.write_text("\n".join(json.dumps(r) for r in (meta, good, bad)) + "\n")
    with pytest.raises(A.ValidationError, match=":3"):
        A.read_jsonl(p)
    p.write_text(json.dumps(meta) + "\n" + json.dumps(good) + "\n{oops\n")
    with pytest.raises(A.ParseError, match=":3"):
        A.read_jsonl(p)
    p.write_text(json.dumps(meta) + "\n" + json.dumps(dict(good, transcript=[5])) + "\n")
    with pytest.raises(A.ValidationError):
        A.read_jsonl(p)


def test_balanced_batches_per_group_counts():
    cfg = A.SynthConfig(
        groups=[A.GroupSpec(0.6, [0.0] * 3), A.GroupSpec(0.3, [0.0] * 3), A.GroupSpec(0.1, [0.0] * 3)],
        vocab_size=4, feature_dim=3, sizes={"train": 30, "validation": 3, "test": 3},
    )
    ds = A.generate(cfg, 0)
    for batch in islice(A.balanced_batches(ds.train, 6, seed=1), 20):
        assert {g: len(u) for g, u in batch.items()} == {0: 2, 1: 2, 2: 2}
    with pytest.raises(A.ConfigError):
        next(A.balanced_batches(ds.train, 2, seed=1))


def test_balanced_batches_recycle_and_cover():
    utts = [A.Utterance(f"m{i}", 0, np.zeros((1, 3)), [1]) for i in range(10)]
    utts.append(A.Utterance("solo", 1, np.zeros((1, 3)), [1]))
    stream = A.balanced_batches(utts, 2, seed=4)
    batches = list(islice(stream, 10))
    assert all(b[1][0].id == "solo" for b in batches)
    majority = [b[0][0].id for b in batches]
    assert sorted(majority) == sorted(f"m{i}" for i in range(10))  # full epoch, no repeats
    again = [b[0][0].id for b in islice(A.balanced_batches(utts, 2, seed=4), 10)]
    assert again == majority


def test_pooled_batches_follow_pool():
    ds = A.generate(A.skewed_config(sizes={"train": 200, "validation": 3, "test": 3}), 0)
    seen = []
    for b in islice(A.pooled_batches(ds.train, 20, seed=0), 10):
        seen.extend(u.id for us in b.values() for u in us)
    assert sorted(seen) == sorted(u.id for u in ds.train)
