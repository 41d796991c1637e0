import numpy as np
import pytest

from accentfair import toymodel
from accentfair.accentsynth import Utterance
from accentfair.objectives import GroupedBatch


def random_params(seed, d=3, h=4, V=3, r=2, adapter=True, scale=1.0):
    """Small model with every tensor (except irm_w) drawn from N(0, scale^2)."""
    rng = np.random.default_rng(seed)
    p = toymodel.init(toymodel.ModelConfig(d=d, h=h, V=V, r=r, adapter_enabled=adapter), seed)
    for k in p.tensors:
        if k != toymodel.IRM_W:
            p.tensors[k] = scale * rng.standard_normal(p.tensors[k].shape)
    return p


def random_batch(seed, groups=2, per_group=2, d=3, V=3, max_len=3):
    rng = np.random.default_rng([seed, 99])
    out = {}
    for g in range(groups):
        utts = []
        for i in range(per_group):
            T = int(rng.integers(1, max_len + 1))
            utts.append(Utterance(f"g{g}-{i}", g, rng.standard_normal((T, d)), [int(t) for t in rng.integers(0, V, T)]))
        out[g] = utts
    return GroupedBatch(out)


@pytest.fixture
def micro():
    return random_params(0), random_batch(0)
