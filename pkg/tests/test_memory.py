import numpy as np
import pytest

from ssvos import tensor as T
from ssvos.backbone import encode_frame
from ssvos.errors import ConfigError, ContractError, ShapeError
from ssvos.memory import (MemoryBank, area_max_downsample, consolidate, encode_key, encode_key_value,
                          memory_read, memory_write, read_affinity, should_write)
from ssvos.params import as_tensors
from ssvos.spatial_semantic import ss_block_forward
from ssvos.tensor import Tensor, fd_gradcheck


def random_write(bank, rng, frame_idx, hw=(4, 4), ck=32, cv=64):
    key = Tensor(rng.normal(size=(ck,) + hw))
    vals = Tensor(rng.normal(size=(bank.n_objects, cv) + hw))
    return memory_write(bank, key, vals, frame_idx)


@pytest.fixture(scope="module")
def feats(P, model_cfg):
    frame = np.random.default_rng(3).uniform(size=(3, 64, 64))
    return ss_block_forward(encode_frame(frame, P, model_cfg), P)


@pytest.mark.parametrize("nonempty", [False, True])
def test_should_write_truth_table(nonempty):
    mask = np.zeros((8, 8), dtype=int)
    if nonempty:
        mask[2, 3] = 2
    for idx in range(100):
        expected = idx == 0 or (idx % 3 == 0 and nonempty)
        assert should_write(idx, mask) is expected, idx


def test_should_write_named_cases():
    empty, full = np.zeros((4, 4), int), np.ones((4, 4), int)
    assert should_write(0, empty)
    assert not should_write(3, empty)
    assert not should_write(4, full)
    assert should_write(6, full)


def test_key_value_shapes(feats, P):
    mask = np.zeros((64, 64), dtype=int)
    mask[10:30, 10:30] = 1
    key, values = encode_key_value(feats, mask, (1, 2), P)
    assert key.shape == (32, 4, 4)
    assert values.shape == (2, 64, 4, 4)
    assert np.all(np.isfinite(values.data))


def test_empty_object_gets_zero_mask_plane(feats, P):
    mask = np.zeros((64, 64), dtype=int)
    _, values = encode_key_value(feats, mask, (1,), P)
    assert np.all(np.isfinite(values.data))
    assert not area_max_downsample(mask[None] == 1).any()


def test_mask_shape_mismatch_raises(feats, P):
    with pytest.raises(ShapeError):
        encode_key_value(feats, np.zeros((48, 64), dtype=int), (1,), P)


def test_area_max_downsample():
    m = np.zeros((32, 32), dtype=bool)
    m[17, 3] = True
    out = area_max_downsample(m)
    assert out.shape == (2, 2) and out[1, 0] == 1.0 and out.sum() == 1.0


def test_write_appends_and_logs(rng):
    bank = MemoryBank(cap=1000, n_objects=2)
    for i, idx in enumerate((0, 3, 6)):
        random_write(bank, rng, idx)
        assert bank.size == 16 * (i + 1)
    assert bank.write_log == [0, 3, 6]
    assert list(np.unique(bank.provenance)) == [0, 3, 6]


def test_duplicate_or_earlier_write_is_rejected(rng):
    bank = MemoryBank(cap=1000, n_objects=1)
    random_write(bank, rng, 0)
    random_write(bank, rng, 3)
    with pytest.raises(ContractError):
        random_write(bank, rng, 3)
    with pytest.raises(ContractError):
        random_write(bank, rng, 1)


def test_write_at_cap_consolidates(rng):
    bank = MemoryBank(cap=32, n_objects=1)
    random_write(bank, rng, 0)
    random_write(bank, rng, 3)
    assert bank.size == 32
    random_write(bank, rng, 6)
    assert bank.size == 32
    assert [e["event"] for e in bank.events] == ["write", "write", "consolidate", "write"]


def test_consolidate_is_noop_within_cap(rng):
    bank = MemoryBank(cap=32, n_objects=1)
    random_write(bank, rng, 0)
    random_write(bank, rng, 3)
    keys, usage = bank.keys().data.copy(), bank.usage.copy()
    consolidate(bank)
    assert np.array_equal(bank.keys().data, keys) and np.array_equal(bank.usage, usage)
    assert not [e for e in bank.events if e["event"] == "consolidate"]


def test_cap_below_pinned_is_config_error(rng):
    bank = MemoryBank(cap=1000, n_objects=1)
    random_write(bank, rng, 0)
    random_write(bank, rng, 3)
    bank.cap = 8
    with pytest.raises(ConfigError):
        consolidate(bank)


def brute_force_consolidation(keys, vals, usage, prov, cap):
    """Loop oracle: rank candidates, merge each evicted element into its nearest survivor."""
    pinned = [i for i in range(len(usage)) if prov[i] == prov[0]]
    cands = sorted((i for i in range(len(usage)) if prov[i] != prov[0]), key=lambda i: (-usage[i], i))
    keep = cands[:cap - len(pinned)]
    evict = cands[cap - len(pinned):]
    groups = {s: [s] for s in keep}
    for e in evict:
        best = min(keep, key=lambda s: (float(np.sum((keys[:, e] - keys[:, s]) ** 2)), s))
        groups[best].append(e)
    merged = {}
    for s, members in groups.items():
        w = np.array([usage[m] for m in members])
        w = w / w.sum() if w.sum() > 0 else np.full(len(members), 1.0 / len(members))
        merged[s] = sum(w[j] * vals[:, :, m] for j, m in enumerate(members))
    return sorted(pinned + keep), merged


def test_consolidation_matches_brute_force_oracle():
    rng = np.random.default_rng(11)
    for _ in range(10):
        bank = MemoryBank(cap=10_000, n_objects=2)
        for idx in (0, 3, 6):
            random_write(bank, rng, idx)
        bank.usage = rng.permutation(48).astype(float) + rng.uniform(0, 0.5, size=48)
        keys, vals = bank.keys().data.copy(), bank.values().data.copy()
        usage, prov = bank.usage.copy(), bank.provenance.copy()
        bank.cap = 32
        consolidate(bank, 6)
        survivors, merged = brute_force_consolidation(keys, vals, usage, prov, 32)
        assert bank.size == 32
        assert np.array_equal(bank.keys().data, keys[:, survivors])
        # the 16 highest-usage non-pinned elements survive
        top16 = set(np.argsort(-usage[16:])[:16] + 16)
        assert set(survivors) - set(range(16)) == top16
        for j, s in enumerate(survivors):
            ref = merged.get(s, vals[:, :, s])
            assert np.max(np.abs(bank.values().data[:, :, j] - ref)) < 1e-12


def test_consolidation_preserves_pinned_bitwise(rng):
    bank = MemoryBank(cap=10_000, n_objects=1)
    for idx in (0, 3, 6, 9):
        random_write(bank, rng, idx)
    bank.usage = rng.uniform(size=bank.size)
    k0, v0, u0 = bank.keys().data[:, :16].copy(), bank.values().data[:, :, :16].copy(), bank.usage[:16].copy()
    bank.cap = 24
    consolidate(bank)
    assert np.array_equal(bank.keys().data[:, :16], k0)
    assert np.array_equal(bank.values().data[:, :, :16], v0)
    assert np.array_equal(bank.usage[:16], u0)
    assert np.all(bank.provenance[:16] == 0)


def test_identical_elements_merge_without_change():
    key = np.zeros((4, 1, 3))
    key[:, 0, 0] = [5.0, 0, 0, 0]          # pinned element far away
    key[:, 0, 1] = key[:, 0, 2] = [0, 1.0, 0, 0]
    bank = MemoryBank(cap=100, n_objects=1)
    memory_write(bank, Tensor(key[:, :, :1]), Tensor(np.ones((1, 2, 1, 1))), 0)
    same = np.array([0.3, -0.7])
    memory_write(bank, Tensor(key[:, :, 1:]), Tensor(np.broadcast_to(same[None, :, None, None], (1, 2, 1, 2)).copy()), 3)
    bank.usage = np.array([1.0, 2.0, 1.0])
    bank.cap = 2
    consolidate(bank)
    assert bank.size == 2
    assert np.array_equal(bank.values().data[0, :, 1], same)
    assert bank.usage[1] == 3.0


def test_zero_usage_merge_uses_equal_weights():
    bank = MemoryBank(cap=100, n_objects=1)
    memory_write(bank, Tensor(np.full((2, 1, 1), 9.0)), Tensor(np.zeros((1, 1, 1, 1))), 0)
    memory_write(bank, Tensor(np.array([[[0.0, 0.1]], [[0.0, 0.0]]])), Tensor(np.array([[[[2.0, 4.0]]]])), 3)
    bank.cap = 2
    consolidate(bank)
    assert bank.values().data[0, 0, 1] == 3.0


def single_element_bank(value):
    bank = MemoryBank(cap=10, n_objects=1)
    memory_write(bank, Tensor(np.ones((32, 1, 1))), Tensor(value.reshape(1, -1, 1, 1)), 0)
    return bank


def test_singleton_bank_read(params, feats, rng):
    value = rng.normal(size=64)
    bank = single_element_bank(value)
    ident = {k: v.copy() for k, v in params.items()}
    ident["mem.fuse.w"][:] = 0.0
    ident["mem.fuse.w"][np.arange(64), np.arange(64), 1, 1] = 1.0
    ident["mem.fuse.b"][:] = 0.0
    P = as_tensors(ident)
    qkey = encode_key(feats[16], P)
    corr, aff = memory_read(bank, qkey, feats[16], P, return_affinity=True)
    assert np.all(aff.data == 1.0)
    expected = np.broadcast_to(value[:, None, None], (64, 4, 4))
    assert np.max(np.abs(corr.data[0] - expected)) < 1e-12


def test_affinity_rows_normalised_and_usage_mass(P, feats, rng):
    bank = MemoryBank(cap=1000, n_objects=2)
    for idx in (0, 3):
        random_write(bank, rng, idx)
    qkey = encode_key(feats[16], P)
    aff = read_affinity(bank, qkey)
    assert np.max(np.abs(aff.data.sum(axis=1) - 1.0)) < 1e-9
    before = bank.usage.copy()
    memory_read(bank, qkey, feats[16], P)
    assert np.all(bank.usage >= before)
    assert abs((bank.usage - before).sum() - 16) < 1e-6


def test_read_without_usage_is_repeatable(P, feats, rng):
    bank = MemoryBank(cap=1000, n_objects=2)
    random_write(bank, rng, 0)
    qkey = encode_key(feats[16], P)
    a = memory_read(bank, qkey, feats[16], P, update_usage=False)
    b = memory_read(bank, qkey, feats[16], P, update_usage=False)
    assert np.array_equal(a.data, b.data)
    assert not bank.usage.any()


def test_read_from_empty_bank_fails(P, feats):
    with pytest.raises(ContractError):
        memory_read(MemoryBank(cap=4, n_objects=1), encode_key(feats[16], P), feats[16], P)


def test_gradcheck_through_value_head(P, feats, rng):
    mask = np.zeros((64, 64), dtype=int)
    mask[8:40, 20:50] = 1
    w = rng.normal(size=(1, 64, 4, 4))

    def f(t):
        _, values = encode_key_value({**feats, 16: t}, mask, (1,), P)
        return T.sum(values * Tensor(w))

    x = feats[16].data
    assert fd_gradcheck(f, x, eps=1e-5, coords=rng.choice(x.size, 64, replace=False)) < 1e-4
