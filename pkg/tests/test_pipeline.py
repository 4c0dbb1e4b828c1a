import numpy as np
import pytest

from ssvos.errors import ConfigError, ContractError, ShapeError
from ssvos.pipeline import (EngineConfig, SegResult, branches, decode_masks, infer_sequence, init_state,
                            multiscale_flip_fuse, step)
from ssvos.synth import random_spec, synth_generate
from ssvos.tensor import Tensor


@pytest.fixture(scope="module")
def clip():
    frames, masks = synth_generate(random_spec(4, num_objects=2, frame_count=8, frame_hw=(48, 64)))
    return frames, masks


def test_engine_config_defaults_and_validation():
    cfg = EngineConfig()
    assert cfg.mem_interval == 3 and cfg.scales == (1.0, 1.5) and cfg.point_count == 112
    for bad in ({"mem_interval": 0}, {"scales": ()}, {"scales": (1.0, -1.0)}, {"mem_cap": 0},
                {"point_count": 0}):
        with pytest.raises(ConfigError):
            EngineConfig(**bad)


def test_branch_enumeration():
    assert branches(EngineConfig(scales=(1.0, 1.5))) == [(1.0, False), (1.5, False)]
    assert branches(EngineConfig(scales=(1.0,), flip_fusion=True)) == [(1.0, False), (1.0, True)]


def test_probabilities_normalised_and_labels_valid(params, clip):
    frames, masks = clip
    res = infer_sequence(frames, masks[0], EngineConfig(), params)
    ids = {0} | set(np.unique(masks[0]).tolist())
    for r in res:
        assert np.max(np.abs(r.probs.sum(axis=0) - 1.0)) <= 1e-6
        assert set(np.unique(r.label_mask).tolist()) <= ids
        assert r.label_mask.shape == masks[0].shape


def test_first_frame_is_the_annotation(params, clip):
    frames, masks = clip
    res = infer_sequence(frames, masks[0], EngineConfig(scales=(1.0,)), params)
    assert np.array_equal(res[0].label_mask, masks[0])


def test_saturated_logits_label_everything(params, clip):
    frames, masks = clip
    one = (masks[0] > 0).astype(int)
    _, state = init_state(params, frames[0], one, EngineConfig(scales=(1.0,)))
    res, _ = step(state, frames[1], 1, logit_override=np.full((48, 64), 1e6))
    assert np.all(res.label_mask == 1)
    assert np.max(np.abs(res.probs.sum(axis=0) - 1.0)) <= 1e-6


def test_write_flags_follow_cadence(params, clip):
    frames, masks = clip
    _, state = init_state(params, frames[0], masks[0], EngineConfig(scales=(1.0,)))
    force = np.full((48, 64), 1e6)
    flags = {}
    for t in range(1, 7):
        res, state = step(state, frames[t], t, logit_override=force if t in (3, 6) else None)
        flags[t] = res.skipped_write
    assert flags[1] and flags[2] and flags[4] and flags[5]
    assert not flags[3] and not flags[6]
    assert state.bank.write_log == [0, 3, 6]
    assert sorted({r["frame_idx"] for r in state.query_log}) == [3, 6]


def test_empty_prediction_is_not_written(params, clip):
    frames, masks = clip
    _, state = init_state(params, frames[0], masks[0], EngineConfig(scales=(1.0,)))
    for t in range(1, 4):
        res, state = step(state, frames[t], t, logit_override=np.full((48, 64), -1e6))
    assert res.skipped_write and not res.label_mask.any()
    assert state.bank.write_log == [0] and not state.query_log


def test_step_rejects_other_frame_size(params, clip):
    frames, masks = clip
    _, state = init_state(params, frames[0], masks[0], EngineConfig(scales=(1.0,)))
    with pytest.raises(ShapeError):
        step(state, np.zeros((3, 48, 48)), 1)


def test_decode_rejects_mismatched_objects(params, clip):
    frames, masks = clip
    _, state = init_state(params, frames[0], masks[0], EngineConfig(scales=(1.0,)))
    R = Tensor(np.zeros((3, 64, 3, 4)))
    with pytest.raises(ContractError):
        decode_masks(R, state.queries, {}, Tensor(frames[0]), state.P, (1, 2))


def run_plain(params, frames, mask0):
    res0, state = init_state(params, frames[0], mask0, EngineConfig(scales=(1.0,)))
    out = [res0]
    for t in range(1, len(frames)):
        r, state = step(state, frames[t], t)
        out.append(r)
    return out


def test_single_branch_fusion_is_bitwise_plain_step(params, clip):
    frames, masks = clip
    plain = run_plain(params, frames, masks[0])
    fused = infer_sequence(frames, masks[0], EngineConfig(scales=(1.0,)), params)
    for a, b in zip(plain[1:], fused[1:]):
        assert np.array_equal(a.probs, b.probs)
        assert np.array_equal(a.label_mask, b.label_mask)


def test_duplicate_scale_fusion_matches_plain_step(params, clip):
    frames, masks = clip
    plain = run_plain(params, frames, masks[0])
    fused = infer_sequence(frames, masks[0], EngineConfig(scales=(1.0, 1.0)), params)
    for a, b in zip(plain[1:], fused[1:]):
        assert np.max(np.abs(a.probs - b.probs)) <= 1e-12


def symmetric_fixture(T=7, hw=(32, 48)):
    rng = np.random.default_rng(9)
    h, w = hw
    half = rng.uniform(size=(T, 3, h, w // 2))
    frames = np.concatenate([half, half[..., ::-1]], axis=-1)
    mask = np.zeros(hw, dtype=int)
    mask[8:24, 10:20] = 1
    mask[8:24, w - 20:w - 10] = 1
    mask[2:6, 20:28] = 2
    return frames, mask


def test_flip_fusion_on_symmetric_fixture(params):
    frames, mask = symmetric_fixture()
    assert np.array_equal(frames, frames[..., ::-1]) and np.array_equal(mask, mask[:, ::-1])
    res = infer_sequence(frames, mask, EngineConfig(scales=(1.0,), flip_fusion=True), params)
    for r in res[1:]:
        assert np.max(np.abs(r.probs - r.probs[:, :, ::-1])) <= 1e-8


def test_multiscale_maps_back_to_input_resolution(params, clip):
    frames, masks = clip
    cfg = EngineConfig(scales=(1.0, 1.5), flip_fusion=True)
    states = [init_state(params, frames[0], masks[0], cfg, scale=s, flip=f)[1] for s, f in branches(cfg)]
    assert [st.branch_hw for st in states] == [(48, 64), (48, 64), (72, 96), (72, 96)]
    res = multiscale_flip_fuse(frames[1], states, 1)
    assert isinstance(res, SegResult) and res.probs.shape == (3, 48, 64)
    assert np.max(np.abs(res.probs.sum(axis=0) - 1.0)) <= 1e-6


def test_inference_is_deterministic(params, clip):
    frames, masks = clip
    a = infer_sequence(frames, masks[0], EngineConfig(), params)
    b = infer_sequence(frames, masks[0], EngineConfig(), params)
    assert all(np.array_equal(x.probs, y.probs) for x, y in zip(a, b))


def test_single_frame_sequence_returns_annotation(params, clip):
    frames, masks = clip
    res = infer_sequence(frames[:1], masks[0], EngineConfig(), params)
    assert len(res) == 1 and np.array_equal(res[0].label_mask, masks[0])


def test_empty_first_mask_is_rejected(params, clip):
    frames, _ = clip
    with pytest.raises(ContractError):
        infer_sequence(frames, np.zeros((48, 64), dtype=int), EngineConfig(), params)


def test_memlog_is_chronological_and_bounded(params, clip):
    frames, masks = clip
    log, qlog = [], []
    infer_sequence(frames, masks[0], EngineConfig(mem_cap=1), params, memlog=log, query_log=qlog)
    idx = [e["frame_idx"] for e in log]
    assert idx == sorted(idx)
    for e in log:
        if e["event"] == "frame":
            assert e["size"] <= e["cap"]
    written = {(e["branch"], e["frame_idx"]) for e in log if e["event"] == "frame" and e["wrote"]}
    for e in qlog:
        assert (e["branch"], e["frame_idx"]) in written and e["frame_idx"] % 3 == 0
