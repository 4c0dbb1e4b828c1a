import json

import numpy as np
import pytest

from ssvos import io
from ssvos.errors import ConfigError, InputError
from ssvos.metrics import MetricReport
from ssvos.synth import random_spec, synth_generate


def test_ppm_pgm_round_trip(tmp_path, rng):
    frame = rng.integers(0, 256, size=(3, 5, 7)) / 255.0
    io.write_ppm(tmp_path / "a.ppm", frame)
    assert np.array_equal(io.read_ppm(tmp_path / "a.ppm"), frame)
    mask = rng.integers(0, 9, size=(5, 7))
    io.write_pgm(tmp_path / "a.pgm", mask)
    back = io.read_pgm(tmp_path / "a.pgm")
    assert back.dtype == np.int64 and np.array_equal(back, mask)


def test_header_comments_and_16_bit(tmp_path):
    raw = np.array([[0, 300], [65535, 7]], dtype=">u2")
    (tmp_path / "m.pgm").write_bytes(b"P5\n# a comment\n2 2\n# another\n65535\n" + raw.tobytes())
    assert np.array_equal(io.read_pgm(tmp_path / "m.pgm"), [[0, 300], [65535, 7]])


@pytest.mark.parametrize("data", [b"P5\n2 2\n", b"P6\n2 2\n255\n\x00", b"P5\nx 2\n255\n\x00\x00\x00\x00",
                                  b"P5\n0 2\n255\n"])
def test_bad_images_raise(tmp_path, data):
    (tmp_path / "b.pgm").write_bytes(data)
    with pytest.raises(InputError):
        io.read_pgm(tmp_path / "b.pgm")


def test_missing_file_raises(tmp_path):
    with pytest.raises(InputError):
        io.read_ppm(tmp_path / "nope.ppm")


def test_sequence_round_trip(tmp_path):
    frames, masks = synth_generate(random_spec(1, num_objects=2, frame_count=4, frame_hw=(24, 32)))
    io.save_sequence(tmp_path / "s", frames, masks)
    seq = io.load_sequence(tmp_path / "s")
    assert seq.frames.shape == frames.shape and np.max(np.abs(seq.frames - frames)) <= 0.5 / 255 + 1e-12
    assert np.array_equal(seq.first_mask, masks[0]) and np.array_equal(seq.gt, masks)
    assert seq.object_ids == (1, 2) and not seq.warnings and seq.name == "s"


def test_noncontiguous_ids_are_remapped_and_restored(tmp_path):
    frames = np.zeros((2, 3, 4, 4))
    masks = np.zeros((2, 4, 4), dtype=int)
    masks[:, 0, 0], masks[:, 1, 1], masks[:, 2, 2] = 3, 7, 0
    masks[0, 3, 3] = 0
    masks[:, 3, 0] = 9 * np.array([0, 1])          # id only in ground truth
    io.save_sequence(tmp_path / "s", frames, masks)
    with pytest.warns(UserWarning):
        seq = io.load_sequence(tmp_path / "s")
    assert seq.id_map == {1: 3, 2: 7}
    assert seq.first_mask[0, 0] == 1 and seq.first_mask[1, 1] == 2
    assert seq.gt[1, 3, 0] == 0 and len(seq.warnings) == 2
    restored = io.restore_ids(seq.first_mask, seq.id_map)
    assert np.array_equal(restored, masks[0])


def test_missing_parts_raise(tmp_path):
    with pytest.raises(InputError):
        io.load_sequence(tmp_path)
    (tmp_path / "frames").mkdir()
    with pytest.raises(InputError):
        io.load_sequence(tmp_path)
    io.write_ppm(tmp_path / "frames" / "00000.ppm", np.zeros((3, 4, 4)))
    with pytest.raises(InputError):
        io.load_sequence(tmp_path)
    io.write_pgm(tmp_path / "annotation" / "00000.pgm", np.zeros((5, 4), dtype=int))
    with pytest.raises(InputError):
        io.load_sequence(tmp_path)


def test_background_overlay_equals_frame(rng):
    frame = rng.uniform(size=(3, 6, 5))
    assert np.array_equal(io.overlay(frame, np.zeros((6, 5), dtype=int)), io.to_u8(frame))
    mask = np.zeros((6, 5), dtype=int)
    mask[2, 2] = 1
    out = io.overlay(frame, mask)
    keep = mask == 0
    assert np.array_equal(out[:, keep], io.to_u8(frame)[:, keep]) and not np.array_equal(out, io.to_u8(frame))


def test_save_outputs_without_results_writes_report_only(tmp_path):
    io.save_outputs(tmp_path / "o", [], MetricReport.from_scores(50.0, 70.0))
    assert json.loads((tmp_path / "o" / "metrics.json").read_text())["display"]["J&F"] == 60.0
    assert not (tmp_path / "o" / "masks").exists() and not (tmp_path / "o" / "memlog.jsonl").exists()


def test_save_outputs_full(tmp_path):
    masks = [np.array([[0, 1], [2, 0]])] * 2
    log = [{"event": "frame", "frame_idx": 0}, {"event": "frame", "frame_idx": 1}]
    io.save_outputs(tmp_path, masks, frames=np.zeros((2, 3, 2, 2)), memlog=log, query_log=[],
                    id_map={1: 4, 2: 9})
    assert np.array_equal(io.load_masks(tmp_path / "masks")[1], [[0, 4], [9, 0]])
    assert io.read_jsonl(tmp_path / "memlog.jsonl") == log
    assert (tmp_path / "overlays" / "00001.ppm").is_file() and io.read_jsonl(tmp_path / "querylog.jsonl") == []


def test_parse_config():
    got = io.parse_config("# engine\nmem_interval = 4\nscales=1,1.5,2  # three\nflip_fusion=yes\n\n")
    assert got == {"mem_interval": 4, "scales": (1.0, 1.5, 2.0), "flip_fusion": True}
    for bad in ("bogus=1", "mem_interval", "mem_interval=x", "flip_fusion=maybe"):
        with pytest.raises(ConfigError):
            io.parse_config(bad)


def test_config_precedence(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("seed=1\nmem_cap=3\n")
    assert io.engine_config(p, env={}).seed == 1
    assert io.engine_config(p, env={"SSVOS_SEED": "5"}).seed == 5
    cfg = io.engine_config(p, {"seed": 9, "mem_cap": None}, env={"SSVOS_SEED": "5"})
    assert cfg.seed == 9 and cfg.mem_cap == 3
    with pytest.raises(ConfigError):
        io.engine_config(None, env={"SSVOS_SEED": "abc"})
    with pytest.raises(InputError):
        io.engine_config(tmp_path / "missing.cfg", env={})
