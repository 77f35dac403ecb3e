import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import factories as F
from a2q import checkpoint
from a2q import model as M
from a2q.config import ExperimentConfig, parse_config, resolve_m_target
from a2q.report import RunRecord, avg_bits, compression_ratio, config_hash, summarize, write_summary
from a2q.train import TrainConfig


def test_avg_bits_examples():
    assert avg_bits([np.full(5, 4.0)], [16]) == 4.0
    assert avg_bits([np.full(5, 2.0), np.full(5, 4.0)], [8, 8]) == 3.0
    # rounded, dimension-weighted
    assert avg_bits([np.array([1.6, 2.4]), np.array([7.5])], [1, 2]) == (2 + 2 + 2 * 8) / 4
    with pytest.raises(ValueError):
        avg_bits([], [])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.lists(st.integers(1, 2000), min_size=1, max_size=4))
def test_avg_bits_uniform(b, dims):
    assert avg_bits([np.full(7, float(b)) for _ in dims], dims) == b


def test_compression_examples():
    assert compression_ratio(32, 100, 50, 16, 2, step_overhead=False) == 1.0
    assert abs(compression_ratio(4, 100, 10**7, 10**7, 2) - 8.0) < 1e-4
    r = compression_ratio(1.70, 2708, 1433, 16, 2)
    assert abs(r - 18.35) <= 0.01
    # hand evaluation: 32 * elems / (1.7 * elems + 32 * N * L)
    elems = 2708 * 1433 + 2708 * 16
    assert r == 32 * elems / (1.70 * elems + 32 * 2708 * 2)
    no_first = compression_ratio(1.70, 2708, 1433, 16, 2, count_first_layer=False)
    assert no_first == 32 * 2708 * 16 / (1.70 * 2708 * 16 + 32 * 2708 * 2)


@settings(max_examples=50, deadline=None)
@given(st.floats(1, 8), st.floats(1, 8))
def test_compression_decreasing(a, b):
    if a == b:
        return
    lo, hi = min(a, b), max(a, b)
    assert compression_ratio(lo, 500, 100, 16, 2) > compression_ratio(hi, 500, 100, 16, 2)


def test_config_hash_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_record_roundtrip_and_wall_clock():
    rec = RunRecord("train", "ab" * 32, 3, {"loss": [1.0, float("nan")]}, {"test_acc": 0.5}, None, 1.25)
    text = rec.to_json(include_wall_clock=False)
    assert "wall_clock" not in json.loads(text)
    assert json.loads(text)["history"]["loss"] == [1.0, None]
    back = RunRecord.from_json(rec.to_json())
    assert back.wall_clock == 1.25 and back.metrics == {"test_acc": 0.5}
    with pytest.raises(ValueError):
        RunRecord.from_json(json.dumps({"schema": 99}))


def test_summary_three_seeds(tmp_path):
    recs = [RunRecord("train", "h", s, {}, {"test_acc": a, "avg_bits": 2.0, "path": "x"})
            for s, a in zip(range(3), (0.7, 0.8, 0.9))]
    summ = summarize(recs)
    assert abs(summ["test_acc"]["mean"] - 0.8) < 1e-12
    assert abs(summ["test_acc"]["std"] - np.std([0.7, 0.8, 0.9])) < 1e-12
    assert "path" not in summ
    csv_path, json_path = write_summary(recs, tmp_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "metric,mean,std,n"
    assert len(lines) == 3
    assert json.loads(json_path.read_text())["seeds"] == [0, 1, 2]
    with pytest.raises(ValueError):
        summarize([])


def test_checkpoint_roundtrip():
    mp, qt, g, x = F.random_checkpoint(3)
    h = "cd" * 32
    blob = checkpoint.dumps(mp, qt, h, {"m_target": 1.5})
    assert blob[:4] == b"A2QC"
    assert int.from_bytes(blob[4:8], "little") == checkpoint.VERSION
    mp2, qt2, h2, extra = checkpoint.loads(blob, expect_hash=h)
    assert h2 == h and extra == {"m_target": 1.5} and mp2.spec == mp.spec and qt2.mode == qt.mode
    for k in mp.params:
        assert np.array_equal(mp.params[k], mp2.params[k])
    for k in qt.sites:
        assert np.array_equal(qt.sites[k]["bits"], qt2.sites[k]["bits"])
    np.testing.assert_array_equal(M.forward(mp, qt, g, x)[0], M.forward(mp2, qt2, g, x)[0])
    assert checkpoint.dumps(mp2, qt2, h, {"m_target": 1.5}) == blob


@pytest.mark.parametrize("mangle", [lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b + b"\0",
                                    lambda b: b[:20], lambda b: b[:4] + (7).to_bytes(4, "little") + b[8:]])
def test_checkpoint_corruption(mangle):
    mp, qt, _, _ = F.random_checkpoint(2)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(mangle(checkpoint.dumps(mp, qt, "00" * 32)))


def test_checkpoint_hash_mismatch():
    mp, qt, _, _ = F.random_checkpoint(1)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(checkpoint.dumps(mp, qt, "00" * 32), expect_hash="11" * 32)


def test_parse_config():
    cfg = parse_config("""
        # comment
        dataset = synth
        synth_n = 120
        seeds = 0, 1, 2
        lambda = 0.001
        quant_mode = uniform_fixed
        target_bits = 2.5
    """)
    assert cfg.synth_n == 120 and cfg.seeds == [0, 1, 2]
    assert cfg.train.lam == 0.001 and cfg.train.quant_mode == "uniform_fixed"
    tc = resolve_m_target(cfg, 120, 16)
    assert tc.m_target == 120 * 16 * 2.5 / 8192  # only the hidden site without quantize_input


@pytest.mark.parametrize("text", ["bogus = 1", "dataset = mars", "no equals sign", "quant_mode = nns_bank",
                                  "inductive = true\nquant_mode = per_node_learned", "epochs = many",
                                  "dataset = files", "seeds = "])
def test_config_errors(text):
    with pytest.raises((ValueError, TypeError)):
        parse_config(text)


def test_config_digest_tracks_seed():
    cfg = ExperimentConfig(train=TrainConfig(epochs=3))
    assert cfg.digest() == ExperimentConfig(train=TrainConfig(epochs=3)).digest()
    assert cfg.with_seed(4).digest() != cfg.digest()
    assert cfg.with_seed(4).train.seed == 4
