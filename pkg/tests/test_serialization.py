import numpy as np
import pytest

from models import tiny_sr
from prunediff import tensor as T
from prunediff.diffusion import SamplerConfig
from prunediff.profiler import capture_trace
from prunediff.pruning import apply_plan, plan_coarse
from prunediff.serialization import (
    ChecksumError,
    FormatError,
    checkpoint_bytes,
    load_checkpoint,
    load_trace,
    model_from_bytes,
    save_checkpoint,
    save_trace,
    trace_bytes,
)


def params_equal(a, b):
    pa, pb = dict(a.named_params()), dict(b.named_params())
    return pa.keys() == pb.keys() and all(np.array_equal(pa[k].data, pb[k].data) for k in pa)


@pytest.mark.parametrize("mode,target", [("add", "residual"), ("peam", "residual"), ("add", "image")])
def test_checkpoint_roundtrip(tmp_path, mode, target):
    model = tiny_sr(5, mode, target)
    save_checkpoint(model, tmp_path / "m.ckpt")
    again = load_checkpoint(tmp_path / "m.ckpt")
    assert params_equal(model, again)
    assert again.topology == model.topology and again.conditioner.mode == mode and again.target == target
    assert checkpoint_bytes(again) == checkpoint_bytes(model)
    z = T.Tensor(np.random.default_rng(0).standard_normal((1, 3, 8, 8)))
    lq = T.Tensor(np.full((1, 3, 8, 8), 0.2))
    with T.no_tape():
        assert np.array_equal(model.eps(z, 7.0, lq).data, again.eps(z, 7.0, lq).data)


def test_pruned_checkpoint_keeps_origins():
    model = apply_plan(tiny_sr(2), plan_coarse(tiny_sr(2).topology))
    again = model_from_bytes(checkpoint_bytes(model))
    assert again.topology.encoder_origin == [[0], [0], [0]]
    assert params_equal(model, again)


def test_corruption_is_detected():
    blob = bytearray(checkpoint_bytes(tiny_sr(0)))
    rng = np.random.default_rng(0)
    for pos in rng.integers(8, len(blob) - 4, size=20):
        bad = bytearray(blob)
        bad[pos] ^= 0x40
        with pytest.raises(ChecksumError):
            model_from_bytes(bytes(bad))
    with pytest.raises(FormatError):
        model_from_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(FormatError):
        model_from_bytes(bytes(blob[:-10]))


def test_trace_roundtrip(tmp_path):
    model = tiny_sr(1, dec=(2, 2, 2))
    lq = np.random.default_rng(2).uniform(size=(2, 3, 8, 8)).astype(np.float32)
    trace = capture_trace(model, SamplerConfig(steps=3), lq, ["enc1", "bottleneck"], block_steps=[0, 2])
    save_trace(trace, tmp_path / "t.pgpt")
    again = load_trace(tmp_path / "t.pgpt")
    assert again.metadata == trace.metadata
    assert again.features.keys() == trace.features.keys()
    assert all(np.array_equal(again.features[k], trace.features[k]) for k in trace.features)
    assert again.blocks.keys() == trace.blocks.keys()
    for key, steps in trace.blocks.items():
        for s, (a, o) in steps.items():
            assert np.array_equal(again.blocks[key][s][0], a) and np.array_equal(again.blocks[key][s][1], o)
    assert trace_bytes(again) == trace_bytes(trace)
