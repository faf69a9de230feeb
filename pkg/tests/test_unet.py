import numpy as np
import pytest

from prunediff import tensor as T
from oracles import hand_count, hand_params
from prunediff.unet import (
    ATTENTION,
    RESIDUAL,
    Conv,
    TopologyError,
    UNetTopology,
    build_model,
    count_params,
    default_topology,
    estimate_flops,
)


def tiny_topology(**kw):
    base = dict(base_channels=4, time_embed_dim=8, latent_size=(8, 8))
    base.update(kw)
    return UNetTopology.from_counts((1, 1, 1), 1, (1, 1, 1), **base)


class _Single:
    def __init__(self, conv):
        self.conv = conv

    def named_params(self):
        return self.conv.named_params("c.")


def test_count_params_single_convs(rng):
    assert count_params(_Single(Conv(1, 1, 3, rng))) == 10
    assert count_params(_Single(Conv(4, 8, 3, rng))) == 4 * 8 * 9 + 8


def test_default_topology_shape_contract():
    tp = default_topology()
    assert tp.encoder_blocks == [2, 2, 2] and tp.bottleneck_blocks == 2 and tp.decoder_blocks == [4, 3, 2]
    assert tp.bottleneck == [ATTENTION] * 2 and tp.decoder[0] == [ATTENTION] * 4 and tp.decoder[2] == [RESIDUAL] * 2
    model = build_model(tp, seed=0)
    z = T.Tensor(np.random.default_rng(0).standard_normal((1, 3, 32, 32)))
    assert model(z, np.array([500.0])).shape == z.shape


def test_build_is_deterministic_in_seed():
    tp = tiny_topology()
    a = dict(build_model(tp, 1).named_params())
    b = dict(build_model(tp, 1).named_params())
    c = dict(build_model(tp, 2).named_params())
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_invalid_topology_lists_problems():
    tp = UNetTopology.from_counts((0, 1, 1), 1, (1, 1, 1), latent_size=(6, 6))
    with pytest.raises(TopologyError) as exc:
        build_model(tp, 0)
    msg = str(exc.value)
    assert ">= 1 block" in msg and "divisible by 4" in msg


def test_topology_roundtrip_and_hash():
    tp = default_topology()
    again = UNetTopology.from_dict(tp.to_dict())
    assert again == tp and again.hash() == tp.hash()
    other = default_topology()
    other.decoder[1] = other.decoder[1][:2]
    other.decoder_origin[1] = other.decoder_origin[1][:2]
    assert other.hash() != tp.hash()


def test_flops_single_conv_oracle():
    from prunediff.unet import conv_flops

    assert conv_flops(1, 1, 3, 4, 4) == 288


@pytest.mark.parametrize("tp", [tiny_topology(), tiny_topology(attention_in_bottleneck=False, attention_in_smallest_decoder=False),
                                UNetTopology.from_counts((2, 1, 3), 2, (2, 1, 3), base_channels=3, time_embed_dim=4, latent_size=(8, 4))])
def test_estimate_flops_matches_hand_count(tp):
    assert estimate_flops(tp) == hand_count(tp, *tp.latent_size)


def test_estimate_flops_matches_runtime_counter():
    tp = tiny_topology()
    model = build_model(tp, 0)
    with T.FlopCounter() as fc:
        model(T.Tensor(np.zeros((1, 3, 8, 8))), np.array([3.0]))
    assert fc.flops == estimate_flops(tp)


def test_flops_scale_by_four_for_all_conv():
    tp = tiny_topology(attention_in_bottleneck=False, attention_in_smallest_decoder=False)
    assert estimate_flops(tp, (16, 16)) == 4 * estimate_flops(tp, (8, 8))


def test_flops_and_params_are_topology_functions():
    tp = default_topology()
    assert estimate_flops(tp) == estimate_flops(UNetTopology.from_dict(tp.to_dict())) > 0
    assert count_params(build_model(tp, 0)) == count_params(build_model(tp, 5)) > 0


def test_forward_hooks_see_every_probe_and_block():
    tp = tiny_topology()
    tp = UNetTopology.from_counts((1, 1, 1), 1, (2, 1, 3), base_channels=4, time_embed_dim=8, latent_size=(8, 8))
    model = build_model(tp, 0)
    seen, blocks = [], []
    model(T.Tensor(np.zeros((2, 3, 8, 8))), 10.0, None, lambda n, h: seen.append((n, h.shape)),
          lambda j, k, a, o: blocks.append((j, k, a.shape == o.shape)))
    assert [n for n, _ in seen] == ["enc1", "enc2", "enc4", "bottleneck", "dec4", "dec2", "dec1"]
    assert dict(seen)["enc4"] == (2, 16, 2, 2)
    assert blocks == [(0, 0, True), (0, 1, True), (1, 0, True), (2, 0, True), (2, 1, True), (2, 2, True)]


def test_input_shape_error():
    model = build_model(tiny_topology(), 0)
    with pytest.raises(ValueError, match="UNet input"):
        model(T.Tensor(np.zeros((1, 3, 4, 4))), 1.0)


@pytest.mark.parametrize("counts", [((2, 2, 2), 2, (4, 3, 2)), ((1, 1, 1), 1, (1, 2, 1))])
def test_count_params_matches_hand_count(counts):
    tp = UNetTopology.from_counts(*counts, base_channels=4, time_embed_dim=8, latent_size=(8, 8))
    assert count_params(build_model(tp, 0)) == hand_params(tp)
