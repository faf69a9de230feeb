"""Small models shared by the slower test modules."""

from prunediff.diffusion import build_sr_model
from prunediff.unet import UNetTopology


def tiny_topology(enc=(2, 2, 2), mid=2, dec=(4, 3, 2), size=8):
    return UNetTopology.from_counts(enc, mid, dec, base_channels=4, time_embed_dim=8, latent_size=(size, size))


def tiny_sr(seed=0, mode="add", target="residual", **kw):
    return build_sr_model(tiny_topology(**kw), seed, mode, target)
