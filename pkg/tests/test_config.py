import pytest

from prunediff import config as C


def test_defaults_validate_and_roundtrip():
    cfg = C.RunConfig()
    cfg.validate()
    again = C.loads(cfg.to_toml())
    assert again == cfg
    assert again.to_toml() == cfg.to_toml()


def test_partial_file_overrides_only_given_keys(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("seed = 3\n[pruning]\nphi_min = 0.1\nmode = \"prune-if-lt\"\n[training]\nlr = 1\n")
    cfg = C.load(p, env={})
    assert cfg.seed == 3 and cfg.pruning.phi_min == 0.1 and cfg.pruning.psi_min == 1.0
    assert cfg.training.lr == 1.0 and isinstance(cfg.training.lr, float)


@pytest.mark.parametrize("text, match", [
    ("bogus = 1\n", "top-level"),
    ("[pruning]\nphi_max = 0.3\n", r"\[pruning\]: phi_max"),
    ("[sampler]\nsteps = \"20\"\n", "steps must be int"),
    ("[sampler]\nclip_x0 = 1\n", "clip_x0"),
    ("seed = -1\n", "seed"),
    ("pruning = 3\n", "table"),
    ("[x\n", "TOML"),
])
def test_bad_files_are_rejected(text, match):
    with pytest.raises(C.ConfigError, match=match):
        C.loads(text)


def test_semantic_validation(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[data]\nimage_size = 16\n")
    with pytest.raises(C.ConfigError, match="latent_size"):
        C.load(p, env={})
    p.write_text("[pruning]\nmode = \"sometimes\"\n")
    with pytest.raises(ValueError, match="threshold mode"):
        C.load(p, env={})
    p.write_text("[training]\ntarget = \"latent\"\n")
    with pytest.raises(C.ConfigError, match="training.target"):
        C.load(p, env={})


def test_seed_environment_override():
    assert C.load(None, env={"PRUNEDIFF_SEED": "42"}).seed == 42
    assert C.load(None, env={}).seed == 0
    with pytest.raises(C.ConfigError):
        C.load(None, env={"PRUNEDIFF_SEED": "x"})
