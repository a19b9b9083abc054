import pytest
from hypothesis import given, strategies as st

from sonate.config import SEED_ENV, ConfigError, RunConfig, load, load_default, loads
from sonate.syndata import CORPUS_CODEC


def test_default_roundtrip_is_fixed_point():
    text = RunConfig().dumps()
    assert loads(text) == RunConfig()
    assert loads(text).dumps() == text


@given(st.integers(0, 2**31), st.integers(1, 64), st.sampled_from(["curriculum", "tts-only", "joint-flat"]),
       st.floats(1e-6, 1.0))
def test_roundtrip_fixed_point(seed, batch, mode, lr):
    cfg = RunConfig().replace("train", seed=seed, batch_size=batch, mode=mode, lr=lr)
    assert loads(cfg.dumps()) == cfg
    assert loads(loads(cfg.dumps()).dumps()).dumps() == cfg.dumps()


def test_partial_file_keeps_defaults():
    cfg = loads("[train]\nseed = 9\n[codec]\nprojection_seed = 2\n")
    assert cfg.train.seed == 9 and cfg.train.batch_size == RunConfig().train.batch_size
    assert cfg.codec.sample_rate == CORPUS_CODEC.sample_rate and cfg.codec.projection_seed == 2


@pytest.mark.parametrize("text,match", [
    ("[train]\nsede = 1\n", "unknown key 'sede'"),
    ("[trian]\nseed = 1\n", r"unknown section \[trian\]"),
    ("[train]\nseed = one\n", "cannot parse"),
    ("[train]\nmode = everything\n", "unknown mix mode"),
    ("[model]\nd_audio = 30\n", r"\[model\]"),
    ("[model]\nfreeze_instruction = maybe\n", "cannot parse"),
    ("seed = 1\n", "no section"),
])
def test_rejects_bad_files(text, match):
    with pytest.raises(ConfigError, match=match):
        loads(text)


def test_digest_tracks_architecture_only():
    base = RunConfig()
    assert base.digest() == RunConfig().digest()
    assert base.replace("train", seed=5, lr=0.3).digest() == base.digest()
    assert base.replace("model", ff_dim=128).digest() != base.digest()
    assert base.replace("codec", projection_seed=1).digest() != base.digest()


def test_seed_env_override(tmp_path):
    path = tmp_path / "run.cfg"
    RunConfig().replace("train", seed=4).save(path)
    assert load(path, env={}).train.seed == 4
    assert load(path, env={SEED_ENV: "11"}).train.seed == 11
    assert load_default(env={SEED_ENV: "12"}).train.seed == 12
    with pytest.raises(ConfigError):
        load_default(env={SEED_ENV: "x"})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read config"):
        load(tmp_path / "nope.cfg")
