import numpy as np
import pytest
from hypothesis import given, strategies as st

from sonate import mmdit
from sonate.config import RunConfig, ScheduleConfig, load
from sonate.curriculum import (FIXED_MIX, TrainingDiverged, checkpoint_name, datasets_for, eval_requests,
                               make_batches, mix_label, parse_log, prepare, run_ablation, run_training,
                               select_datasets, split_by_dataset, stage)
from sonate.evalsuite import parse_kv_block
from sonate.syndata import generate_samples, gen_speech_sample
from sonate.textcond import LambdaStats

TINY = dict(d_text=8, d_audio=8, n_heads=2, head_dim=4, n_joint=1, n_single=1, ff_dim=16, time_freqs=4)
LAM = LambdaStats(10.75, 1, (10.75,))


def tiny_cfg(**train):
    cfg = RunConfig().replace("model", **TINY)
    cfg = cfg.replace("train", **{"batch_size": 4, "steps_per_epoch": 2, "lr": 1e-3, **train})
    return cfg.replace("sampler", steps=2).replace("eval", n_per_modality=3)


@pytest.fixture(scope="module")
def datasets():
    samples = generate_samples(20, 20, 20, seed=4)
    return split_by_dataset([prepare(r, z, LAM.value) for r, z in samples])


@pytest.mark.parametrize("epoch,want", [(1, "S"), (2, "S+M"), (3, "S+M"), (4, "S+M+E"), (5, "S+M+E")])
def test_select_datasets_examples(epoch, want):
    assert mix_label(select_datasets(epoch, ScheduleConfig(e1=1, e2=2))) == want


def test_stage_bounds_and_modes():
    with pytest.raises(ValueError):
        stage(0, ScheduleConfig())
    assert [stage(e, ScheduleConfig(e1=0, e2=0)) for e in (1, 2)] == [3, 3]
    assert datasets_for("tts-only", 9, ScheduleConfig()) == FIXED_MIX["tts-only"]
    with pytest.raises(ValueError):
        datasets_for("bogus", 1, ScheduleConfig())


@given(st.integers(0, 6), st.integers(0, 6), st.integers(1, 20))
def test_schedule_monotone_and_late_sfx(e1, e2, epoch):
    sched = ScheduleConfig(e1=e1, e2=e2)
    now, nxt = select_datasets(epoch, sched), select_datasets(epoch + 1, sched)
    assert now <= nxt and "S" in now
    assert ("E" in now) == (epoch > e1 + e2)


def test_uniform_pooled_sampling(datasets):
    rng = np.random.default_rng(0)
    picks = [s.modality for _, picked in make_batches(datasets, {"S", "M"}, 100, 100, rng) for s in picked]
    assert len(picks) == 10_000
    assert abs(picks.count("speech") / len(picks) - 0.5) <= 0.03
    assert "sfx" not in picks


def test_empty_union_raises(datasets):
    with pytest.raises(ValueError, match="empty"):
        next(make_batches({"S": [], "M": [], "E": []}, {"S"}, 4, 1, np.random.default_rng(0)))


def test_padding_short_and_long():
    attrs = {"gender": "male", "emotion": "sad"}
    r1, z1 = gen_speech_sample(0, attrs, "abcd", sample_id="a")
    r2, z2 = gen_speech_sample(1, attrs, "a" * 11, sample_id="b")
    ds = {"S": [prepare(r1, z1.data[:10], LAM.value), prepare(r2, z2.data[:43], LAM.value)], "M": [], "E": []}
    seen = False
    for batch, picked in make_batches(ds, {"S"}, 8, 5, np.random.default_rng(0)):
        assert batch.x1.shape[1] == max(len(s.latent) for s in picked)
        if {len(s.latent) for s in picked} == {10, 43}:
            seen = True
            short = [i for i, s in enumerate(picked) if len(s.latent) == 10][0]
            assert (~batch.frame_mask[short]).sum() == 33
            assert np.all(batch.x1[short, 10:] == 0)
    assert seen


def test_split_rejects_unknown_modality(datasets):
    bad = datasets["S"][0]
    bad = type(bad)(type(bad.record)(**{**bad.record.__dict__, "modality": "video"}), bad.latent,
                    bad.instruction_ids, bad.content)
    with pytest.raises(ValueError, match="video"):
        split_by_dataset([bad])


@pytest.fixture(scope="module")
def curriculum_run(datasets, tmp_path_factory):
    cfg = tiny_cfg(seed=3).replace("schedule", total_epochs=5)
    return cfg, run_training(cfg, datasets, LAM, tmp_path_factory.mktemp("run"))


def test_stage_log(curriculum_run):
    cfg, art = curriculum_run
    rows = parse_log(art.log)
    assert len(rows) == 10 == len(art.losses)
    by_epoch = {int(r["epoch"]): (int(r["stage"]), r["dataset_mix"]) for r in rows}
    assert by_epoch == {1: (1, "S"), 2: (2, "S+M"), 3: (2, "S+M"), 4: (3, "S+M+E"), 5: (3, "S+M+E")}
    assert all(r["seed"] == "3" for r in rows)
    # sfx never reaches a batch before epoch e1 + e2 + 1
    assert all("sfx" not in r["batch"] for r in rows if int(r["epoch"]) <= 3)
    assert all("music" not in r["batch"] for r in rows if int(r["epoch"]) == 1)


def test_run_artifacts(curriculum_run):
    cfg, art = curriculum_run
    names = sorted(p.name for p in (art.run_dir / "checkpoints").iterdir())
    assert names == [checkpoint_name(e) for e in range(6)]
    assert load(art.run_dir / "config.snapshot") == cfg
    assert LambdaStats.load(art.run_dir / "lambda.stats").value == 10.75
    params, digest, meta = mmdit.load_checkpoint(art.checkpoint, cfg.digest(), with_meta=True)
    assert meta == {"seed": 3, "lambda": 10.75}
    assert all(np.array_equal(params[k].numpy(), art.params[k].numpy()) for k in params)


def test_training_is_deterministic(curriculum_run, datasets, tmp_path):
    cfg, art = curriculum_run
    again = run_training(cfg, datasets, LAM, tmp_path)
    assert again.log.read_bytes() == art.log.read_bytes()
    assert again.checkpoint.read_bytes() == art.checkpoint.read_bytes()


def test_tts_only_batches(datasets, tmp_path):
    art = run_training(tiny_cfg(mode="tts-only"), datasets, LAM, tmp_path)
    rows = parse_log(art.log)
    assert all(r["dataset_mix"] == "S" and r["stage"] == "0" for r in rows)
    assert all(r["batch"] == "speech:4" for r in rows)


def test_divergence_keeps_last_checkpoint(datasets, tmp_path):
    cfg = tiny_cfg(lr=1e200, steps_per_epoch=1)
    with pytest.raises(TrainingDiverged, match="epoch_0001"):
        run_training(cfg, datasets, LAM, tmp_path)
    assert (tmp_path / "checkpoints" / checkpoint_name(1)).exists()
    assert "aborted=1" in (tmp_path / "train.log").read_text().splitlines()[-1]


def test_eval_requests_layout():
    cfg = tiny_cfg()
    reqs = eval_requests(cfg, 10.75)
    assert [r.modality for r in reqs] == ["speech"] * 3 + ["music"] * 3 + ["sfx"] * 3
    assert [r.n_frames for r in reqs if r.modality == "sfx"] == [40, 84, 172]
    for r in reqs:
        if r.modality != "sfx":
            assert r.n_frames == 4 * r.content.phoneme_count == len(r.truth)


def test_ablation_untrained_reports_match(datasets, tmp_path):
    cfg = tiny_cfg(steps_per_epoch=0)
    res = run_ablation(cfg, ["curriculum", "tts-only"], datasets, LAM, tmp_path)
    a, b = (parse_kv_block(res.reports[m].dumps()) for m in ("curriculum", "tts-only"))
    a.pop("run"), b.pop("run")
    assert a == b
    text = res.report_path.read_text()
    assert text.count("metric ") == 1
    header = next(line for line in text.splitlines() if line.startswith("metric"))
    assert header.split() == ["metric", "curriculum", "tts-only"]
    assert (tmp_path / "curriculum" / "train.log").exists() and (tmp_path / "tts-only" / "train.log").exists()


@pytest.mark.parametrize("modes", [["curriculum"], ["tts-only", "tts-only"]])
def test_ablation_needs_distinct_modes(datasets, tmp_path, modes):
    with pytest.raises(ValueError):
        run_ablation(tiny_cfg(), modes, datasets, LAM, tmp_path)
