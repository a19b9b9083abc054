"""Staged dataset schedule, padded batching, the training loop and the ablation harness."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from sonate import evalsuite, mmdit
from sonate.config import RunConfig, ScheduleConfig
from sonate.evalsuite import EvalReport
from sonate.flowmatch import (FlowBatch, OptimizerState, SamplerConfig, collate, conditions,
                              sample_batch, sfx_frames_for_tokens, train_step)
from sonate.syndata import (ATTRIBUTES, INSTRUCTION_VOCAB, CorpusConfig, SampleRecord,
                            corpus_lambda, generate_samples, load_latent, read_manifest)
from sonate.textcond import ContentTokens, LambdaStats, build_sfx_content, instruction_ids

DATASETS = ("S", "M", "E")
MODALITY = {"S": "speech", "M": "music", "E": "sfx"}
FIXED_MIX = {
    "tts-only": frozenset("S"),
    "ttm-only": frozenset("M"),
    "tta-only": frozenset("E"),
    "joint-flat": frozenset(DATASETS),
}

CurriculumSchedule = ScheduleConfig


class TrainingDiverged(RuntimeError):
    pass


def stage(epoch: int, schedule: CurriculumSchedule) -> int:
    if epoch < 1:
        raise ValueError(f"epoch must be >= 1, got {epoch}")
    if epoch <= schedule.e1:
        return 1
    if epoch <= schedule.e1 + schedule.e2:
        return 2
    return 3


def select_datasets(epoch: int, schedule: CurriculumSchedule) -> frozenset[str]:
    return frozenset(DATASETS[: stage(epoch, schedule)])


def datasets_for(mode: str, epoch: int, schedule: CurriculumSchedule) -> frozenset[str]:
    if mode == "curriculum":
        return select_datasets(epoch, schedule)
    if mode not in FIXED_MIX:
        raise ValueError(f"unknown mix mode {mode!r}")
    return FIXED_MIX[mode]


def mix_label(keys) -> str:
    return "+".join(k for k in DATASETS if k in keys)


@dataclass
class TrainSample:
    record: SampleRecord
    latent: np.ndarray
    instruction_ids: list[int]
    content: ContentTokens

    @property
    def modality(self) -> str:
        return self.record.modality


def prepare(record: SampleRecord, latent, lam) -> TrainSample:
    data = np.asarray(getattr(latent, "data", latent), dtype=np.float64)
    return TrainSample(record, data, instruction_ids(record.instruction, INSTRUCTION_VOCAB),
                       record.content(lam))


def split_by_dataset(samples: Sequence[TrainSample]) -> dict[str, list[TrainSample]]:
    by_mod = {v: k for k, v in MODALITY.items()}
    out = {k: [] for k in DATASETS}
    for s in samples:
        if s.modality not in by_mod:
            raise ValueError(f"sample {s.record.id} has no known modality tag: {s.modality!r}")
        out[by_mod[s.modality]].append(s)
    return out


def load_datasets(manifest, cfg: RunConfig):
    """Read a manifest into per-dataset sample lists plus the corpus lambda."""
    manifest = Path(manifest)
    records = read_manifest(manifest)
    lam = corpus_lambda(records, cfg.codec.frame_rate)
    samples = [prepare(r, load_latent(r, manifest.parent, cfg.codec.frame_rate), lam.value)
               for r in records]
    return split_by_dataset(samples), lam


def make_batches(datasets: dict[str, list[TrainSample]], keys, batch_size: int, steps: int,
                 rng: np.random.Generator):
    """Yield ``(FlowBatch, samples)`` drawn uniformly with replacement from the pooled union."""
    pool = [s for k in DATASETS if k in keys for s in datasets.get(k, [])]
    if not pool:
        raise ValueError(f"dataset union {mix_label(keys) or '{}'} is empty")
    for _ in range(steps):
        picked = [pool[i] for i in rng.integers(len(pool), size=batch_size)]
        yield collate([s.latent for s in picked], [s.instruction_ids for s in picked],
                      [s.content for s in picked]), picked


def _batch_modalities(picked) -> str:
    counts = {}
    for s in picked:
        counts[s.modality] = counts.get(s.modality, 0) + 1
    return ",".join(f"{m}:{counts[m]}" for m in ("speech", "music", "sfx") if m in counts)


def parse_log(path) -> list[dict[str, str]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(dict(part.split("=", 1) for part in line.split()))
    return rows


@dataclass
class RunArtifacts:
    run_dir: Path
    checkpoint: Path
    log: Path
    lam: LambdaStats
    params: mmdit.Params
    losses: list[float] = field(default_factory=list)


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:04d}.snck"


def run_training(cfg: RunConfig, datasets: dict[str, list[TrainSample]], lam: LambdaStats,
                 run_dir) -> RunArtifacts:
    """Train for ``total_epochs`` fixed epochs; the optimizer state carries across stages.

    A non-finite loss or gradient stops the run with :class:`TrainingDiverged`;
    checkpoints already written are left in place.
    """
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.snapshot")
    lam.save(run_dir / "lambda.stats")
    tc, schedule = cfg.train, cfg.schedule
    digest = cfg.digest()
    meta = {"meta.seed": tc.seed, "meta.lambda": lam.value}

    params = mmdit.init_params(cfg.model, tc.seed)
    opt = OptimizerState(lr=tc.lr, betas=(tc.beta1, tc.beta2), eps=tc.eps)
    data_rng = np.random.default_rng([tc.seed, 1])
    noise_rng = np.random.default_rng([tc.seed, 2])
    losses, step = [], 0
    last = ckpt_dir / checkpoint_name(0)
    mmdit.save_checkpoint(last, params, digest, meta)
    log_path = run_dir / "train.log"
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(1, schedule.total_epochs + 1):
            keys = datasets_for(tc.mode, epoch, schedule)
            st = stage(epoch, schedule) if tc.mode == "curriculum" else 0
            for batch, picked in make_batches(datasets, keys, tc.batch_size, tc.steps_per_epoch, data_rng):
                step += 1
                try:
                    params, opt, loss = train_step(params, opt, batch, noise_rng, cfg.model)
                except FloatingPointError as e:
                    log.write(f"step={step} epoch={epoch} stage={st} aborted=1\n")
                    raise TrainingDiverged(f"step {step}: {e}; last good checkpoint {last}") from e
                losses.append(loss)
                log.write(f"step={step} epoch={epoch} stage={st} dataset_mix={mix_label(keys)} "
                          f"batch={_batch_modalities(picked)} seed={tc.seed} loss={loss!r}\n")
            if epoch % tc.checkpoint_every == 0 or epoch == schedule.total_epochs:
                last = ckpt_dir / checkpoint_name(epoch)
                mmdit.save_checkpoint(last, params, digest, meta)
    return RunArtifacts(run_dir, last, log_path, lam, params, losses)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalRequest:
    modality: str
    attrs: dict[str, str]
    instruction: str
    content: ContentTokens
    n_frames: int
    duration: float
    truth: np.ndarray | None = None


def request_from_record(record: SampleRecord, lam: float, cfg: RunConfig, truth=None) -> EvalRequest:
    """Build a generation request; length follows the content tokens at rate ``lam``."""
    if record.modality == "sfx":
        content = build_sfx_content(record.duration, lam)
    else:
        content = record.content()
    n_frames = sfx_frames_for_tokens(len(content) if record.modality == "sfx" else content.phoneme_count,
                                     lam, cfg.codec)
    return EvalRequest(record.modality, dict(record.attrs), record.instruction, content, n_frames,
                       record.duration, truth)


def eval_requests(cfg: RunConfig, lam: float, durations: Sequence[float] = (1.0, 2.0, 4.0),
                  corpus: CorpusConfig | None = None) -> list[EvalRequest]:
    """Held-out requests: ``n_per_modality`` of each modality, sfx cycling over ``durations``."""
    corpus = corpus or CorpusConfig(frames_per_phoneme=cfg.data.frames_per_phoneme, codec=cfg.codec)
    n = cfg.eval.n_per_modality
    held = generate_samples(n, n, 0, cfg.eval.seed, dataclasses.replace(corpus, dialogue_fraction=0.0),
                            prefix="eval-")
    out = [request_from_record(r, lam, cfg, z.data) for r, z in held]
    rng = np.random.default_rng([cfg.eval.seed, 3])
    for i in range(n):
        attrs = {a: str(rng.choice(v)) for a, v in ATTRIBUTES["sfx"].items()}
        rec = SampleRecord(f"eval-sfx-{i:05d}", "sfx", float(durations[i % len(durations)]), attrs,
                           f"the sound of a {attrs['event']}")
        out.append(request_from_record(rec, lam, cfg))
    return out


def generate(params, cfg: RunConfig, requests: Sequence[EvalRequest], chunk: int = 32) -> list[np.ndarray]:
    scfg = SamplerConfig(cfg.sampler.steps, cfg.sampler.seed)
    out = []
    for lo in range(0, len(requests), chunk):
        part = requests[lo: lo + chunk]
        conds = conditions(params, [instruction_ids(r.instruction, INSTRUCTION_VOCAB) for r in part],
                           [r.content for r in part])
        # seeds are offset by position so chunking does not change any sample
        sub = SamplerConfig(scfg.steps, scfg.seed + lo)
        out += sample_batch(params, cfg.model, conds, [r.n_frames for r in part], sub)
    return out


def evaluate(run_id: str, generated: Sequence[np.ndarray], requests: Sequence[EvalRequest],
             cfg: RunConfig) -> EvalReport:
    report = EvalReport(run_id)
    for modality in ("speech", "music", "sfx"):
        idx = [i for i, r in enumerate(requests) if r.modality == modality]
        if not idx:
            continue
        acc = evalsuite.control_accuracy([(requests[i].attrs, generated[i]) for i in idx], modality)
        report.add_accuracies(modality, acc, len(idx))
        truth = [requests[i].truth for i in idx if requests[i].truth is not None]
        if len(truth) >= 2:
            report.add(f"frechet.{modality}", evalsuite.latent_frechet([generated[i] for i in idx], truth),
                       len(idx))
        if modality == "sfx":
            mean, worst = evalsuite.duration_error([(requests[i].duration, len(generated[i])) for i in idx],
                                                   cfg.codec)
            report.add("duration_error.sfx", mean, len(idx))
            report.add("duration_error.sfx.max", worst, len(idx))
    return report


# ---------------------------------------------------------------- ablation


@dataclass
class AblationResult:
    runs: dict[str, RunArtifacts]
    reports: dict[str, EvalReport]
    report_path: Path


def run_ablation(cfg: RunConfig, modes: Sequence[str], datasets, lam: LambdaStats, out_dir,
                 requests: Sequence[EvalRequest] | None = None) -> AblationResult:
    """Retrain the same architecture and seed under each mix mode and compare on shared requests."""
    modes = list(modes)
    if len(modes) < 2:
        raise ValueError(f"an ablation needs at least 2 modes, got {modes}")
    if len(set(modes)) != len(modes):
        raise ValueError(f"duplicate modes in {modes}")
    out_dir = Path(out_dir)
    requests = list(requests) if requests is not None else eval_requests(cfg, lam.value)
    runs, reports = {}, {}
    for mode in modes:
        run_cfg = cfg.replace("train", mode=mode)
        runs[mode] = run_training(run_cfg, datasets, lam, out_dir / mode)
        reports[mode] = evaluate(mode, generate(runs[mode].params, run_cfg, requests), requests, run_cfg)
    text = [f"ablation: modes={','.join(modes)} seed={cfg.train.seed} "
            f"steps_per_epoch={cfg.train.steps_per_epoch} epochs={cfg.schedule.total_epochs}", "",
            evalsuite.comparison_table(reports)]
    text += [reports[m].dumps() for m in modes]
    path = out_dir / "ablation_report.txt"
    path.write_text("\n".join(text), encoding="utf-8")
    return AblationResult(runs, reports, path)

