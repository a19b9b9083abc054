"""``sonate`` command line: gen-data, train, ablate, sample, eval, inspect-tokens.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from sonate import config as config_mod
from sonate import curriculum, mmdit, syndata
from sonate.codec import LatentSequence, decode, write_latents, write_waveform
from sonate.config import MIX_MODES, ConfigError, RunConfig
from sonate.flowmatch import SamplerConfig, conditions, sample_batch
from sonate.syndata import INSTRUCTION_VOCAB, CorpusConfig, SampleRecord
from sonate.textcond import LambdaStats, build_sfx_content, g2p, instruction_ids

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.load_default()
    if getattr(args, "train_seed", None) is not None:
        cfg = cfg.replace("train", seed=args.train_seed)
    return cfg


def _existing(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _manifest(args, cfg: RunConfig) -> Path:
    return _existing(args.manifest or cfg.data.manifest, "manifest")


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    corpus = CorpusConfig(frames_per_phoneme=cfg.data.frames_per_phoneme, codec=cfg.codec)
    samples = syndata.generate_samples(args.n_speech, args.n_music, args.n_sfx, args.seed, corpus)
    records = syndata.write_corpus(args.out, samples)
    print(f"wrote {len(records)} samples to {Path(args.out) / 'manifest.tsv'}")
    return EXIT_OK


def _load_training(args, cfg):
    manifest = _manifest(args, cfg)
    return curriculum.load_datasets(manifest, cfg)


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.mode:
        cfg = cfg.replace("train", mode=args.mode)
    if args.epochs is not None:
        cfg = cfg.replace("schedule", total_epochs=args.epochs)
    if args.steps_per_epoch is not None:
        cfg = cfg.replace("train", steps_per_epoch=args.steps_per_epoch)
    datasets, lam = _load_training(args, cfg)
    art = curriculum.run_training(cfg, datasets, lam, args.out)
    tail = f" final loss {art.losses[-1]:.4f}" if art.losses else ""
    print(f"trained {len(art.losses)} steps ({cfg.train.mode});{tail} checkpoint {art.checkpoint}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in MIX_MODES]
    if bad:
        raise UsageError(f"unknown mix mode(s) {', '.join(bad)}; choose from {', '.join(MIX_MODES)}")
    if len(modes) < 2:
        raise UsageError("ablate needs at least two modes")
    datasets, lam = _load_training(args, cfg)
    result = curriculum.run_ablation(cfg, modes, datasets, lam, args.out)
    print(result.report_path.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _lambda_for(args, checkpoint: Path) -> LambdaStats:
    path = Path(args.lambda_stats) if args.lambda_stats else checkpoint.parent.parent / "lambda.stats"
    if not path.exists():
        raise UsageError(f"lambda stats not found: {path} (needed for sfx conditioning)")
    return LambdaStats.load(path)


def cmd_sample(args) -> int:
    cfg = _config(args)
    ckpt = _existing(args.checkpoint, "checkpoint")
    params, _ = mmdit.load_checkpoint(ckpt, expected_digest=cfg.digest())
    if args.modality == "sfx":
        if args.duration is None:
            raise UsageError("sfx sampling needs --duration")
        lam = _lambda_for(args, ckpt).value
        content = build_sfx_content(args.duration, lam)
        rec = SampleRecord("cli", "sfx", args.duration, {}, args.instruction)
        n_frames = curriculum.request_from_record(rec, lam, cfg).n_frames
    else:
        if not args.content:
            raise UsageError(f"{args.modality} sampling needs --content")
        content = g2p(args.content, args.modality)
        n_frames = args.frames or cfg.data.frames_per_phoneme * content.phoneme_count
    scfg = SamplerConfig(args.steps or cfg.sampler.steps, cfg.sampler.seed if args.seed is None else args.seed)
    cond = conditions(params, [instruction_ids(args.instruction, INSTRUCTION_VOCAB)], [content])
    z = sample_batch(params, cfg.model, cond, [n_frames], scfg)[0]
    latent = LatentSequence(z, cfg.codec.frame_rate)
    write_latents(args.out, latent)
    if args.waveform:
        write_waveform(args.waveform, decode(latent, cfg.codec), cfg.codec.sample_rate)
    print(f"L_C={len(content)} frames={n_frames} -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    manifest = _manifest(args, cfg)
    records = syndata.read_manifest(manifest)
    truth = [syndata.load_latent(r, manifest.parent, cfg.codec.frame_rate).data for r in records]
    lam = syndata.corpus_lambda(records, cfg.codec.frame_rate).value if any(
        r.modality == "speech" for r in records) else None
    if args.ground_truth:
        requests = [curriculum.EvalRequest(r.modality, r.attrs, r.instruction, r.content(lam), len(z),
                                           r.duration, z) for r, z in zip(records, truth)]
        generated, run_id = truth, "ground-truth"
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --ground-truth")
        ckpt = _existing(args.checkpoint, "checkpoint")
        params, _ = mmdit.load_checkpoint(ckpt, expected_digest=cfg.digest())
        lam = _lambda_for(args, ckpt).value
        requests = [curriculum.request_from_record(r, lam, cfg, z) for r, z in zip(records, truth)]
        generated, run_id = curriculum.generate(params, cfg, requests), ckpt.stem
    keep = [i for i, r in enumerate(records) if not r.is_dialogue]
    report = curriculum.evaluate(run_id, [generated[i] for i in keep], [requests[i] for i in keep], cfg)
    text = report.dumps()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_inspect_tokens(args) -> int:
    manifest = _existing(args.manifest, "manifest")
    records = syndata.read_manifest(manifest)
    lam = None
    if args.lambda_stats:
        lam = LambdaStats.load(_existing(args.lambda_stats, "lambda stats")).value
    elif (manifest.parent / "lambda.stats").exists():
        lam = LambdaStats.load(manifest.parent / "lambda.stats").value
    for r in records[: args.limit]:
        if r.modality == "sfx" and lam is None:
            raise UsageError(f"{r.id}: sfx tokens need lambda stats (--lambda-stats)")
        ids = instruction_ids(r.instruction, INSTRUCTION_VOCAB)
        content = r.content(lam)
        print(f"{r.id}\tL_I={len(ids)}\tL_C={len(content)}\t"
              f"instruction={','.join(map(str, ids))}\tcontent={','.join(map(str, content.ids))}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sonate", description="Train, sample and evaluate the toy audio-latent generator.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="run configuration file (defaults built in)")
        if seed:
            sp.add_argument("--seed", dest="train_seed", type=int, help="override the training seed")

    g = sub.add_parser("gen-data", help="write a synthetic latent corpus")
    common(g, seed=False)
    g.add_argument("--out", required=True)
    g.add_argument("--n-speech", type=int, default=100)
    g.add_argument("--n-music", type=int, default=100)
    g.add_argument("--n-sfx", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one run")
    common(t)
    t.add_argument("--mode", choices=MIX_MODES)
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps-per-epoch", type=int)
    t.add_argument("--manifest")
    t.add_argument("--out", required=True, help="run directory")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="train several mix modes and compare them")
    common(a)
    a.add_argument("--modes", required=True, help="comma-separated mix modes")
    a.add_argument("--manifest")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sample", help="generate one latent from a checkpoint")
    common(s, seed=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--modality", choices=("speech", "music", "sfx"), required=True)
    s.add_argument("--instruction", required=True)
    s.add_argument("--content")
    s.add_argument("--duration", type=float)
    s.add_argument("--frames", type=int, help="override the latent length (speech/music)")
    s.add_argument("--lambda-stats")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, help="sampler seed")
    s.add_argument("--out", required=True)
    s.add_argument("--waveform", help="also write the decoded toy waveform")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score generations (or the corpus itself) with the oracle")
    common(e, seed=False)
    e.add_argument("--manifest")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--ground-truth", action="store_true")
    e.add_argument("--lambda-stats")
    e.add_argument("--report", "--out", dest="out", help="write the report here as well")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect-tokens", help="print instruction and content token ids")
    i.add_argument("--manifest", required=True)
    i.add_argument("--lambda-stats")
    i.add_argument("--limit", type=int)
    i.set_defaults(func=cmd_inspect_tokens)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"sonate: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, NotImplementedError) as e:
        print(f"sonate: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
