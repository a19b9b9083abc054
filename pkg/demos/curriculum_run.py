"""
A small curriculum run end to end
=================================

Speech first, then music, then sound effects. A deliberately tiny model is
trained for a few hundred steps, and the log shows each epoch's dataset
union. The run is then sampled and scored with the oracle. Expect about a
minute on a laptop CPU.
"""

import tempfile
from pathlib import Path

from sonate.config import RunConfig
from sonate.curriculum import (eval_requests, evaluate, generate, parse_log, prepare, run_training,
                               split_by_dataset)
from sonate.mmdit import ModelConfig, param_count
from sonate.syndata import corpus_lambda, generate_samples

samples = generate_samples(60, 40, 40, seed=3)
lam = corpus_lambda([r for r, _ in samples])
datasets = split_by_dataset([prepare(r, z, lam.value) for r, z in samples])

cfg = (RunConfig(model=ModelConfig(d_text=24, d_audio=24, n_heads=2, head_dim=12, ff_dim=48))
       .replace("train", batch_size=16, steps_per_epoch=100, lr=3e-3)
       .replace("eval", n_per_modality=20))
print(param_count(cfg.model), "parameters")

run_dir = Path(tempfile.mkdtemp()) / "run"
art = run_training(cfg, datasets, lam, run_dir)

seen = {}
for row in parse_log(art.log):
    seen.setdefault(row["epoch"], (row["stage"], row["dataset_mix"]))
for epoch, (stage, mix) in seen.items():
    print(f"epoch {epoch}: stage {stage}, datasets {mix}")
print(f"loss {art.losses[0]:.3f} -> {art.losses[-1]:.3f}")

requests = eval_requests(cfg, lam.value)
report = evaluate("demo", generate(art.params, cfg, requests), requests, cfg)
print(report.dumps())
