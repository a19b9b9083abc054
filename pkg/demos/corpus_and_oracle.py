"""
The synthetic corpus and its oracle
===================================

Every latent in the toy corpus carries its attributes as fixed offsets on a
pair of channels, so a nearest-signature decoder can read them back. This
walk-through builds a small corpus, measures the phoneme rate lambda and
shows how sfx durations turn into token counts.
"""

import numpy as np

from sonate.evalsuite import control_accuracy, oracle_classify
from sonate.syndata import CORPUS_CODEC, corpus_lambda, gen_sfx_sample, gen_speech_sample, generate_samples
from sonate.textcond import build_sfx_content

# one speech sample: four frames per phoneme at 43 frames per second
rec, z = gen_speech_sample(0, {"gender": "female", "emotion": "sad"}, "hello")
print(rec.instruction, "->", z.frames, "frames,", rec.duration, "s")
print("oracle reads back:", oracle_classify(z, "speech"))

# lambda over the speech part of a corpus
samples = generate_samples(40, 20, 20, seed=0)
lam = corpus_lambda([r for r, _ in samples])
print("lambda =", lam.value, "phonemes per second over", lam.sample_count, "utterances")

# the oracle is exact on clean data and at chance on noise
speech = [(r.attrs, z) for r, z in samples if r.modality == "speech" and not r.is_dialogue]
print("clean accuracy:", control_accuracy(speech, "speech"))
rng = np.random.default_rng(1)
noise = [(a, rng.standard_normal(z.data.shape)) for a, z in speech]
print("noise accuracy:", control_accuracy(noise, "speech"))

# sfx: duration -> floor(lambda * T) [SFX] tokens -> latent length
for seconds in (0.5, 1.0, 2.0, 4.0):
    tokens = build_sfx_content(seconds, lam.value)
    _, fx = gen_sfx_sample(0, {"event": "burst"}, seconds, lam=lam.value)
    print(f"{seconds:>4} s  {len(tokens):>3} tokens  {fx.frames:>3} frames "
          f"(codec has {CORPUS_CODEC.frame_rate} fps)")
