"""Synthetic speech-, music- and sfx-like latent corpora with known ground truth.

Channel layout of the 16-channel latent space::

    0-6   content: phoneme patterns (speech/music) or enveloped event pattern (sfx)
    7     rhythm: periodic pattern whose period encodes the music genre
    8-9   gender      10-11 emotion      12-13 genre      14-15 event

Every attribute value owns a constant offset ("signature") on its attribute's
channel pair. Values of one attribute sit evenly on a circle, far enough
apart that a nearest-signature decoder recovers them from clean samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from sonate.codec import CodecConfig, LatentSequence, frame_count, read_latents, write_latents
from sonate.textcond import (
    CONTENT_VOCAB,
    ContentTokens,
    LambdaStats,
    SPEAKER_IDS,
    build_sfx_content,
    compute_lambda,
    g2p,
    instruction_vocabulary,
    sfx_token_count,
    tag_dialogue,
)

# 2752 / 64 = 43 latent frames per second exactly
CORPUS_CODEC = CodecConfig(sample_rate=2752, window=64, latent_dim=16)

CONTENT_CHANNELS = tuple(range(7))
RHYTHM_CHANNEL = 7
LETTERS = "abcdefghijklmnopqrstuvwxyz"

ATTRIBUTES = {
    "speech": {"gender": ("male", "female"), "emotion": ("neutral", "happy", "sad")},
    "music": {"genre": ("pulse", "lilt", "drift")},
    "sfx": {"event": ("burst", "swell", "rumble")},
}
ATTRIBUTE_CHANNELS = {"gender": (8, 9), "emotion": (10, 11), "genre": (12, 13), "event": (14, 15)}
GENRE_PERIOD = {"pulse": 8, "lilt": 6, "drift": 4}
# (attack, decay) as fractions of the clip length
ENVELOPE = {"burst": (0.05, 0.12), "swell": (0.75, 0.2), "rumble": (0.3, 3.0)}
SECOND_SPEAKER = "_s1"

TEMPLATES = {
    "speech": "a {gender} voice with a {emotion} tone",
    "music": "an instrumental {genre} track",
    "sfx": "the sound of a {event}",
}
DIALOGUE_TEMPLATE = "speaker zero {first} speaker one {second}"


def instruction_words() -> list[str]:
    words = []
    for modality, template in TEMPLATES.items():
        words += template.format(**{a: "" for a in ATTRIBUTES[modality]}).split()
        for values in ATTRIBUTES[modality].values():
            words += values
    words += DIALOGUE_TEMPLATE.format(first="", second="").split()
    return words


INSTRUCTION_VOCAB = instruction_vocabulary(instruction_words())


def instruction_for(modality: str, attrs: dict) -> str:
    return TEMPLATES[modality].format(**attrs)


@dataclass(frozen=True)
class AttributeSchema:
    radius: float = 0.8
    noise_scale: float = 0.05
    latent_dim: int = 16

    def values(self, modality: str) -> dict[str, tuple[str, ...]]:
        return ATTRIBUTES[modality]

    def signature(self, attr: str, value: str) -> np.ndarray:
        values = next(v[attr] for v in ATTRIBUTES.values() if attr in v)
        k = values.index(value)
        angle = 2 * math.pi * k / len(values)
        sig = np.zeros(self.latent_dim)
        c0, c1 = ATTRIBUTE_CHANNELS[attr]
        sig[c0], sig[c1] = self.radius * math.cos(angle), self.radius * math.sin(angle)
        return sig

    def signatures(self, attr: str) -> np.ndarray:
        """(n_values, 2) signature points on the attribute's channel pair."""
        values = next(v[attr] for v in ATTRIBUTES.values() if attr in v)
        ch = list(ATTRIBUTE_CHANNELS[attr])
        return np.stack([self.signature(attr, v)[ch] for v in values])

    def offset(self, modality: str, attrs: dict) -> np.ndarray:
        self.validate(modality, attrs)
        return sum((self.signature(a, attrs[a]) for a in ATTRIBUTES[modality]), np.zeros(self.latent_dim))

    def validate(self, modality: str, attrs: dict) -> None:
        if modality not in ATTRIBUTES:
            raise ValueError(f"unknown modality {modality!r}")
        schema = ATTRIBUTES[modality]
        for a, values in schema.items():
            if a not in attrs:
                raise ValueError(f"{modality} attributes missing {a!r}")
            if attrs[a] not in values:
                raise ValueError(f"{a}={attrs[a]!r} not in {values}")
        allowed = set(schema)
        if modality == "speech":
            allowed |= {a + SECOND_SPEAKER for a in schema}
        extra = set(attrs) - allowed
        if extra:
            raise ValueError(f"unknown {modality} attributes {sorted(extra)}")

    def min_separation(self) -> float:
        out = math.inf
        for attr in ATTRIBUTE_CHANNELS:
            s = self.signatures(attr)
            d = np.linalg.norm(s[:, None] - s[None], axis=-1)
            out = min(out, d[~np.eye(len(s), dtype=bool)].min())
        return out


DEFAULT_SCHEMA = AttributeSchema()


@dataclass(frozen=True)
class CorpusConfig:
    frames_per_phoneme: int = 4
    phoneme_amplitude: float = 0.5
    event_amplitude: float = 0.8
    rhythm_amplitude: float = 0.8
    sfx_min_duration: float = 0.5
    sfx_max_duration: float = 1.5
    dialogue_fraction: float = 0.005
    pattern_seed: int = 1234
    codec: CodecConfig = CORPUS_CODEC
    schema: AttributeSchema = DEFAULT_SCHEMA

    @property
    def frame_rate(self) -> Fraction:
        return self.codec.frame_rate


def _patterns(seed, rows, amplitude):
    return amplitude * np.random.default_rng(seed).standard_normal((rows, len(CONTENT_CHANNELS)))


def phoneme_patterns(cfg: CorpusConfig) -> np.ndarray:
    """Content-channel pattern for every content-vocabulary id."""
    return _patterns(cfg.pattern_seed, len(CONTENT_VOCAB), cfg.phoneme_amplitude)


def event_patterns(cfg: CorpusConfig) -> dict[str, np.ndarray]:
    events = ATTRIBUTES["sfx"]["event"]
    table = _patterns(cfg.pattern_seed + 1, len(events), cfg.event_amplitude)
    return dict(zip(events, table))


@dataclass
class SampleRecord:
    id: str
    modality: str
    duration: float
    attrs: dict[str, str]
    instruction: str
    content_text: str = ""
    latent_path: str = ""

    def content(self, lam=None) -> ContentTokens:
        """Content tokens; sfx tokens are rebuilt from the duration and ``lam``."""
        if self.modality == "sfx":
            if lam is None:
                raise ValueError(f"record {self.id}: sfx content needs the corpus lambda")
            return build_sfx_content(self.duration, lam)
        if self.is_dialogue:
            return tag_dialogue([(int(k), g2p(text)) for k, text in _split_dialogue(self.content_text)])
        return g2p(self.content_text, self.modality)

    @property
    def is_dialogue(self) -> bool:
        return self.modality == "speech" and ":" in self.content_text


def _split_dialogue(text):
    return [part.split(":", 1) for part in text.split("|")]


def phoneme_track(content: ContentTokens, cfg: CorpusConfig) -> np.ndarray:
    """Frame-aligned content channels: each phoneme held for ``frames_per_phoneme`` frames."""
    ids = [i for i in content.ids if i not in SPEAKER_IDS]
    table = phoneme_patterns(cfg)
    z = np.zeros((len(ids) * cfg.frames_per_phoneme, cfg.schema.latent_dim))
    z[:, list(CONTENT_CHANNELS)] = np.repeat(table[ids], cfg.frames_per_phoneme, axis=0)
    return z


def rhythm_track(genre: str, n_frames: int, cfg: CorpusConfig) -> np.ndarray:
    z = np.zeros((n_frames, cfg.schema.latent_dim))
    f = np.arange(n_frames)
    z[:, RHYTHM_CHANNEL] = cfg.rhythm_amplitude * np.sin(2 * np.pi * f / GENRE_PERIOD[genre])
    return z


def envelope(event: str, n_frames: int) -> np.ndarray:
    attack, decay = ENVELOPE[event]
    a = max(1, round(attack * n_frames))
    f = np.arange(n_frames)
    rise = (f + 1) / a
    fall = np.exp(-(f - a + 1) / (decay * n_frames))
    return np.where(f < a, rise, fall)


def _duration(n_frames: int, cfg: CorpusConfig) -> float:
    return float(Fraction(n_frames) / cfg.frame_rate)


def _noise(seed, shape, cfg: CorpusConfig):
    return cfg.schema.noise_scale * np.random.default_rng(seed).standard_normal(shape)


def _phonemes(text: str, modality: str) -> ContentTokens:
    if not text:
        raise ValueError(f"{modality} sample needs non-empty text")
    return g2p(text, modality)


def gen_speech_sample(seed: int, attrs: dict, text: str, cfg: CorpusConfig = CorpusConfig(),
                      sample_id: str | None = None):
    """Phoneme track + attribute signatures + Gaussian noise. Returns ``(record, latent)``."""
    cfg.schema.validate("speech", attrs)
    content = _phonemes(text, "speech")
    base = phoneme_track(content, cfg)
    z = base + cfg.schema.offset("speech", attrs) + _noise(seed, base.shape, cfg)
    rec = SampleRecord(sample_id or f"speech-{seed}", "speech", _duration(len(z), cfg), dict(attrs),
                       instruction_for("speech", attrs), text)
    return rec, LatentSequence(z, cfg.frame_rate)


def gen_music_sample(seed: int, attrs: dict, lyric_text: str, cfg: CorpusConfig = CorpusConfig(),
                     sample_id: str | None = None):
    """Lyric phoneme track + genre signature + periodic rhythm channel + noise."""
    cfg.schema.validate("music", attrs)
    content = _phonemes(lyric_text, "music")
    base = phoneme_track(content, cfg)
    rhythm = rhythm_track(attrs["genre"], len(base), cfg)
    z = base + rhythm + cfg.schema.offset("music", attrs) + _noise(seed, base.shape, cfg)
    rec = SampleRecord(sample_id or f"music-{seed}", "music", _duration(len(z), cfg), dict(attrs),
                       instruction_for("music", attrs), lyric_text)
    return rec, LatentSequence(z, cfg.frame_rate)


def gen_sfx_sample(seed: int, attrs: dict, duration: float, cfg: CorpusConfig = CorpusConfig(),
                   lam=None, sample_id: str | None = None):
    """Enveloped event pattern + event signature + noise; no content tokens are stored.

    When ``lam`` is given, durations too short to carry one [SFX] token are
    rejected up front.
    """
    cfg.schema.validate("sfx", attrs)
    if duration <= 0:
        raise ValueError(f"sfx duration must be > 0, got {duration}")
    if lam is not None and sfx_token_count(duration, lam) < 1:
        raise ValueError(f"duration {duration}s too short for one [SFX] token at lambda={lam}")
    n = frame_count(duration, cfg.codec)
    if n < 1:
        raise ValueError(f"duration {duration}s is shorter than one latent frame")
    z = np.zeros((n, cfg.schema.latent_dim))
    z[:, list(CONTENT_CHANNELS)] = envelope(attrs["event"], n)[:, None] * event_patterns(cfg)[attrs["event"]]
    z += cfg.schema.offset("sfx", attrs) + _noise(seed, z.shape, cfg)
    rec = SampleRecord(sample_id or f"sfx-{seed}", "sfx", float(duration), dict(attrs),
                       instruction_for("sfx", attrs), "")
    return rec, LatentSequence(z, cfg.frame_rate)


def gen_dialogue_sample(seed: int, attrs: Sequence[dict], texts: Sequence[str],
                        cfg: CorpusConfig = CorpusConfig(), sample_id: str | None = None):
    """Two speech turns back to back; content is tagged ``[S0] ... [S1] ...``."""
    if len(attrs) != 2 or len(texts) != 2:
        raise ValueError("toy dialogues have exactly two speakers")
    turns = [gen_speech_sample(seed * 2 + k, attrs[k], texts[k], cfg) for k in range(2)]
    z = np.concatenate([lat.data for _, lat in turns])
    merged = dict(attrs[0]) | {a + SECOND_SPEAKER: v for a, v in attrs[1].items()}
    instruction = DIALOGUE_TEMPLATE.format(first=turns[0][0].instruction, second=turns[1][0].instruction)
    content_text = "|".join(f"{k}:{t}" for k, t in enumerate(texts))
    rec = SampleRecord(sample_id or f"dialogue-{seed}", "speech", _duration(len(z), cfg), merged,
                       instruction, content_text)
    return rec, LatentSequence(z, cfg.frame_rate)


# ---------------------------------------------------------------- manifests

COLUMNS = ("id", "modality", "duration", "attrs", "instruction", "content_text", "latent_path")
_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}


def _escape(s: str) -> str:
    return "".join(_ESCAPES.get(c, c) for c in s)


def _unescape(s: str, lineno: int) -> str:
    out, it = [], iter(s)
    for c in it:
        if c == "\\":
            nxt = next(it, None)
            if nxt not in _UNESCAPES:
                raise ValueError(f"manifest line {lineno}: bad escape sequence \\{nxt or ''}")
            out.append(_UNESCAPES[nxt])
        else:
            out.append(c)
    return "".join(out)


def _format_attrs(attrs: dict) -> str:
    return ";".join(f"{k}={v}" for k, v in attrs.items())


def _parse_attrs(s: str, lineno: int) -> dict:
    attrs = {}
    for item in filter(None, s.split(";")):
        k, sep, v = item.partition("=")
        if not sep:
            raise ValueError(f"manifest line {lineno}, column 'attrs': expected key=value, got {item!r}")
        attrs[k] = v
    return attrs


def write_manifest(records: Iterable[SampleRecord], path) -> None:
    lines = []
    for r in records:
        cols = (r.id, r.modality, repr(float(r.duration)), _format_attrs(r.attrs), r.instruction,
                r.content_text, r.latent_path)
        lines.append("\t".join(_escape(c) for c in cols) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path) -> list[SampleRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), 1):
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) < len(COLUMNS):
            raise ValueError(f"manifest line {lineno}: missing column {COLUMNS[len(cols)]!r}")
        if len(cols) > len(COLUMNS):
            raise ValueError(f"manifest line {lineno}: {len(cols)} columns, expected {len(COLUMNS)}")
        cols = [_unescape(c, lineno) for c in cols]
        try:
            duration = float(cols[2])
        except ValueError:
            raise ValueError(f"manifest line {lineno}, column 'duration': not a number {cols[2]!r}") from None
        if cols[1] not in ATTRIBUTES:
            raise ValueError(f"manifest line {lineno}, column 'modality': unknown {cols[1]!r}")
        records.append(SampleRecord(cols[0], cols[1], duration, _parse_attrs(cols[3], lineno),
                                    cols[4], cols[5], cols[6]))
    return records


def corpus_lambda(records: Iterable[SampleRecord], frame_rate=CORPUS_CODEC.frame_rate) -> LambdaStats:
    """Mean phoneme rate over the speech records.

    Generated durations are whole frames, so each duration is snapped back to
    ``frames / frame_rate`` before averaging; this keeps the rate exact.
    """
    frame_rate = Fraction(frame_rate)
    pairs = []
    for r in records:
        if r.modality != "speech":
            continue
        frames = round(Fraction(r.duration) * frame_rate)
        exact = Fraction(frames) / frame_rate
        duration = exact if abs(float(exact) - r.duration) < 1e-9 else r.duration
        pairs.append((r.content().phoneme_count, duration))
    if not pairs:
        raise ValueError("corpus has no speech records to estimate lambda from")
    return compute_lambda(pairs)


# ---------------------------------------------------------------- corpora


def random_text(rng: np.random.Generator, min_chars: int, max_chars: int) -> str:
    """One or two lowercase words totalling ``min_chars..max_chars`` characters."""
    n = int(rng.integers(min_chars, max_chars + 1))
    letters = "".join(rng.choice(list(LETTERS), size=n))
    if n >= 5 and rng.random() < 0.5:
        cut = int(rng.integers(2, n - 1))
        letters = letters[:cut] + " " + letters[cut + 1:]
    return letters


def random_attrs(rng: np.random.Generator, modality: str) -> dict:
    return {a: str(rng.choice(values)) for a, values in ATTRIBUTES[modality].items()}


def _sfx_duration(rng, cfg: CorpusConfig) -> float:
    return round(float(rng.uniform(cfg.sfx_min_duration, cfg.sfx_max_duration)), 2)


def generate_samples(n_speech: int, n_music: int, n_sfx: int, seed: int,
                     cfg: CorpusConfig = CorpusConfig(), prefix: str = ""):
    """Deterministic list of ``(record, latent)`` pairs for a corpus of the given sizes.

    A ``dialogue_fraction`` share of the speech slots (rounded) holds
    two-speaker dialogues.
    """
    rng = np.random.default_rng(seed)
    out = []
    n_dialogue = round(n_speech * cfg.dialogue_fraction)
    for i in range(n_speech):
        sid = f"{prefix}speech-{i:05d}"
        s = int(rng.integers(2**31))
        if i < n_dialogue:
            attrs = [random_attrs(rng, "speech") for _ in range(2)]
            texts = [random_text(rng, 2, 5) for _ in range(2)]
            out.append(gen_dialogue_sample(s, attrs, texts, cfg, sid.replace("speech", "dialogue")))
        else:
            out.append(gen_speech_sample(s, random_attrs(rng, "speech"), random_text(rng, 2, 8), cfg, sid))
    for i in range(n_music):
        s = int(rng.integers(2**31))
        out.append(gen_music_sample(s, random_attrs(rng, "music"), random_text(rng, 5, 9), cfg,
                                    f"{prefix}music-{i:05d}"))
    for i in range(n_sfx):
        s = int(rng.integers(2**31))
        out.append(gen_sfx_sample(s, random_attrs(rng, "sfx"), _sfx_duration(rng, cfg), cfg,
                                  sample_id=f"{prefix}sfx-{i:05d}"))
    return out


def write_corpus(out_dir, samples, manifest_name: str = "manifest.tsv") -> list[SampleRecord]:
    """Write latents under ``out_dir/latents`` plus the manifest and ``lambda.stats``."""
    out = Path(out_dir)
    (out / "latents").mkdir(parents=True, exist_ok=True)
    records = []
    for rec, lat in samples:
        rec.latent_path = f"latents/{rec.id}.snlt"
        write_latents(out / rec.latent_path, lat)
        records.append(rec)
    write_manifest(records, out / manifest_name)
    if any(r.modality == "speech" for r in records):
        corpus_lambda(records).save(out / "lambda.stats")
    return records


def load_latent(record: SampleRecord, manifest_dir, frame_rate=CORPUS_CODEC.frame_rate) -> LatentSequence:
    return read_latents(Path(manifest_dir) / record.latent_path, frame_rate)
