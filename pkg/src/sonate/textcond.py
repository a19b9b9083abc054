"""Instruction + content conditioning: toy G2P, speaker tags, [SFX] injection.

The text stream fed to the transformer is the row-stack of instruction word
embeddings and content token embeddings. Content is phonemes for speech and
music, and a run of ``floor(lambda * T)`` copies of the ``[SFX]`` token for
sound effects, where ``lambda`` is the mean phoneme rate of the speech corpus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import torch

from sonate._num import as_fraction

MODALITIES = ("speech", "music", "sfx")

PAD = "<pad>"
UNK = "<unk>"
SFX = "[SFX]"
BOUNDARY = "|"
GLOTTAL = "?"
N_SPEAKERS = 10
ALPHABET = "abcdefghijklmnopqrstuvwxyz '"


class Vocabulary:
    """Dense id <-> symbol table, serialized as ``id<TAB>symbol`` lines."""

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate symbols in vocabulary")
        self.symbols = symbols
        self._ids = {s: i for i, s in enumerate(symbols)}

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, symbol):
        return symbol in self._ids

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.symbols == other.symbols

    def id(self, symbol: str) -> int:
        return self._ids[symbol]

    def get(self, symbol: str, default: int | None = None) -> int | None:
        return self._ids.get(symbol, default)

    def symbol(self, idx: int) -> str:
        return self.symbols[idx]

    def dumps(self) -> str:
        return "".join(f"{i}\t{s}\n" for i, s in enumerate(self.symbols))

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        symbols = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            idx, sep, sym = line.partition("\t")
            if not sep or not idx.isdigit():
                raise ValueError(f"vocabulary line {lineno}: expected 'id<TAB>symbol'")
            if int(idx) != len(symbols):
                raise ValueError(f"vocabulary line {lineno}: ids must be dense, got {idx}")
            symbols.append(sym)
        return cls(symbols)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _phoneme_symbol(ch: str) -> str:
    return {" ": BOUNDARY, "'": GLOTTAL}.get(ch, ch)


def content_vocabulary() -> Vocabulary:
    phonemes = [_phoneme_symbol(c) for c in ALPHABET]
    speakers = [f"[S{k}]" for k in range(N_SPEAKERS)]
    return Vocabulary([PAD, *phonemes, SFX, *speakers])


CONTENT_VOCAB = content_vocabulary()
PAD_ID = CONTENT_VOCAB.id(PAD)
SFX_ID = CONTENT_VOCAB.id(SFX)
BOUNDARY_ID = CONTENT_VOCAB.id(BOUNDARY)
SPEAKER_IDS = tuple(CONTENT_VOCAB.id(f"[S{k}]") for k in range(N_SPEAKERS))
PHONEME_IDS = tuple(CONTENT_VOCAB.id(_phoneme_symbol(c)) for c in ALPHABET)
_G2P_TABLE = {c: CONTENT_VOCAB.id(_phoneme_symbol(c)) for c in ALPHABET}


def speaker_id(k: int) -> int:
    if not 0 <= k < N_SPEAKERS:
        raise ValueError(f"speaker index {k} out of range 0..{N_SPEAKERS - 1}")
    return SPEAKER_IDS[k]


@dataclass(frozen=True)
class ContentTokens:
    ids: tuple[int, ...]
    modality: str

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.modality == "sfx":
            if any(i != SFX_ID for i in self.ids):
                raise ValueError("sfx content may only contain the [SFX] token")
            return
        if SFX_ID in self.ids:
            raise ValueError(f"{self.modality} content must not contain [SFX]")
        speakers = set(SPEAKER_IDS)
        for pos, i in enumerate(self.ids):
            if i in speakers and (pos + 1 == len(self.ids) or self.ids[pos + 1] in speakers):
                raise ValueError(f"speaker token at position {pos} does not prefix an utterance")
        if speakers.intersection(self.ids) and self.ids[0] not in speakers:
            raise ValueError("dialogue content must start with a speaker token")

    def __len__(self):
        return len(self.ids)

    @property
    def phoneme_count(self) -> int:
        return sum(1 for i in self.ids if i not in SPEAKER_IDS)


def g2p(text: str, modality: str = "speech") -> ContentTokens:
    """Map each character of ``text`` to its toy phoneme id (space = word boundary)."""
    ids = []
    for pos, ch in enumerate(text):
        try:
            ids.append(_G2P_TABLE[ch])
        except KeyError:
            raise ValueError(f"character {ch!r} at position {pos} is outside the toy alphabet") from None
    return ContentTokens(tuple(ids), modality)


def tag_dialogue(utterances: Sequence[tuple[int, ContentTokens]]) -> ContentTokens:
    if not utterances:
        raise ValueError("dialogue needs at least one utterance")
    ids: list[int] = []
    for k, utt in utterances:
        if utt.modality != "speech":
            raise ValueError(f"dialogue utterances must be speech, got {utt.modality}")
        if not len(utt):
            raise ValueError(f"empty utterance for speaker {k}")
        ids.append(speaker_id(k))
        ids.extend(utt.ids)
    return ContentTokens(tuple(ids), "speech")


@dataclass(frozen=True)
class LambdaStats:
    """Mean phoneme rate (phonemes per second) over a speech corpus."""

    value: float
    sample_count: int
    ratios: tuple[float, ...] = field(default=(), compare=False)

    def dumps(self) -> str:
        lines = [f"lambda={self.value!r}", f"n={self.sample_count}"]
        if self.ratios:
            lines.append("ratios=" + ",".join(repr(r) for r in self.ratios))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "LambdaStats":
        kv = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValueError(f"lambda stats line {lineno}: expected key=value")
            kv[key.strip()] = val.strip()
        try:
            ratios = tuple(float(r) for r in kv["ratios"].split(",")) if kv.get("ratios") else ()
            return cls(float(kv["lambda"]), int(kv["n"]), ratios)
        except KeyError as e:
            raise ValueError(f"lambda stats missing key {e.args[0]!r}") from None

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LambdaStats":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def compute_lambda(corpus: Iterable[tuple[int, float]]) -> LambdaStats:
    """Mean of ``phoneme_count / duration`` over the corpus.

    The mean is accumulated in rationals and rounded once, so a corpus whose
    ratios are all equal returns that ratio exactly.
    """
    ratios = []
    for i, (count, duration) in enumerate(corpus):
        d = as_fraction(duration)
        if d <= 0:
            raise ValueError(f"sample {i}: duration must be > 0, got {duration}")
        if count < 1:
            raise ValueError(f"sample {i}: phoneme count must be >= 1, got {count}")
        ratios.append(Fraction(count) / d)
    if not ratios:
        raise ValueError("cannot compute lambda over an empty corpus")
    mean = sum(ratios, Fraction(0)) / len(ratios)
    return LambdaStats(float(mean), len(ratios), tuple(float(r) for r in ratios))


def sfx_token_count(t_target, lam) -> int:
    return math.floor(as_fraction(lam) * as_fraction(t_target))


def build_sfx_content(t_target, lam) -> ContentTokens:
    if t_target <= 0:
        raise ValueError(f"target duration must be > 0, got {t_target}")
    if lam <= 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    n = sfx_token_count(t_target, lam)
    if n < 1:
        raise ValueError(
            f"duration too short for temporal anchoring: floor({lam} * {t_target}) = 0"
        )
    return ContentTokens((SFX_ID,) * n, "sfx")


def instruction_vocabulary(words: Iterable[str]) -> Vocabulary:
    """Instruction word table with ``<unk>`` at id 0; word order is preserved."""
    seen = dict.fromkeys(w for w in words if w != UNK)
    return Vocabulary([UNK, *seen])


def instruction_ids(instruction: str, vocab: Vocabulary) -> list[int]:
    unk = vocab.id(UNK)
    return [vocab.get(w, unk) for w in instruction.split()]


def embed_instruction(instruction: str, params, vocab: Vocabulary) -> torch.Tensor:
    """(L_I, D) rows of the instruction embedding table, one per word."""
    table = params["instr_embed"]
    ids = torch.tensor(instruction_ids(instruction, vocab), dtype=torch.long)
    return table.index_select(0, ids)


def embed_content(content: ContentTokens, params) -> torch.Tensor:
    table = params["content_embed"]
    bad = [i for i in content.ids if not 0 <= i < table.shape[0]]
    if bad:
        raise ValueError(f"content id {bad[0]} not covered by the content embedding table")
    return table.index_select(0, torch.tensor(content.ids, dtype=torch.long))


@dataclass(eq=False)
class ConditionSequence:
    embeddings: torch.Tensor
    instruction_length: int
    content_length: int
    modality: str

    def __post_init__(self):
        n = self.instruction_length + self.content_length
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != n:
            raise ValueError(
                f"embeddings shape {tuple(self.embeddings.shape)} does not match "
                f"L_I + L_C = {n}"
            )

    def __len__(self):
        return self.instruction_length + self.content_length

    @property
    def width(self) -> int:
        return self.embeddings.shape[1]


def build_condition(
    instr_emb: torch.Tensor,
    content: ContentTokens,
    params,
    unconditional: bool = False,
) -> ConditionSequence:
    if not len(content) and not unconditional:
        raise ValueError(
            f"{content.modality} sample has empty content; pass unconditional=True "
            "to allow it"
        )
    content_emb = embed_content(content, params)
    if instr_emb.shape[0] and instr_emb.shape[1] != content_emb.shape[1]:
        raise ValueError("instruction and content embeddings differ in width")
    emb = torch.cat([instr_emb.to(content_emb.dtype), content_emb], dim=0)
    return ConditionSequence(emb, instr_emb.shape[0], len(content), content.modality)
