import math
from fractions import Fraction

import pytest
import torch
from hypothesis import given, settings, strategies as st

from sonate.mmdit import ModelConfig, init_params
from sonate.textcond import (ALPHABET, BOUNDARY_ID, CONTENT_VOCAB, PAD_ID, PHONEME_IDS, SFX_ID,
                             SPEAKER_IDS, UNK, ContentTokens, LambdaStats, Vocabulary, build_condition,
                             build_sfx_content, compute_lambda, embed_content, embed_instruction, g2p,
                             instruction_vocabulary, sfx_token_count, speaker_id, tag_dialogue)

words = st.text(alphabet=ALPHABET, max_size=30)
lams = st.fractions(min_value=Fraction(1, 10), max_value=50, max_denominator=1000)
durations = st.fractions(min_value=Fraction(1, 10), max_value=20, max_denominator=1000)


@pytest.fixture(scope="module")
def params():
    return init_params(ModelConfig(d_text=8, d_audio=8, n_heads=2, head_dim=4), 0)


@pytest.fixture(scope="module")
def vocab():
    return instruction_vocabulary(["male", "female", "happy", "sound"])


def test_content_vocab_dense_and_disjoint():
    ids = [CONTENT_VOCAB.id(s) for s in CONTENT_VOCAB.symbols]
    assert ids == list(range(len(CONTENT_VOCAB)))
    assert SFX_ID not in PHONEME_IDS
    assert not set(SPEAKER_IDS) & set(PHONEME_IDS)
    assert PAD_ID not in PHONEME_IDS and len(set(PHONEME_IDS)) == len(ALPHABET)


def test_vocab_serialization_roundtrip(tmp_path):
    text = CONTENT_VOCAB.dumps()
    assert text.splitlines()[0] == f"0\t{CONTENT_VOCAB.symbol(0)}"
    assert Vocabulary.loads(text) == CONTENT_VOCAB
    CONTENT_VOCAB.save(tmp_path / "v.tsv")
    assert Vocabulary.load(tmp_path / "v.tsv") == CONTENT_VOCAB


def test_vocab_rejects_gaps_and_duplicates():
    with pytest.raises(ValueError):
        Vocabulary.loads("0\ta\n2\tb\n")
    with pytest.raises(ValueError):
        Vocabulary(["a", "a"])


def test_g2p_examples():
    assert g2p("").ids == ()
    a, b = CONTENT_VOCAB.id("a"), CONTENT_VOCAB.id("b")
    assert g2p("ab").ids == (a, b)
    assert g2p("a a").ids == (a, BOUNDARY_ID, a)


def test_g2p_rejects_with_position():
    with pytest.raises(ValueError, match="position 2"):
        g2p("abC")


@given(words)
def test_g2p_length_and_determinism(text):
    toks = g2p(text)
    assert len(toks) == len(text)
    assert toks == g2p(text)
    assert set(toks.ids) <= set(PHONEME_IDS)


def test_compute_lambda_examples():
    assert compute_lambda([(10, 2.0)]).value == 5.0
    stats = compute_lambda([(10, 2.0), (20, 5.0)])
    assert stats.value == 4.5 and stats.sample_count == 2 and stats.ratios == (5.0, 4.0)
    for k in (1, 7, 123):
        assert compute_lambda([(k, 1.0)]).value == k


@pytest.mark.parametrize("corpus", [[], [(3, 0.0)], [(3, -1.0)], [(0, 1.0)]])
def test_compute_lambda_errors(corpus):
    with pytest.raises(ValueError):
        compute_lambda(corpus)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(1, 200), st.floats(0.1, 30)), min_size=1, max_size=20),
       st.randoms(use_true_random=False))
def test_compute_lambda_permutation_and_scaling(corpus, rnd):
    base = compute_lambda(corpus).value
    shuffled = list(corpus)
    rnd.shuffle(shuffled)
    assert compute_lambda(shuffled).value == base
    assert compute_lambda([(2 * n, d) for n, d in corpus]).value == 2 * base


def test_lambda_stats_serialization(tmp_path):
    stats = compute_lambda([(10, 2.0), (20, 5.0)])
    text = stats.dumps()
    assert "lambda=4.5" in text and "n=2" in text
    assert LambdaStats.loads(text) == stats
    stats.save(tmp_path / "l.stats")
    assert LambdaStats.load(tmp_path / "l.stats").ratios == stats.ratios
    with pytest.raises(ValueError):
        LambdaStats.loads("n=2\n")


def test_sfx_content_examples():
    assert build_sfx_content(2.0, 4.5).ids == (SFX_ID,) * 9
    assert len(build_sfx_content(2.1, 4.5)) == 9
    assert build_sfx_content(2.0, 4.5).modality == "sfx"
    with pytest.raises(ValueError, match="too short for temporal anchoring"):
        build_sfx_content(0.5, 1.0)
    with pytest.raises(ValueError):
        build_sfx_content(0.0, 4.5)


def test_sfx_exact_at_decimal_boundaries():
    # 0.29 * 100 is 28.999999999999996 in binary floating point
    assert sfx_token_count(0.29, 100) == 29
    assert sfx_token_count(4, 10.75) == 43


@settings(max_examples=100)
@given(lams, durations, durations)
def test_sfx_monotone_and_density(lam, t1, t2):
    lo, hi = sorted((t1, t2))
    n_lo, n_hi = sfx_token_count(lo, lam), sfx_token_count(hi, lam)
    assert n_lo <= n_hi
    # floor bound, checked in exact rationals
    assert lam - Fraction(1) / hi <= Fraction(n_hi) / hi <= lam
    assert n_hi == math.floor(lam * hi)


def test_tag_dialogue_examples():
    a, b = CONTENT_VOCAB.id("a"), CONTENT_VOCAB.id("b")
    assert tag_dialogue([(0, g2p("a"))]).ids == (speaker_id(0), a)
    assert tag_dialogue([(0, g2p("a")), (1, g2p("b"))]).ids == (speaker_id(0), a, speaker_id(1), b)
    with pytest.raises(ValueError):
        tag_dialogue([])
    with pytest.raises(ValueError):
        tag_dialogue([(10, g2p("a"))])


@given(st.lists(st.tuples(st.integers(0, 9), st.text(alphabet="abc ", min_size=1, max_size=6)),
                min_size=1, max_size=5))
def test_tag_dialogue_preserves_tokens(utts):
    toks = tag_dialogue([(k, g2p(t)) for k, t in utts])
    non_speaker = sorted(i for i in toks.ids if i not in SPEAKER_IDS)
    assert non_speaker == sorted(i for _, t in utts for i in g2p(t).ids)
    assert sum(i in SPEAKER_IDS for i in toks.ids) == len(utts)
    assert toks.phoneme_count == len(non_speaker)


def test_content_tokens_invariants():
    with pytest.raises(ValueError):
        ContentTokens((CONTENT_VOCAB.id("a"),), "sfx")
    with pytest.raises(ValueError):
        ContentTokens((SFX_ID,), "speech")
    with pytest.raises(ValueError):
        ContentTokens((CONTENT_VOCAB.id("a"), speaker_id(0)), "speech")
    with pytest.raises(ValueError):
        ContentTokens((CONTENT_VOCAB.id("a"),), "video")


def test_embed_instruction_examples(params, vocab):
    table = params["instr_embed"]
    assert embed_instruction("", params, vocab).shape == (0, 8)
    e = embed_instruction("male happy", params, vocab)
    assert torch.equal(e, table[[vocab.id("male"), vocab.id("happy")]])
    assert torch.equal(embed_instruction("zzznotaword", params, vocab), table[[vocab.id(UNK)]])
    assert vocab.id(UNK) == 0


def test_build_condition_examples(params, vocab):
    empty = embed_instruction("", params, vocab)
    c = build_condition(empty, g2p("abc"), params)
    assert (c.instruction_length, c.content_length, len(c)) == (0, 3, 3)
    two = embed_instruction("male happy", params, vocab)
    c = build_condition(two, build_sfx_content(2.0, 4.5), params)
    assert len(c) == 11 and c.modality == "sfx"
    assert torch.equal(c.embeddings[:2], two)
    assert torch.equal(c.embeddings[2:], params["content_embed"][[SFX_ID] * 9])
    with pytest.raises(ValueError):
        build_condition(two, g2p(""), params)
    u = build_condition(two, g2p(""), params, unconditional=True)
    assert len(u) == 2


def test_embed_content_unknown_id():
    small = {"content_embed": torch.zeros(3, 4, dtype=torch.float64)}
    with pytest.raises(ValueError, match="not covered"):
        embed_content(g2p("z"), small)


@given(st.lists(st.sampled_from(["male", "female", "happy", "oops"]), max_size=6), words)
def test_condition_length_additive(ws, text):
    p = init_params(ModelConfig(d_text=8, d_audio=8, n_heads=2, head_dim=4), 0)
    v = instruction_vocabulary(["male", "female", "happy"])
    e = embed_instruction(" ".join(ws), p, v)
    c = build_condition(e, g2p(text), p, unconditional=True)
    assert len(c) == c.instruction_length + c.content_length == len(ws) + len(text)
    assert torch.isfinite(c.embeddings).all()
