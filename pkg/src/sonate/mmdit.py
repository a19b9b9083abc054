"""Dual-stream multimodal diffusion transformer predicting a latent velocity field.

The model is written functionally: parameters are a flat ``dict`` of named
tensors (see :func:`param_shapes`) and every layer is a plain function of its
inputs and that dict. This keeps checkpointing, the hand-written optimizer and
finite-difference gradient checks trivial.

Layout of one forward pass::

    text  = C_text @ text_in            audio = x_t @ audio_in
    for each joint layer:
        per-stream self-attention  ->  joint attention over (text || audio)
        ->  per-stream feed-forward
    drop the text stream
    for each single layer: audio self-attention -> feed-forward
    velocity = adaLN(audio) @ out        (out is zero at init)

Timestep conditioning enters only the audio stream, as adaptive scale/shift
on the RMS-normalised input of every audio sublayer. Text sublayers use RMS
normalisation with a learned gain.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from sonate.codec import LatentSequence
from sonate.textcond import CONTENT_VOCAB, ConditionSequence

Params = dict[str, torch.Tensor]

DTYPE = torch.float64
RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 16
    d_text: int = 32
    d_audio: int = 32
    n_joint: int = 2
    n_single: int = 1
    n_heads: int = 4
    head_dim: int = 8
    ff_dim: int = 64
    rope_base: float = 10000.0
    time_freqs: int = 8
    instr_vocab_size: int = 40
    content_vocab_size: int = len(CONTENT_VOCAB)
    freeze_instruction: bool = False

    def __post_init__(self):
        counts = dict(
            latent_dim=self.latent_dim, d_text=self.d_text, d_audio=self.d_audio,
            n_joint=self.n_joint, n_single=self.n_single, n_heads=self.n_heads,
            head_dim=self.head_dim, ff_dim=self.ff_dim, time_freqs=self.time_freqs,
            instr_vocab_size=self.instr_vocab_size, content_vocab_size=self.content_vocab_size,
        )
        for name, v in counts.items():
            if v < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
        if self.n_heads * self.head_dim != self.d_audio:
            raise ValueError(
                f"n_heads * head_dim = {self.n_heads * self.head_dim} must equal "
                f"d_audio = {self.d_audio}"
            )
        if self.head_dim % 2:
            raise ValueError(f"head_dim must be even for rotary encoding, got {self.head_dim}")


def _attn_shapes(d):
    return {f"{n}": (d, d) for n in ("wq", "wk", "wv", "wo")}


def _ff_shapes(d, ff):
    return {"w1": (d, ff), "b1": (ff,), "w2": (ff, d), "b2": (d,)}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in initialisation order."""
    d = cfg.d_audio
    shapes: dict[str, tuple[int, ...]] = {
        "instr_embed": (cfg.instr_vocab_size, cfg.d_text),
        "content_embed": (cfg.content_vocab_size, cfg.d_text),
        "text_in.w": (cfg.d_text, d),
        "text_in.b": (d,),
        "audio_in.w": (cfg.latent_dim, d),
        "audio_in.b": (d,),
        "time.w1": (2 * cfg.time_freqs, d),
        "time.b1": (d,),
        "time.w2": (d, d),
        "time.b2": (d,),
    }
    for i in range(cfg.n_joint):
        pre = f"joint.{i}"
        for stream in ("text", "audio"):
            for block in ("self", "joint"):
                for k, s in _attn_shapes(d).items():
                    shapes[f"{pre}.{stream}.{block}.{k}"] = s
            for k, s in _ff_shapes(d, cfg.ff_dim).items():
                shapes[f"{pre}.{stream}.ff.{k}"] = s
        for block in ("self", "joint", "ff"):
            shapes[f"{pre}.text.norm_{block}"] = (d,)
        shapes[f"{pre}.audio.mod.w"] = (d, 6 * d)
        shapes[f"{pre}.audio.mod.b"] = (6 * d,)
    for i in range(cfg.n_single):
        pre = f"single.{i}"
        for k, s in _attn_shapes(d).items():
            shapes[f"{pre}.self.{k}"] = s
        for k, s in _ff_shapes(d, cfg.ff_dim).items():
            shapes[f"{pre}.ff.{k}"] = s
        shapes[f"{pre}.mod.w"] = (d, 4 * d)
        shapes[f"{pre}.mod.b"] = (4 * d,)
    shapes["out.mod.w"] = (d, 2 * d)
    shapes["out.mod.b"] = (2 * d,)
    shapes["out.w"] = (d, cfg.latent_dim)
    shapes["out.b"] = (cfg.latent_dim,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int) -> Params:
    """Gaussian weights with std 1/sqrt(fan_in); zero biases, unit norm gains.

    The velocity head (``out.w``, ``out.b``) starts at zero, so a fresh model
    predicts a zero field everywhere.
    """
    gen = torch.Generator().manual_seed(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("out.w", "out.b") or leaf.startswith("b"):
            t = torch.zeros(shape, dtype=DTYPE)
        elif leaf.startswith("norm_"):
            t = torch.ones(shape, dtype=DTYPE)
        elif name.endswith("_embed"):
            t = torch.randn(shape, generator=gen, dtype=DTYPE)
        else:
            t = torch.randn(shape, generator=gen, dtype=DTYPE) / math.sqrt(shape[0])
        params[name] = t
    return params


def sub(params: Params, prefix: str) -> Params:
    """View of the tensors under ``prefix.`` with the prefix stripped."""
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# ---------------------------------------------------------------- primitives


def rms_norm(x: torch.Tensor) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + RMS_EPS)


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def rope_apply(x: torch.Tensor, positions, base: float = 10000.0) -> torch.Tensor:
    """Rotate consecutive coordinate pairs of ``x`` by ``pos * base**(-2k/dim)``.

    ``x`` has shape ``(..., L, dim)``; ``positions`` broadcasts against
    ``(..., L)``.
    """
    dim = x.shape[-1]
    if dim % 2:
        raise ValueError(f"rotary encoding needs an even head dimension, got {dim}")
    positions = torch.as_tensor(positions, dtype=x.dtype)
    if torch.any(positions < 0):
        raise ValueError("rotary positions must be >= 0")
    inv_freq = base ** (-torch.arange(0, dim, 2, dtype=x.dtype) / dim)
    angle = positions.unsqueeze(-1) * inv_freq
    cos, sin = torch.cos(angle), torch.sin(angle)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    return torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1).flatten(-2)


def _heads(x, n_heads):
    b, l, d = x.shape
    return x.view(b, l, n_heads, d // n_heads).transpose(1, 2)


def _merge(x):
    b, h, l, hd = x.shape
    return x.transpose(1, 2).reshape(b, l, h * hd)


def attention(q, k, v, key_mask=None):
    """Scaled dot-product attention over ``(B, H, L, hd)`` inputs, no causal mask.

    Padded keys (``key_mask`` False) get the most negative finite score, which
    underflows to an exact zero weight while keeping fully padded rows finite.
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], torch.finfo(scores.dtype).min)
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


def _self_attention(h, p, positions, mask, cfg, probe=None):
    q = rope_apply(_heads(h @ p["wq"], cfg.n_heads), positions[:, None], cfg.rope_base)
    k = rope_apply(_heads(h @ p["wk"], cfg.n_heads), positions[:, None], cfg.rope_base)
    out, w = attention(q, k, _heads(h @ p["wv"], cfg.n_heads), mask)
    if probe is not None:
        probe.append(w)
    return _merge(out) @ p["wo"]


def _feed_forward(h, p):
    return F.silu(h @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]


def _positions(mask):
    b, l = mask.shape
    return torch.arange(l, dtype=DTYPE).expand(b, l)


def _full_mask(x):
    return torch.ones(x.shape[:2], dtype=torch.bool)


# ---------------------------------------------------------------- layers


def timestep_embed(t, params: Params, cfg: ModelConfig) -> torch.Tensor:
    """Sinusoidal features of ``t`` at geometric frequencies 1..1000, then a 2-layer MLP."""
    t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
    if torch.any((t < 0) | (t > 1)):
        raise ValueError(f"timestep must lie in [0, 1], got {t.tolist()}")
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), cfg.time_freqs, dtype=DTYPE))
    angle = t[:, None] * freqs
    feats = torch.cat([torch.sin(angle), torch.cos(angle)], dim=-1)
    h = F.silu(feats @ params["time.w1"] + params["time.b1"])
    return h @ params["time.w2"] + params["time.b2"]


def joint_layer(text_h, audio_h, t_emb, p: Params, cfg: ModelConfig,
                text_mask=None, audio_mask=None, probe=None):
    """One joint block; ``p`` holds the layer's tensors (see :func:`sub`).

    Inputs are batched ``(B, L, d)``. Within per-stream self-attention each
    stream counts positions from 0; joint attention uses the concatenated
    index, so audio frame ``f`` of a sample with ``L_T`` real text tokens sits
    at position ``L_T + f``.
    """
    if text_h.shape[-1] != cfg.d_audio or audio_h.shape[-1] != cfg.d_audio:
        raise ValueError(
            f"stream widths {text_h.shape[-1]}, {audio_h.shape[-1]} != d_audio {cfg.d_audio}"
        )
    text_mask = _full_mask(text_h) if text_mask is None else text_mask
    audio_mask = _full_mask(audio_h) if audio_mask is None else audio_mask
    tp, ap = sub(p, "text"), sub(p, "audio")
    mods = (F.silu(t_emb) @ ap["mod.w"] + ap["mod.b"]).chunk(6, dim=-1)
    pos_t, pos_a = _positions(text_mask), _positions(audio_mask)

    # (1) intra-modal self-attention
    text_h = text_h + _self_attention(
        rms_norm(text_h) * tp["norm_self"], sub(tp, "self"), pos_t, text_mask, cfg, probe)
    audio_h = audio_h + _self_attention(
        modulate(rms_norm(audio_h), mods[0], mods[1]), sub(ap, "self"), pos_a, audio_mask, cfg, probe)

    # (2) joint attention over the concatenated sequence
    ht = rms_norm(text_h) * tp["norm_joint"]
    ha = modulate(rms_norm(audio_h), mods[2], mods[3])
    qkv = [
        torch.cat([ht @ tp[f"joint.{n}"], ha @ ap[f"joint.{n}"]], dim=1)
        for n in ("wq", "wk", "wv")
    ]
    text_len = text_mask.sum(1, keepdim=True).to(DTYPE)
    pos = torch.cat([pos_t, pos_a + text_len], dim=1)[:, None]
    q = rope_apply(_heads(qkv[0], cfg.n_heads), pos, cfg.rope_base)
    k = rope_apply(_heads(qkv[1], cfg.n_heads), pos, cfg.rope_base)
    mask = torch.cat([text_mask, audio_mask], dim=1)
    out, w = attention(q, k, _heads(qkv[2], cfg.n_heads), mask)
    if probe is not None:
        probe.append(w)
    out = _merge(out)
    lt = text_h.shape[1]
    text_h = text_h + out[:, :lt] @ tp["joint.wo"]
    audio_h = audio_h + out[:, lt:] @ ap["joint.wo"]

    # (3) per-stream feed-forward
    text_h = text_h + _feed_forward(rms_norm(text_h) * tp["norm_ff"], sub(tp, "ff"))
    audio_h = audio_h + _feed_forward(modulate(rms_norm(audio_h), mods[4], mods[5]), sub(ap, "ff"))
    return text_h, audio_h


def single_layer(audio_h, t_emb, p: Params, cfg: ModelConfig, audio_mask=None,
                 positions=None, probe=None):
    if audio_h.shape[-1] != cfg.d_audio:
        raise ValueError(f"audio width {audio_h.shape[-1]} != d_audio {cfg.d_audio}")
    audio_mask = _full_mask(audio_h) if audio_mask is None else audio_mask
    positions = _positions(audio_mask) if positions is None else torch.as_tensor(positions, dtype=DTYPE)
    mods = (F.silu(t_emb) @ p["mod.w"] + p["mod.b"]).chunk(4, dim=-1)
    audio_h = audio_h + _self_attention(
        modulate(rms_norm(audio_h), mods[0], mods[1]), sub(p, "self"), positions, audio_mask, cfg, probe)
    return audio_h + _feed_forward(modulate(rms_norm(audio_h), mods[2], mods[3]), sub(p, "ff"))


def _check_finite(x, where):
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite activation after {where}")


def forward_batch(params: Params, cfg: ModelConfig, text_emb, text_mask, x_t, audio_mask, t):
    """Velocity for a padded batch.

    text_emb: (B, L_T, d_text), x_t: (B, L_A, latent_dim), masks are bool
    (B, L) with True on real positions, t: (B,). Returns (B, L_A, latent_dim).
    """
    if x_t.shape[-1] != cfg.latent_dim:
        raise ValueError(f"latent has {x_t.shape[-1]} channels, model expects {cfg.latent_dim}")
    if text_emb.shape[-1] != cfg.d_text:
        raise ValueError(f"condition width {text_emb.shape[-1]} != d_text {cfg.d_text}")
    t_emb = timestep_embed(t, params, cfg)
    text_h = text_emb @ params["text_in.w"] + params["text_in.b"]
    audio_h = x_t @ params["audio_in.w"] + params["audio_in.b"]
    for i in range(cfg.n_joint):
        text_h, audio_h = joint_layer(text_h, audio_h, t_emb, sub(params, f"joint.{i}"), cfg,
                                      text_mask, audio_mask)
        _check_finite(audio_h, f"joint layer {i}")
        _check_finite(text_h, f"joint layer {i}")
    for i in range(cfg.n_single):
        audio_h = single_layer(audio_h, t_emb, sub(params, f"single.{i}"), cfg, audio_mask)
        _check_finite(audio_h, f"single layer {i}")
    shift, scale = (F.silu(t_emb) @ params["out.mod.w"] + params["out.mod.b"]).chunk(2, dim=-1)
    return modulate(rms_norm(audio_h), shift, scale) @ params["out.w"] + params["out.b"]


def pad_conditions(conds: list[ConditionSequence], width: int):
    """Stack variable-length conditions into ``(B, L_T, width)`` plus a bool mask."""
    lt = max((len(c) for c in conds), default=0)
    emb = torch.stack([F.pad(c.embeddings.to(DTYPE), (0, 0, 0, lt - len(c))) for c in conds])
    mask = torch.arange(lt)[None, :] < torch.tensor([len(c) for c in conds])[:, None]
    return emb, mask


def forward(c_text: ConditionSequence, x_t, t, params: Params, cfg: ModelConfig) -> torch.Tensor:
    """Velocity ``(L_A, latent_dim)`` for one sample."""
    if isinstance(x_t, LatentSequence):
        x_t = x_t.data
    x = torch.as_tensor(x_t, dtype=DTYPE)
    if x.ndim != 2:
        raise ValueError(f"x_t must be (frames, channels), got shape {tuple(x.shape)}")
    emb, mask = pad_conditions([c_text], cfg.d_text)
    audio_mask = torch.ones(1, x.shape[0], dtype=torch.bool)
    t = torch.as_tensor([float(t)], dtype=DTYPE)
    return forward_batch(params, cfg, emb, mask, x[None], audio_mask, t)[0]


VelocityFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SNCK"
CKPT_VERSION = 1


META = "meta."


def save_checkpoint(path, params: Params, digest: str, meta: dict | None = None) -> None:
    """Write named float64 tensors behind a ``SNCK`` header bound to ``digest``.

    ``meta`` scalars (seed, lambda, ...) are stored as 0-d tensors named ``meta.<key>``.
    """
    d = digest.encode("ascii")
    tensors = dict(params)
    for k, v in (meta or {}).items():
        tensors[META + k.removeprefix(META)] = torch.tensor(float(v), dtype=DTYPE)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(d)))
        f.write(d)
        f.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            nb = name.encode("utf-8")
            arr = t.detach().cpu().numpy().astype("<f8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path, expected_digest: str | None = None, with_meta: bool = False):
    """Returns ``(params, digest)``, or ``(params, digest, meta)`` when ``with_meta``."""
    raw = Path(path).read_bytes()
    off = 0

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, raw, off)
        off += struct.calcsize(fmt)
        return vals

    try:
        magic, version, dlen = take("<4sII")
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        digest = raw[off: off + dlen].decode("ascii")
        off += dlen
        if expected_digest is not None and digest != expected_digest:
            raise ValueError(
                f"{path}: config digest mismatch (checkpoint {digest[:12]}, "
                f"config {expected_digest[:12]})"
            )
        (n,) = take("<I")
        params: Params = {}
        for _ in range(n):
            (nlen,) = take("<I")
            name = raw[off: off + nlen].decode("utf-8")
            off += nlen
            (rank,) = take("<I")
            dims = take(f"<{rank}I")
            size = math.prod(dims)
            if off + 8 * size > len(raw):
                raise struct.error(f"tensor {name} runs past the end of the file")
            arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(dims)
            off += 8 * size
            params[name] = torch.from_numpy(arr.copy())
    except struct.error as e:
        raise ValueError(f"{path}: truncated checkpoint") from e
    meta = {k[len(META):]: float(params.pop(k)) for k in [k for k in params if k.startswith(META)]}
    return (params, digest, meta) if with_meta else (params, digest)
