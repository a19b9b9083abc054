"""Conditional flow matching: linear path, masked CFM loss, Adam, Euler sampler.

Convention: ``x0`` is standard Gaussian noise, ``x1`` the clean latent,
``x_t = t*x1 + (1-t)*x0`` and the regression target is ``x1 - x0``. Sampling
integrates the learned field from t=0 (noise) to t=1 (data).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
import torch

from sonate import mmdit
from sonate._num import as_fraction
from sonate.codec import CodecConfig, LatentSequence, frame_count
from sonate.mmdit import DTYPE, ModelConfig, Params
from sonate.textcond import ConditionSequence, ContentTokens, build_condition


def interpolate(x0, x1, t):
    x0 = np.asarray(x0, dtype=np.float64) if not torch.is_tensor(x0) else x0
    x1 = np.asarray(x1, dtype=np.float64) if not torch.is_tensor(x1) else x1
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    if not 0 <= t <= 1:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t * x1 + (1 - t) * x0


@dataclass
class FlowBatch:
    """A padded batch: ``x1`` is (B, F_max, C); frames past ``frame_counts[b]`` are padding."""

    x1: np.ndarray
    frame_counts: np.ndarray
    instruction_ids: list[list[int]]
    contents: list[ContentTokens]
    unconditional: bool = False

    def __post_init__(self):
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        self.frame_counts = np.asarray(self.frame_counts, dtype=np.int64)
        b = self.x1.shape[0]
        if not (len(self.frame_counts) == len(self.instruction_ids) == len(self.contents) == b):
            raise ValueError("batch fields disagree on the batch size")
        if np.any(self.frame_counts < 1) or np.any(self.frame_counts > self.x1.shape[1]):
            raise ValueError(f"frame counts {self.frame_counts.tolist()} do not fit x1 {self.x1.shape}")
        if not np.all(np.isfinite(self.x1)):
            raise ValueError("x1 contains non-finite values")

    def __len__(self):
        return self.x1.shape[0]

    @property
    def frame_mask(self) -> np.ndarray:
        return np.arange(self.x1.shape[1])[None, :] < self.frame_counts[:, None]

    def reordered(self, order) -> "FlowBatch":
        order = list(order)
        return FlowBatch(self.x1[order], self.frame_counts[order],
                         [self.instruction_ids[i] for i in order],
                         [self.contents[i] for i in order], self.unconditional)


def collate(latents: Sequence[np.ndarray], instruction_ids, contents) -> FlowBatch:
    """Zero-pad variable-length latents into one batch."""
    counts = np.array([len(z) for z in latents])
    x1 = np.zeros((len(latents), counts.max(), latents[0].shape[1]))
    for b, z in enumerate(latents):
        x1[b, : len(z)] = z
    return FlowBatch(x1, counts, [list(i) for i in instruction_ids], list(contents))


def conditions(params: Params, instruction_ids, contents, unconditional=False) -> list[ConditionSequence]:
    table = params["instr_embed"]
    return [
        build_condition(table.index_select(0, torch.tensor(ids, dtype=torch.long)), c, params,
                        unconditional=unconditional)
        for ids, c in zip(instruction_ids, contents)
    ]


def model_velocity(params: Params, cfg: ModelConfig, conds: list[ConditionSequence],
                   audio_mask) -> Callable:
    """Close over a batch of conditions; returns ``v(x_t, t)`` on padded tensors."""
    text_emb, text_mask = mmdit.pad_conditions(conds, cfg.d_text)
    audio_mask = torch.as_tensor(audio_mask)

    def v(x_t, t):
        return mmdit.forward_batch(params, cfg, text_emb, text_mask, x_t, audio_mask, t)

    return v


def draw_path(batch: FlowBatch, rng: np.random.Generator):
    """Per-sample ``t ~ U(0,1)`` and noise ``x0`` drawn at each sample's own length."""
    b, fmax, c = batch.x1.shape
    t = rng.uniform(size=b)
    x0 = np.zeros_like(batch.x1)
    for i, n in enumerate(batch.frame_counts):
        x0[i, :n] = rng.standard_normal((n, c))
    return t, x0


def cfm_loss(params: Params, cfg: ModelConfig, batch: FlowBatch, rng: np.random.Generator,
             velocity: Callable | None = None):
    """Masked flow-matching loss. Returns ``(loss, per_sample)`` tensors.

    Each sample's loss is the mean squared error over its real frames and all
    channels; the batch loss is the mean over samples. ``velocity`` replaces
    the network with a test double ``(x_t, t, x0, x1) -> v``.
    """
    t_np, x0_np = draw_path(batch, rng)
    x1 = torch.as_tensor(batch.x1, dtype=DTYPE)
    x0 = torch.as_tensor(x0_np, dtype=DTYPE)
    t = torch.as_tensor(t_np, dtype=DTYPE)
    x_t = t[:, None, None] * x1 + (1 - t[:, None, None]) * x0
    mask = torch.as_tensor(batch.frame_mask)
    if velocity is None:
        conds = conditions(params, batch.instruction_ids, batch.contents, batch.unconditional)
        v = model_velocity(params, cfg, conds, mask)(x_t, t)
    else:
        v = velocity(x_t, t, x0, x1)
    sq = (v - (x1 - x0)).pow(2).sum(-1)
    sq = torch.where(mask, sq, torch.zeros((), dtype=DTYPE))
    denom = torch.as_tensor(batch.frame_counts * x1.shape[-1], dtype=DTYPE)
    per_sample = sq.sum(-1) / denom
    bad = ~torch.isfinite(per_sample)
    if bad.any():
        raise FloatingPointError(f"non-finite loss for sample {int(bad.nonzero()[0])}")
    return per_sample.mean(), per_sample


@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_update(params: Params, grads: dict[str, torch.Tensor], opt: OptimizerState):
    """One bias-corrected Adam step on the tensors named in ``grads``.

    Returns new ``(params, opt)``; inputs are left untouched.
    """
    b1, b2 = opt.betas
    step = opt.step + 1
    new_params, m_new, v_new = dict(params), dict(opt.m), dict(opt.v)
    for name, g in grads.items():
        p = params[name]
        m = b1 * opt.m.get(name, torch.zeros_like(p)) + (1 - b1) * g
        v = b2 * opt.v.get(name, torch.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        new_params[name] = p - opt.lr * m_hat / (torch.sqrt(v_hat) + opt.eps)
        m_new[name], v_new[name] = m, v
    return new_params, OptimizerState(opt.lr, opt.betas, opt.eps, step, m_new, v_new)


def frozen_names(cfg: ModelConfig) -> set[str]:
    return {"instr_embed"} if cfg.freeze_instruction else set()


def loss_and_grads(params: Params, cfg: ModelConfig, batch: FlowBatch, rng: np.random.Generator):
    frozen = frozen_names(cfg)
    leaves = {k: v.detach().requires_grad_(k not in frozen) for k, v in params.items()}
    loss, per_sample = cfm_loss(leaves, cfg, batch, rng)
    names = [k for k in leaves if k not in frozen]
    grads = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    out = {}
    for k, g in zip(names, grads):
        g = torch.zeros_like(leaves[k]) if g is None else g
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for tensor {k}")
        out[k] = g
    return loss.detach(), per_sample.detach(), out


def train_step(params: Params, opt: OptimizerState, batch: FlowBatch, rng: np.random.Generator,
               cfg: ModelConfig):
    """Adam step on the CFM loss. Returns ``(params', opt', loss)``."""
    loss, _, grads = loss_and_grads(params, cfg, batch, rng)
    params, opt = adam_update({k: v.detach() for k, v in params.items()}, grads, opt)
    return params, opt, float(loss)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 32
    seed: int = 0
    guidance: float | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.guidance is not None:
            raise NotImplementedError("classifier-free guidance is not supported")


def euler_integrate(velocity: Callable, z0, steps: int):
    """Left-endpoint Euler from t=0 to t=1: ``z += v(k/steps, z) / steps``."""
    z = z0
    dt = 1.0 / steps
    for k in range(steps):
        z = z + dt * velocity(k / steps, z)
        finite = torch.isfinite(z).all() if torch.is_tensor(z) else np.isfinite(z).all()
        if not finite:
            raise FloatingPointError(f"non-finite sampler state at step {k}")
    return z


def initial_noise(seed: int, index: int, n_frames: int, channels: int) -> np.ndarray:
    return np.random.default_rng([seed, index]).standard_normal((n_frames, channels))


@torch.no_grad()
def sample_batch(params: Params, cfg: ModelConfig, conds: Sequence[ConditionSequence],
                 n_frames: Sequence[int], scfg: SamplerConfig) -> list[np.ndarray]:
    """Generate one latent per condition; sample ``i`` starts from noise seeded ``(seed, i)``."""
    n_frames = [int(n) for n in n_frames]
    if any(n < 1 for n in n_frames):
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    fmax = max(n_frames)
    z0 = np.zeros((len(conds), fmax, cfg.latent_dim))
    for i, n in enumerate(n_frames):
        z0[i, :n] = initial_noise(scfg.seed, i, n, cfg.latent_dim)
    mask = torch.as_tensor(np.arange(fmax)[None, :] < np.array(n_frames)[:, None])
    v = model_velocity(params, cfg, list(conds), mask)
    b = len(conds)

    def field_(t, z):
        return v(z, torch.full((b,), t, dtype=DTYPE))

    z = euler_integrate(field_, torch.as_tensor(z0, dtype=DTYPE), scfg.steps)
    return [z[i, :n].numpy().copy() for i, n in enumerate(n_frames)]


def sample(params: Params, cfg: ModelConfig, c_text: ConditionSequence, n_frames: int,
           scfg: SamplerConfig, frame_rate=Fraction(44100, 64)) -> LatentSequence:
    return LatentSequence(sample_batch(params, cfg, [c_text], [n_frames], scfg)[0], frame_rate)


def sfx_frames_for_tokens(n_tokens: int, lam, codec: CodecConfig) -> int:
    """Latent length implied by a run of ``n_tokens`` [SFX] tokens at rate ``lam``."""
    if n_tokens < 1:
        raise ValueError(f"n_tokens must be >= 1, got {n_tokens}")
    if lam <= 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    return frame_count(Fraction(n_tokens) / as_fraction(lam), codec)
