"""Oracle metrics: control accuracy, duration error, latent Frechet distance, codec error."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from sonate.codec import CodecConfig, LatentSequence, decode, encode, frame_count
from sonate.syndata import ATTRIBUTE_CHANNELS, ATTRIBUTES, DEFAULT_SCHEMA, AttributeSchema


def _data(latent) -> np.ndarray:
    return np.asarray(latent.data if isinstance(latent, LatentSequence) else latent, dtype=np.float64)


def oracle_classify(latent, modality: str, schema: AttributeSchema = DEFAULT_SCHEMA) -> dict[str, str]:
    """Nearest-signature decode of every attribute of ``modality``.

    The latent is mean-pooled over frames and projected onto each attribute's
    channel pair; ties go to the value listed first in the schema.
    """
    z = _data(latent)
    if z.ndim != 2 or z.shape[1] != schema.latent_dim:
        raise ValueError(f"latent shape {z.shape} does not match schema dimension {schema.latent_dim}")
    pooled = z.mean(axis=0)
    out = {}
    for attr, values in ATTRIBUTES[modality].items():
        proj = pooled[list(ATTRIBUTE_CHANNELS[attr])]
        dist = np.linalg.norm(schema.signatures(attr) - proj, axis=1)
        out[attr] = values[int(np.argmin(dist))]
    return out


def binomial_half_width(p: float, n: int, z: float = 1.96) -> float:
    return z * math.sqrt(p * (1 - p) / n)


def control_accuracy(samples: Sequence[tuple[dict, object]], modality: str,
                     schema: AttributeSchema = DEFAULT_SCHEMA) -> dict[str, float]:
    """Fraction of samples whose decoded attribute equals the requested one."""
    if not samples:
        raise ValueError("control accuracy needs at least one sample")
    hits = {a: 0 for a in ATTRIBUTES[modality]}
    for requested, latent in samples:
        got = oracle_classify(latent, modality, schema)
        for a in hits:
            hits[a] += got[a] == requested[a]
    return {a: h / len(samples) for a, h in hits.items()}


def duration_error(samples: Sequence[tuple[float, int]], codec: CodecConfig) -> tuple[float, int]:
    """Mean and max ``|frames - frame_count(T)|`` over ``(T, frames)`` pairs."""
    if not samples:
        raise ValueError("duration error needs at least one sample")
    dev = [abs(int(n) - frame_count(t, codec)) for t, n in samples]
    return sum(dev) / len(dev), max(dev)


def pooled_features(latents: Iterable) -> np.ndarray:
    return np.stack([_data(z).mean(axis=0) for z in latents])


def fit_gaussian(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if len(features) < 2:
        raise ValueError(f"need at least 2 samples to fit a Gaussian, got {len(features)}")
    return features.mean(axis=0), np.atleast_2d(np.cov(features, rowvar=False))


def _psd_sqrt(m: np.ndarray) -> tuple[np.ndarray, int]:
    w, v = np.linalg.eigh((m + m.T) / 2)
    clamped = int(np.sum(w < 0))
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T, clamped


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> tuple[float, int]:
    """Frechet distance between two Gaussians and the number of clamped eigenvalues.

    ``tr(sqrt(A B))`` is evaluated as ``tr(sqrt(sqrt(A) B sqrt(A)))``, whose
    argument is symmetric; negative eigenvalues from round-off are clamped to 0.
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    root_a, c1 = _psd_sqrt(cov_a)
    w = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    c2 = int(np.sum(w < 0))
    tr_cross = np.sqrt(np.clip(w, 0, None)).sum()
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_cross)
    return max(d, 0.0), c1 + c2


def latent_frechet(set_a: Sequence, set_b: Sequence) -> float:
    """Frechet distance between Gaussian fits of per-sample frame-mean features."""
    mu_a, cov_a = fit_gaussian(pooled_features(set_a))
    mu_b, cov_b = fit_gaussian(pooled_features(set_b))
    return frechet_distance(mu_a, cov_a, mu_b, cov_b)[0]


def recon_error(waveforms: Sequence, codec: CodecConfig) -> float:
    if not len(waveforms):
        raise ValueError("recon error needs at least one waveform")
    errs = []
    for x in waveforms:
        x = np.asarray(x, dtype=np.float64)
        errs.append(np.mean((decode(encode(x, codec), codec) - x) ** 2))
    return float(np.mean(errs))


@dataclass
class Metric:
    value: float
    count: int
    half_width: float = 0.0


@dataclass
class EvalReport:
    run_id: str
    metrics: dict[str, Metric] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def add(self, name: str, value: float, count: int, half_width: float = 0.0) -> None:
        if count < 1:
            raise ValueError(f"metric {name} needs a positive sample count")
        self.metrics[name] = Metric(float(value), int(count), float(half_width))

    def add_accuracies(self, modality: str, acc: dict[str, float], n: int) -> None:
        for attr, p in acc.items():
            self.add(f"acc.{modality}.{attr}", p, n, binomial_half_width(p, n))

    def kv(self) -> dict[str, str]:
        out = {"run": self.run_id}
        for name, m in self.metrics.items():
            out[name] = repr(m.value)
            out[name + ".n"] = str(m.count)
            if m.half_width:
                out[name + ".hw"] = repr(m.half_width)
        return out

    def dumps(self) -> str:
        lines = [f"evaluation report: {self.run_id}", ""]
        width = max((len(n) for n in self.metrics), default=0)
        for name, m in self.metrics.items():
            hw = f" +/- {m.half_width:.3f}" if m.half_width else ""
            lines.append(f"  {name:<{width}}  {m.value:.4f}{hw}  (n={m.count})")
        lines += [f"  note: {n}" for n in self.notes]
        lines += ["", "[metrics]"]
        lines += [f"{k}={v}" for k, v in self.kv().items()]
        return "\n".join(lines) + "\n"


def parse_kv_block(text: str) -> dict[str, str]:
    """The ``key=value`` lines following the ``[metrics]`` marker of a report."""
    out, on = {}, False
    for line in text.splitlines():
        if line.strip() == "[metrics]":
            on = True
            continue
        if on and "=" in line:
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def comparison_table(reports: dict[str, EvalReport]) -> str:
    """Join per-mode reports into one table: one row per metric, one column per mode."""
    modes = list(reports)
    names = []
    for r in reports.values():
        names += [n for n in r.metrics if n not in names]
    width = max([len(n) for n in names] + [6])
    col = max([len(m) for m in modes] + [10])
    lines = ["metric".ljust(width) + "".join(f"  {m:>{col}}" for m in modes)]
    for n in names:
        cells = []
        for m in modes:
            v = reports[m].metrics.get(n)
            cells.append(f"  {v.value:>{col}.4f}" if v else f"  {'-':>{col}}")
        lines.append(n.ljust(width) + "".join(cells))
    return "\n".join(lines) + "\n"
