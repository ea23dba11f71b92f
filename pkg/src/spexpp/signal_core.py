"""Signal-level math: SI-SDR, SNR-controlled mixing, multi-scale fusion.

Metrics (``si_sdr``, ``sdr``, ``improvement``) work on numpy arrays in
float64. ``si_sdr_loss`` and ``batch_si_sdr`` are the differentiable torch
counterparts used for training. ``fuse_signals`` is plain arithmetic and
accepts either.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch

EPS = 1e-8
DB_CLAMP = 60.0


@dataclass(frozen=True)
class Waveform:
    """Mono time-domain signal."""

    samples: np.ndarray
    sample_rate: int = 8000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains NaN or Inf samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


ArrayLike = Union[Waveform, np.ndarray, Sequence[float]]


@dataclass
class FusionWeights:
    """Weights for the three decoded scales. Deliberately not normalised."""

    w1: float = 0.8
    w2: float = 0.1
    w3: float = 0.1

    def __post_init__(self):
        if not all(np.isfinite([self.w1, self.w2, self.w3])):
            raise ValueError("fusion weights must be finite")

    def as_tuple(self):
        return (self.w1, self.w2, self.w3)


def _as_array(x: ArrayLike) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def _check_pair(estimate: np.ndarray, reference: np.ndarray):
    if estimate.shape != reference.shape:
        raise ValueError(
            f"length mismatch: estimate {estimate.shape} vs reference {reference.shape}")
    if not np.any(reference):
        raise ValueError("reference has zero energy")


def _ratio_db(num: float, den: float) -> float:
    value = 20.0 * np.log10((num + EPS) / (den + EPS))
    return float(np.clip(value, -DB_CLAMP, DB_CLAMP))


def si_sdr(estimate: ArrayLike, reference: ArrayLike) -> float:
    """Scale-invariant SDR in dB, clamped to [-60, 60]."""
    est = _as_array(estimate)
    ref = _as_array(reference)
    _check_pair(est, ref)
    proj = (est @ ref) / (ref @ ref) * ref
    return _ratio_db(np.linalg.norm(proj), np.linalg.norm(proj - est))


def sdr(estimate: ArrayLike, reference: ArrayLike) -> float:
    """Plain SDR in dB (no scale projection), same guard and clamp as si_sdr."""
    est = _as_array(estimate)
    ref = _as_array(reference)
    _check_pair(est, ref)
    return _ratio_db(np.linalg.norm(ref), np.linalg.norm(ref - est))


def improvement(estimate: ArrayLike, mixture: ArrayLike, target: ArrayLike):
    """Return ``(sdri, si_sdri)`` of ``estimate`` over ``mixture``."""
    est, mix, tgt = _as_array(estimate), _as_array(mixture), _as_array(target)
    if not (est.shape == mix.shape == tgt.shape):
        raise ValueError(
            f"length mismatch: estimate {est.shape}, mixture {mix.shape}, target {tgt.shape}")
    return sdr(est, tgt) - sdr(mix, tgt), si_sdr(est, tgt) - si_sdr(mix, tgt)


def batch_si_sdr(estimate: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """SI-SDR over the last axis of two equal-shape tensors, differentiable."""
    if estimate.shape != reference.shape:
        raise ValueError(
            f"length mismatch: estimate {tuple(estimate.shape)} vs reference {tuple(reference.shape)}")
    energy = torch.sum(reference * reference, dim=-1, keepdim=True)
    if bool(torch.any(energy == 0)):
        raise ValueError("reference has zero energy")
    proj = torch.sum(estimate * reference, dim=-1, keepdim=True) / energy * reference
    num = torch.linalg.vector_norm(proj, dim=-1) + EPS
    den = torch.linalg.vector_norm(proj - estimate, dim=-1) + EPS
    return torch.clamp(20.0 * torch.log10(num / den), -DB_CLAMP, DB_CLAMP)


def si_sdr_loss(estimate, reference) -> torch.Tensor:
    """Negative SI-SDR, averaged over any leading batch axes."""
    est = estimate if torch.is_tensor(estimate) else torch.as_tensor(_as_array(estimate))
    ref = reference if torch.is_tensor(reference) else torch.as_tensor(_as_array(reference))
    return -batch_si_sdr(est, ref.to(est.dtype)).mean()


def fuse_signals(estimates, weights):
    """Weighted sum ``w1*s1 + w2*s2 + w3*s3`` of three equal-length signals.

    ``estimates`` may be Waveforms, numpy arrays or torch tensors; ``weights``
    a FusionWeights, a 3-sequence, or a 3-element tensor (kept differentiable).
    """
    if len(estimates) != 3:
        raise ValueError(f"expected three estimates, got {len(estimates)}")
    rate = None
    if all(isinstance(e, Waveform) for e in estimates):
        rates = {e.sample_rate for e in estimates}
        if len(rates) != 1:
            raise ValueError(f"sample rate mismatch: {sorted(rates)}")
        rate = rates.pop()
        estimates = [e.samples for e in estimates]
    shapes = {tuple(e.shape) for e in estimates}
    if len(shapes) != 1:
        raise ValueError(f"length mismatch between estimates: {sorted(shapes)}")
    if isinstance(weights, FusionWeights):
        weights = weights.as_tuple()
    w1, w2, w3 = weights[0], weights[1], weights[2]
    fused = w1 * estimates[0] + w2 * estimates[1] + w3 * estimates[2]
    if rate is not None:
        return Waveform(fused, rate)
    return fused


def power(x: ArrayLike) -> float:
    a = _as_array(x)
    return float(np.mean(a * a))


def mix_at_snr(target: ArrayLike, interferer: ArrayLike, snr_db: float,
               sample_rate: int = 8000):
    """Scale ``interferer`` to sit ``snr_db`` below ``target`` and add them.

    Returns ``(mixture, scaled_interferer, target)`` as Waveforms. If the
    mixture would clip, all three are scaled by the same gain so that the
    mixture peak is 1.0; the target is returned because it may be rescaled.
    """
    tgt = _as_array(target)
    itf = _as_array(interferer)
    if tgt.shape != itf.shape:
        raise ValueError(f"length mismatch: target {tgt.shape} vs interferer {itf.shape}")
    p_t, p_i = power(tgt), power(itf)
    if p_t == 0 or p_i == 0:
        raise ValueError("target and interferer must have nonzero energy")
    gain = np.sqrt(p_t / (p_i * 10.0 ** (snr_db / 10.0)))
    itf = gain * itf
    mix = tgt + itf
    peak = np.max(np.abs(mix))
    if peak > 1.0:
        mix, itf, tgt = mix / peak, itf / peak, tgt / peak
    return Waveform(mix, sample_rate), Waveform(itf, sample_rate), Waveform(tgt, sample_rate)


def snr_db(signal: ArrayLike, noise: ArrayLike) -> float:
    return 10.0 * np.log10(power(signal) / power(noise))
