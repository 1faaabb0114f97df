"""Learnable bandpass filters: exponential decay times a learnable rotary embedding.

A causal kernel ``h[s] = exp(lambda * s) * exp(i * theta * s)`` passes
frequencies near ``theta``; ``|lambda|`` sets the passband width.  The decay is
parameterised as ``lambda = -exp(lambda_hat)`` so it stays negative for every
finite parameter value.  Complex factors are realised as rotations of real
feature pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DomainError

__all__ = [
    "BandpassParams", "FrequencyResponse", "effective_decay", "rotate",
    "analytic_response", "numerical_response", "regime_classify", "default_omegas",
    "rope_frequencies", "decay_init",
]

ROPE_BASE = 10000.0


def rope_frequencies(head_dim: int, base: float = ROPE_BASE) -> np.ndarray:
    """Geometric rotary spacing ``base ** (-2j / head_dim)`` for j < head_dim/2."""
    if head_dim % 2:
        raise ConfigurationError(f"head_dim must be even, got {head_dim}")
    return base ** (-2.0 * np.arange(head_dim // 2) / head_dim)


def decay_init(num_heads: int, decay_range=(0.5, 0.99)) -> np.ndarray:
    """lambda_hat values whose per-step decays exp(lambda) are evenly spread over ``decay_range``."""
    lo, hi = decay_range
    per_step = np.linspace(lo, hi, num_heads) if num_heads > 1 else np.array([0.5 * (lo + hi)])
    return np.log(-np.log(per_step))


@dataclass
class BandpassParams:
    """Per-head decay parameters and per-pair rotation angles.

    ``lambda_hat`` has shape ``[num_heads]``; ``theta`` has shape
    ``[num_heads, head_dim // 2]`` (radians per token step).  ``use_decay`` and
    ``use_rope`` switch the two factors off for ablations.
    """

    lambda_hat: Tensor
    theta: Tensor
    head_dim: int
    num_heads: int
    use_decay: bool = True
    use_rope: bool = True
    decay_mode: str = "scale"

    def __post_init__(self):
        self.lambda_hat = ad.as_tensor(self.lambda_hat)
        self.theta = ad.as_tensor(self.theta)
        if self.head_dim % 2:
            raise ConfigurationError(f"head_dim must be even, got {self.head_dim}")
        if self.lambda_hat.shape != (self.num_heads,):
            raise ConfigurationError(
                f"lambda_hat must have shape ({self.num_heads},), got {self.lambda_hat.shape}")
        if self.theta.shape != (self.num_heads, self.head_dim // 2):
            raise ConfigurationError(
                f"theta must have shape ({self.num_heads}, {self.head_dim // 2}), got {self.theta.shape}")
        if self.decay_mode not in ("scale", "bias"):
            raise ConfigurationError(f"decay_mode must be 'scale' or 'bias', got {self.decay_mode!r}")

    @classmethod
    def init(cls, num_heads: int, head_dim: int, *, learn_decay: bool = True,
             learn_rope: bool = True, decay_range=(0.5, 0.99), **flags) -> "BandpassParams":
        lam = Tensor(decay_init(num_heads, decay_range), requires_grad=learn_decay)
        theta = Tensor(np.tile(rope_frequencies(head_dim), (num_heads, 1)), requires_grad=learn_rope)
        return cls(lam, theta, head_dim, num_heads, **flags)


def effective_decay(params: BandpassParams) -> Tensor:
    """Per-head decay rate ``lambda = -exp(lambda_hat)`` (differentiable)."""
    return ad.neg(ad.exp(params.lambda_hat))


def rotate(x, position, theta) -> Tensor:
    """Rotate feature pairs of ``x`` by ``theta * position``.

    ``position`` is a scalar or a 1-D array of positions that indexes axis -2 of
    ``x``.  ``theta`` holds one angle per pair (optionally with leading dims that
    broadcast against ``x``, e.g. per head).
    """
    x, theta = ad.as_tensor(x), ad.as_tensor(theta)
    if x.shape[-1] % 2:
        raise ConfigurationError(f"rotate needs an even feature dimension, got {x.shape[-1]}")
    if theta.shape[-1] != x.shape[-1] // 2:
        raise ConfigurationError(f"theta has {theta.shape[-1]} entries, expected {x.shape[-1] // 2}")
    pos = np.asarray(position, dtype=np.float64)
    if pos.ndim == 0:
        angles = ad.scale(theta, float(pos))
    else:
        # [..., L, 1] * [..., 1, m] -> [..., L, m]
        th = ad.reshape(theta, theta.shape[:-1] + (1, theta.shape[-1]))
        angles = ad.mul(pos[:, None], th)
    return ad.rotate_pairs(x, angles)


@dataclass
class FrequencyResponse:
    omegas: np.ndarray
    magnitudes: np.ndarray
    center: float
    bandwidth_param: float
    metadata: dict = field(default_factory=dict)

    @property
    def peak_omega(self) -> float:
        return float(self.omegas[int(np.argmax(self.magnitudes))])


def default_omegas(samples: int = 512) -> np.ndarray:
    """Uniform grid over [-pi, pi) with ``samples`` points (contains omega = 0)."""
    return -np.pi + 2.0 * np.pi * np.arange(samples) / samples


def analytic_response(lam: float, theta: float, omegas=None) -> FrequencyResponse:
    """Closed-form magnitude ``(1/|lam|) / sqrt(1 + ((omega - theta)/lam)^2)``."""
    if not lam < 0:
        raise DomainError(f"decay must be negative for a stable filter, got {lam}")
    omegas = default_omegas() if omegas is None else np.asarray(omegas, dtype=np.float64)
    mags = (1.0 / abs(lam)) / np.sqrt(1.0 + ((omegas - theta) / lam) ** 2)
    return FrequencyResponse(omegas, mags, float(theta), float(lam))


def numerical_response(lam: float, theta: float, kernel_len: int = 256, omegas=None) -> FrequencyResponse:
    """Transfer-function magnitude of the truncated discrete kernel by direct summation.

    ``h[s] = exp(lam*s) * exp(i*theta*s)`` for ``s < kernel_len``; the result is
    ``|sum_s h[s] exp(-i*omega*s)|``.  If the kernel tail ``exp(lam*kernel_len)``
    is not below 1e-8, ``metadata['truncated']`` is set and a warning string is
    attached.
    """
    if not lam < 0:
        raise DomainError(f"decay must be negative for a stable filter, got {lam}")
    omegas = default_omegas() if omegas is None else np.asarray(omegas, dtype=np.float64)
    s = np.arange(int(kernel_len), dtype=np.float64)
    env = np.exp(lam * s)
    phase = (theta - omegas)[:, None] * s[None, :]
    re = (env * np.cos(phase)).sum(axis=1)
    im = (env * np.sin(phase)).sum(axis=1)
    tail = float(np.exp(lam * kernel_len))
    meta = {"kernel_len": int(kernel_len), "tail": tail, "truncated": tail >= 1e-8}
    if meta["truncated"]:
        meta["warning"] = f"kernel tail exp(lambda*kernel_len)={tail:.3g} exceeds 1e-8"
    return FrequencyResponse(omegas, np.hypot(re, im), float(theta), float(lam), meta)


_REGIMES = {
    (False, False): "summation",
    (True, False): "low-pass",
    (False, True): "frequency-selector",
    (True, True): "bandpass",
}


def regime_classify(use_decay: bool, use_rope: bool) -> str:
    return _REGIMES[(bool(use_decay), bool(use_rope))]
