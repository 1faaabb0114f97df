"""Causal sequence operators with learnable bandpass filters.

Three operators share one filter (decay ``lambda`` times rotation ``theta``):

* :func:`defocus_vit_attention` -- softmax attention over ``s <= t``;
* :func:`defocus_retnet_attention` / :func:`defocus_retnet_recurrent` -- linear
  attention with exponential decay, as a materialised weight matrix and as a
  state recurrence;
* :func:`defocus_mamba_scan` -- a selective scan whose state is rotated by
  ``theta`` every step on top of the input-dependent decay ``exp(A * delta)``.

All tensors are laid out ``[batch, heads, seq, head_dim]`` for the attention
forms and ``[batch, seq, channels]`` for the scan.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bandpass import BandpassParams, effective_decay, rotate
from .errors import ConfigurationError, ContractError, NumericalError, ResourceError

__all__ = [
    "SequenceBatch", "ScanState", "MambaParams",
    "defocus_vit_attention", "defocus_retnet_attention", "defocus_retnet_recurrent",
    "zoh_gain", "zoh_discretize", "selective_scan", "linear_recurrence", "defocus_mamba_scan",
    "group_rms_norm", "materialize_attention_matrix", "softplus_inverse",
    "MAX_MATERIALIZE_LEN",
]

MAX_MATERIALIZE_LEN = 256


@dataclass
class SequenceBatch:
    tokens: Tensor
    positions: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = ad.as_tensor(self.tokens)
        if self.tokens.ndim != 3:
            raise ConfigurationError(f"tokens must be [batch, seq, dim], got {self.tokens.shape}")
        b, n, _ = self.tokens.shape
        if b == 0:
            raise ConfigurationError("empty batch")
        if n < 1:
            raise ConfigurationError("seq_len must be at least 1")
        if self.positions is None:
            self.positions = np.arange(n, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.shape != (n,) or np.any(np.diff(self.positions) <= 0):
            raise ConfigurationError("positions must be strictly increasing, one per token")

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]


@dataclass
class ScanState:
    h: Tensor
    step: int


def softplus_inverse(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class MambaParams:
    """Selective-scan parameters for ``channels`` channels and ``state_dim`` states.

    The continuous state matrix is diagonal, ``A = -exp(a_log)``, with one entry
    per (channel, state pair) so that it commutes with the pair rotation.
    """

    a_log: Tensor          # [C, N/2]
    delta_proj: Tensor     # [C, C]
    delta_bias: Tensor     # [C]
    k_proj: Tensor         # [C, N]
    q_proj: Tensor         # [C, N]

    def __post_init__(self):
        for name in ("a_log", "delta_proj", "delta_bias", "k_proj", "q_proj"):
            setattr(self, name, ad.as_tensor(getattr(self, name)))
        c, half = self.a_log.shape
        if self.k_proj.shape != (c, 2 * half) or self.q_proj.shape != (c, 2 * half):
            raise ConfigurationError("k_proj/q_proj must be [channels, state_dim]")

    @property
    def channels(self) -> int:
        return self.a_log.shape[0]

    @property
    def state_dim(self) -> int:
        return 2 * self.a_log.shape[1]

    def a_hat(self) -> Tensor:
        """Pair-expanded negative diagonal ``[C, N]``."""
        idx = np.repeat(np.arange(self.a_log.shape[1]), 2)
        return ad.neg(ad.exp(ad.getitem(self.a_log, (slice(None), idx))))

    @classmethod
    def init(cls, channels: int, state_dim: int, rng: np.random.Generator,
             delta_range=(0.001, 0.1), std: float = 0.02) -> "MambaParams":
        if state_dim % 2:
            raise ConfigurationError(f"state_dim must be even, got {state_dim}")
        a_log = np.log(np.tile(np.arange(1, state_dim // 2 + 1, dtype=np.float64), (channels, 1)))
        delta0 = np.linspace(delta_range[0], delta_range[1], channels)
        return cls(
            Tensor(a_log, requires_grad=True),
            Tensor(std * rng.standard_normal((channels, channels)), requires_grad=True),
            Tensor(softplus_inverse(delta0), requires_grad=True),
            Tensor(std * rng.standard_normal((channels, state_dim)), requires_grad=True),
            Tensor(std * rng.standard_normal((channels, state_dim)), requires_grad=True),
        )


# -- helpers -------------------------------------------------------------------------


def _check_heads(q: Tensor, k: Tensor, v: Tensor, params: BandpassParams) -> None:
    if q.ndim != 4 or q.shape != k.shape or v.shape[:3] != q.shape[:3]:
        raise ConfigurationError(f"q/k/v must be [batch, heads, seq, dim]; got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != params.num_heads or q.shape[3] != params.head_dim:
        raise ConfigurationError(
            f"filter is for {params.num_heads} heads of dim {params.head_dim}, input is {q.shape}")
    if q.shape[0] == 0:
        raise ConfigurationError("empty batch")


def _distances(n: int) -> tuple[np.ndarray, np.ndarray]:
    t = np.arange(n)
    dist = (t[:, None] - t[None, :]).astype(np.float64)
    mask = dist >= 0
    return np.where(mask, dist, 0.0), mask


def _rotate_qk(q, k, params, position_scale):
    if not params.use_rope:
        return q, k
    pos = np.arange(q.shape[2], dtype=np.float64) * position_scale
    return rotate(q, pos, params.theta), rotate(k, pos, params.theta)


def _decay_matrix(params: BandpassParams, n: int) -> Tensor:
    dist, _ = _distances(n)
    lam = ad.reshape(effective_decay(params), (params.num_heads, 1, 1))
    return ad.exp(ad.mul(lam, dist))


def _finite(x: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericalError(f"non-finite values in {what}")
    return x


# -- attention forms -----------------------------------------------------------------


def defocus_vit_attention(q, k, v, params: BandpassParams, position_scale: float = 1.0,
                          return_weights: bool = False, context: str = "vit attention"):
    """Causal softmax attention with a learnable bandpass filter.

    score(t, s) = <R_t q_t, R_s k_s> * exp(lambda (t - s)) / sqrt(head_dim)
    in ``decay_mode='scale'``; in ``'bias'`` mode the decay enters as the additive
    logit ``lambda (t - s)`` instead.  Positions ``s > t`` get zero weight.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    _check_heads(q, k, v, params)
    n, d = q.shape[2], q.shape[3]
    qr, kr = _rotate_qk(q, k, params, position_scale)
    scores = ad.scale(ad.matmul(qr, ad.swapaxes(kr, -1, -2)), 1.0 / np.sqrt(d))
    if params.use_decay:
        if params.decay_mode == "scale":
            scores = ad.mul(scores, _decay_matrix(params, n))
        else:
            dist, _ = _distances(n)
            lam = ad.reshape(effective_decay(params), (params.num_heads, 1, 1))
            scores = ad.add(scores, ad.mul(lam, dist))
    _finite(scores, context)
    _, mask = _distances(n)
    weights = ad.softmax_lastdim(scores, mask)
    out = ad.matmul(weights, v)
    return (out, weights) if return_weights else out


def _retnet_kernel(q, k, params, position_scale) -> Tensor:
    n = q.shape[2]
    qr, kr = _rotate_qk(q, k, params, position_scale)
    scores = ad.matmul(qr, ad.swapaxes(kr, -1, -2))
    _, mask = _distances(n)
    if params.use_decay:
        return ad.mul(scores, ad.mul(_decay_matrix(params, n), mask.astype(np.float64)))
    return ad.mul(scores, mask.astype(np.float64))


def defocus_retnet_attention(q, k, v, params: BandpassParams, position_scale: float = 1.0,
                             context: str = "retnet attention") -> Tensor:
    """Parallel form: y_t = sum_{s<=t} <R_t q_t, R_s k_s> exp(lambda (t-s)) v_s."""
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    _check_heads(q, k, v, params)
    kernel = _finite(_retnet_kernel(q, k, params, position_scale), context)
    return ad.matmul(kernel, v)


def defocus_retnet_recurrent(q, k, v, params: BandpassParams, position_scale: float = 1.0,
                             return_state: bool = False, context: str = "retnet recurrence"):
    """Recurrent form of :func:`defocus_retnet_attention`.

    The state ``h`` ([batch, heads, value_dim, head_dim]) evolves as
    ``h_t = exp(lambda) * Rot(-theta) h_{t-1} + v_t k_t^T`` and ``y_t = h_t q_t``.
    Rotating the stored keys backwards each step realises the relative angle
    ``theta (t - s)`` on the query side.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    _check_heads(q, k, v, params)
    b, nh, n, d = q.shape
    dv = v.shape[3]
    decay = None
    if params.use_decay:
        decay = ad.reshape(ad.exp(effective_decay(params)), (1, nh, 1, 1))
    angle = None
    if params.use_rope:
        angle = ad.reshape(ad.scale(params.theta, -position_scale), (1, nh, 1, d // 2))
    h = ad.as_tensor(np.zeros((b, nh, dv, d)))
    ys = []
    for t in range(n):
        kt = ad.reshape(k[:, :, t, :], (b, nh, 1, d))
        vt = ad.reshape(v[:, :, t, :], (b, nh, dv, 1))
        inject = ad.mul(vt, kt)
        if t == 0:
            h = inject
        else:
            carried = ad.rotate_pairs(h, angle) if angle is not None else h
            if decay is not None:
                carried = ad.mul(decay, carried)
            h = ad.add(carried, inject)
        _finite(h, f"{context}, step {t}")
        qt = ad.reshape(q[:, :, t, :], (b, nh, d, 1))
        ys.append(ad.reshape(ad.matmul(h, qt), (b, nh, dv)))
    out = ad.stack(ys, axis=2)
    return (out, ScanState(h, n)) if return_state else out


# -- ZOH discretisation and the selective scan --------------------------------------


def zoh_gain(delta, a_hat) -> Tensor:
    """``(exp(delta*A) - 1) / A`` elementwise, with the series ``delta (1 + delta*A/2)``
    when ``|delta*A| < 1e-6``."""
    delta, a_hat = ad.as_tensor(delta), ad.as_tensor(a_hat)
    dA = delta.data * a_hat.data
    small = np.abs(dA) < 1e-6
    safe_a = np.where(small, 1.0, a_hat.data)
    exact = np.expm1(dA) / safe_a
    series = delta.data * (1.0 + 0.5 * dA)
    out = np.where(small, series, exact)

    def back(g):
        gd = ga = None
        if delta.requires_grad:
            gd = ad._unbroadcast(g * np.where(small, 1.0 + dA, np.exp(dA)), delta.shape)
        if a_hat.requires_grad:
            da = np.where(small, 0.5 * delta.data ** 2,
                          (delta.data * np.exp(dA) * safe_a - np.expm1(dA)) / safe_a ** 2)
            ga = ad._unbroadcast(g * da, a_hat.shape)
        return gd, ga

    return Tensor._result(out, (delta, a_hat), back, "zoh_gain")


def zoh_discretize(a_hat, delta, k_hat) -> tuple[Tensor, Tensor]:
    """Zero-order-hold discretisation of a diagonal continuous system.

    With ``a_hat`` of shape ``[C]`` the inputs ``delta`` and ``k_hat`` share a
    shape ending in ``C``.  With ``a_hat`` of shape ``[C, N]`` (``delta``:
    ``[..., C]``, ``k_hat``: ``[..., N]``) both results are ``[..., C, N]``.
    """
    a_hat, delta, k_hat = ad.as_tensor(a_hat), ad.as_tensor(delta), ad.as_tensor(k_hat)
    if np.any(a_hat.data >= 0):
        raise ConfigurationError("diagonal state entries must be strictly negative")
    if np.any(delta.data <= 0):
        raise ContractError("step sizes delta must be positive")
    if a_hat.ndim == 2:
        delta = ad.reshape(delta, delta.shape + (1,))
        k_hat = ad.reshape(k_hat, k_hat.shape[:-1] + (1, k_hat.shape[-1]))
    a_bar = ad.exp(ad.mul(delta, a_hat))
    k_bar = ad.mul(zoh_gain(delta, a_hat), k_hat)
    return a_bar, k_bar


def selective_scan(x, delta, a_hat, k_hat, q, theta=None, position_scale: float = 1.0,
                   return_state: bool = False, context: str = "selective scan"):
    """Recurrent scan ``h_t = exp(A delta_t) Rot(theta) h_{t-1} + Kbar_t x_t``, ``y_t = Q_t^T h_t``.

    x, delta: [B, L, C]; a_hat: [C, N] (pair-tied); k_hat, q: [B, L, N];
    theta: [C, N/2] or None.  Returns y: [B, L, C].
    """
    x, delta, q = ad.as_tensor(x), ad.as_tensor(delta), ad.as_tensor(q)
    b, n, c = x.shape
    nstate = a_hat.shape[-1]
    a_bar, k_bar = zoh_discretize(a_hat, delta, k_hat)
    u = ad.mul(k_bar, ad.reshape(x, (b, n, c, 1)))
    angle = None if theta is None else ad.scale(ad.as_tensor(theta), position_scale)
    states = linear_recurrence(a_bar, u, angle, context=context)
    y = ad.sum(ad.mul(states, ad.reshape(q, (b, n, 1, nstate))), axis=-1)
    if return_state:
        return y, ScanState(states[:, -1], n)
    return y


def _rot(h: np.ndarray, c: np.ndarray, s: np.ndarray) -> np.ndarray:
    hp = h.reshape(h.shape[:-1] + (-1, 2))
    h0, h1 = hp[..., 0], hp[..., 1]
    return np.stack([h0 * c - h1 * s, h0 * s + h1 * c], axis=-1).reshape(h.shape)


def linear_recurrence(a, u, angle=None, context: str = "selective scan") -> Tensor:
    """All states of ``h_t = a_t * Rot(angle) h_{t-1} + u_t`` with ``h_{-1} = 0``.

    a, u: [B, L, C, N] with ``a`` equal within each feature pair; angle:
    [C, N/2] or None.  Returns the stacked states [B, L, C, N].  The backward
    pass runs the adjoint recurrence in reverse time.
    """
    a, u = ad.as_tensor(a), ad.as_tensor(u)
    ang = None if angle is None else ad.as_tensor(angle)
    b, n = u.shape[:2]
    av, uv = np.broadcast_to(a.data, u.shape), u.data
    if ang is not None:
        cos, sin = np.cos(ang.data), np.sin(ang.data)
    hs = np.empty(u.shape)
    rs = np.zeros(u.shape)          # rotated previous state, input to step t
    h = uv[:, 0]
    hs[:, 0] = h
    for t in range(1, n):
        r = _rot(h, cos, sin) if ang is not None else h
        rs[:, t] = r
        h = av[:, t] * r + uv[:, t]
        hs[:, t] = h
        if not np.all(np.isfinite(h)):
            raise NumericalError(f"non-finite state in {context} at step {t}")
    if not np.all(np.isfinite(hs[:, 0])):
        raise NumericalError(f"non-finite state in {context} at step 0")

    def back(g):
        gu = np.empty(u.shape)
        ga = np.zeros(u.shape)
        gang = None if ang is None else np.zeros(ang.shape)
        carry = np.zeros(u.shape[:1] + u.shape[2:])
        for t in range(n - 1, -1, -1):
            gt = g[:, t] + carry
            gu[:, t] = gt
            if t == 0:
                break
            ga[:, t] = gt * rs[:, t]
            dr = av[:, t] * gt
            if ang is not None:
                rp = rs[:, t].reshape(rs.shape[:1] + rs.shape[2:-1] + (-1, 2))
                dp = dr.reshape(rp.shape)
                gang += (dp[..., 1] * rp[..., 0] - dp[..., 0] * rp[..., 1]).sum(axis=0)
                carry = _rot(dr, cos, -sin)
            else:
                carry = dr
        return (ad._unbroadcast(ga, a.shape) if a.requires_grad else None,
                gu if u.requires_grad else None,
                ad._unbroadcast(gang, ang.shape) if (ang is not None and ang.requires_grad) else None)

    parents = (a, u) if ang is None else (a, u, ang)
    return Tensor._result(hs, parents, back, "linear_recurrence")


def group_rms_norm(y, group_size: int = 64, eps: float = 1e-6, weight=None) -> Tensor:
    """RMS-normalise the last axis in groups of ``min(group_size, channels)``."""
    y = ad.as_tensor(y)
    c = y.shape[-1]
    g = min(group_size, c)
    if c % g:
        raise ConfigurationError(f"{c} channels do not split into groups of {g}")
    grouped = ad.reshape(y, y.shape[:-1] + (c // g, g))
    ms = ad.mean_over_axis(ad.mul(grouped, grouped), axis=-1, keepdims=True)
    out = ad.reshape(ad.div(grouped, ad.sqrt(ad.add(ms, eps))), y.shape)
    return out if weight is None else ad.mul(out, weight)


def _mamba_inputs(x: Tensor, params: MambaParams):
    delta = ad.softplus(ad.add(ad.matmul(x, params.delta_proj), params.delta_bias))
    return delta, ad.matmul(x, params.k_proj), ad.matmul(x, params.q_proj)


def defocus_mamba_scan(x, params: MambaParams, rope=None, position_scale: float = 1.0,
                       group_size: int = 64, normalize: bool = True,
                       context: str = "mamba scan") -> Tensor:
    """Selective scan with input-dependent step sizes and a rotated state.

    ``delta = softplus(x W_delta + b_delta)``, ``K = x W_K``, ``Q = x W_Q``; the
    scan output is group-RMS-normalised unless ``normalize`` is False.
    ``rope`` is a theta tensor ``[C, N/2]``, a :class:`BandpassParams` or None.
    """
    if isinstance(x, SequenceBatch):
        x = x.tokens
    x = ad.as_tensor(x)
    if x.shape[-1] != params.channels:
        raise ConfigurationError(f"input has {x.shape[-1]} channels, params expect {params.channels}")
    theta = rope
    if isinstance(rope, BandpassParams):
        theta = rope.theta if rope.use_rope else None
    delta, k_hat, q = _mamba_inputs(x, params)
    y = selective_scan(x, delta, params.a_hat(), k_hat, q, theta, position_scale, context=context)
    return group_rms_norm(y, group_size) if normalize else y


# -- inspection ------------------------------------------------------------------------


def materialize_attention_matrix(kind: str, *, position_scale: float = 1.0, **inputs) -> np.ndarray:
    """Effective weight of token ``s`` in output ``t`` as an ``[L, L]`` array.

    ``kind='vit'``: post-softmax weights (q, k, v, params).  ``kind='retnet'``:
    ``|<R_t q_t, R_s k_s> exp(lambda (t-s))|`` (q, k, params).  ``kind='mamba'``:
    ``|Q_t^T exp(A(delta_{s+1}+...+delta_t)) Rot(theta (t-s)) Kbar_s|`` (x,
    mamba params, theta).  Heads / channels are averaged; batch item 0 is used.
    Entries above the diagonal are zero.
    """
    if kind in ("vit", "retnet"):
        n = ad.as_tensor(inputs["q"]).shape[2]
    else:
        n = ad.as_tensor(inputs["x"]).shape[1]
    if n > MAX_MATERIALIZE_LEN:
        raise ResourceError(f"seq_len {n} exceeds {MAX_MATERIALIZE_LEN} for an O(L^2) matrix")
    with ad.no_grad():
        if kind == "vit":
            q, k = inputs["q"], inputs["k"]
            v = inputs.get("v", q)
            _, w = defocus_vit_attention(q, k, v, inputs["params"], position_scale, return_weights=True)
            mat = w.data[0].mean(axis=0)
        elif kind == "retnet":
            q, k = ad.as_tensor(inputs["q"]), ad.as_tensor(inputs["k"])
            mat = np.abs(_retnet_kernel(q, k, inputs["params"], position_scale).data[0]).mean(axis=0)
        elif kind == "mamba":
            mat = _mamba_kernel(ad.as_tensor(inputs["x"]), inputs["params"], inputs.get("theta"),
                                position_scale)
        else:
            raise ConfigurationError(f"unknown operator kind {kind!r}")
    return np.tril(mat)


def _mamba_kernel(x: Tensor, params: MambaParams, theta, position_scale) -> np.ndarray:
    if isinstance(theta, BandpassParams):
        theta = theta.theta if theta.use_rope else None
    delta, k_hat, q = (t.data[0] for t in _mamba_inputs(x, params))
    a = params.a_hat().data                                   # [C, N]
    gain = np.expm1(delta[:, :, None] * a) / a                # [L, C, N]
    kbar = gain * k_hat[:, None, :]
    csum = np.concatenate([np.zeros((1, delta.shape[1])), np.cumsum(delta, axis=0)])
    n, c = delta.shape
    th = None if theta is None else ad.as_tensor(theta).data * position_scale
    mat = np.zeros((n, n))
    for t in range(n):
        for s in range(t + 1):
            span = csum[t + 1] - csum[s + 1]                   # delta_{s+1} + ... + delta_t
            vec = np.exp(a * span[:, None]) * kbar[s]
            if th is not None:
                vec = ad.rotate_pairs(vec, th * (t - s)).data
            mat[t, s] = np.abs(vec @ q[t]).mean()
    return mat
