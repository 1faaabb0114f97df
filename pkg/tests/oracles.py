"""Independent reference implementations used by the tests.

These use complex numbers and explicit loops instead of the library's
paired-real rotations and fused primitives, so agreement is a real check.
"""

import numpy as np


def as_complex(x):
    """Pairs (x[2j], x[2j+1]) -> x[2j] + i x[2j+1]."""
    x = np.asarray(x, dtype=np.float64)
    return x[..., 0::2] + 1j * x[..., 1::2]


def from_complex(z):
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],))
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def softplus(z):
    return np.logaddexp(0.0, z)


def rotated_inner(q, k, theta, t, s):
    """<R_t q, R_s k> as Re(sum_j q_j conj(k_j) exp(i theta_j (t - s)))."""
    zq, zk = as_complex(q), as_complex(k)
    return float(np.real(np.sum(zq * np.conj(zk) * np.exp(1j * theta * (t - s)))))


def vit_attention(q, k, v, lam, theta, use_decay=True, use_rope=True, mode="scale", pos_scale=1.0):
    """Loop-based causal softmax attention; q, k, v: [B, H, L, d]; lam [H]; theta [H, d/2]."""
    b, h, n, d = q.shape
    out = np.zeros(v.shape)
    for bi in range(b):
        for hi in range(h):
            th = theta[hi] if use_rope else np.zeros(d // 2)
            for t in range(n):
                logits = []
                for s in range(t + 1):
                    sc = rotated_inner(q[bi, hi, t], k[bi, hi, s], th, t * pos_scale, s * pos_scale) / np.sqrt(d)
                    if use_decay:
                        sc = sc * np.exp(lam[hi] * (t - s)) if mode == "scale" else sc + lam[hi] * (t - s)
                    logits.append(sc)
                w = np.exp(np.array(logits) - max(logits))
                w /= w.sum()
                out[bi, hi, t] = w @ v[bi, hi, :t + 1]
    return out


def retnet_attention(q, k, v, lam, theta):
    b, h, n, d = q.shape
    out = np.zeros(v.shape)
    for bi in range(b):
        for hi in range(h):
            for t in range(n):
                for s in range(t + 1):
                    w = rotated_inner(q[bi, hi, t], k[bi, hi, s], theta[hi], t, s) * np.exp(lam[hi] * (t - s))
                    out[bi, hi, t] += w * v[bi, hi, s]
    return out


def mamba_inputs(x, a_log, w_delta, b_delta, w_k, w_q):
    delta = softplus(x @ w_delta + b_delta)
    return delta, x @ w_k, x @ w_q, -np.exp(np.repeat(a_log, 2, axis=-1))


def mamba_double_sum(x, a_log, w_delta, b_delta, w_k, w_q, theta):
    """y_t = sum_{s<=t} Q_t^T exp(A (delta_{s+1} + ... + delta_t)) Rot(theta (t-s)) Kbar_s x_s.

    x: [B, L, C]; a_log, theta: [C, N/2]; w_k, w_q: [C, N].  O(L^2) literal sum.
    """
    delta, k_hat, q, a = mamba_inputs(x, a_log, w_delta, b_delta, w_k, w_q)
    b, n, c = x.shape
    y = np.zeros((b, n, c))
    for bi in range(b):
        for t in range(n):
            for s in range(t + 1):
                span = delta[bi, s + 1:t + 1].sum(axis=0)                  # [C]
                kbar = (np.exp(delta[bi, s][:, None] * a) - 1.0) / a * k_hat[bi, s][None, :]
                z = as_complex(kbar * x[bi, s][:, None])                   # [C, N/2]
                z = z * np.exp(a[:, 0::2] * span[:, None]) * np.exp(1j * theta * (t - s))
                y[bi, t] += from_complex(z) @ q[bi, t]
    return y


def group_rms(y, group, eps=1e-6):
    *lead, c = y.shape
    g = y.reshape(*lead, c // group, group)
    g = g / np.sqrt(np.mean(g * g, axis=-1, keepdims=True) + eps)
    return g.reshape(y.shape)


def transfer_magnitude(lam, theta, kernel_len, omegas):
    s = np.arange(kernel_len)
    h = np.exp(lam * s) * np.exp(1j * theta * s)
    return np.abs(np.exp(-1j * np.outer(omegas, s)) @ h)


def numeric_grad(f, x, eps=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + eps
        hi = f(x)
        flat[i] = o - eps
        lo = f(x)
        flat[i] = o
        gf[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)
