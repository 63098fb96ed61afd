"""Fused differentiable ops with hand-derived backward passes.

Recurrences and the CTC recursion are written as single graph nodes: the
forward pass caches what BPTT (or the beta recursion) needs and the backward
closure replays it in reverse.  All ops accept either float32 or float64.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InfeasibleTargetError, ShapeError
from .core import Tensor, _logsumexp, _sigmoid, _softmax, as_tensor, make_result

NEG_INF = -np.inf


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``y = x @ W + b`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[0] or (bias is not None and bias.shape != (weight.shape[1],)):
        bshape = None if bias is None else bias.shape
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape} / bias {bshape}")
    y = x.data @ weight.data
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return make_result(y, parents, backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is (N, C_in, H, W) or (C_in, H, W); ``weight`` is (C_out, C_in, kh, kw).
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = _unsqueeze0(x)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    c_out, _, kh, kw = weight.shape
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    # im2col in channels-last order: one matmul with K = kh * kw * c_in
    xl = xp.transpose(0, 2, 3, 1)
    win = sliding_window_view(xl, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]  # (n, ho, wo, c, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, c_out)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    y = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))
    parents = [x, weight] + ([bias] if bias is not None else [])

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, c_out)
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(kh, kw, c, c_out).transpose(3, 2, 0, 1)
            weight._accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gxl = np.zeros((n, hp, wp, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    tap = (i * kw + j) * c
                    g_tap = (g2 @ wmat[tap : tap + c].T).reshape(n, ho, wo, c)
                    gxl[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :] += g_tap
            gx = gxl.transpose(0, 3, 1, 2)
            x._accumulate(gx[:, :, ph : ph + h, pw : pw + w])

    out_t = make_result(y, parents, backward)
    return _squeeze0(out_t) if squeeze else out_t


def _unsqueeze0(x: Tensor) -> Tensor:
    return make_result(x.data[None], (x,), lambda g: x._accumulate(g[0]))


def _squeeze0(x: Tensor) -> Tensor:
    return make_result(x.data[0], (x,), lambda g: x._accumulate(g[None]))


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 1-D convolution over time with 'same' padding.

    ``x`` is (N, T, C); ``weight`` is (C, K) with K odd.
    """
    n, t, c = x.shape
    if weight.shape[0] != c or weight.shape[1] % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} incompatible with kernel {weight.shape}")
    k = weight.shape[1]
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    y = np.zeros_like(x.data)
    for j in range(k):
        y += xp[:, j : j + t, :] * weight.data[:, j]
    if bias is not None:
        y += bias.data
    parents = [x, weight] + ([bias] if bias is not None else [])

    def backward(g):
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for j in range(k):
                gw[:, j] = (xp[:, j : j + t, :] * g).sum(axis=(0, 1))
            weight._accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 1)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j : j + t, :] += g * weight.data[:, j]
            x._accumulate(gxp[:, pad : pad + t, :])

    return make_result(y, parents, backward)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over every axis except 1 (channels).

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    axes = tuple(i for i in range(x.ndim) if i != 1)
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    g_ = gamma.data.reshape(bshape)
    if training:
        m = int(np.prod([x.shape[i] for i in axes]))
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        unbiased = var * m / max(m - 1, 1)
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    y = g_ * xhat + beta.data.reshape(bshape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * g_
            if training:
                s1 = dxhat.mean(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
                x._accumulate((dxhat - s1 - xhat * s2) * inv.reshape(bshape))
            else:
                x._accumulate(dxhat * inv.reshape(bshape))

    return make_result(y.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(x.ndim - 1))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=lead))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gamma.data
            s1 = dxhat.mean(axis=-1, keepdims=True)
            s2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((dxhat - s1 - xhat * s2) * inv)

    return make_result(y, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# recurrences
# ---------------------------------------------------------------------------


def gru(x: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """Single-direction GRU over (N, T, D) or (T, D) input, zero initial state.

    Gate layout along the 3H axis is (reset, update, candidate)::

        r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
        z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
        n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
        h' = (1 - z) * n + z * h
    """
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    n_b, t_len, d = xd.shape
    hid = w_hh.shape[0]
    if w_ih.shape != (d, 3 * hid) or w_hh.shape != (hid, 3 * hid):
        raise ShapeError(f"gru: input {x.shape} incompatible with weights {w_ih.shape}, {w_hh.shape}")
    if t_len < 1:
        raise ShapeError("gru: empty sequence")
    gi = xd @ w_ih.data + b_ih.data  # (N, T, 3H)
    h = np.zeros((n_b, hid), dtype=xd.dtype)
    out = np.empty((n_b, t_len, hid), dtype=xd.dtype)
    cache = []
    for t in range(t_len):
        gh = h @ w_hh.data + b_hh.data
        r = _sigmoid(gi[:, t, :hid] + gh[:, :hid])
        z = _sigmoid(gi[:, t, hid : 2 * hid] + gh[:, hid : 2 * hid])
        ghn = gh[:, 2 * hid :]
        n = np.tanh(gi[:, t, 2 * hid :] + r * ghn)
        cache.append((h, r, z, n, ghn))
        h = (1 - z) * n + z * h
        out[:, t] = h
    y = out[0] if unbatched else out

    def backward(g):
        g = g[None] if unbatched else g
        dgi = np.empty_like(gi)
        dw_hh = np.zeros_like(w_hh.data)
        db_hh = np.zeros_like(b_hh.data)
        dh = np.zeros((n_b, hid), dtype=xd.dtype)
        for t in range(t_len - 1, -1, -1):
            h_prev, r, z, n, ghn = cache[t]
            dh = dh + g[:, t]
            dn = dh * (1 - z) * (1 - n * n)
            dz = dh * (h_prev - n) * z * (1 - z)
            dr = dn * ghn * r * (1 - r)
            dgh = np.concatenate([dr, dz, dn * r], axis=1)
            dgi[:, t] = np.concatenate([dr, dz, dn], axis=1)
            dw_hh += h_prev.T @ dgh
            db_hh += dgh.sum(axis=0)
            dh = dh * z + dgh @ w_hh.data.T
        flat = dgi.reshape(-1, 3 * hid)
        w_ih._accumulate(xd.reshape(-1, d).T @ flat)
        b_ih._accumulate(flat.sum(axis=0))
        w_hh._accumulate(dw_hh)
        b_hh._accumulate(db_hh)
        if x.requires_grad:
            dx = dgi @ w_ih.data.T
            x._accumulate(dx[0] if unbatched else dx)

    return make_result(y, (x, w_ih, w_hh, b_ih, b_hh), backward)


def lstm(x: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """Single-direction LSTM over (N, T, D) or (T, D), zero initial state.

    Gate layout along the 4H axis is (input, forget, cell, output).
    """
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    n_b, t_len, d = xd.shape
    hid = w_hh.shape[0]
    if w_ih.shape != (d, 4 * hid) or w_hh.shape != (hid, 4 * hid):
        raise ShapeError(f"lstm: input {x.shape} incompatible with weights {w_ih.shape}, {w_hh.shape}")
    if t_len < 1:
        raise ShapeError("lstm: empty sequence")
    gx = xd @ w_ih.data + b_ih.data + b_hh.data
    h = np.zeros((n_b, hid), dtype=xd.dtype)
    c = np.zeros_like(h)
    out = np.empty((n_b, t_len, hid), dtype=xd.dtype)
    cache = []
    for t in range(t_len):
        a = gx[:, t] + h @ w_hh.data
        i = _sigmoid(a[:, :hid])
        f = _sigmoid(a[:, hid : 2 * hid])
        gg = np.tanh(a[:, 2 * hid : 3 * hid])
        o = _sigmoid(a[:, 3 * hid :])
        c_new = f * c + i * gg
        tc = np.tanh(c_new)
        cache.append((h, c, i, f, gg, o, tc))
        c = c_new
        h = o * tc
        out[:, t] = h
    y = out[0] if unbatched else out

    def backward(g):
        g = g[None] if unbatched else g
        da_all = np.empty_like(gx)
        dw_hh = np.zeros_like(w_hh.data)
        dh = np.zeros((n_b, hid), dtype=xd.dtype)
        dc = np.zeros_like(dh)
        for t in range(t_len - 1, -1, -1):
            h_prev, c_prev, i, f, gg, o, tc = cache[t]
            dh = dh + g[:, t]
            do = dh * tc
            dc = dc + dh * o * (1 - tc * tc)
            di = dc * gg
            df = dc * c_prev
            dgg = dc * i
            da = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), dgg * (1 - gg * gg), do * o * (1 - o)], axis=1
            )
            da_all[:, t] = da
            dw_hh += h_prev.T @ da
            dh = da @ w_hh.data.T
            dc = dc * f
        flat = da_all.reshape(-1, 4 * hid)
        w_ih._accumulate(xd.reshape(-1, d).T @ flat)
        db = flat.sum(axis=0)
        b_ih._accumulate(db)
        b_hh._accumulate(db)
        w_hh._accumulate(dw_hh)
        if x.requires_grad:
            dx = da_all @ w_ih.data.T
            x._accumulate(dx[0] if unbatched else dx)

    return make_result(y, (x, w_ih, w_hh, b_ih, b_hh), backward)


def reverse_padded(x: Tensor, lengths: Sequence[int]) -> Tensor:
    """Reverse each (N, T, ...) sequence within its valid length; padding stays put."""
    n_b, t_len = x.shape[:2]
    idx = np.tile(np.arange(t_len), (n_b, 1))
    for b, length in enumerate(lengths):
        idx[b, :length] = idx[b, :length][::-1]
    n_idx = np.arange(n_b)[:, None]
    y = x.data[n_idx, idx]

    def backward(g):
        full = np.empty_like(g)
        full[n_idx, idx] = g
        x._accumulate(full)

    return make_result(y, (x,), backward)


def gather_last(x: Tensor, lengths: Sequence[int]) -> Tensor:
    """Pick ``x[n, lengths[n] - 1]`` from an (N, T, H) tensor."""
    pos = np.asarray(lengths) - 1
    n_idx = np.arange(x.shape[0])
    y = x.data[n_idx, pos]

    def backward(g):
        full = np.zeros_like(x.data)
        full[n_idx, pos] = g
        x._accumulate(full)

    return make_result(y, (x,), backward)


# ---------------------------------------------------------------------------
# regularization
# ---------------------------------------------------------------------------


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_result(x.data * keep, (x,), lambda g: x._accumulate(g * keep))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {n} rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    logp = logits.data - _logsumexp(logits.data, axis=1)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits._accumulate(g * p / n)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def ctc_feasible(target: Sequence[int], n_frames: int) -> bool:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return n_frames >= len(target) + repeats


def _ctc_single(lp: np.ndarray, target: Sequence[int], blank: int = 0):
    """Log-space alpha/beta recursions for one sequence.

    Returns the negative log-likelihood and its gradient with respect to the
    (T, V) ``lp`` matrix, which is treated as free log-scores.
    """
    t_len = lp.shape[0]
    ext = [blank]
    for lab in target:
        ext += [int(lab), blank]
    s_len = len(ext)
    ext = np.asarray(ext)
    # skip transition s-2 -> s allowed onto a label that differs from the previous label
    skip = np.zeros(s_len, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]

    emit = lp[:, ext]  # (T, S)
    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        a1 = np.concatenate([[NEG_INF], prev[:-1]])
        a2 = np.where(skip, np.concatenate([[NEG_INF, NEG_INF], prev[:-2]]), NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(prev, a1), a2) + emit[t]

    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    skip_next = np.concatenate([skip[2:], [False, False]])  # may jump s -> s+2
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        b1 = np.concatenate([nxt[1:], [NEG_INF]])
        b2 = np.where(skip_next, np.concatenate([nxt[2:], [NEG_INF, NEG_INF]]), NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(nxt, b1), b2) + emit[t]

    ends = alpha[-1, -1] if s_len == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    log_like = float(ends)
    # occupancy of each extended state, divided out by the doubled emission
    occ = np.exp(alpha + beta - emit - log_like)
    grad = np.zeros_like(lp)
    np.add.at(grad.T, ext, occ.T)
    return -log_like, -grad


def ctc_loss(log_probs: Tensor, target: Sequence[int], blank: int = 0) -> Tensor:
    """Negative log of the total probability of ``target`` under (T, V) ``log_probs``."""
    target = [int(v) for v in target]
    t_len = log_probs.shape[0]
    if not ctc_feasible(target, t_len):
        raise InfeasibleTargetError(f"target of length {len(target)} cannot be aligned to {t_len} frames")
    lp = log_probs.data.astype(np.float64, copy=False)
    loss, grad = _ctc_single(lp, target, blank)

    def backward(g):
        log_probs._accumulate(g * grad)

    return make_result(np.asarray(loss, dtype=log_probs.dtype), (log_probs,), backward)


def ctc_loss_batch(
    log_probs: Tensor, targets: Sequence[Sequence[int]], lengths: Sequence[int], blank: int = 0
) -> Tensor:
    """Mean CTC loss over an (N, T, V) batch with per-sequence valid lengths."""
    n_b = log_probs.shape[0]
    grads = np.zeros(log_probs.shape, dtype=np.float64)
    total = 0.0
    for b in range(n_b):
        tgt = [int(v) for v in targets[b]]
        length = int(lengths[b])
        if not ctc_feasible(tgt, length):
            raise InfeasibleTargetError(
                f"sequence {b}: target of length {len(tgt)} cannot be aligned to {length} frames"
            )
        loss, grad = _ctc_single(log_probs.data[b, :length].astype(np.float64), tgt, blank)
        total += loss
        grads[b, :length] = grad

    def backward(g):
        log_probs._accumulate(g * grads / n_b)

    return make_result(np.asarray(total / n_b, dtype=log_probs.dtype), (log_probs,), backward)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return x - _logsumexp(x, axis)


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return _softmax(x, axis)


__all__ = [
    "as_tensor",
    "batch_norm",
    "conv2d",
    "ctc_feasible",
    "ctc_loss",
    "ctc_loss_batch",
    "depthwise_conv1d",
    "dropout",
    "gather_last",
    "gru",
    "layer_norm",
    "linear",
    "lstm",
    "reverse_padded",
    "softmax_cross_entropy",
]
