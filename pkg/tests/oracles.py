"""Independent reference computations used by the tests.

Nothing here calls into the code paths it checks: loops are written out
element by element and gradients come from finite differences.
"""

import math

import numpy as np
import torch


def matmul_loops(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_rows(s):
    out = np.zeros_like(s)
    for i in range(s.shape[0]):
        row = [math.exp(v - max(s[i])) for v in s[i]]
        tot = sum(row)
        out[i] = [v / tot for v in row]
    return out


def attention_direct(a, b, wq, wk, wv):
    """softmax(A Wq (B Wk)^T / sqrt(e)) B Wv with explicit loops."""
    q, k, v = matmul_loops(a, wq), matmul_loops(b, wk), matmul_loops(b, wv)
    e = q.shape[1]
    scores = np.zeros((q.shape[0], k.shape[0]))
    for i in range(q.shape[0]):
        for j in range(k.shape[0]):
            scores[i, j] = sum(q[i, c] * k[j, c] for c in range(e)) / math.sqrt(e)
    return matmul_loops(softmax_rows(scores), v)


def mha_loop(a, b, w_a, w_b, w_q, w_k, w_v, w_h):
    """Per-head loop: head i = attn(A W_a[i], B W_b[i]); concat; mix with W_h."""
    heads = []
    for i in range(w_a.shape[0]):
        heads.append(attention_direct(matmul_loops(a, w_a[i]), matmul_loops(b, w_b[i]), w_q[i], w_k[i], w_v[i]))
    return matmul_loops(np.hstack(heads), w_h)


def summary_loops(xt, yt):
    """R_r = max_{i,j} mean_o (sum_c xt[o,i,r,c] yt[o,j,r,c])^2."""
    n, dx, h, e = xt.shape
    dy = yt.shape[1]
    r_out = np.zeros(h)
    for r in range(h):
        best = -np.inf
        for i in range(dx):
            for j in range(dy):
                acc = 0.0
                for o in range(n):
                    dot = 0.0
                    for c in range(e):
                        dot += xt[o, i, r, c] * yt[o, j, r, c]
                    acc += dot * dot
                best = max(best, acc / n)
        r_out[r] = best
    return r_out


def auc_pairs(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def adam_scalar(w, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        w = w - lr * mhat / (math.sqrt(vhat) + eps)
    return w


def finite_difference_grads(fn, params, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. each tensor in ``params`` (modified in place)."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = float(fn())
                flat[i] = old - h
                down = float(fn())
                flat[i] = old
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """max |a - b| normalized by the larger of the two tensors' max magnitudes."""
    scale = max(a.abs().max().item(), b.abs().max().item())
    if scale == 0:
        return 0.0
    return (a - b).abs().max().item() / scale
