"""Independent reference implementations used by the tests.

Everything here is written with explicit Python loops (or mpmath) and never
calls into ``dcp`` forward code, so agreement is meaningful.
"""
from __future__ import annotations

import math

import mpmath
import numpy as np

mpmath.mp.dps = 50


def matmul_loop(a, b):
    a, b = np.asarray(a), np.asarray(b)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_loop(row):
    mx = max(row)
    e = [math.exp(v - mx) for v in row]
    s = sum(e)
    return [v / s for v in e]


def softmax_mp(row):
    e = [mpmath.exp(mpmath.mpf(float(v))) for v in row]
    s = mpmath.fsum(e)
    return [float(v / s) for v in e]


def layer_norm_loop(row, gain, bias, eps):
    d = len(row)
    mu = sum(row) / d
    var = sum((v - mu) ** 2 for v in row) / d
    return [(row[i] - mu) / math.sqrt(var + eps) * gain[i] + bias[i] for i in range(d)]


def gelu_mp(x):
    x = mpmath.mpf(float(x))
    return float(x / 2 * (1 + mpmath.erf(x / mpmath.sqrt(2))))


def cross_entropy_mp(logits, labels):
    total = mpmath.mpf(0)
    for row, y in zip(logits, labels):
        lse = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in row))
        total += lse - mpmath.mpf(float(row[y]))
    return float(total / len(labels))


def attention_loop(q, k, v, mask=None):
    """Single-head attention ``softmax(q k^T / sqrt(d)) v`` with loops."""
    m, d = len(q), len(q[0])
    scores = [[sum(q[i][t] * k[j][t] for t in range(d)) / math.sqrt(d) for j in range(len(k))]
              for i in range(m)]
    if mask is not None:
        scores = [[s + mask[i][j] for j, s in enumerate(row)] for i, row in enumerate(scores)]
    probs = [softmax_loop(r) for r in scores]
    out = [[sum(probs[i][j] * v[j][c] for j in range(len(v))) for c in range(len(v[0]))] for i in range(m)]
    return np.array(out), np.array(probs)


def mha_loop(x, wq, bq, wk, bk, wv, bv, wo, bo, n_heads, mask=None):
    x = np.asarray(x)
    t, d = x.shape
    dh = d // n_heads
    q = matmul_loop(x, wq) + bq
    k = matmul_loop(x, wk) + bk
    v = matmul_loop(x, wv) + bv
    heads = []
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        o, _ = attention_loop(q[:, sl].tolist(), k[:, sl].tolist(), v[:, sl].tolist(), mask)
        heads.append(o)
    return matmul_loop(np.concatenate(heads, axis=1), wo) + bo


def block_loop(x, w, i, n_heads, eps, mask=None):
    """One pre-LN transformer layer, token by token."""
    p = f"layer{i}."
    x = np.asarray(x, dtype=float)
    h = np.array([layer_norm_loop(r, w[p + "ln1.g"], w[p + "ln1.b"], eps) for r in x])
    x = x + mha_loop(h, *(w[p + f"attn.{n}"] for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")),
                     n_heads, mask)
    h = np.array([layer_norm_loop(r, w[p + "ln2.g"], w[p + "ln2.b"], eps) for r in x])
    f = matmul_loop(h, w[p + "ffn.w1"]) + w[p + "ffn.b1"]
    f = np.vectorize(gelu_mp)(f)
    return x + matmul_loop(f, w[p + "ffn.w2"]) + w[p + "ffn.b2"]


def image_encoder_loop(w, cfg, patches, prompts):
    """Single image through the vision encoder, following the slot rules step by step."""
    x = matmul_loop(patches, w["patch.w"]) + w["patch.b"] + w["pos"][1:1 + len(patches)]
    cls = w["cls"] + w["pos"][0]
    m = len(prompts[0]) if prompts else 0
    seq = np.vstack([cls[None]] + ([prompts[0]] if m else []) + [x])
    for i in range(cfg.n_layers):
        if 0 < i < len(prompts):
            seq = np.vstack([seq[:1], prompts[i], seq[1 + m:]])
        seq = block_loop(seq, w, i, cfg.n_heads, cfg.ln_eps)
    head = layer_norm_loop(seq[0], w["ln_final.g"], w["ln_final.b"], cfg.ln_eps)
    return matmul_loop(np.array([head]), w["proj"])[0]


def text_encoder_loop(w, cfg, ids, prompts, sos=0, eos=1):
    m = len(prompts[0]) if prompts else 0
    rows = [w["tok"][sos]] + (list(prompts[0]) if m else []) + [w["tok"][t] for t in ids] + [w["tok"][eos]]
    seq = np.array(rows) + w["pos"][:len(rows)]
    t = len(rows)
    mask = [[0.0 if j <= i else -1e30 for j in range(t)] for i in range(t)]
    for i in range(cfg.n_layers):
        if 0 < i < len(prompts):
            seq = np.vstack([seq[:1], prompts[i], seq[1 + m:]])
        seq = block_loop(seq, w, i, cfg.n_heads, cfg.ln_eps, mask)
    head = layer_norm_loop(seq[t - 1], w["ln_final.g"], w["ln_final.b"], cfg.ln_eps)
    return matmul_loop(np.array([head]), w["proj"])[0]


def central_difference(f, x, h=1e-5):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)
