"""Brute-force reference implementations used only by tests.

Everything here is deliberately written with plain Python loops and math.exp
so it shares no code path with the package's vectorized implementations.
"""

import math


def naive_matmul(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i][t] * b[t][j]
            out[i][j] = acc
    return out


def naive_softmax(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    s = sum(e)
    return [x / s for x in e]


def _rms(row, gain):
    ss = sum(v * v for v in row) / len(row)
    scale = 1.0 / math.sqrt(ss + 1e-6)
    return [v * scale * g for v, g in zip(row, gain)]


def naive_forward_logits(weights, tokens):
    """Full forward pass over `tokens`; returns the logits of every position
    as plain lists of floats."""
    c = weights.config
    emb = weights.token_embedding.tolist()
    pos = weights.pos_embedding.tolist()
    x = [[emb[t][j] + pos[i][j] for j in range(c.d_model)] for i, t in enumerate(tokens)]
    n = len(tokens)
    for layer in weights.layers:
        normed = [_rms(row, layer.attn_gain.tolist()) for row in x]
        concat = [[] for _ in range(n)]
        for head in layer.heads:
            q = naive_matmul(normed, head.w_q.tolist())
            k = naive_matmul(normed, head.w_k.tolist())
            v = naive_matmul(normed, head.w_v.tolist())
            scale = 1.0 / math.sqrt(c.d_k)
            for i in range(n):
                scores = [
                    sum(q[i][t] * k[j][t] for t in range(c.d_k)) * scale
                    for j in range(i + 1)
                ]
                att = naive_softmax(scores)
                z = [
                    sum(att[j] * v[j][t] for j in range(i + 1))
                    for t in range(c.d_v)
                ]
                concat[i].extend(z)
        proj = naive_matmul(concat, layer.w_o.tolist())
        x = [[x[i][j] + proj[i][j] for j in range(c.d_model)] for i in range(n)]
        normed2 = [_rms(row, layer.ffn_gain.tolist()) for row in x]
        h1 = naive_matmul(normed2, layer.w1.tolist())
        b1 = layer.b1.tolist()
        h1 = [[max(v + b, 0.0) for v, b in zip(row, b1)] for row in h1]
        h2 = naive_matmul(h1, layer.w2.tolist())
        b2 = layer.b2.tolist()
        x = [
            [x[i][j] + h2[i][j] + b2[j] for j in range(c.d_model)]
            for i in range(n)
        ]
    final = [_rms(row, weights.final_gain.tolist()) for row in x]
    logits = naive_matmul(final, weights.w_out.tolist())
    b = weights.b_out.tolist()
    return [[row[j] + b[j] for j in range(c.vocab_size)] for row in logits]


def naive_generate(weights, prompt, max_new, eos_id=None):
    """Greedy decoding by recomputing the full forward pass at every step."""
    seq = list(prompt)
    out = []
    while len(out) < max_new:
        logits = naive_forward_logits(weights, seq)[-1]
        best = max(range(len(logits)), key=lambda i: (logits[i], -i))
        out.append(best)
        if eos_id is not None and best == eos_id:
            break
        seq.append(best)
    return out
