"""Scalar-loop reference implementations used as independent test oracles.

Everything here works on plain Python floats and nested lists for a single
position; nothing is shared with the package under test.
"""

import math


def affine(x, weight, bias):
    """x: [d_in], weight: [d_in][d_out], bias: [d_out]."""
    d_out = len(bias)
    return [bias[k] + sum(x[i] * weight[i][k] for i in range(len(x))) for k in range(d_out)]


def relu(v):
    return [max(0.0, a) for a in v]


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def squash(s):
    sq = sum(a * a for a in s)
    if sq == 0.0:
        return [0.0] * len(s)
    n = math.sqrt(sq)
    scale = sq / (1.0 + sq) / n
    return [a * scale for a in s]


def votes(capsules, weight, n_out):
    """capsules: [L][d]; weight: [L][d][d] -> V[L][N][h]."""
    L, d = len(capsules), len(capsules[0])
    h = d // n_out
    out = []
    for l in range(L):
        full = [sum(capsules[l][i] * weight[l][i][k] for i in range(d)) for k in range(d)]
        out.append([full[n * h:(n + 1) * h] for n in range(n_out)])
    return out


def dynamic_routing(V, iterations):
    """Literal transcription of the dynamic routing loop for one position."""
    L, N, h = len(V), len(V[0]), len(V[0][0])
    B = [[0.0] * N for _ in range(L)]
    trace = []
    omega = None
    for _ in range(iterations):
        C = []
        for l in range(L):
            m = max(B[l])
            e = [math.exp(b - m) for b in B[l]]
            z = sum(e)
            C.append([x / z for x in e])
        trace.append([row[:] for row in C])
        omega = []
        for n in range(N):
            s = [sum(C[l][n] * V[l][n][k] for l in range(L)) for k in range(h)]
            omega.append(squash(s))
        for l in range(L):
            for n in range(N):
                B[l][n] += sum(omega[n][k] * V[l][n][k] for k in range(h))
    return omega, C, trace


def m_step(C, a_in, V, lam, beta_a, beta_mu, floor):
    L, N, h = len(V), len(V[0]), len(V[0][0])
    mu, var, act = [], [], []
    for n in range(N):
        r = [C[l][n] * a_in[l] for l in range(L)]
        tot = sum(r)
        if tot == 0.0:
            mu_n = [0.0] * h
            var_n = [floor] * h
        else:
            mu_n = [sum(r[l] * V[l][n][k] for l in range(L)) / tot for k in range(h)]
            var_n = [max(sum(r[l] * (V[l][n][k] - mu_n[k]) ** 2 for l in range(L)) / tot, floor)
                     for k in range(h)]
        cost = sum((math.log(math.sqrt(v)) + (1 + math.log(2 * math.pi)) / 2) * tot for v in var_n)
        act.append(sigmoid(lam * (beta_a - beta_mu * tot - cost)))
        mu.append(mu_n)
        var.append(var_n)
    return mu, var, act


def e_step(mu, var, act, V):
    L, N, h = len(V), len(V[0]), len(V[0][0])
    C = []
    for l in range(L):
        logs = []
        for n in range(N):
            lp = 0.0
            for k in range(h):
                lp += -0.5 * math.log(2 * math.pi * var[n][k]) - (V[l][n][k] - mu[n][k]) ** 2 / (2 * var[n][k])
            logs.append(math.log(act[n]) + lp)
        m = max(logs)
        w = [math.exp(x - m) for x in logs]
        z = sum(w)
        C.append([x / z for x in w])
    return C


def em_routing(V, a_in, iterations, lambdas, beta_a, beta_mu, floor):
    L, N = len(V), len(V[0])
    C = [[1.0 / N] * N for _ in range(L)]
    trace = []
    for t in range(iterations):
        trace.append([row[:] for row in C])
        mu, var, act = m_step(C, a_in, V, lambdas[t], beta_a, beta_mu, floor)
        C = e_step(mu, var, act, V)
    omega = [[act[n] * m for m in mu[n]] for n in range(N)]
    return omega, C, trace, mu, var, act


def entropy(C):
    L = len(C)
    return -sum(c * math.log(c) for row in C for c in row if c > 0) / L


def diversity(C):
    L, N = len(C), len(C[0])
    cols = [[C[l][n] for l in range(L)] for n in range(N)]
    total, pairs = 0.0, 0
    for i in range(N):
        for j in range(i + 1, N):
            dot = sum(a * b for a, b in zip(cols[i], cols[j]))
            ni = math.sqrt(sum(a * a for a in cols[i]))
            nj = math.sqrt(sum(b * b for b in cols[j]))
            total += 1.0 - dot / (ni * nj)
            pairs += 1
    return total / pairs
