"""Naive reference implementations used as test oracles.

Written frame by frame with plain loops, deliberately sharing no code with
the vectorized package implementations.
"""
import math


def naive_delta(e, L):
    n_frames = len(e)

    def at(k):
        return e[min(max(k, 0), n_frames - 1)]

    denom = 2 * sum(l * l for l in range(1, L + 1))
    return [sum((at(n + l) - at(n - l)) * l for l in range(1, L + 1)) / denom for n in range(n_frames)]


def naive_points(d, tau):
    return [1 if abs(x) >= tau else 0 for x in d]


def naive_segments(p, delta_half):
    P = [0] * len(p)
    for n, v in enumerate(p):
        if v:
            for i in range(-delta_half, delta_half + 1):
                if 0 <= n + i < len(p):
                    P[n + i] = 1
    return P


def naive_labels(e, L, delta_half, tau):
    return naive_segments(naive_points(naive_delta(e, L), tau), delta_half)


def naive_conv1d(x, w, dilation, bias=None):
    """Valid dilated convolution on nested lists: x[t][ci], w[j][ci][co]."""
    k, c_in, c_out = len(w), len(w[0]), len(w[0][0])
    t_out = len(x) - dilation * (k - 1)
    out = []
    for t in range(t_out):
        row = []
        for co in range(c_out):
            s = bias[co] if bias is not None else 0.0
            for j in range(k):
                for ci in range(c_in):
                    s += x[t + j * dilation][ci] * w[j][ci][co]
            row.append(s)
        out.append(row)
    return out


def naive_coverage(deltas, delta_half, tau):
    covered = total = 0
    for d in deltas:
        P = naive_segments(naive_points(d, tau), delta_half)
        covered += sum(P)
        total += len(P)
    return covered / total


def naive_calibrate(deltas, delta_half, target):
    """Sweep every distinct nonzero |d|; keep the closest coverage, larger tau on ties."""
    candidates = sorted({abs(x) for d in deltas for x in d if x != 0})
    best_tau, best_gap = None, math.inf
    for tau in candidates:
        gap = abs(naive_coverage(deltas, delta_half, tau) - target)
        if gap <= best_gap:
            best_tau, best_gap = tau, gap
    return best_tau
