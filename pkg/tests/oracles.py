"""Slow, independent reference implementations used as test oracles."""

from fractions import Fraction

import numpy as np


def fss_bruteforce(pred, ref, alpha, window):
    """Enumerate every window explicitly; exact rational arithmetic throughout."""
    H, W = pred.shape
    h = window // 2

    def fractions(f):
        out = []
        for i in range(H):
            for j in range(W):
                hits = total = 0
                for di in range(-h, h + 1):
                    ii = i + di
                    if ii < 0 or ii >= H:
                        continue
                    for dj in range(-h, h + 1):
                        total += 1
                        hits += f[ii, (j + dj) % W] >= alpha
                out.append(Fraction(int(hits), total))
        return out

    fp, fr = fractions(pred), fractions(ref)
    num = sum((a - b) ** 2 for a, b in zip(fp, fr))
    den = sum(a * a + b * b for a, b in zip(fp, fr))
    if den == 0:
        return 1.0
    return float(1 - num / den)


def w1_trapezoid(p, r):
    """Integrate |F_p - F_r| over the merged support with the trapezoid rule.

    Both CDFs are constant between consecutive support points, so evaluating
    the gap at the left end of each interval is the trapezoid value; all in
    exact rationals.
    """
    p = [Fraction(float(x)) for x in np.ravel(p)]
    r = [Fraction(float(x)) for x in np.ravel(r)]
    xs = sorted(set(p) | set(r))

    def cdf(sample, x):
        return Fraction(sum(1 for s in sample if s <= x), len(sample))

    total = Fraction(0)
    for a, b in zip(xs[:-1], xs[1:]):
        total += abs(cdf(p, a) - cdf(r, a)) * (b - a)
    return float(total)
