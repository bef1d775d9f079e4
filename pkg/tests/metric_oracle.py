"""Brute-force threshold sweep used as the reference for the metric implementations."""

import math


def sweep_oracle(tar, non):
    """Operating points at every distinct score (accept if score >= t) plus +inf, ascending t."""
    points = []
    for t in sorted(set(tar) | set(non)) + [math.inf]:
        pm = sum(1 for s in tar if s < t) / len(tar)
        pf = sum(1 for s in non if s >= t) / len(non)
        points.append((pm, pf))
    return points


def eer_oracle(points):
    for k, (pm, pf) in enumerate(points):
        if pm >= pf:
            if pm == pf:
                return pm
            pm0, pf0 = points[k - 1]
            d0, d1 = pf0 - pm0, pf - pm
            return pm0 + (d0 / (d0 - d1)) * (pm - pm0)
    raise AssertionError("ROC never crosses")


def min_dcf_oracle(points, priors=(0.01, 0.005), c_miss=1.0, c_fa=1.0):
    vals = []
    for p in priors:
        norm = min(c_miss * p, c_fa * (1 - p))
        vals.append(min((c_miss * pm * p + c_fa * pf * (1 - p)) / norm for pm, pf in points))
    return sum(vals) / len(vals)
