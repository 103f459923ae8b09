"""Shared independent oracles for the test suite.

These deliberately avoid the package's vectorized code paths: the attention
oracle is straight-line Python loops over the published equations, and the
decay oracle is a from-scratch Schroeder backward integration.
"""

import math

import numpy as np


def straightline_combinator(nlm, mag, wq, bq, wk, bk, wv, bv):
    """Loop-based evaluation of the attention combinator equations.

    Returns (att, w, s) computed frame by frame with scalar arithmetic only.
    """
    t_n, c_n, f_n = nlm.shape
    d_n = wq.shape[1]
    att = np.zeros((t_n, c_n, c_n))
    w = np.zeros((t_n, c_n))
    s = np.zeros((t_n, f_n))
    for t in range(t_n):
        q = [[sum(nlm[t, c, f] * wq[f, d] for f in range(f_n)) + bq[d]
              for d in range(d_n)] for c in range(c_n)]
        k = [[sum(nlm[t, c, f] * wk[f, d] for f in range(f_n)) + bk[d]
              for d in range(d_n)] for c in range(c_n)]
        v = [sum(nlm[t, c, f] * wv[f, 0] for f in range(f_n)) + bv[0]
             for c in range(c_n)]
        for i in range(c_n):
            scores = [sum(q[i][d] * k[j][d] for d in range(d_n)) / math.sqrt(d_n)
                      for j in range(c_n)]
            m = max(scores)
            exps = [math.exp(x - m) for x in scores]
            z = sum(exps)
            for j in range(c_n):
                att[t, i, j] = exps[j] / z
        r = [sum(att[t, i, j] * v[j] for j in range(c_n)) for i in range(c_n)]
        m = max(r)
        exps = [math.exp(x - m) for x in r]
        z = sum(exps)
        for c in range(c_n):
            w[t, c] = exps[c] / z
        for f in range(f_n):
            s[t, f] = sum(w[t, c] * mag[t, c, f] for c in range(c_n))
    return att, w, s


def schroeder_t60(rir, fs=16000, fit_db=(-5.0, -25.0)):
    """T60 from a line fit to the backward-integrated energy decay curve."""
    energy = np.asarray(rir, dtype=np.float64) ** 2
    sch = np.cumsum(energy[::-1])[::-1]
    sch_db = 10.0 * np.log10(np.maximum(sch / sch[0], 1e-30))
    hi, lo = fit_db
    idx = np.where((sch_db <= hi) & (sch_db >= lo))[0]
    assert idx.size >= 8, "decay region too short for a fit"
    t = idx / fs
    design = np.vstack([t, np.ones_like(t)]).T
    slope, _ = np.linalg.lstsq(design, sch_db[idx], rcond=None)[0]
    assert slope < 0
    return -60.0 / slope


def random_features(rng, t_n, c_n, f_n):
    """MagnitudeFeatures-compatible pair built from positive random magnitudes."""
    from sacc.spectral import MagnitudeFeatures, mvn

    mag = rng.uniform(0.1, 2.0, size=(t_n, c_n, f_n))
    nlm = mvn(np.log(mag), axis=0)
    return MagnitudeFeatures(mag=mag, normalized_logmag=nlm)
