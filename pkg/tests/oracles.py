"""Brute-force reference implementations used as independent oracles.

Everything here is written as plain loops straight from the defining
formulas, deliberately ignoring efficiency, so that the fast paths in the
package can be checked against an implementation that shares no code with
them.
"""

import math

import numpy as np


def brute_conv2d(w, x, stride=1, pad=(0, 0)):
    """Direct-summation strided cross-correlation.

    w: (out_ch, in_ch, kh, kw), x: (in_ch, H, W).  Zero padding of pad[0]
    rows / pad[1] columns on each side.  Output position (o, i, j) is the
    plain sum over (c, u, v) of w[o,c,u,v] * padded_x[c, stride*i+u, stride*j+v].
    """
    oc, ic, kh, kw = w.shape
    assert x.shape[0] == ic
    ph, pw = pad
    xp = np.zeros((ic, x.shape[1] + 2 * ph, x.shape[2] + 2 * pw))
    xp[:, ph:ph + x.shape[1], pw:pw + x.shape[2]] = x
    full_h = xp.shape[1] - kh + 1
    full_w = xp.shape[2] - kw + 1
    out_h = (full_h + stride - 1) // stride
    out_w = (full_w + stride - 1) // stride
    out = np.zeros((oc, out_h, out_w))
    for o in range(oc):
        for i in range(out_h):
            for j in range(out_w):
                acc = 0.0
                for c in range(ic):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[o, c, u, v] * xp[c, stride * i + u, stride * j + v]
                out[o, i, j] = acc
    return out


def brute_inflate(x, k):
    """Zero insertion: x[i,j] lands at (k*i, k*j) in a (k*H, k*W) grid."""
    c, h, w = x.shape
    out = np.zeros((c, k * h, k * w))
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                out[ch, k * i, k * j] = x[ch, i, j]
    return out


def brute_deconv2d(w, x, stride=1, pad=(0, 0)):
    """Deconvolution as defined: zero-inflate by the stride, then stride-1 conv."""
    return brute_conv2d(w, brute_inflate(x, stride), stride=1, pad=pad)


def brute_inner(a, b):
    """Inner product as an explicit accumulation loop."""
    af = a.reshape(-1)
    bf = b.reshape(-1)
    assert af.shape == bf.shape
    acc = 0.0
    for i in range(af.size):
        acc += af[i] * bf[i]
    return acc


def brute_ssim(a, b, dynamic_range=255.0):
    """Structural similarity on one single-channel patch, no smoothing.

    Uniform window over the whole patch, biased (1/N) moments,
    stabilizers C1 = (0.01*L)^2 and C2 = (0.03*L)^2.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    assert a.shape == b.shape
    n = a.size
    mu_a = sum(a) / n
    mu_b = sum(b) / n
    var_a = sum((v - mu_a) ** 2 for v in a) / n
    var_b = sum((v - mu_b) ** 2 for v in b) / n
    cov = sum((a[i] - mu_a) * (b[i] - mu_b) for i in range(n)) / n
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    )


def brute_psnr(a, b, peak=255.0):
    """Peak signal-to-noise ratio from the plain definition."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    mse = sum((a[i] - b[i]) ** 2 for i in range(a.size)) / a.size
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)
