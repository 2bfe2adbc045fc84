import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def loop_conv(x, w, b=None, stride=1):
    """Sextuple-loop cross-correlation in float64."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ci in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                s += float(w[oi, ci, a, bb]) * float(x[ni, ci, i * stride + a, j * stride + bb])
                    out[ni, oi, i, j] = s + (0.0 if b is None else float(b[oi]))
    return out
