"""Independent reference implementations used to cross-check the library.

Everything here is written in the most literal style possible (double loops,
scalar math) and shares no code with the package, so agreement between the
two is meaningful evidence of correctness rather than a tautology.
"""

import math

import numpy as np


def nt_xent_reference(
    z: np.ndarray, pairing: np.ndarray, temperature: float
) -> tuple[float, list[float]]:
    """Contrastive loss, anchor by anchor.

    For each row i the positive is row pairing[i]; the denominator sums
    exp(cos(z_i, z_k) / tau) over every k != i.  Returns the mean over all
    rows plus the per-anchor terms, computed with python scalars.
    """
    m = z.shape[0]

    def cos(u, v):
        return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))

    per_anchor = []
    for i in range(m):
        j = int(pairing[i])
        numer = math.exp(cos(z[i], z[j]) / temperature)
        denom = 0.0
        for k in range(m):
            if k == i:
                continue
            denom += math.exp(cos(z[i], z[k]) / temperature)
        per_anchor.append(-math.log(numer / denom))
    return sum(per_anchor) / m, per_anchor


def conv2d_reference(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct six-loop cross-correlation over (N, C, H, W) and (O, C, KH, KW)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[b, ci, i * stride + p, j * stride + q] * w[f, ci, p, q]
                    out[b, f, i, j] = acc
    return out


def group_norm_reference(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, groups: int, eps: float = 1e-5
) -> np.ndarray:
    """Per-sample, per-group normalization computed group by group."""
    n, c, h, w = x.shape
    gs = c // groups
    out = np.empty_like(x)
    for b in range(n):
        for g in range(groups):
            chunk = x[b, g * gs : (g + 1) * gs]
            mu = chunk.mean()
            var = chunk.var()
            out[b, g * gs : (g + 1) * gs] = (chunk - mu) / math.sqrt(var + eps)
    return out * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)


def auc_reference(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a random positive outranks a random negative; ties 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y != 1]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def welch_reference(a, b) -> tuple[float, float]:
    """Welch t statistic and Welch-Satterthwaite dof from first principles."""
    a = list(map(float, a))
    b = list(map(float, b))
    na, nb = len(a), len(b)
    ma = sum(a) / na
    mb = sum(b) / nb
    va = sum((x - ma) ** 2 for x in a) / (na - 1)
    vb = sum((x - mb) ** 2 for x in b) / (nb - 1)
    se2 = va / na + vb / nb
    t = (ma - mb) / math.sqrt(se2)
    dof = se2 * se2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return t, dof


def scipy_or_none():
    """The independent stats reference, when installed (tests skip otherwise)."""
    try:
        import scipy.special
        import scipy.stats
    except ImportError:
        return None
    return scipy
