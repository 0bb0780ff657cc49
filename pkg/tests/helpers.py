"""Independent oracles used by the test suite.

Everything here is deliberately written without the package's autodiff
machinery: plain finite differences, scalar loops, and a trapezoidal ROC
integration. The oracles stay independent of the code paths they check.
"""

import math

import numpy as np

from modfuse.diffcore import Graph, Tensor, zero_grads


def finite_diff_grads(build_loss, params, h=1e-5):
    """Central-difference gradient of a scalar loss for each param tensor."""
    grads = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = build_loss().item()
            flat[i] = orig - h
            down = build_loss().item()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
        grads[name] = g.reshape(p.data.shape)
    return grads


def analytic_grads(build_loss, params):
    """Run one taped forward/backward and collect parameter gradients."""
    zero_grads(params.values())
    with Graph() as g:
        loss = build_loss()
    g.backward(loss)
    out = {name: p.grad.copy() for name, p in params.items()}
    zero_grads(params.values())
    return out


def max_rel_err(a, b):
    """abs error relative to max(|a|, |b|, 1), reduced over all elements."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def assert_grads_close(build_loss, params, tol, h=1e-5):
    ana = analytic_grads(build_loss, params)
    num = finite_diff_grads(build_loss, params, h=h)
    for name in params:
        err = max_rel_err(ana[name], num[name])
        assert err <= tol, f"grad mismatch for {name}: rel err {err:.3e} > {tol:.1e}"


def bce_scalar_loop(p, y, mask=None, eps=1e-7):
    """Straightforward per-entry BCE with mean over unmasked slots."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    m = np.ones_like(p) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    total = 0.0
    count = 0.0
    for pi, yi, mi in zip(p, y, m):
        if mi == 0.0:
            continue
        pc = min(max(pi, eps), 1.0 - eps)
        total += -(yi * math.log(pc) + (1.0 - yi) * math.log(1.0 - pc))
        count += 1.0
    return total / count


def trapezoid_auroc(scores, labels):
    """ROC area by explicit threshold sweep and trapezoidal integration.

    Scores equal under a tie are grouped into one threshold step, which
    produces the diagonal segment whose trapezoid matches tie-halving.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    assert n_pos > 0 and n_neg > 0
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            tp += int(sorted_labels[j] == 1)
            fp += int(sorted_labels[j] == 0)
            j += 1
        points.append((fp / n_neg, tp / n_pos))
        i = j
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def pairwise_auroc(scores, labels):
    """O(n^2) pairwise counting with ties worth 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def make_tensor(rng, shape, scale=1.0, requires_grad=True):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad)


def jitter_params(params, rng, scale=0.05):
    """Nudge parameters off structured values (exact zeros) so relu
    pre-activations sit away from their kink during finite differencing."""
    for p in params:
        p.data += rng.standard_normal(p.data.shape) * scale
