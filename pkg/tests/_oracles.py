"""Independent reference implementations used to check the fast paths.

Everything here is deliberately written the slow, obviously-correct way
(nested loops, exhaustive enumeration, finite differences) and shares no
code with the package internals it verifies.
"""

from itertools import combinations

import numpy as np

from prunekit import nn


def conv2d_loop(x, weights, bias, stride=1, padding=0, mask=None):
    """Six-nested-loop cross-correlation over one (c, h, w) image."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = weights.shape
    xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for i in range(c_out):
        for p in range(ho):
            for q in range(wo):
                acc = bias[i]
                for j in range(c_in):
                    if mask is not None and mask[j] == 0:
                        continue
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[j, p * stride + u, q * stride + v] * weights[i, j, u, v]
                out[i, p, q] = acc
    return out


def loss_of(spec, params, x, labels, masks=None):
    trace = nn.forward_collect(spec, params, x, masks=masks)
    return nn.cross_entropy(trace.logits, labels)


def fd_max_rel_error(spec, params, x, labels, h=1e-5, floor=1e-6, masks=None):
    """Max relative error between backprop and central differences.

    Checks every weight/bias entry of every parameterised layer plus every
    entry of the input gradient.  Entries where both sides are below `floor`
    compare at the floor.
    """
    trace = nn.forward_collect(spec, params, x, masks=masks)
    grads = nn.backward_collect(spec, params, trace, labels, masks=masks)
    worst = 0.0

    def rel(analytic, numeric):
        return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)

    for i, p in enumerate(params):
        if p is None:
            continue
        for arr, g in ((p.weights, grads.weights[i].weights),
                       (p.bias, grads.weights[i].bias)):
            flat = arr.reshape(-1)
            gflat = g.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                up = loss_of(spec, params, x, labels, masks)
                flat[k] = orig - h
                down = loss_of(spec, params, x, labels, masks)
                flat[k] = orig
                worst = max(worst, rel(gflat[k], (up - down) / (2 * h)))

    xw = x.copy()
    flat = xw.reshape(-1)
    gflat = grads.wrt_input.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = loss_of(spec, params, xw, labels, masks)
        flat[k] = orig - h
        down = loss_of(spec, params, xw, labels, masks)
        flat[k] = orig
        worst = max(worst, rel(gflat[k], (up - down) / (2 * h)))
    return worst


def random_small_net(rng):
    """A random tiny conv net (1-2 convs, optional pool) plus its params and input."""
    classes = int(rng.integers(2, 4))
    c0 = int(rng.integers(1, 3))
    size = int(rng.integers(6, 9))
    layers = [nn.conv2d(c0, int(rng.integers(2, 4)), kernel=3, padding=1), nn.relu()]
    dims = (layers[0].out_channels, size, size)
    if rng.random() < 0.5:
        layers.append(nn.maxpool2d(2))
        dims = (dims[0], size // 2, size // 2)
    if rng.random() < 0.7:
        layers += [nn.conv2d(dims[0], int(rng.integers(2, 4)), kernel=3, padding=1),
                   nn.relu()]
        dims = (layers[-2].out_channels, dims[1], dims[2])
    feat = dims[0] * dims[1] * dims[2]
    layers += [nn.flatten(), nn.linear(feat, classes), nn.softmax_ce_head()]
    spec = nn.NetworkSpec(tuple(layers), (c0, size, size), classes)
    params = nn.init_params(spec, rng)
    n = int(rng.integers(1, 3))
    x = rng.normal(0.0, 1.0, size=(n, c0, size, size))
    labels = rng.integers(0, classes, size=n)
    return spec, params, x, labels


def lasso_objective(a, b, beta, lam):
    r = b - a @ beta
    return float(r @ r + lam * np.abs(beta).sum())


def kkt_violation(a, b, beta, lam):
    """Worst slack-normalised KKT violation for min ||b - A beta||^2 + lam*|beta|_1."""
    grad = 2.0 * a.T @ (a @ beta - b)
    scale = np.sqrt((a * a).sum(axis=0)).max() * np.linalg.norm(b)
    worst = 0.0
    for j in range(len(beta)):
        if beta[j] != 0.0:
            viol = abs(grad[j] + lam * np.sign(beta[j]))
        else:
            viol = max(0.0, abs(grad[j]) - lam)
        worst = max(worst, viol)
    return worst, scale


def subset_residual(a, b, support):
    """Unpenalised least-squares residual norm restricted to `support` columns."""
    support = list(support)
    if not support:
        return float(np.linalg.norm(b))
    w, *_ = np.linalg.lstsq(a[:, support], b, rcond=None)
    return float(np.linalg.norm(b - a[:, support] @ w))


def best_subset(a, b, k):
    """Exhaustively best support of size k by unpenalised residual."""
    cols = a.shape[1]
    best_r, best_s = np.inf, None
    for s in combinations(range(cols), k):
        r = subset_residual(a, b, s)
        if r < best_r:
            best_r, best_s = r, s
    return best_r, best_s
