"""Shared oracles and builders for the test suite.

These deliberately avoid the library's own attack/linear-algebra paths so
they can serve as independent checks.
"""
import numpy as np

from cbmrobust.core import Dataset, LinearHead, MlpHead, MlpLayer


def random_head(rng, num_classes, num_concepts, scale=1.0):
    return LinearHead(
        weights=scale * rng.normal(size=(num_classes, num_concepts)),
        bias=scale * rng.normal(size=num_classes),
    )


def grid_min_norm_2d(head, c_star, y_star, t, epsilon, extent=3.0, step=1e-3):
    """Dense grid search for the minimal-norm flip constraint in 2-D.

    Scans delta in [-extent, extent]^2 for points satisfying
    (w_t - w_y) . delta >= beta_y + epsilon and returns the smallest norm,
    sweeping one axis at a time to keep memory flat.
    """
    w = np.asarray(head.weights)
    b = np.asarray(head.bias)
    c = np.asarray(c_star, dtype=float)
    direction = w[t] - w[y_star]
    beta = (w[y_star] - w[t]) @ c + (b[y_star] - b[t])
    rhs = beta + epsilon
    axis = np.arange(-extent, extent + step / 2, step)
    best_sq = np.inf
    for d0 in axis:
        lhs = direction[0] * d0 + direction[1] * axis
        feasible = lhs >= rhs
        if feasible.any():
            min_d1_sq = np.min(axis[feasible] ** 2)
            best_sq = min(best_sq, d0 * d0 + min_d1_sq)
    return np.sqrt(best_sq)


def fit_mlp_head(dataset: Dataset, hidden=16, epochs=300, lr=0.05, seed=0) -> MlpHead:
    """Small two-layer relu classifier on ground-truth concepts.

    Full-batch Adam on softmax cross-entropy; test scaffolding only.
    """
    rng = np.random.default_rng(seed)
    x = dataset.concept_matrix()
    y = dataset.labels()
    n, k = x.shape
    c = dataset.num_classes
    onehot = np.eye(c)[y]
    w1 = rng.normal(0.0, 1.0 / np.sqrt(k), size=(hidden, k))
    b1 = np.zeros(hidden)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(c, hidden))
    b2 = np.zeros(c)
    params = [w1, b1, w2, b2]
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]
    for step in range(1, epochs + 1):
        pre = x @ w1.T + b1
        h = np.maximum(pre, 0.0)
        z = h @ w2.T + b2
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        dz = (p - onehot) / n
        g_w2 = dz.T @ h
        g_b2 = dz.sum(axis=0)
        dh = dz @ w2
        dpre = dh * (pre > 0)
        g_w1 = dpre.T @ x
        g_b1 = dpre.sum(axis=0)
        for param, g, m, v in zip(params, [g_w1, g_b1, g_w2, g_b2], m_state, v_state):
            m += 0.1 * (g - m)
            v += 0.001 * (g * g - v)
            mhat = m / (1.0 - 0.9**step)
            vhat = v / (1.0 - 0.999**step)
            param -= lr * mhat / (np.sqrt(vhat) + 1e-8)
    return MlpHead(layers=(
        MlpLayer(w1, b1, "relu"),
        MlpLayer(w2, b2, "identity"),
    ))
