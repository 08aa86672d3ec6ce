"""Pure-Python/NumPy versions of the per-transition kernels.

These mirror ``_ckernels.pyx`` exactly and are used when the compiled
extension is unavailable (or ``FHTENSOR_PURE_PYTHON=1``).  All functions
work on the packed factor buffer of a ``FactorSet``: ``theta`` (flat
float64), ``offsets`` (start of each factor), ``dims`` and rank ``K``.
Modes are ordered state modes, action modes, time; ``n_sm`` is the number
of state modes.
"""
import numpy as np

SBCGD = 0
BCTD = 1


def _index(dims, n_sm, s, a, h):
    D = len(dims)
    idx = [0] * D
    for j in range(n_sm - 1, -1, -1):
        s, idx[j] = divmod(s, dims[j])
    for j in range(D - 2, n_sm - 1, -1):
        a, idx[j] = divmod(a, dims[j])
    idx[D - 1] = h
    return idx


def _rows(theta, offsets, K, idx):
    return [theta[offsets[d] + i * K: offsets[d] + (i + 1) * K] for d, i in enumerate(idx)]


def entry(theta, offsets, dims, K, n_sm, s, a, h):
    rows = _rows(theta, offsets, K, _index(dims, n_sm, s, a, h))
    prod = rows[0].copy()
    for r in rows[1:]:
        prod *= r
    return float(prod.sum())


def action_values(theta, offsets, dims, K, n_sm, s, h, out):
    """Fill ``out[a] = Q(s, a, h)`` for every flat action ``a``."""
    D = len(dims)
    idx = _index(dims, n_sm, s, 0, h)
    base = np.ones(K)
    for d in list(range(n_sm)) + [D - 1]:
        base = base * theta[offsets[d] + idx[d] * K: offsets[d] + (idx[d] + 1) * K]
    vals = base[None, :]
    for d in range(n_sm, D - 1):
        fac = theta[offsets[d]:offsets[d + 1]].reshape(dims[d], K)
        vals = (vals[:, None, :] * fac[None, :, :]).reshape(-1, K)
    out[:] = vals.sum(axis=1)


def greedy_action(theta, offsets, dims, K, n_sm, s, h, work):
    """Lowest-index maximizer of ``Q(s, ., h)``; returns ``(action, value)``."""
    action_values(theta, offsets, dims, K, n_sm, s, h, work)
    a = int(np.argmax(work))
    return a, float(work[a])


def transition_update(theta, offsets, dims, K, n_sm, s, a, h, s2, a2, r, alpha, rule, scaled=0):
    """One cyclic pass of block updates over all modes for a single transition.

    ``a2 < 0`` (or ``h`` the last step) marks the transition as terminal, in
    which case the bootstrap value is the structural zero.  For ``rule ==
    BCTD`` the bootstrap uses the factors as they were on entry; for
    ``SBCGD`` both terms use the current iterates.  Returns the empirical
    Bellman error before the pass.
    """
    D = len(dims)
    H = dims[D - 1] - 1
    terminal = a2 < 0 or h + 1 >= H
    idx = _index(dims, n_sm, s, a, h)
    rows = _rows(theta, offsets, K, idx)
    if not terminal:
        idx2 = _index(dims, n_sm, s2, a2, h + 1)
        rows2 = _rows(theta, offsets, K, idx2)
        boot = float(np.prod(rows2, axis=0).sum())
    else:
        boot = 0.0
    first = r + boot - float(np.prod(rows, axis=0).sum())
    for d in range(D):
        p1 = np.ones(K)
        for j in range(D):
            if j != d:
                p1 *= rows[j]
        q = float(p1 @ rows[d])
        if rule == SBCGD and not terminal:
            p2 = np.ones(K)
            for j in range(D):
                if j != d:
                    p2 *= rows2[j]
            delta = r + float(p2 @ rows2[d]) - q
            step = 2.0 * alpha * delta
            if scaled:
                step /= 1.0 + float(p1 @ p1) + float(p2 @ p2)
            # gradient rows are formed before either row moves
            g_next = step * p2
            rows[d] += step * p1
            rows2[d] -= g_next
        else:
            delta = r + boot - q
            step = 2.0 * alpha * delta
            if scaled:
                step /= 1.0 + float(p1 @ p1)
            rows[d] += step * p1
    return first


def normalize(theta, offsets, K, ndim):
    """Equalize factor norms in place; returns the common norm (0 if a factor is zero)."""
    norms = np.array([np.sqrt(theta[offsets[d]:offsets[d + 1]] @ theta[offsets[d]:offsets[d + 1]])
                      for d in range(ndim)])
    if np.any(norms == 0.0):
        return 0.0
    target = float(np.exp(np.mean(np.log(norms))))
    for d in range(ndim):
        theta[offsets[d]:offsets[d + 1]] *= target / norms[d]
    return target
