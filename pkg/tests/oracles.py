"""Independent reference implementations used as test oracles.

Each one is written without reusing library code paths: explicit loops,
dense inverses and brute-force scans.
"""

import math

import numpy as np
from scipy.stats import multivariate_normal


def se_kernel(a, b, ls, sf2):
    d = 0.0
    for x, y, l in zip(a, b, ls):
        d += ((x - y) / l) ** 2
    return sf2 * math.exp(-0.5 * d)


def gp_dense(X, y, x_star, ls, sf2, noise):
    """Posterior mean and variance from an explicit matrix inverse on z-scored inputs."""
    X = np.asarray(X, float).reshape(len(y), -1)
    mu, sd = X.mean(0), X.std(0)
    sd[sd <= 1e-12 * np.maximum(1, np.abs(mu))] = 1.0
    Z = (X - mu) / sd
    zs = (np.asarray(x_star, float).reshape(-1, X.shape[1]) - mu) / sd
    n = len(y)
    K = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            K[i, j] = se_kernel(Z[i], Z[j], ls, sf2)
    Kinv = np.linalg.inv(K + noise * np.eye(n))
    means, var = [], []
    for z in zs:
        k = np.array([se_kernel(z, Z[i], ls, sf2) for i in range(n)])
        means.append(k @ Kinv @ np.asarray(y, float))
        var.append(sf2 - k @ Kinv @ k)
    return np.array(means), np.array(var)


def gmr_quadrature(weights, means, covs, x, half_width=9.0, n=801):
    """Conditional mean/covariance of outputs (dims 1..) given dim 0 = x by 2-D trapezoid quadrature."""
    D = means.shape[1]
    assert D in (2, 3)
    sds = np.sqrt(np.array([[c[d, d] for d in range(1, D)] for c in covs]))
    lo = np.min(means[:, 1:] - half_width * sds, axis=0)
    hi = np.max(means[:, 1:] + half_width * sds, axis=0)
    axes = [np.linspace(lo[d], hi[d], n) for d in range(D - 1)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, D - 1)
    pts = np.column_stack([np.full(grid.shape[0], x), grid])
    dens = np.zeros(grid.shape[0])
    for w, m, c in zip(weights, means, covs):
        dens += w * multivariate_normal(m, c).pdf(pts)
    shape = (n,) * (D - 1)

    def integrate(f):
        f = f.reshape(shape)
        for ax in reversed(axes):
            f = np.trapezoid(f, ax, axis=-1)
        return float(f)

    z = integrate(dens)
    mean = np.array([integrate(grid[:, d] * dens) for d in range(D - 1)]) / z
    cov = np.empty((D - 1, D - 1))
    for a in range(D - 1):
        for b in range(D - 1):
            cov[a, b] = integrate((grid[:, a] - mean[a]) * (grid[:, b] - mean[b]) * dens) / z
    return mean, cov


def kmp_dense(support, means, covs, ls, lam, cov_lam, queries, sf2=1.0):
    """KMP mean and covariance from explicitly assembled (M O x M O) matrices and a dense solve."""
    M, O = means.shape
    K = np.zeros((M * O, M * O))
    for i in range(M):
        for j in range(M):
            kij = sf2 * math.exp(-0.5 * ((support[i] - support[j]) / ls) ** 2)
            for o in range(O):
                K[i * O + o, j * O + o] = kij
    S = np.zeros_like(K)
    for i in range(M):
        S[i * O:(i + 1) * O, i * O:(i + 1) * O] = covs[i]
    mu = means.reshape(-1)
    A = K + lam * S
    B = K + cov_lam * S
    out_m, out_c = [], []
    for s in queries:
        k = np.zeros((O, M * O))
        for j in range(M):
            kj = sf2 * math.exp(-0.5 * ((s - support[j]) / ls) ** 2)
            for o in range(O):
                k[o, j * O + o] = kj
        out_m.append(k @ np.linalg.solve(A, mu))
        out_c.append((M / cov_lam) * (sf2 * np.eye(O) - k @ np.linalg.solve(B, k.T)))
    return np.array(out_m), np.array(out_c)


def normal_equations(x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    n = x.size
    sx, sy, sxx, sxy = x.sum(), y.sum(), (x * x).sum(), (x * y).sum()
    k = (n * sxy - sx * sy) / (n * sxx - sx * sx)
    b = (sy - k * sx) / n
    return k, b


def fsm_scan(samples, th, initial="swing_extension"):
    """Instantaneous-threshold reference scan (no debounce): list of (sample index, new state)."""
    order = ["stance_flexion", "stance_extension", "swing_flexion", "swing_extension"]
    state = initial
    out = []
    for i, s in enumerate(samples):
        if state == "stance_flexion":
            fire = s.M_y > th.My_se
        elif state == "stance_extension":
            fire = s.F_z < th.Fz_to
        elif state == "swing_flexion":
            fire = s.q_k >= th.qk_se
        else:
            fire = s.F_z > th.Fz_hs
        if fire:
            state = order[(order.index(state) + 1) % 4]
            out.append((i, state))
    return out
