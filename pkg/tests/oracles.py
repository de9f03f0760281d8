"""Independent reference implementations used only by the test suite.

These are deliberately naive (loops, brute force, explicit inverses) so they
share no code path with the package.
"""

from __future__ import annotations

import math

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences (``x`` is restored)."""
    grad = np.zeros_like(x, dtype=float)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def scaled_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Largest absolute gap relative to the largest entry of either tensor."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def phi_series(x: float, terms: int = 80) -> float:
    """Standard normal CDF from the Taylor series of erf (no scipy)."""
    z = x / math.sqrt(2.0)
    s = 0.0
    for n in range(terms):
        s += (-1) ** n * z ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 0.5 * (1.0 + 2.0 / math.sqrt(math.pi) * s)


def drawdown_brute(returns) -> float:
    wealth = [1.0]
    for r in returns:
        wealth.append(wealth[-1] * (1.0 + r))
    # starting wealth counts as a peak
    w = wealth
    worst = 0.0
    for i in range(len(w)):
        for j in range(i + 1, len(w)):
            worst = max(worst, 1.0 - w[j] / w[i])
    return worst


def turnover_loop(weights: list[dict], returns: list[dict]) -> float:
    """Drifted-weight turnover written out asset by asset.

    ``weights[t]`` and ``returns[t]`` map asset -> weight / return over the
    holding month that starts at rebalance ``t``.
    """
    total = 0.0
    for t in range(len(weights) - 1):
        w, r, nxt = weights[t], returns[t], weights[t + 1]
        port = sum(w[a] * r.get(a, 0.0) for a in w)
        assets = set(w) | set(nxt)
        step = 0.0
        for a in assets:
            drifted = w.get(a, 0.0) * (1.0 + r.get(a, 0.0)) / (1.0 + port)
            step += abs(nxt.get(a, 0.0) - drifted)
        total += step
    return total / (len(weights) - 1)


def ols_normal_equations(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.linalg.inv(X.T @ X) @ X.T @ y


def white_cov(X: np.ndarray, resid: np.ndarray) -> np.ndarray:
    bread = np.linalg.inv(X.T @ X)
    meat = np.zeros((X.shape[1], X.shape[1]))
    for i in range(X.shape[0]):
        meat += resid[i] ** 2 * np.outer(X[i], X[i])
    return bread @ meat @ bread


def dk_sandwich(X: np.ndarray, resid: np.ndarray, time: np.ndarray, lags: int) -> np.ndarray:
    """Driscoll-Kraay covariance with loops over periods and lags (no small-sample factor)."""
    periods = sorted(set(time.tolist()))
    k = X.shape[1]
    scores = []
    for t in periods:
        rows = time == t
        scores.append((X[rows] * resid[rows, None]).sum(axis=0))
    scores = np.array(scores)
    T = len(periods)
    S = np.zeros((k, k))
    for t in range(T):
        S += np.outer(scores[t], scores[t])
    for lag in range(1, lags + 1):
        w = 1.0 - lag / (lags + 1.0)
        G = np.zeros((k, k))
        for t in range(lag, T):
            G += np.outer(scores[t], scores[t - lag])
        S += w * (G + G.T)
    bread = np.linalg.inv(X.T @ X)
    return bread @ S @ bread


def power_iteration_eigs(C: np.ndarray, iters: int = 5000) -> np.ndarray:
    """Eigenvalues of a symmetric PSD matrix by power iteration with deflation."""
    C = C.copy()
    n = C.shape[0]
    vals = []
    rng = np.random.default_rng(0)
    for _ in range(n):
        v = rng.standard_normal(n)
        for _ in range(iters):
            w = C @ v
            nrm = np.linalg.norm(w)
            if nrm == 0:
                break
            v = w / nrm
        lam = float(v @ C @ v)
        vals.append(lam)
        C = C - lam * np.outer(v, v)
    return np.array(vals)


def spearman(a, b) -> float:
    def ranks(x):
        x = list(x)
        order = sorted(range(len(x)), key=lambda i: x[i])
        r = [0.0] * len(x)
        i = 0
        while i < len(order):
            j = i
            while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
                j += 1
            for k in range(i, j + 1):
                r[order[k]] = (i + j) / 2.0 + 1.0
            i = j + 1
        return np.array(r)

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    return float(ra @ rb / math.sqrt((ra @ ra) * (rb @ rb)))
