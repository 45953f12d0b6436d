"""Lloyd's k-means with k-means++ seeding."""

import numpy as np

from .errors import InitializationError


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if not total > 0:
            raise InitializationError(
                f"k-means++ found only {c} distinct points for k={k}; try fewer components")
        centers[c] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((X - centers[c]) ** 2).sum(axis=1))
    return centers


def _sq_dist(X, centers):
    return ((X ** 2).sum(axis=1)[:, None] - 2.0 * X @ centers.T
            + (centers ** 2).sum(axis=1)[None, :]).clip(min=0.0)


def _lloyd(X, centers, max_iter, tol, max_reseeds=10):
    k = centers.shape[0]
    reseeds = 0
    labels = None
    for _ in range(max_iter):
        d2 = _sq_dist(X, centers)
        labels = d2.argmin(axis=1)
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            if reseeds >= max_reseeds:
                raise InitializationError(
                    f"k-means left cluster {int(empty[0])} empty after {reseeds} reseeds; "
                    "try fewer components")
            reseeds += 1
            # move each empty center onto the worst-fitted point
            far = np.argsort(-d2[np.arange(X.shape[0]), labels], kind="stable")
            for c, i in zip(empty, far):
                centers[c] = X[i]
            continue
        new = np.stack([X[labels == c].mean(axis=0) for c in range(k)])
        shift = np.abs(new - centers).max()
        centers = new
        if shift <= tol:
            break
    d2 = _sq_dist(X, centers)
    labels = d2.argmin(axis=1)
    if np.any(np.bincount(labels, minlength=k) == 0):
        raise InitializationError("k-means produced an empty cluster; try fewer components")
    inertia = float(d2[np.arange(X.shape[0]), labels].sum())
    return labels, centers, inertia


def kmeans(X, k, seed=0, restarts=10, max_iter=300, tol=1e-10):
    """Cluster the rows of ``X`` into ``k`` groups.

    Runs ``restarts`` independent k-means++ initializations followed by
    Lloyd iterations and keeps the run with the smallest inertia.

    Returns
    -------
    labels : ndarray of int, shape (n,)
    centers : ndarray, shape (k, p)
    inertia : float
    """
    X = np.asarray(X, dtype=float)
    if k < 1 or k > X.shape[0]:
        raise InitializationError(f"k={k} must be between 1 and n={X.shape[0]}")
    rng = np.random.default_rng(seed)
    best = None
    last_error = None
    for _ in range(max(1, restarts)):
        try:
            run = _lloyd(X, _kmeanspp(X, k, rng), max_iter, tol)
        except InitializationError as exc:
            last_error = exc
            continue
        if best is None or run[2] < best[2]:
            best = run
    if best is None:
        raise last_error
    return best
