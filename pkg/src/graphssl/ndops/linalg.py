from __future__ import annotations

import numpy as np


def cosine_sim(a, b) -> float:
    """Cosine similarity; 0 when either vector has zero norm."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Pairwise cosine similarities between rows; zero rows give 0."""
    def unit(x):
        x = np.asarray(x, dtype=np.float64)
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)

    ua = unit(a)
    ub = ua if b is None else unit(b)
    return np.clip(ua @ ub.T, -1.0, 1.0)


def _orthonormal(x: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(x)
    # make the factorization unique so iterates do not flip sign
    s = np.sign(np.diag(r))
    s[s == 0] = 1.0
    return q * s


def top_eigvecs(m: np.ndarray, d: int, *, tol: float = 1e-9, max_iter: int = 500,
                seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Leading ``d`` eigenpairs of a symmetric PSD matrix.

    Simultaneous (block) power iteration with QR re-orthonormalization and a
    Rayleigh-Ritz rotation each step. Stops when the sine of the largest
    principal angle between consecutive subspaces drops below ``tol``.
    """
    n = m.shape[0]
    rng = np.random.default_rng(seed)
    q = _orthonormal(rng.standard_normal((n, d)))
    for _ in range(max_iter):
        z = _orthonormal(m @ q)
        # sin of largest principal angle between span(q) and span(z)
        resid = z - q @ (q.T @ z)
        change = np.linalg.norm(resid, 2) if resid.size else 0.0
        q = z
        if change < tol:
            break
    small = q.T @ m @ q
    w, u = np.linalg.eigh((small + small.T) / 2)
    order = np.argsort(w)[::-1]
    return w[order], q @ u[:, order]


def _fix_signs(v: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(v), axis=0)
    s = np.sign(v[idx, np.arange(v.shape[1])])
    s[s == 0] = 1.0
    return v * s


def pca_reduce(x, d: int, *, tol: float = 1e-9, max_iter: int = 500, seed: int = 0) -> np.ndarray:
    """Project mean-centered rows of ``x`` onto the top-``d`` principal directions.

    Works on the F x F covariance, or on the N x N Gram matrix when N < F.
    Each direction is signed so its largest-magnitude coordinate is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    n, f = x.shape
    if not 1 <= d <= min(n, f):
        raise ValueError(f"pca_reduce: d={d} must lie in 1..{min(n, f)}")
    xc = x - x.mean(axis=0, keepdims=True)
    if not np.any(xc):
        return np.zeros((n, d))
    if n < f:
        w, u = top_eigvecs(xc @ xc.T, d, tol=tol, max_iter=max_iter, seed=seed)
        sv = np.sqrt(np.clip(w, 0, None))
        v = np.divide(xc.T @ u, sv, out=np.zeros((f, d)), where=sv > 1e-12)
    else:
        _, v = top_eigvecs(xc.T @ xc, d, tol=tol, max_iter=max_iter, seed=seed)
    return xc @ _fix_signs(v)
