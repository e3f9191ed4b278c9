import numpy as np


def rand_orthogonal(n, seed, dtype=np.float32):
    """Haar-distributed ``n x n`` orthogonal matrix, deterministic in ``seed``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q.astype(dtype)
