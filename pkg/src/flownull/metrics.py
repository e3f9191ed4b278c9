"""Image-quality metrics, the P-sample averaging law and the empirical gain curve."""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _peak_ratio(resid_sq, truth_mag):
    peak = float(np.max(truth_mag)) ** 2
    if peak == 0:
        raise ValueError("truth image is identically zero")
    if resid_sq == 0:
        return np.inf
    return 10.0 * np.log10(truth_mag.size * peak / resid_sq)


def psnr(est, truth):
    """PSNR of magnitude images in dB; ``+inf`` when they agree exactly."""
    est, truth = np.abs(np.asarray(est)), np.abs(np.asarray(truth))
    if est.shape != truth.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {truth.shape}")
    resid = float(np.sum((est.astype(np.float64) - truth) ** 2))
    return _peak_ratio(resid, truth)


def cpsnr(est, truth):
    """Complex PSNR: like :func:`psnr` but on the complex residual."""
    est, truth = np.asarray(est), np.asarray(truth)
    if est.shape != truth.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {truth.shape}")
    resid = float(np.sum(np.abs(est.astype(np.complex128) - truth) ** 2))
    return _peak_ratio(resid, np.abs(truth))


def ssim(est, truth, win=7, data_range=None):
    """Mean local SSIM with a ``win`` x ``win`` uniform window.

    Stabilisers ``C1 = (0.01 L)^2`` and ``C2 = (0.03 L)^2`` with ``L`` the
    maximum of ``truth`` unless ``data_range`` is given (1 when the truth is
    all zero). Local variances use the unbiased (N - 1) normalisation and
    only windows fully inside the image are averaged.
    """
    x = np.abs(np.asarray(est, np.float64))
    y = np.abs(np.asarray(truth, np.float64))
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if win > min(x.shape):
        raise ValueError(f"window {win} larger than image {x.shape}")
    L = float(np.max(y)) if data_range is None else float(data_range)
    if L <= 0:
        L = 1.0
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    n = win * win

    def local_mean(a):
        return sliding_window_view(a, (win, win)).mean(axis=(-1, -2))

    mx, my = local_mean(x), local_mean(y)
    norm = n / (n - 1)
    vx = norm * (local_mean(x * x) - mx * mx)
    vy = norm * (local_mean(y * y) - my * my)
    cxy = norm * (local_mean(x * y) - mx * my)
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return float(s.mean())


def gain_theory(P):
    """Expected gain (dB) of a P-sample posterior mean over a single sample."""
    P = np.asarray(P, dtype=np.float64)
    if np.any(P < 1):
        raise ValueError("P must be >= 1")
    with np.errstate(invalid="ignore"):
        ratio = np.where(np.isinf(P), 2.0, 2 * P / (P + 1))
    out = 10.0 * np.log10(ratio)
    return float(out) if out.ndim == 0 else out


@dataclass
class GainCurve:
    P: list
    empirical_db: list
    theory_db: list
    magnitude_db: list = field(default_factory=list)
    mse: list = field(default_factory=list)
    trials: int = 0

    def max_deviation(self):
        return float(np.max(np.abs(np.subtract(self.empirical_db, self.theory_db))))

    def rows(self):
        return [
            {"P": p, "empirical_db": e, "theory_db": t,
             "magnitude_db": self.magnitude_db[i] if self.magnitude_db else None}
            for i, (p, e, t) in enumerate(zip(self.P, self.empirical_db, self.theory_db))
        ]


def gain_curve(draw, P_list, trials, seed=0, groups=4):
    """Empirical gain of the P-sample mean for each ``P`` in ``P_list``.

    ``draw(rng)`` returns ``(truth, samples)`` for one trial: ``truth`` an
    image (complex) and ``samples`` an array of posterior draws stacked on
    axis 0. Each trial asks for ``groups * max(P_list)`` draws; for every P
    they are cut into disjoint groups of P, so ``E_P`` is the mean squared
    error of a group average over all groups and trials, and the gain is
    ``10 log10(E_1 / E_P)``.
    """
    P_list = [int(p) for p in P_list]
    if sorted(P_list) != P_list or P_list[0] < 1:
        raise ValueError("P_list must be ascending positive integers")
    rng = np.random.default_rng(seed)
    n = groups * P_list[-1]
    err_c = np.zeros(len(P_list))
    err_m = np.zeros(len(P_list))
    for _ in range(trials):
        truth, samples = draw(rng, n)
        samples = np.asarray(samples)[:n]
        if samples.shape[0] < n:
            raise ValueError(f"sampler returned {samples.shape[0]} draws, need {n}")
        for j, P in enumerate(P_list):
            g = n // P
            means = samples[: g * P].reshape(g, P, *samples.shape[1:]).mean(axis=1)
            axes = tuple(range(1, means.ndim))
            err_c[j] += np.mean(np.sum(np.abs(means - truth) ** 2, axis=axes))
            err_m[j] += np.mean(np.sum((np.abs(means) - np.abs(truth)) ** 2, axis=axes))
    emp = 10 * np.log10(err_c[0] / err_c)
    mag = 10 * np.log10(err_m[0] / err_m)
    return GainCurve(P=P_list, empirical_db=emp.tolist(), theory_db=[gain_theory(p) for p in P_list],
                     magnitude_db=mag.tolist(), mse=(err_c / trials).tolist(), trials=trials)


def moment_distance(samples, mean, cov):
    """Frobenius distances between empirical sample moments and reference moments."""
    s = np.asarray(samples, np.float64).reshape(len(samples), -1)
    emp_mean = s.mean(axis=0)
    emp_cov = np.cov(s, rowvar=False)
    return {
        "mean": float(np.linalg.norm(emp_mean - mean)),
        "cov": float(np.linalg.norm(emp_cov - cov)),
        "mean_rel": float(np.linalg.norm(emp_mean - mean) / max(np.linalg.norm(mean), 1e-300)),
        "cov_rel": float(np.linalg.norm(emp_cov - cov) / max(np.linalg.norm(cov), 1e-300)),
    }
