"""An 8-dimensional linear-Gaussian stand-in for the MRI problem.

One coil, a 2x2 complex image (Q = 8 real unknowns), and a mask keeping one
of the two k-space columns. The prior is a correlated Gaussian, the
measurements carry a little white noise, so the posterior over ``x`` is a
proper Gaussian in all 8 dimensions and can be computed exactly.
"""

from dataclasses import dataclass

import numpy as np

from flownull import mri
from flownull.core.fft import fft2, ifft2
from flownull.data import Dataset
from flownull.flow.model import ModelConfig
from flownull.oracle import GaussianOracle

H = W = 2


def toy_mask():
    sel = np.zeros(W, dtype=bool)
    sel[W // 2] = True  # the DC column in centred coordinates
    return mri.SamplingMask(width=W, selected=sel, acs=(W // 2, W // 2 + 1), R=2)


def vec(x):
    """Complex (..., 1, H, W) -> real (..., 8) in channel order (Re, Im)."""
    r = mri.to_channels(np.asarray(x))
    return r.reshape(*r.shape[:-3], -1).astype(np.float64)


def unvec(v):
    v = np.asarray(v, np.float64)
    return mri.from_channels(v.reshape(*v.shape[:-1], 2, H, W))


def measurement_matrix(mask):
    """Real matrix ``B`` with ``B vec(x) = [Re; Im]`` of the measured k-space entries."""
    cols = mask.kspace_columns()
    rows = []
    for j in range(2 * H * W):
        e = np.zeros(2 * H * W)
        e[j] = 1.0
        k = fft2(unvec(e))[0][:, cols]
        rows.append(np.concatenate([k.real.ravel(), k.imag.ravel()]))
    return np.array(rows).T


def measurements_to_zero_filled(m, mask):
    """Inverse of ``B``'s packing: zero-filled complex coil image for each ``m``."""
    m = np.atleast_2d(m)
    cols = mask.kspace_columns()
    n_meas = H * int(cols.sum())
    k = np.zeros((m.shape[0], 1, H, W), np.complex128)
    k[:, 0][:, :, cols] = (m[:, :n_meas] + 1j * m[:, n_meas:]).reshape(m.shape[0], H, -1)
    return ifft2(k)


@dataclass
class ToyProblem:
    oracle: GaussianOracle
    mask: mri.SamplingMask

    @classmethod
    def build(cls, seed=0, noise_var=0.01):
        rng = np.random.default_rng(seed)
        q = 2 * H * W
        a = rng.standard_normal((q, q))
        cov = a @ a.T / q + 0.1 * np.eye(q)
        mean = rng.normal(0.0, 1.0, q)
        mask = toy_mask()
        return cls(GaussianOracle(mean, cov, measurement_matrix(mask), noise_var), mask)

    @property
    def dim(self):
        return self.oracle.dim

    def draw(self, n, seed):
        """``(x, m)`` pairs as real vectors."""
        return self.oracle.simulate(n, np.random.default_rng(seed))

    def dataset(self, n, seed):
        x, m = self.draw(n, seed)
        xc = unvec(x).astype(np.complex64)
        y = measurements_to_zero_filled(m, self.mask).astype(np.complex64)
        maps = np.ones_like(xc)
        return Dataset(xc, y, maps, self.mask, normalize=False,
                       meta={"kind": "toy", "seed": seed, "noise_var": self.oracle.noise_var})

    def measurements_from_y(self, y):
        """Recover ``m`` from zero-filled images (exact: ``B`` has orthonormal rows)."""
        return vec(y) @ self.oracle.B.T

    def posterior_from_y(self, y):
        return self.oracle.posterior(self.measurements_from_y(y))


def toy_model_config(seed=0, steps=4, hidden=64):
    return ModelConfig(channels=2, height=H, width=W, levels=1, steps=steps, hidden=hidden,
                       cond_widths=[16], unet_base=16, unet_depth=1, seed=seed)
