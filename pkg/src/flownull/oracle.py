"""Closed-form posterior for a linear-Gaussian model ``m = B x + e``.

Prior ``x ~ N(mu, Sigma)``, noise ``e ~ N(0, s2 I)``. All quantities live in a
real vector space; complex images enter through their (Re, Im) packing.
"""

import numpy as np


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


class GaussianOracle:
    def __init__(self, prior_mean, prior_cov, forward, noise_var):
        self.mu = np.asarray(prior_mean, np.float64)
        self.sigma = np.asarray(prior_cov, np.float64)
        self.B = np.atleast_2d(np.asarray(forward, np.float64))
        self.noise_var = float(noise_var)
        n = self.mu.size
        if self.sigma.shape != (n, n) or self.B.shape[1] != n:
            raise ValueError("prior mean, covariance and forward matrix disagree in size")
        if self.noise_var < 0:
            raise ValueError("noise variance must be >= 0")
        if not np.allclose(self.sigma, self.sigma.T):
            raise ValueError("prior covariance must be symmetric")
        s = self.B @ self.sigma @ self.B.T + self.noise_var * np.eye(self.B.shape[0])
        try:
            self._gain = np.linalg.solve(s, self.B @ self.sigma).T  # Sigma B^T S^-1
        except np.linalg.LinAlgError as err:
            raise SingularCovarianceError("innovation covariance is singular") from err
        cov = self.sigma - self._gain @ self.B @ self.sigma
        self.post_cov = 0.5 * (cov + cov.T)
        self._chol = None

    @property
    def dim(self):
        return self.mu.size

    def simulate(self, n, rng):
        """Draw ``(x, m)`` pairs from the joint model."""
        x = rng.multivariate_normal(self.mu, self.sigma, size=n, method="cholesky")
        e = rng.standard_normal((n, self.B.shape[0])) * np.sqrt(self.noise_var)
        return x, x @ self.B.T + e

    def posterior(self, m):
        """Posterior ``(mean, covariance)``; ``m`` may be a batch of measurements."""
        m = np.asarray(m, np.float64)
        mean = self.mu + (m - self.B @ self.mu) @ self._gain.T
        return mean, self.post_cov

    def _factor(self):
        if self._chol is None:
            try:
                self._chol = np.linalg.cholesky(self.post_cov)
            except np.linalg.LinAlgError as err:
                raise SingularCovarianceError("posterior covariance is singular; cannot sample") from err
            if np.min(np.diag(self._chol)) < 1e-12 * np.sqrt(np.max(np.diag(self.post_cov))):
                raise SingularCovarianceError("posterior covariance is numerically singular")
        return self._chol

    def sample(self, m, n, rng):
        """``n`` exact posterior draws for a single measurement ``m``: shape (n, dim)."""
        mean, _ = self.posterior(m)
        L = self._factor()
        return mean + rng.standard_normal((n, self.dim)) @ L.T

    def entropy(self):
        """Differential entropy of the posterior in nats (same for every ``m``)."""
        sign, logdet = np.linalg.slogdet(2 * np.pi * np.e * self.post_cov)
        if sign <= 0:
            raise SingularCovarianceError("posterior covariance is not positive definite")
        return 0.5 * logdet

    def entropy_bits_per_dim(self):
        return self.entropy() / (self.dim * np.log(2.0))

    def log_density(self, x, m):
        """Exact log posterior density of ``x`` given ``m`` (nats)."""
        mean, cov = self.posterior(m)
        L = self._factor()
        r = np.linalg.solve(L, (np.asarray(x) - mean).T)
        return -0.5 * np.sum(r**2, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * self.dim * np.log(2 * np.pi)


def oracle_posterior(oracle, m):
    return oracle.posterior(m)


def oracle_sample(oracle, m, n, seed=0):
    return oracle.sample(m, n, np.random.default_rng(seed))
