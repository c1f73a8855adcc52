import numpy as np
import pytest

from ebmnm.core import Dataset


def random_psd(rng, dim, scale=1.0, ridge=0.1):
    """Well-conditioned random symmetric positive definite matrix."""
    a = rng.standard_normal((dim, dim))
    m = (a @ a.T) / dim + ridge * np.eye(dim)
    return scale * 0.5 * (m + m.T)


def random_dataset(rng, n, dim, shared=True, noise_scale=1.0):
    """Random dataset with x drawn from a one-component model."""
    u = random_psd(rng, dim, scale=2.0)
    if shared:
        v = random_psd(rng, dim, scale=noise_scale)
        noise = v
        theta = rng.multivariate_normal(np.zeros(dim), u, size=n)
        x = theta + rng.multivariate_normal(np.zeros(dim), v, size=n)
    else:
        noise = np.stack([random_psd(rng, dim, scale=noise_scale) for _ in range(n)])
        theta = rng.multivariate_normal(np.zeros(dim), u, size=n)
        x = theta + np.stack(
            [rng.multivariate_normal(np.zeros(dim), noise[j]) for j in range(n)]
        )
    return Dataset(x, noise)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
