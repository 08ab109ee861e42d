"""Independent oracles for the Frechet distance, shared with the acceptance run."""

import numpy as np

from dtgan.evaluation import frechet_distance


def one_d_oracle(m1, s1, m2, s2):
    # closed form between two 1-D Gaussians with std s1, s2
    return (m1 - m2) ** 2 + (s1 - s2) ** 2


def diagonal_oracle(mu1, var1, mu2, var2):
    return sum(one_d_oracle(a, np.sqrt(v), b, np.sqrt(w)) for a, v, b, w in zip(mu1, var1, mu2, var2))


def random_spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T / d + 0.1 * np.eye(d)


def cases():
    """(name, value, expected, tolerance)."""
    rng = np.random.default_rng(0)
    out = []
    for d in (1, 4, 16):
        mu, cov = rng.normal(size=d), random_spd(rng, d)
        out.append((f"identical {d}-D Gaussians give 0", frechet_distance(mu, cov, mu, cov), 0.0, 1e-8))
    out.append(("1-D N(0,1) vs N(1,1) is 1", frechet_distance([0.0], [[1.0]], [1.0], [[1.0]]), 1.0, 1e-12))
    out.append(("diag(1,4) vs diag(4,1) is 2",
                frechet_distance([0, 0], np.diag([1.0, 4.0]), [0, 0], np.diag([4.0, 1.0])), 2.0, 1e-8))
    for k in range(5):
        d = int(rng.integers(2, 12))
        mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
        v1, v2 = rng.uniform(0.1, 5, d), rng.uniform(0.1, 5, d)
        out.append((f"random diagonal case {k} (d={d}) matches per-coordinate sum",
                    frechet_distance(mu1, np.diag(v1), mu2, np.diag(v2)), diagonal_oracle(mu1, v1, mu2, v2), 1e-8))
    for k in range(5):
        d = int(rng.integers(2, 12))
        mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
        c1, c2 = random_spd(rng, d), random_spd(rng, d)
        out.append((f"random full case {k} (d={d}) is symmetric",
                    frechet_distance(mu1, c1, mu2, c2), frechet_distance(mu2, c2, mu1, c1), 1e-9))
    return out
