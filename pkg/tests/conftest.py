import numpy as np
import pytest

from colorshape.pointcloud import PointCloud4D


def fibonacci_sphere(n, radius=1.0):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    th = np.pi * (1 + 5 ** 0.5) * i
    return radius * np.column_stack([r * np.cos(th), r * np.sin(th), z])


def random_surface(seed, n=250):
    """Jittered, anisotropically scaled sphere sample with a random smooth color."""
    rng = np.random.default_rng(seed)
    P = fibonacci_sphere(n)
    P += 0.01 * rng.standard_normal(P.shape)
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    P *= rng.uniform(0.7, 1.4, size=3)
    w = rng.standard_normal(3)
    color = 5.0 + P @ w + 0.3 * np.sin(3 * P[:, 0])
    return PointCloud4D(P, color, id=f"fixture{seed}")


def random_rotation(rng):
    Q, R = np.linalg.qr(rng.standard_normal((3, 3)))
    Q *= np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] *= -1
    return Q


@pytest.fixture
def sphere_cloud():
    P = fibonacci_sphere(1000)
    return PointCloud4D(P, 5 * (P[:, 2] + 1), id="sphere")
