import numpy as np
import pytest

from lfa.core import make_rng, normalize_rows


@pytest.fixture
def rng():
    return make_rng(20240915)


def random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    """QR-based orthogonal sample with a deterministic sign convention."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def random_prototypes(rng: np.random.Generator, c: int, d: int) -> np.ndarray:
    return normalize_rows(rng.standard_normal((c, d)))
