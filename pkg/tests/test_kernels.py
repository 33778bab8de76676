import subprocess
import sys

import numpy as np
import pytest

from conftest import random_prototypes
from lfa import _kernels
from lfa.core import make_rng
from lfa.refine import margin_matrix


@pytest.mark.skipif(not _kernels.NUMBA_ENABLED, reason="numba backend inactive")
class TestBackendAgreement:
    def test_loss_and_gradient_agree(self, rng):
        for _ in range(10):
            n = int(rng.integers(4, 40))
            c = int(rng.integers(2, 12))
            d = int(rng.integers(2, 24))
            u = rng.standard_normal((n, d))
            y = random_prototypes(rng, c, d)
            labels = rng.integers(0, c, n).astype(np.int64)
            k = int(rng.integers(1, 6))
            margins = margin_matrix(y, 4.0)
            l_jit, g_jit = _kernels._hinge_loss_gu_jit(u, y, labels, margins, k)
            l_np, g_np = _kernels._hinge_loss_gu_numpy(u, y, labels, margins, k)
            if l_np > 0:
                assert abs(l_jit - l_np) / l_np < 1e-10
            else:
                assert l_jit == 0.0
            np.testing.assert_allclose(g_jit, g_np, atol=1e-10)

    def test_tie_breaking_matches(self):
        # classes 1 and 2 exactly equidistant from the embedding
        u = np.array([[1.0, 0.0]])
        y = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        labels = np.array([0], dtype=np.int64)
        margins = np.array([[0.0, 0.1, 0.9],
                            [0.1, 0.0, 0.5],
                            [0.9, 0.5, 0.0]])
        # selecting class 1 vs class 2 changes the margin, hence the loss
        l_jit, _ = _kernels._hinge_loss_gu_jit(u, y, labels, margins, 1)
        l_np, _ = _kernels._hinge_loss_gu_numpy(u, y, labels, margins, 1)
        d_ii, d_ij = 0.0, np.sqrt(2.0)
        expect = max(d_ii - d_ij + 0.1, 0.0)  # class 1 wins the tie
        assert l_jit == pytest.approx(expect)
        assert l_np == pytest.approx(expect)


class TestBackendSelection:
    def _backend_with_env(self, value):
        code = "from lfa._kernels import backend; print(backend())"
        out = subprocess.run([sys.executable, "-c", code],
                             capture_output=True, text=True,
                             env={"PATH": "/usr/bin:/bin", "LFA_NUMBA": value})
        assert out.returncode == 0, out.stderr
        return out.stdout.strip()

    def test_env_flag_selects_numpy(self):
        assert self._backend_with_env("0") == "numpy"

    def test_default_is_numba(self):
        assert self._backend_with_env("1") == "numba"

    def test_dispatcher_wraps_active_backend(self, rng):
        u = rng.standard_normal((6, 4))
        y = random_prototypes(rng, 3, 4)
        labels = rng.integers(0, 3, 6)
        margins = margin_matrix(y, 4.0)
        loss, g = _kernels.hinge_loss_gu(u, y, labels, margins, 2)
        assert np.isfinite(loss)
        assert g.shape == (6, 4)
