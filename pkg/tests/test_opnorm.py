from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geobeams.opnorm import dense_matrix, dense_norm, power_norm
from geobeams.tolerances import ConvergenceError


def _mat(seed, m=12, n=9):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((m, n)) + 1j * rng.standard_normal((m, n))


@given(st.integers(0, 10_000))
@settings(max_examples=15)
def test_power_matches_svd(seed):
    A = _mat(seed)
    est = power_norm(lambda v: A @ v, lambda w: A.conj().T @ w, (9,), rtol=1e-10, maxiter=20000)
    assert est.value == pytest.approx(np.linalg.norm(A, 2), rel=1e-6)


def test_block_handles_clustered_top():
    s = np.array([1.0, 1.0 - 1e-6, 0.5, 0.2])
    rng = np.random.default_rng(3)
    U, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    V, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    A = U @ np.diag(s) @ V.T
    est = power_norm(lambda v: A @ v, lambda w: A.T @ w, (4,), rtol=1e-10, block=3, dtype=float)
    assert est.value == pytest.approx(1.0, rel=1e-8)


def test_dense_oracle_on_fft_map():
    def apply(x):
        return np.fft.fft2(x) * np.arange(16).reshape(4, 4) / 16

    A = dense_matrix(apply, (4, 4))
    assert A.shape == (16, 16)
    # FFT is sqrt(16) times unitary, the multiplier max is 15/16
    assert dense_norm(apply, (4, 4)) == pytest.approx(4 * 15 / 16, rel=1e-12)


def test_zero_operator():
    est = power_norm(lambda v: 0 * v, lambda w: 0 * w, (5,))
    assert est.value == 0.0


def test_nonconvergence_raises_with_achieved():
    A = np.diag([1.0, 0.999999])
    with pytest.raises(ConvergenceError) as e:
        power_norm(lambda v: A @ v, lambda w: A @ w, (2,), rtol=1e-14, maxiter=3, dtype=float)
    assert e.value.achieved > 0
