import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochns.errors import BasisMismatchError
from stochns.spectral import (SpectralField, apply_stokes, bilinear_B, build_basis, field_from_bytes,
                              field_to_bytes, project_high, project_low, random_coeffs, solve_implicit)

C = 1.0 / (np.pi * np.sqrt(2.0))


def dense_fields(basis, m):
    """Eigenfields, their gradients and quadrature weights from the closed-form
    cos/sin expressions on an m x m grid (no FFTs)."""
    x = 2 * np.pi * np.arange(m) / m
    X, Y = np.meshgrid(x, x, indexing="xy")
    E, DX, DY = [], [], []
    for md in basis.modes:
        k = np.hypot(md.kx, md.ky)
        nx, ny = -md.ky / k, md.kx / k
        ph = md.kx * X + md.ky * Y
        s = np.cos(ph) if md.parity == "cos" else np.sin(ph)
        ds = -np.sin(ph) if md.parity == "cos" else np.cos(ph)
        E.append((C * nx * s, C * ny * s))
        # d/dx f(k.x) = kx f', d/dy = ky f'
        DX.append((C * nx * md.kx * ds, C * ny * md.kx * ds))
        DY.append((C * nx * md.ky * ds, C * ny * md.ky * ds))
    return np.array(E), np.array(DX), np.array(DY), (2 * np.pi / m) ** 2


def oracle_B(basis, u, v, m=None):
    m = m or 4 * basis.kmax + 4
    E, DX, DY, w = dense_fields(basis, m)
    U = np.tensordot(u, E, 1)
    Vx, Vy = np.tensordot(v, DX, 1), np.tensordot(v, DY, 1)
    conv = U[0] * Vx + U[1] * Vy
    return w * np.einsum("jcxy,cxy->j", E, conv)


@pytest.fixture(scope="module")
def b4():
    return build_basis(4)


@pytest.mark.parametrize("kmax,dim", [(1, 8), (2, 24), (4, 80), (8, 288), (10, 440)])
def test_total_dim(kmax, dim):
    assert build_basis(kmax).total_dim == dim


def test_kmax1_wavevectors():
    b = build_basis(1)
    kv = {(m.kx, m.ky) for m in b.modes}
    assert kv == {(1, 0), (0, 1), (1, 1), (1, -1)}
    assert [m.eigenvalue for m in b.modes] == [1] * 4 + [2] * 4


@pytest.mark.parametrize("kmax", [1, 3, 7])
def test_first_eigenvalue(kmax):
    assert build_basis(kmax).eigenvalue(1) == 1.0


def test_eigenvalue_of_wavevector(b4):
    for p in ("cos", "sin"):
        assert b4.eigenvalues[b4.index(1, 2, p)] == 5.0
    assert b4.index(-1, -2, "sin") == b4.index(1, 2, "sin")
    assert np.all(np.diff(b4.eigenvalues) >= 0)


def test_stokes_examples(b4):
    u = SpectralField.unit(b4, b4.index(1, 0, "cos"))
    assert apply_stokes(u) == u
    j = b4.index(1, 2, "cos")
    assert apply_stokes(SpectralField.unit(b4, j)).coeffs[j] == 5.0
    z = SpectralField.zeros(b4)
    assert apply_stokes(z) == z


def test_solve_implicit(b4, rng=np.random.default_rng(0)):
    u = SpectralField(b4, rng.standard_normal(b4.total_dim))
    assert solve_implicit(u, 0.0) == u
    j = b4.index(0, 1, "sin")
    assert solve_implicit(SpectralField.unit(b4, j), 0.1).coeffs[j] == pytest.approx(1 / 1.1, rel=1e-15)
    np.testing.assert_allclose(apply_stokes(solve_implicit(u, 0.3)).coeffs,
                               solve_implicit(apply_stokes(u), 0.3).coeffs, rtol=1e-14)
    with pytest.raises(ValueError):
        solve_implicit(u, -1e-3)


@pytest.mark.parametrize("kmax", [1, 2, 3])
def test_bilinear_matches_quadrature_oracle(kmax):
    b = build_basis(kmax)
    rng = np.random.default_rng(kmax)
    for _ in range(3):
        u, v = rng.standard_normal((2, b.total_dim))
        ref = oracle_B(b, u, v)
        np.testing.assert_allclose(b.bilinear(u, v), ref, atol=1e-12 * np.abs(ref).max())
        ref_uu = oracle_B(b, u, u)
        np.testing.assert_allclose(b.nonlinear(u), ref_uu, atol=1e-12 * np.abs(ref_uu).max())


def test_oracle_grid_independent():
    # the oracle itself must not depend on its quadrature resolution once exact
    b = build_basis(2)
    u, v = np.random.default_rng(5).standard_normal((2, b.total_dim))
    np.testing.assert_allclose(oracle_B(b, u, v, 12), oracle_B(b, u, v, 17), atol=1e-13)


def test_single_mode_nonlinearity_vanishes():
    # k=(1,0) cos: u = c (0, cos x), (u.grad)u = c^2 cos x * d/dy(...) = 0 identically
    b = build_basis(3)
    e = SpectralField.unit(b, b.index(1, 0, "cos"), 2.5)
    assert np.max(np.abs(bilinear_B(e, e).coeffs)) <= 1e-15
    for md in b.modes[:20]:
        e = SpectralField.unit(b, b.index(md.kx, md.ky, md.parity))
        assert np.max(np.abs(b.nonlinear(e.coeffs))) < 1e-13


def test_B_zero_first_argument(b4):
    v = random_coeffs(b4, np.random.default_rng(1))
    assert not np.any(b4.bilinear(np.zeros(b4.total_dim), v))


def test_rotational_form_equals_general_form(b4):
    u = random_coeffs(b4, np.random.default_rng(2), size=5)
    np.testing.assert_allclose(b4.nonlinear(u), b4.bilinear(u, u), atol=1e-13)


def test_batch_invariance_bitwise(b4):
    u = random_coeffs(b4, np.random.default_rng(3), size=7)
    batched = b4.nonlinear(u)
    for i in range(7):
        assert np.array_equal(batched[i], b4.nonlinear(u[i]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_orthogonality_and_antisymmetry(seed):
    b = build_basis(4)
    rng = np.random.default_rng(seed)
    u, v, z = rng.standard_normal((3, b.total_dim))
    scale = np.sqrt(b.norm_v_sq(u)) * b.norm_v_sq(v)
    assert abs(b.bilinear(u, v) @ v) <= 1e-10 * scale
    lhs, rhs = b.bilinear(u, v) @ z, -(b.bilinear(u, z) @ v)
    assert abs(lhs - rhs) <= 1e-10 * scale


def test_gram_matrix(b4):
    E = np.eye(b4.total_dim)
    ux, uy = b4.to_grid(E)
    G = b4.quadrature_inner(ux[:, None], uy[:, None], ux[None], uy[None])
    assert np.max(np.abs(G - np.eye(b4.total_dim))) <= 1e-12


def test_grid_roundtrip_and_divergence_free(b4):
    u = random_coeffs(b4, np.random.default_rng(4))
    ux, uy = b4.to_grid(u)
    np.testing.assert_allclose(b4.from_grid(ux, uy), u, atol=1e-13)
    # a pure gradient field projects to zero
    xx, yy = b4.grid_points()
    assert np.max(np.abs(b4.from_grid(np.cos(xx + 2 * yy), 2 * np.cos(xx + 2 * yy)))) < 1e-13


def test_vorticity(b4):
    j = b4.index(1, 0, "cos")
    xx, _ = b4.grid_points()
    # u = c (0, cos x), curl = d_x u_y = -c sin x
    np.testing.assert_allclose(b4.vorticity_grid(np.eye(b4.total_dim)[j]), -C * np.sin(xx), atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 79))
def test_poincare(seed, N):
    b = build_basis(4)
    u = SpectralField(b, np.random.default_rng(seed).standard_normal(b.total_dim))
    assert u.norm_v_sq() >= b.eigenvalue(1) * u.norm_h_sq()
    lo, hi = project_low(u, N), project_high(u, N)
    assert lo.norm_v_sq() <= b.eigenvalue(N) * lo.norm_h_sq() * (1 + 1e-15)
    assert b.eigenvalue(N + 1) * hi.norm_h_sq() <= hi.norm_v_sq() * (1 + 1e-15)
    assert lo + hi == u
    assert apply_stokes(u).inner(u) == pytest.approx(u.norm_v_sq(), rel=1e-14)


def test_projection_bounds(b4):
    u = SpectralField(b4, np.ones(b4.total_dim))
    assert project_low(u, b4.total_dim) == u
    for bad in (0, b4.total_dim + 1):
        with pytest.raises(ValueError):
            project_low(u, bad)


def test_basis_mismatch():
    a, b = build_basis(2), build_basis(3)
    with pytest.raises(BasisMismatchError):
        SpectralField(a, np.zeros(a.total_dim)) + SpectralField(b, np.zeros(b.total_dim))
    with pytest.raises(BasisMismatchError):
        SpectralField(a, np.zeros(5))


def test_serialization_roundtrip(b4):
    u = SpectralField(b4, random_coeffs(b4, np.random.default_rng(6)))
    v = SpectralField(build_basis(2), np.arange(24.0))
    buf = field_to_bytes(u) + field_to_bytes(v)
    u2, off = field_from_bytes(buf)
    v2, end = field_from_bytes(buf, off)
    assert u2 == u and v2 == v and end == len(buf)
    assert np.array_equal(u2.coeffs, u.coeffs)
    with pytest.raises(ValueError):
        field_from_bytes(buf[:-8], off)


def test_random_coeffs_energy(b4):
    c = random_coeffs(b4, np.random.default_rng(0), energy=2.5, n_modes=10, size=3)
    np.testing.assert_allclose(b4.norm_h_sq(c), 2.5)
    assert not np.any(c[:, 10:])
