"""Real divergence-free Fourier basis on the 2pi-periodic torus.

Every retained mode is a vector eigenfield of the Stokes operator,

    e_{k,cos}(x) = c * (k_perp / |k|) * cos(k.x)
    e_{k,sin}(x) = c * (k_perp / |k|) * sin(k.x)

with k_perp = (-k_y, k_x), c = 1 / (pi sqrt(2)) so that the fields are
orthonormal in L^2(T^2), and eigenvalue |k|^2.  Wavevectors come from the
half-lattice {k_x > 0} U {k_x = 0, k_y > 0}, truncated at |k|_inf <= kmax.

All coefficient arrays have the mode axis last; any leading axes are treated
as a batch, which is how ensembles are advanced without Python loops.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.fft as sfft

from .errors import BasisMismatchError

_NORM = 1.0 / (np.pi * np.sqrt(2.0))
# projection of a grid field onto e_{k,.}: c * (2 pi)^2
_ANALYSIS = _NORM * 4.0 * np.pi**2

PARITIES = ("cos", "sin")


class ModeDescriptor(NamedTuple):
    kx: int
    ky: int
    parity: str
    eigenvalue: int


def _grid_size(kmax: int) -> int:
    # at least 3 (2 kmax + 1) / 2 points per axis; even for a clean rfft layout
    m = int(np.ceil(1.5 * (2 * kmax + 1)))
    return m + (m % 2)


class Basis:
    """Ordered Stokes eigenbasis and the grid machinery for the bilinear term.

    Modes are sorted by eigenvalue, ties broken by (k_x, k_y, parity), so the
    low-mode projector P_N is reproducible.  Instances are immutable and can
    be shared between workers; FFT scratch is allocated per call.
    """

    def __init__(self, kmax: int):
        if int(kmax) != kmax or kmax < 1:
            raise ValueError(f"kmax must be an integer >= 1, got {kmax!r}")
        kmax = int(kmax)
        self.kmax = kmax

        wavevectors = [(kx, ky) for kx in range(0, kmax + 1)
                       for ky in range(-kmax, kmax + 1)
                       if kx > 0 or ky > 0]
        modes = [ModeDescriptor(kx, ky, p, kx * kx + ky * ky)
                 for kx, ky in wavevectors for p in PARITIES]
        modes.sort(key=lambda m: (m.eigenvalue, m.kx, m.ky, m.parity))
        self.modes = tuple(modes)
        self.total_dim = len(modes)
        self.eigenvalues = np.array([m.eigenvalue for m in modes], dtype=float)
        self.eigenvalues.setflags(write=False)
        self.grid_size = _grid_size(kmax)
        self._index = {(m.kx, m.ky, m.parity): j for j, m in enumerate(modes)}
        self._setup_transforms(wavevectors)

    def _setup_transforms(self, wavevectors):
        m = self.grid_size
        nyq = m // 2 + 1
        kv = np.array(wavevectors, dtype=int)
        kx, ky = kv[:, 0], kv[:, 1]
        kabs = np.sqrt(kx**2 + ky**2)
        self._cos_idx = np.array([self._index[(a, b, "cos")] for a, b in wavevectors])
        self._sin_idx = np.array([self._index[(a, b, "sin")] for a, b in wavevectors])
        self._nx = -ky / kabs
        self._ny = kx / kabs
        self._kx = kx.astype(float)
        self._ky = ky.astype(float)
        self._kabs = kabs
        self._flat = (ky % m) * nyq + kx
        zero_col = kx == 0
        self._mirror_sel = np.nonzero(zero_col)[0]
        self._mirror_flat = ((-ky[zero_col]) % m) * nyq
        self._hat_shape = (m, nyq)
        # synthesis scale: irfft2 divides by m^2
        self._syn = 0.5 * _NORM * m * m

    # ------------------------------------------------------------------
    # identity / bookkeeping

    def __eq__(self, other):
        return isinstance(other, Basis) and other.kmax == self.kmax

    def __hash__(self):
        return hash(("Basis", self.kmax))

    def __repr__(self):
        return f"Basis(kmax={self.kmax}, total_dim={self.total_dim})"

    def index(self, kx: int, ky: int, parity: str = "cos") -> int:
        """Position of mode (k, parity) in the basis ordering."""
        if kx < 0 or (kx == 0 and ky < 0):
            kx, ky = -kx, -ky
            # sin(-k.x) = -sin(k.x): same eigenfield up to sign, same slot
        try:
            return self._index[(kx, ky, parity)]
        except KeyError:
            raise KeyError(f"mode {(kx, ky, parity)} not in {self!r}") from None

    def eigenvalue(self, n: int) -> float:
        """lambda_n for the 1-based mode count n."""
        if not 1 <= n <= self.total_dim:
            raise ValueError(f"mode count {n} outside [1, {self.total_dim}]")
        return float(self.eigenvalues[n - 1])

    def shell_count(self, lam_cut: float) -> int:
        """Number of modes with eigenvalue <= lam_cut."""
        return int(np.searchsorted(self.eigenvalues, lam_cut, side="right"))

    def check(self, coeffs: np.ndarray) -> np.ndarray:
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[-1:] != (self.total_dim,):
            raise BasisMismatchError(
                f"coefficient axis has length {coeffs.shape[-1:]}, "
                f"basis has total_dim={self.total_dim}")
        return coeffs

    # ------------------------------------------------------------------
    # diagonal operators

    def stokes(self, coeffs):
        return self.eigenvalues * coeffs

    def implicit_solve(self, coeffs, c):
        """Solve (I + c A) x = coeffs."""
        return coeffs / (1.0 + c * self.eigenvalues)

    # ------------------------------------------------------------------
    # grid transforms

    def _half(self, coeffs):
        # (a_cos - i a_sin) / 2 per wavevector, times the irfft2 scale
        return self._syn * (coeffs[..., self._cos_idx] - 1j * coeffs[..., self._sin_idx])

    def _to_hat(self, vals):
        batch = vals.shape[:-1]
        out = np.zeros(batch + (self._hat_shape[0] * self._hat_shape[1],), dtype=complex)
        out[..., self._flat] = vals
        out[..., self._mirror_flat] = np.conj(vals[..., self._mirror_sel])
        return out.reshape(batch + self._hat_shape)

    def _irfft(self, vals):
        m = self.grid_size
        return sfft.irfft2(self._to_hat(vals), s=(m, m))

    def _project(self, wx, wy):
        m = self.grid_size
        f = sfft.rfft2(np.stack((wx, wy)))
        f = f.reshape(f.shape[:-2] + (-1,))[..., self._flat]
        p = (self._nx * f[0] + self._ny * f[1]) * (_ANALYSIS / (m * m))
        out = np.empty(p.shape[:-1] + (self.total_dim,))
        out[..., self._cos_idx] = p.real
        out[..., self._sin_idx] = -p.imag
        return out

    def to_grid(self, coeffs):
        """Velocity components (u_x, u_y) on the dealiasing grid."""
        h = self._half(self.check(coeffs))
        ux, uy = self._irfft(np.stack((self._nx * h, self._ny * h)))
        return ux, uy

    def from_grid(self, wx, wy):
        """Galerkin coefficients <w, e_j> of a grid vector field (Leray + P_total)."""
        return self._project(np.asarray(wx, float), np.asarray(wy, float))

    def vorticity_grid(self, coeffs):
        h = self._half(self.check(coeffs))
        return self._irfft(1j * self._kabs * h)

    def grid_points(self):
        m = self.grid_size
        x = 2.0 * np.pi * np.arange(m) / m
        # arrays are indexed [iy, ix]
        yy, xx = np.meshgrid(x, x, indexing="ij")
        return xx, yy

    def quadrature_inner(self, ax, ay, bx, by):
        """L^2(T^2) inner product of two grid vector fields (exact for
        trigonometric polynomials of degree < grid_size)."""
        m = self.grid_size
        w = 4.0 * np.pi**2 / (m * m)
        return w * np.sum(ax * bx + ay * by, axis=(-2, -1))

    # ------------------------------------------------------------------
    # bilinear term

    def bilinear(self, u, v):
        """Galerkin coefficients of Pi (u . grad) v, batched over leading axes."""
        hu = self._half(self.check(u))
        hv = self._half(self.check(v))
        ikx = 1j * self._kx
        iky = 1j * self._ky
        ux, uy, dxvx, dyvx, dxvy, dyvy = self._irfft(np.stack((
            self._nx * hu, self._ny * hu,
            ikx * self._nx * hv, iky * self._nx * hv,
            ikx * self._ny * hv, iky * self._ny * hv)))
        return self._project(ux * dxvx + uy * dyvx, ux * dxvy + uy * dyvy)

    def nonlinear(self, u):
        """B(u, u) via the rotational form omega * u_perp.

        (u.grad)u = grad(|u|^2/2) + omega (-u_y, u_x); the gradient part is
        orthogonal to every divergence-free mode and never computed.
        """
        h = self._half(self.check(u))
        ux, uy, om = self._irfft(np.stack((self._nx * h, self._ny * h, 1j * self._kabs * h)))
        return self._project(-om * uy, om * ux)

    # ------------------------------------------------------------------
    # norms on raw coefficient arrays

    def norm_h_sq(self, coeffs):
        return np.sum(coeffs * coeffs, axis=-1)

    def norm_v_sq(self, coeffs):
        return np.sum(self.eigenvalues * coeffs * coeffs, axis=-1)

    def norm_vstar_sq(self, coeffs):
        return np.sum(coeffs * coeffs / self.eigenvalues, axis=-1)


@functools.lru_cache(maxsize=None)
def build_basis(kmax: int) -> Basis:
    """Basis of all half-lattice modes with |k|_inf <= kmax (cached)."""
    return Basis(kmax)


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Real coefficient vector aligned with a Basis ordering."""

    basis: Basis
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.basis.check(self.coeffs), dtype=float)
        if c.ndim != 1:
            raise ValueError("SpectralField holds a single coefficient vector")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite coefficients")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, basis):
        return cls(basis, np.zeros(basis.total_dim))

    @classmethod
    def unit(cls, basis, j, scale=1.0):
        c = np.zeros(basis.total_dim)
        c[j] = scale
        return cls(basis, c)

    def _same(self, other):
        if other.basis != self.basis:
            raise BasisMismatchError(f"{self.basis!r} vs {other.basis!r}")

    def __add__(self, other):
        self._same(other)
        return SpectralField(self.basis, self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._same(other)
        return SpectralField(self.basis, self.coeffs - other.coeffs)

    def __mul__(self, s):
        return SpectralField(self.basis, float(s) * self.coeffs)

    __rmul__ = __mul__

    def __neg__(self):
        return SpectralField(self.basis, -self.coeffs)

    def __eq__(self, other):
        return (isinstance(other, SpectralField) and other.basis == self.basis
                and np.array_equal(other.coeffs, self.coeffs))

    def inner(self, other):
        self._same(other)
        return float(self.coeffs @ other.coeffs)

    def norm_h_sq(self):
        return float(self.basis.norm_h_sq(self.coeffs))

    def norm_v_sq(self):
        return float(self.basis.norm_v_sq(self.coeffs))

    def norm_vstar_sq(self):
        return float(self.basis.norm_vstar_sq(self.coeffs))


def apply_stokes(u: SpectralField) -> SpectralField:
    return SpectralField(u.basis, u.basis.stokes(u.coeffs))


def solve_implicit(u: SpectralField, c: float) -> SpectralField:
    """(I + c A)^{-1} u."""
    if c < 0:
        raise ValueError(f"implicit coefficient must be >= 0, got {c}")
    return SpectralField(u.basis, u.basis.implicit_solve(u.coeffs, c))


def bilinear_B(u: SpectralField, v: SpectralField) -> SpectralField:
    u._same(v)
    return SpectralField(u.basis, u.basis.bilinear(u.coeffs, v.coeffs))


def _check_n(basis, n):
    if int(n) != n or not 1 <= n <= basis.total_dim:
        raise ValueError(f"N={n} outside [1, {basis.total_dim}]")
    return int(n)


def project_low(u: SpectralField, n: int) -> SpectralField:
    """P_N: keep the first N coefficients."""
    n = _check_n(u.basis, n)
    c = np.zeros_like(u.coeffs)
    c[:n] = u.coeffs[:n]
    return SpectralField(u.basis, c)


def project_high(u: SpectralField, n: int) -> SpectralField:
    """Q_N = I - P_N."""
    n = _check_n(u.basis, n)
    c = np.array(u.coeffs)
    c[:n] = 0.0
    return SpectralField(u.basis, c)


def random_coeffs(basis, rng, energy=1.0, slope=1.0, n_modes=None, size=None):
    """Gaussian coefficients with variance ~ lambda^-slope, rescaled to the
    requested H-energy.  ``n_modes`` restricts support to the first modes."""
    shape = (basis.total_dim,) if size is None else (size, basis.total_dim)
    c = rng.standard_normal(shape) * basis.eigenvalues ** (-0.5 * slope)
    if n_modes is not None:
        c[..., n_modes:] = 0.0
    scale = np.sqrt(energy / basis.norm_h_sq(c))
    return c * (scale[..., None] if size is not None else scale)


# ----------------------------------------------------------------------
# serialization: (kmax, total_dim) as two little-endian int64, then float64s

_HEADER = struct.Struct("<qq")


def field_to_bytes(u: SpectralField) -> bytes:
    return _HEADER.pack(u.basis.kmax, u.basis.total_dim) + u.coeffs.astype("<f8").tobytes()


def field_from_bytes(buf: bytes, offset: int = 0):
    """Decode one field; returns (field, next_offset)."""
    kmax, dim = _HEADER.unpack_from(buf, offset)
    basis = build_basis(kmax)
    if dim != basis.total_dim:
        raise BasisMismatchError(f"header total_dim={dim} but kmax={kmax} gives {basis.total_dim}")
    start = offset + _HEADER.size
    end = start + 8 * dim
    if end > len(buf):
        raise ValueError("truncated field record")
    coeffs = np.frombuffer(buf[start:end], dtype="<f8").astype(float)
    return SpectralField(basis, coeffs), end
