"""Constitutive pressure laws, the density cutoff, and regularized pressure.

The default constitutive law is singular at vacuum,

    pi(rho) = a * ((rho/rho_zero)**gamma - (rho/rho_zero)**(-beta)),

with gamma > 1, beta > 0, a > 0.  It is strictly increasing and C^1 on
(0, inf), crosses zero at ``rho_zero`` and diverges to -inf as the density
vanishes, which is the mechanism that keeps converged densities away from
vacuum.  A plain power law ``a * (rho**gamma - rho_zero**gamma)`` is
provided for contrast experiments; it deliberately violates the vacuum
singularity.

The cutoff is a C^1 plateau function: zero below ``1/n2``, one on
``[1/n1, m1]``, zero above ``m2``, with cubic smoothstep transitions and
the normalization ``n2 - n1 = m2 - m1 = h`` (h the mean density).

The regularized pressure used by the approximate system is

    P(rho) = integral from rho_zero to rho of pi'(t) K(t) dt,

which equals pi on the plateau, is constant outside [1/n2, m2], and
splits as P = P_plus - P_minus with P_plus = max(P, 0) because P is
nondecreasing and vanishes at rho_zero.  Values come from a dense table
with monotone cubic interpolation; the derivative pi'(rho) K(rho) is
analytic.

Everything here is immutable after construction and safe to share.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .errors import ConfigurationError, NumericsError

# 7-point Gauss-Legendre on [-1, 1], used for the cumulative quadratures
_GL_X, _GL_W = np.polynomial.legendre.leggauss(7)


def _cumulative_integral(fn, grid: np.ndarray) -> np.ndarray:
    """Cumulative integral of fn along a sorted grid, Gauss panel per gap."""
    a = grid[:-1]
    b = grid[1:]
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    pts = mid[:, None] + half[:, None] * _GL_X[None, :]
    vals = fn(pts.ravel()).reshape(pts.shape)
    panel = half * (vals @ _GL_W)
    out = np.empty_like(grid)
    out[0] = 0.0
    np.cumsum(panel, out=out[1:])
    return out


class PressureLaw:
    """Common interface: value, derivative, inverse, parts, energy primitive."""

    is_singular: bool
    gamma: float
    coeff: float
    rho_zero: float

    def value(self, rho):
        raise NotImplementedError

    def derivative(self, rho):
        raise NotImplementedError

    def second_derivative(self, rho):
        raise NotImplementedError

    def _check(self, rho):
        rho = np.asarray(rho, dtype=float)
        if np.any(rho <= 0.0) and self.is_singular:
            raise ValueError("density must be positive for a vacuum-singular law")
        if np.any(rho < 0.0):
            raise ValueError("density must be nonnegative")
        return rho

    def positive_part(self, rho):
        return np.maximum(self.value(rho), 0.0)

    def negative_part(self, rho):
        return np.maximum(-self.value(rho), 0.0)

    def inverse(self, p: float) -> float:
        """Density with pi(rho) = p, by safeguarded bracketing.

        Resolves |pi(rho) - p| <= 1e-12 * (1 + |p|).
        """
        lo, hi = self._bracket(p)
        root = brentq(lambda t: self.value(t) - p, lo, hi, xtol=1e-15, rtol=1e-15)
        if abs(self.value(root) - p) > 1e-12 * (1.0 + abs(p)):
            raise NumericsError(f"pressure inversion did not resolve p={p}")
        return float(root)

    def _bracket(self, p):
        lo = hi = self.rho_zero
        step = self.rho_zero
        while self.value(hi) < p:
            hi += step
            step *= 2.0
            if hi > 1e12:
                raise NumericsError("pressure inversion bracket overflow")
        step = 0.5 * self.rho_zero
        while self.value(lo) > p:
            lo -= step
            if lo <= 0.0:
                if self.is_singular:
                    lo = 1e-300
                    if self.value(1e-300) > p:
                        raise NumericsError("pressure inversion bracket underflow")
                    break
                raise ValueError(f"pressure {p} below range of the non-singular law")
            step *= 0.5
        return lo, hi

    def energy_primitive(self, rho):
        """integral from rho_zero to rho of pi'(t)/t dt (sign of rho - rho_zero).

        Vectorized cumulative quadrature over the sorted evaluation points;
        each gap is subdivided so single wide gaps cannot lose accuracy.
        """
        rho_arr = self._check(np.atleast_1d(rho))
        pts = np.unique(np.concatenate([rho_arr.ravel(), [self.rho_zero]]))
        refined = [pts[:1]]
        max_gap = max((pts[-1] - pts[0]) / 256.0, 1e-12)
        for a, b in zip(pts[:-1], pts[1:]):
            k = max(int(np.ceil((b - a) / max_gap)), 1)
            refined.append(np.linspace(a, b, k + 1)[1:])
        grid = np.concatenate(refined)
        cum = _cumulative_integral(lambda t: self.derivative(t) / t, grid)
        base = cum[np.searchsorted(grid, self.rho_zero)]
        lookup = cum[np.searchsorted(grid, rho_arr.ravel())] - base
        out = lookup.reshape(rho_arr.shape)
        return float(out[0]) if np.isscalar(rho) or np.ndim(rho) == 0 else out


@dataclass(frozen=True)
class SingularPressureLaw(PressureLaw):
    """pi(rho) = coeff * ((rho/rho_zero)**gamma - (rho/rho_zero)**(-beta))."""

    gamma: float = 2.0
    beta: float = 1.0
    coeff: float = 1.0
    rho_zero: float = 0.25
    is_singular: bool = True

    def __post_init__(self):
        if self.gamma <= 1.0:
            raise ConfigurationError("growth exponent gamma must exceed 1")
        if self.beta <= 0.0 or self.coeff <= 0.0 or self.rho_zero <= 0.0:
            raise ConfigurationError("beta, coeff, rho_zero must be positive")

    def value(self, rho):
        rho = self._check(rho)
        s = rho / self.rho_zero
        return self.coeff * (s**self.gamma - s ** (-self.beta))

    def derivative(self, rho):
        rho = self._check(rho)
        s = rho / self.rho_zero
        return (self.coeff / self.rho_zero) * (
            self.gamma * s ** (self.gamma - 1.0) + self.beta * s ** (-self.beta - 1.0)
        )

    def second_derivative(self, rho):
        rho = self._check(rho)
        s = rho / self.rho_zero
        g, b = self.gamma, self.beta
        return (self.coeff / self.rho_zero**2) * (
            g * (g - 1.0) * s ** (g - 2.0) - b * (b + 1.0) * s ** (-b - 2.0)
        )


@dataclass(frozen=True)
class PowerPressureLaw(PressureLaw):
    """pi(rho) = coeff * (rho**gamma - rho_zero**gamma); finite at vacuum.

    Violates the vacuum-singularity assumption on purpose: hydrostatic
    profiles under this law can reach zero density, which is the contrast
    the comparison experiment demonstrates.
    """

    gamma: float = 2.0
    coeff: float = 1.0
    rho_zero: float = 0.25
    is_singular: bool = False

    def __post_init__(self):
        if self.gamma <= 1.0:
            raise ConfigurationError("growth exponent gamma must exceed 1")
        if self.coeff <= 0.0 or self.rho_zero <= 0.0:
            raise ConfigurationError("coeff and rho_zero must be positive")

    def value(self, rho):
        rho = self._check(rho)
        return self.coeff * (rho**self.gamma - self.rho_zero**self.gamma)

    def derivative(self, rho):
        rho = self._check(rho)
        return self.coeff * self.gamma * rho ** (self.gamma - 1.0)

    def second_derivative(self, rho):
        rho = self._check(rho)
        return self.coeff * self.gamma * (self.gamma - 1.0) * rho ** (self.gamma - 2.0)


def _smoothstep(x):
    return x * x * (3.0 - 2.0 * x)


def _smoothstep_prime(x):
    return 6.0 * x * (1.0 - x)


@dataclass(frozen=True)
class DensityCutoff:
    """C^1 plateau cutoff with thresholds 1/n2 < 1/n1 < plateau < m1 < m2.

    Constructed from (n1, m1, h); the outer thresholds follow the fixed
    normalization n2 = n1 + h, m2 = m1 + h.
    """

    n1: float
    m1: float
    h: float

    def __post_init__(self):
        if self.h <= 0:
            raise ConfigurationError("mean density h must be positive")
        if self.n1 <= 0:
            raise ConfigurationError("reciprocal threshold n1 must be positive")
        if not 1.0 / self.n1 < self.h:
            raise ConfigurationError("need 1/n1 < h")
        if not self.h < self.m1:
            raise ConfigurationError("need h < m1")

    @property
    def n2(self) -> float:
        return self.n1 + self.h

    @property
    def m2(self) -> float:
        return self.m1 + self.h

    @property
    def lower(self) -> float:
        """Hard lower density bound 1/n2."""
        return 1.0 / self.n2

    @property
    def upper(self) -> float:
        return self.m2

    def validate_law(self, law: PressureLaw) -> None:
        if not 1.0 / self.n1 < law.rho_zero:
            raise ConfigurationError(
                f"cutoff plateau must start below rho_zero: 1/n1={1.0 / self.n1} "
                f">= rho_zero={law.rho_zero}"
            )
        if not law.rho_zero <= self.h / 4.0:
            raise ConfigurationError(
                f"normalization rho_zero <= h/4 violated: {law.rho_zero} > {self.h / 4.0}"
            )

    @classmethod
    def from_flux_bound(cls, law: PressureLaw, flux_inf: float, h: float) -> "DensityCutoff":
        """Size the cutoff from an effective-viscous-flux magnitude estimate.

        m2 solves pi(m2) = 4 * flux_inf, n2 matches via
        pi_plus(m2) = pi_minus(1/n2); both are floored so the threshold
        chain around (rho_zero, h) stays valid.
        """
        m2 = law.inverse(4.0 * max(flux_inf, law.value(2.0 * h)))
        m2 = max(m2, 2.0 * h + h)  # keep m1 = m2 - h above h with margin
        n2 = 1.0 / law.inverse(-law.value(m2))
        n2 = max(n2, 1.0 / law.rho_zero * 1.5 + h)
        return cls(n1=n2 - h, m1=m2 - h, h=h)

    # -- evaluation --------------------------------------------------------

    def value(self, t):
        t = np.asarray(t, dtype=float)
        lo2, lo1 = 1.0 / self.n2, 1.0 / self.n1
        out = np.zeros_like(t)
        rising = (t > lo2) & (t < lo1)
        out[rising] = _smoothstep((t[rising] - lo2) / (lo1 - lo2))
        out[(t >= lo1) & (t <= self.m1)] = 1.0
        falling = (t > self.m1) & (t < self.m2)
        out[falling] = _smoothstep((self.m2 - t[falling]) / (self.m2 - self.m1))
        return out if out.ndim else float(out)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        lo2, lo1 = 1.0 / self.n2, 1.0 / self.n1
        out = np.zeros_like(t)
        rising = (t > lo2) & (t < lo1)
        out[rising] = _smoothstep_prime((t[rising] - lo2) / (lo1 - lo2)) / (lo1 - lo2)
        falling = (t > self.m1) & (t < self.m2)
        out[falling] = -_smoothstep_prime((self.m2 - t[falling]) / (self.m2 - self.m1)) / (
            self.m2 - self.m1
        )
        return out if out.ndim else float(out)


class RegularizedPressure:
    """Tabulated P(rho) = int_{rho_zero}^{rho} pi'(t) K(t) dt with exact derivative.

    The table covers [0, m2 * (1 + margin)]; P is constant outside the
    cutoff support, so out-of-range queries clamp.  Monotone cubic
    interpolation keeps the table nondecreasing between samples.
    """

    def __init__(self, law: PressureLaw, cutoff: DensityCutoff, samples: int = 2000,
                 margin: float = 0.25):
        if samples < 1000:
            raise ConfigurationError("regularized pressure table needs >= 1000 samples")
        self.law = law
        self.cutoff = cutoff
        top = cutoff.m2 * (1.0 + margin)
        breakpoints = np.array(
            [0.0, 1.0 / cutoff.n2, 1.0 / cutoff.n1, law.rho_zero, cutoff.m1, cutoff.m2, top]
        )
        grid = np.unique(np.concatenate([np.linspace(0.0, top, samples), breakpoints]))

        def integrand(t):
            t = np.asarray(t)
            k = np.asarray(self.cutoff.value(t))
            out = np.zeros_like(t)
            mask = k > 0.0
            if np.any(mask):
                out[mask] = self.law.derivative(t[mask]) * k[mask]
            return out

        cum = _cumulative_integral(integrand, grid)
        i0 = np.searchsorted(grid, law.rho_zero)
        values = cum - cum[i0]

        self.sample_rho = grid
        self.sample_value = values
        self.interpolation = "monotone-cubic"
        self._interp = PchipInterpolator(grid, values, extrapolate=False)
        self._top = top

        diffs = np.diff(values)
        if np.any(diffs < -1e-12 * max(1.0, np.max(np.abs(values)))):
            raise NumericsError("regularized pressure table lost monotonicity")

    def value(self, rho):
        rho = np.asarray(rho, dtype=float)
        if np.any(rho < 0.0):
            raise ValueError("density must be nonnegative")
        out = np.asarray(self._interp(np.minimum(rho, self._top)))
        # on the plateau P coincides with pi identically; bypass the table
        plateau = (rho >= 1.0 / self.cutoff.n1) & (rho <= self.cutoff.m1)
        if np.any(plateau):
            out[plateau] = self.law.value(rho[plateau])
        return out if out.ndim else float(out)

    def derivative(self, rho):
        """P'(rho) = pi'(rho) K(rho), analytic (zero off the cutoff support)."""
        rho = np.asarray(rho, dtype=float)
        k = np.asarray(self.cutoff.value(rho))
        out = np.zeros_like(k)
        mask = k > 0.0
        if np.any(mask):
            out[mask] = self.law.derivative(rho[mask]) * k[mask]
        return out if out.ndim else float(out)

    def second_derivative(self, rho):
        """P''(rho) = pi'' K + pi' K', analytic."""
        rho = np.asarray(rho, dtype=float)
        k = np.asarray(self.cutoff.value(rho))
        kp = np.asarray(self.cutoff.derivative(rho))
        out = np.zeros_like(k)
        mask = (k > 0.0) | (kp != 0.0)
        if np.any(mask):
            out[mask] = (
                self.law.second_derivative(rho[mask]) * k[mask]
                + self.law.derivative(rho[mask]) * kp[mask]
            )
        return out if out.ndim else float(out)

    def positive_part(self, rho):
        return np.maximum(self.value(rho), 0.0)

    def negative_part(self, rho):
        return np.maximum(-self.value(rho), 0.0)

    def dump(self, path) -> None:
        """Two-column text table (rho, P) for external inspection."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# rho P\n")
            for r, p in zip(self.sample_rho, self.sample_value):
                fh.write(f"{r!r} {p!r}\n")
