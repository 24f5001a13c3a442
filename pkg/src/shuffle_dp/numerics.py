"""Special functions shared across the package.

Standard normal density/CDF, the regularized incomplete beta function,
spherical-cap probabilities with their conditional first moments, and
lognormal quantiles. Everything here is scalar, deterministic and pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy import special

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def std_normal_pdf(x: float) -> float:
  return _INV_SQRT_2PI * math.exp(-0.5 * x * x)


def std_normal_cdf(x: float) -> float:
  """Standard normal CDF via the complementary error function.

  erfc keeps full relative precision in the lower tail, so Phi(-40) is not
  flushed to zero and Phi(-x) = 1 - Phi(x) holds to double precision.
  """
  return 0.5 * math.erfc(-x / _SQRT2)


def std_normal_sf(x: float) -> float:
  return 0.5 * math.erfc(x / _SQRT2)


def std_normal_quantile(p: float) -> float:
  if not 0.0 < p < 1.0:
    raise ValueError(f"quantile level must lie in (0, 1), got {p}")
  return float(special.ndtri(p))


def reg_incomplete_beta(x: float, a: float, b: float) -> float:
  """I_x(a, b), the regularized incomplete beta function."""
  if not 0.0 <= x <= 1.0:
    raise ValueError(f"x must lie in [0, 1], got {x}")
  return float(special.betainc(a, b, x))


def lognormal_quantile(p: float, mu: float, s: float) -> float:
  """Quantile of exp(W) with W ~ N(mu, s^2)."""
  return math.exp(mu + s * std_normal_quantile(p))


def lognormal_upper_quantile(tail: float, mu: float, s: float) -> float:
  """Value c with Pr(exp(W) > c) = tail, accurate for tiny tails."""
  if not 0.0 < tail < 1.0:
    raise ValueError(f"tail mass must lie in (0, 1), got {tail}")
  return math.exp(mu - s * float(special.ndtri(tail)))


def adaptive_simpson(f, a: float, b: float, tol: float = 1e-10,
                     max_depth: int = 50) -> float:
  """Adaptive Simpson quadrature of f over [a, b] to absolute tolerance tol."""

  def simpson(fa, fm, fb, lo, hi):
    return (hi - lo) / 6.0 * (fa + 4.0 * fm + fb)

  def recurse(lo, hi, fa, fm, fb, whole, eps, depth):
    mid = 0.5 * (lo + hi)
    lm = 0.5 * (lo + mid)
    rm = 0.5 * (mid + hi)
    flm = f(lm)
    frm = f(rm)
    left = simpson(fa, flm, fm, lo, mid)
    right = simpson(fm, frm, fb, mid, hi)
    if depth <= 0 or abs(left + right - whole) <= 15.0 * eps:
      return left + right + (left + right - whole) / 15.0
    return (recurse(lo, mid, fa, flm, fm, left, eps / 2.0, depth - 1) +
            recurse(mid, hi, fm, frm, fb, right, eps / 2.0, depth - 1))

  if a == b:
    return 0.0
  fa, fb = f(a), f(b)
  fm = f(0.5 * (a + b))
  whole = simpson(fa, fm, fb, a, b)
  return recurse(a, b, fa, fm, fb, whole, tol, max_depth)


@dataclass(frozen=True)
class CapMoments:
  """Cap statistics of T = <U, v> for U uniform on the unit sphere in R^dim.

  Attributes:
    q: Pr(T < theta), the mass outside the cap.
    alpha: E[T | T >= theta], the conditional mean inside the cap.
    dim: ambient dimension d.
    theta: cap threshold.
  """

  q: float
  alpha: float
  dim: int
  theta: float

  @property
  def beta(self) -> float:
    """E[T | T < theta], from the zero-mean identity (1-q)alpha + q beta = 0."""
    if self.q == 0.0:
      return 0.0
    return -(1.0 - self.q) / self.q * self.alpha


def _log_marginal_norm(d: int) -> float:
  # log of the integral of (1 - t^2)^((d-3)/2) over [-1, 1], i.e. log B(1/2, (d-1)/2).
  return special.betaln(0.5, 0.5 * (d - 1))


def _cap_mass_small_dim(theta: float, d: int) -> float:
  # Substituting t = sin(u) turns the marginal into cos(u)^(d-2) on
  # [-pi/2, pi/2], which removes the endpoint singularity at d = 2.
  power = d - 2
  integrand = lambda u: math.cos(u) ** power
  total = adaptive_simpson(integrand, -0.5 * math.pi, 0.5 * math.pi)
  upper = adaptive_simpson(integrand, math.asin(theta), 0.5 * math.pi)
  return upper / total


def cap_upper_mass(theta: float, d: int) -> float:
  """Pr(T >= theta) for the spherical marginal in dimension d."""
  if theta <= -1.0:
    return 1.0
  if theta >= 1.0:
    return 0.0
  if theta == 0.0:
    return 0.5  # exact by symmetry
  if d in (2, 3):
    return _cap_mass_small_dim(theta, d)
  a = 0.5 * (d - 1)
  # (1 + T) / 2 ~ Beta(a, a); use the symmetric lower tail for precision.
  return float(special.betainc(a, a, 0.5 * (1.0 - theta)))


def cap_moments(theta: float, d: int) -> CapMoments:
  """Computes q = Pr(T < theta) and alpha = E[T | T >= theta].

  The marginal density of T is proportional to (1 - t^2)^((d-3)/2), so the
  partial first moment over [theta, 1] has the closed form
  (1 - theta^2)^((d-1)/2) / (d - 1), normalized by B(1/2, (d-1)/2).
  """
  if isinstance(d, bool) or int(d) != d or d < 2:
    raise ValueError(f"cap moments need an integer dimension d >= 2, got {d}")
  d = int(d)
  theta = float(theta)
  if not -1.0 <= theta <= 1.0:
    raise ValueError(f"theta must lie in [-1, 1], got {theta}")
  upper = cap_upper_mass(theta, d)
  q = 1.0 - upper
  if theta == -1.0:
    return CapMoments(q=0.0, alpha=0.0, dim=d, theta=theta)
  if upper == 0.0:
    # Degenerate cap at the pole.
    return CapMoments(q=1.0, alpha=1.0, dim=d, theta=theta)
  log_partial = (0.5 * (d - 1) * math.log1p(-theta * theta) - math.log(d - 1) -
                 _log_marginal_norm(d))
  alpha = math.exp(log_partial) / upper
  return CapMoments(q=q, alpha=alpha, dim=d, theta=theta)


def gaussian_limit_constant(tau: float) -> float:
  """C(tau) = Phi(tau) (1 - Phi(tau)) / phi(tau)^2, the high-dimensional
  leading risk constant of PrivUnit with threshold tau / sqrt(d)."""
  tau = abs(float(tau))
  log_c = (float(special.log_ndtr(tau)) + float(special.log_ndtr(-tau)) +
           tau * tau + math.log(2.0 * math.pi))
  return math.exp(log_c)
