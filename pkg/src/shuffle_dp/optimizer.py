"""Risk formulas and parameter selection.

The BMG risk under a shuffle-index budget chi is minimized over gamma with
sigma0 fixed by chi_lo(gamma, sigma0) = chi. Randomized response and
PrivUnit risks are closed forms in their parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from shuffle_dp import accountant
from shuffle_dp import numerics
from shuffle_dp import shuffle_index

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class BracketFailure(ArithmeticError):
  """Golden-section search could not find a unimodal bracket."""


@dataclass(frozen=True)
class RiskBreakdown:
  err1: float
  err_n: float
  rmse: float
  d: int
  n: int

  @classmethod
  def from_err1(cls, err1: float, n: int, d: int) -> "RiskBreakdown":
    err_n = err1 / n
    return cls(err1=err1, err_n=err_n, rmse=math.sqrt(err_n / d), d=d, n=n)


def err1_bmg(d: int, gamma: float, sigma0: float) -> float:
  """Worst-case single-user MSE d sigma0^2 / A^2 + gamma / A with A = 1 - gamma."""
  if not 0.0 <= gamma < 1.0:
    raise ValueError(f"err1_bmg needs 0 <= gamma < 1, got {gamma}")
  if not sigma0 > 0:
    raise ValueError(f"sigma0 must be positive, got {sigma0}")
  a = 1.0 - gamma
  return d * sigma0 ** 2 / a ** 2 + gamma / a


def sigma0_from_chi(gamma: float, chi: float) -> float:
  """sigma0 with chi_lo_bmg(gamma, sigma0) = chi."""
  if not 0.0 < gamma < 1.0:
    raise ValueError(f"gamma must lie strictly inside (0, 1), got {gamma}")
  if not chi > 0:
    raise ValueError(f"chi must be positive, got {chi}")
  a = 1.0 - gamma
  return 1.0 / math.sqrt(math.log1p(gamma / (a * a * chi * chi)))


def _err1_given_chi_a(d: int, a: float, chi: float) -> float:
  # Same objective written in A = 1 - gamma, which keeps precision as A -> 0.
  gamma = 1.0 - a
  return d / (a * a * math.log1p(gamma / (a * a * chi * chi))) + gamma / a


def err1_bmg_given_chi(d: int, gamma: float, chi: float) -> float:
  """d / (A^2 log(1 + gamma/(A^2 chi^2))) + gamma / A, the risk at chi_lo = chi."""
  if not 0.0 < gamma < 1.0:
    raise ValueError(f"gamma must lie strictly inside (0, 1), got {gamma}")
  if not chi > 0:
    raise ValueError(f"chi must be positive, got {chi}")
  return _err1_given_chi_a(d, 1.0 - gamma, chi)


def _golden_section(f, lo: float, mid: float, hi: float, tol: float):
  """Minimizes f on [lo, hi] given f(mid) < min(f(lo), f(hi))."""
  fm = f(mid)
  # Place the second probe in the larger sub-interval.
  while hi - lo > tol:
    if mid - lo > hi - mid:
      x = mid - (1.0 - INV_PHI) * (mid - lo)
      fx = f(x)
      if fx < fm:
        hi, mid, fm = mid, x, fx
      else:
        lo = x
    else:
      x = mid + (1.0 - INV_PHI) * (hi - mid)
      fx = f(x)
      if fx < fm:
        lo, mid, fm = mid, x, fx
      else:
        hi = x
  return mid, fm


def optimize_gamma(d: int, chi: float, tol: float = 1e-12) -> tuple[float, float]:
  """Minimizes err1_bmg_given_chi over gamma in (0, 1).

  The search runs over u = log(1 - gamma), seeded at the asymptotic rule
  1 - gamma = chi^(-2/3). The bracket is expanded geometrically until the
  seed is below both ends. ``tol`` is the tolerance on gamma.

  Returns:
    (gamma_star, err1_star).
  """
  if not chi > 0:
    raise ValueError(f"chi must be positive, got {chi}")
  f = lambda u: _err1_given_chi_a(d, math.exp(u), chi)
  seed = min(-2.0 / 3.0 * math.log(chi), math.log(0.5))
  lo, hi = seed - 0.5, min(seed + 0.5, -1e-9)
  fs = f(seed)
  for _ in range(200):
    ok_lo = f(lo) > fs
    ok_hi = f(hi) > fs
    if ok_lo and ok_hi:
      break
    if not ok_lo:
      seed, fs = (lo, f(lo)) if f(lo) < fs else (seed, fs)
      lo -= 2.0 * (hi - lo)
    if not ok_hi:
      if hi >= -1e-9:
        raise BracketFailure(f"objective keeps decreasing as gamma -> 0 (chi={chi})")
      if f(hi) < fs:
        seed, fs = hi, f(hi)
      hi = min(hi + 2.0 * (hi - lo), -1e-9)
  else:
    raise BracketFailure(f"no unimodal bracket found for chi={chi}")
  # Tolerance on u that maps to tol on gamma: d gamma = A du.
  u_tol = tol / math.exp(seed)
  u_star, _ = _golden_section(f, lo, seed, hi, max(u_tol, 1e-15 * abs(seed) + 1e-300))
  a_star = math.exp(u_star)
  gamma_star = 1.0 - a_star
  return gamma_star, _err1_given_chi_a(d, a_star, chi)


def normalized_excess(d: int, chi: float) -> float:
  """(err1_star / (d chi^2) - 1) chi^(2/3); tends to 3/2."""
  _, err = optimize_gamma(d, chi)
  return (err / (d * chi * chi) - 1.0) * chi ** (2.0 / 3.0)


def gaussian_chi_chua_risk_check(sigma0: float, d: int = 1):
  """(err1, chi_chua, (err1/(d chi_chua^2) - 1) chi_chua^2) for the plain Gaussian."""
  err1 = d * sigma0 ** 2
  v = shuffle_index.chi_chua_variance(sigma0)
  chi = 1.0 / math.sqrt(v)
  # (sigma0^2 V - 1) / V, written to avoid forming chi^2 twice.
  term = (sigma0 ** 2 * v - 1.0) / v
  return err1, chi, term


# ---------------------------------------------------------------------------
# Randomized response (d = 1) and PrivUnit.


def rr_t_from_chi(chi: float) -> float:
  """Solves (1 - t)/t^2 = chi^2 for t in (0, 1]."""
  if not chi >= 0:
    raise ValueError(f"chi must be >= 0, got {chi}")
  # Rationalized root of chi^2 t^2 + t - 1 = 0.
  return 2.0 / (1.0 + math.sqrt(1.0 + 4.0 * chi * chi))


def rr_p_from_chi(chi: float) -> float:
  return 0.5 * (1.0 + rr_t_from_chi(chi))


def err1_rr(p: float) -> float:
  """Worst-case MSE 1/t^2 - 1 of the estimator Y/t, t = 2p - 1."""
  if not 0.5 < p <= 1.0:
    raise ValueError(f"randomized response needs 1/2 < p <= 1, got {p}")
  t = 2.0 * p - 1.0
  return (1.0 - t) * (1.0 + t) / (t * t)


def privunit_scale(p: float, theta: float, d: int) -> float:
  """m = alpha (p + q - 1) / q, so that E[Y] = m v."""
  cap = numerics.cap_moments(theta, d)
  if cap.q == 0.0:
    raise ValueError("theta = -1 leaves no complement cap; the scale is undefined")
  return cap.alpha * (p + cap.q - 1.0) / cap.q


def err1_privunit(p: float, theta: float, d: int) -> float:
  """Worst-case MSE 1/m^2 - 1 of the unbiased estimator Y/m."""
  m = privunit_scale(p, theta, d)
  if m == 0.0:
    raise ValueError("PrivUnit scale m is zero; the estimator is undefined")
  return 1.0 / (m * m) - 1.0


def privunit_constant(theta: float, d: int) -> float:
  """C(theta, d) = q / ((1 - q) d alpha^2), the leading risk constant."""
  cap = numerics.cap_moments(theta, d)
  if cap.q in (0.0, 1.0):
    raise ValueError("degenerate cap")
  return cap.q / ((1.0 - cap.q) * d * cap.alpha ** 2)


# ---------------------------------------------------------------------------
# End-to-end designs.


@dataclass(frozen=True)
class BmgDesign:
  """BMG parameters picked for a shuffle-index budget, with their risk.

  ``certified`` is the FFT-certified profile at the design point (or None
  when not requested); ``meets_target`` says whether it is within the
  requested delta. A design that misses its target is reported, not
  adjusted.
  """

  n: int
  d: int
  eps: float | None
  delta_target: float | None
  chi: float
  gamma: float
  sigma0: float
  risk: RiskBreakdown
  template_delta: float | None = None
  certified: accountant.ProfilePoint | None = None

  @property
  def meets_target(self) -> bool | None:
    if self.certified is None or self.delta_target is None:
      return None
    return self.certified.delta <= self.delta_target


def design_for_chi(n: int, d: int, chi: float) -> tuple[float, float, RiskBreakdown]:
  gamma, err1 = optimize_gamma(d, chi)
  sigma0 = sigma0_from_chi(gamma, chi)
  return gamma, sigma0, RiskBreakdown.from_err1(err1, n, d)


def pipeline_bmg_params_from_privacy(n: int, eps: float, delta: float, d: int = 1,
                                     certify: bool = True) -> BmgDesign:
  """chi from the profile template, (gamma, sigma0) from the risk optimum,
  then an FFT certificate of the resulting mechanism at eps."""
  chi = shuffle_index.invert_template_for_chi(n, eps, delta)
  gamma, sigma0, risk = design_for_chi(n, d, chi)
  cert = accountant.fft_delta_bmg(n, gamma, sigma0, eps) if certify else None
  return BmgDesign(n=n, d=d, eps=eps, delta_target=delta, chi=chi, gamma=gamma,
                   sigma0=sigma0, risk=risk,
                   template_delta=shuffle_index.template_delta(n, eps, chi),
                   certified=cert)


def design_for_rmse(n: int, d: int, rmse: float) -> BmgDesign:
  """The risk-optimal BMG whose per-coordinate RMSE equals ``rmse``.

  err1_star(chi) is increasing in chi, so chi is found by bisection in
  log chi on err1_star(chi) = n d rmse^2.
  """
  if not rmse > 0:
    raise ValueError("rmse must be positive")
  target = n * d * rmse * rmse
  g = lambda log_chi: math.log(optimize_gamma(d, math.exp(log_chi))[1]) - math.log(target)
  lo, hi = math.log(1e-3), math.log(math.sqrt(target / d))
  # err1_star >= d chi^2, so hi is an upper end; lower lo until feasible.
  while g(lo) > 0:
    lo -= 2.0
    if lo < -50:
      raise BracketFailure(f"rmse {rmse} is below the smallest attainable BMG risk")
  while hi - lo > 1e-13 * max(1.0, abs(hi)):
    mid = 0.5 * (lo + hi)
    if g(mid) > 0:
      hi = mid
    else:
      lo = mid
  chi = math.exp(0.5 * (lo + hi))
  gamma, sigma0, risk = design_for_chi(n, d, chi)
  return BmgDesign(n=n, d=d, eps=None, delta_target=None, chi=chi, gamma=gamma,
                   sigma0=sigma0, risk=risk)
