"""Shuffle indices and the asymptotic privacy-profile template.

The lower shuffle index has closed forms for BMG, randomized response and
PrivUnit. ``chi_chua_gaussian`` gives the conjecture-linked index of the
plain Gaussian randomizer; it is never used as a privacy certificate.
``mc_ell0_variance`` estimates Var[l_0] for any adjacent pair and reference,
which is how the closed forms are cross-checked.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from shuffle_dp import numerics
from shuffle_dp import randomizers
from shuffle_dp.randomizers import BOTTOM, Family, RandomizerSpec

Z95 = 1.959963984540054


@dataclass(frozen=True)
class InfiniteIndex:
  """An index that is +infinity, e.g. when the output law ignores the input."""

  reason: str

  def to_json(self):
    return {"infinite": True, "reason": self.reason}


@dataclass(frozen=True)
class ShuffleIndexReport:
  chi_lo: float | InfiniteIndex
  chi_chua: float | None = None
  mc_variance: tuple[float, float] | None = None
  reference: str = "blanket"
  blanket_mass: float | None = None
  extras: dict = field(default_factory=dict)

  def to_json(self) -> dict:
    chi_lo = self.chi_lo.to_json() if isinstance(self.chi_lo, InfiniteIndex) else self.chi_lo
    out = {
        "blanket_mass": self.blanket_mass,
        "chi_chua": self.chi_chua,
        "chi_lo": chi_lo,
        "mc_variance": None,
        "reference": self.reference,
    }
    if self.mc_variance is not None:
      out["mc_variance"] = {"estimate": self.mc_variance[0],
                            "half_width": self.mc_variance[1]}
    out.update(self.extras)
    return out


def chi_lo_bmg(gamma: float, sigma0: float) -> float:
  """sqrt(gamma / ((1 - gamma)^2 (e^{1/sigma0^2} - 1)))."""
  if not 0.0 < gamma < 1.0:
    raise ValueError(f"gamma must lie strictly inside (0, 1), got {gamma}")
  if not sigma0 > 0.0:
    raise ValueError(f"sigma0 must be positive, got {sigma0}")
  return math.sqrt(gamma / ((1.0 - gamma) ** 2 * math.expm1(1.0 / sigma0 ** 2)))


def chi_lo_rr(p: float) -> float:
  """sqrt((1 - t) / t^2) with t = 2p - 1."""
  if not 0.5 <= p <= 1.0:
    raise ValueError(f"randomized response needs 1/2 <= p <= 1, got {p}")
  t = 2.0 * p - 1.0
  if t == 0.0:
    raise ValueError("p = 1/2 makes the output independent of the input; "
                     "use chi_lo(spec) for the infinite-index sentinel")
  return math.sqrt((1.0 - t) / (t * t))


def chi_lo_privunit(p: float, theta: float, d: int) -> float | InfiniteIndex:
  """sqrt(gamma q (1 - q) / Delta^2) with Delta = p + q - 1.

  The blanket is the uniform measure on the sphere, and the blanket mass is
  the smaller of the two density levels p/(1-q) and (1-p)/q.
  """
  cap = numerics.cap_moments(theta, d)
  q = cap.q
  delta = p + q - 1.0
  if delta == 0.0 or q in (0.0, 1.0):
    return InfiniteIndex(
        f"PrivUnit(p={p}, theta={theta}, d={d}) outputs the uniform law for "
        f"every input (Delta = p + q - 1 = {delta}), so l_0 is identically 0")
  gamma = min(p / (1.0 - q), (1.0 - p) / q)
  return math.sqrt(gamma * q * (1.0 - q) / (delta * delta))


def chi_chua_variance(sigma0: float) -> float:
  """V = e^{4a} - 2 e^{2a} + e^{a}, a = 1/sigma0^2, via expm1 to avoid cancellation."""
  if not sigma0 > 0.0:
    raise ValueError(f"sigma0 must be positive, got {sigma0}")
  a = 1.0 / sigma0 ** 2
  if a > 1.0:
    log_v = 4.0 * a + math.log1p(-2.0 * math.exp(-2.0 * a) + math.exp(-3.0 * a))
    return math.exp(log_v) if log_v < 709.0 else math.inf
  return math.expm1(4 * a) - 2.0 * math.expm1(2 * a) + math.expm1(a)


def log_chi_chua_variance(sigma0: float) -> float:
  """log V, finite even where V itself overflows (tiny sigma0)."""
  a = 1.0 / sigma0 ** 2
  if a > 1.0:
    return 4.0 * a + math.log1p(-2.0 * math.exp(-2.0 * a) + math.exp(-3.0 * a))
  return math.log(chi_chua_variance(sigma0))


def chi_chua_gaussian(sigma0: float) -> float:
  if not sigma0 > 0.0:
    raise ValueError(f"sigma0 must be positive, got {sigma0}")
  return math.exp(-0.5 * log_chi_chua_variance(sigma0))


def sigma0_from_chi_chua(chi: float) -> float:
  """Inverts chi_chua_gaussian, which is increasing in sigma0."""
  if not chi > 0.0:
    raise ValueError(f"chi must be positive, got {chi}")
  f = lambda log_s: -0.5 * log_chi_chua_variance(math.exp(log_s)) - math.log(chi)
  lo, hi = math.log(1e-3), math.log(max(10.0, 10.0 * chi))
  while f(lo) > 0:
    lo -= 2.0
  while f(hi) < 0:
    hi += 2.0
  return math.exp(optimize.brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps))


def chi_lo(spec: RandomizerSpec) -> float | InfiniteIndex:
  """Closed-form lower shuffle index for any supported family."""
  fam = spec.family
  if fam is Family.BMG:
    if spec.gamma == 1.0:
      return InfiniteIndex("gamma = 1: every output is drawn from the blanket")
    return chi_lo_bmg(spec.gamma, spec.sigma0)
  if fam is Family.GAUSSIAN_LOCAL:
    return 0.0  # zero blanket mass
  if fam is Family.RR:
    if spec.p == 0.5:
      return InfiniteIndex("p = 1/2: the output is a fair coin for every input")
    return chi_lo_rr(spec.p)
  return chi_lo_privunit(spec.p, spec.theta, spec.d)


def shuffle_index_report(spec: RandomizerSpec, mc_samples: int = 0,
                         seed: int = 0) -> ShuffleIndexReport:
  """Closed-form indices plus an optional Monte Carlo Var[l_0] cross-check.

  The Monte Carlo estimate uses the worst-case pair (e_1, BOTTOM) under the
  blanket reference.
  """
  chua = chi_chua_gaussian(spec.sigma0) if spec.family is Family.GAUSSIAN_LOCAL else None
  mc = None
  if mc_samples:
    e1 = np.zeros(spec.d)
    e1[0] = 1.0
    x1 = 1.0 if spec.family is Family.RR else e1
    mc = mc_ell0_variance(spec, x1, BOTTOM, "blanket", mc_samples, seed=seed)
  return ShuffleIndexReport(chi_lo=chi_lo(spec), chi_chua=chua, mc_variance=mc,
                            reference="blanket", blanket_mass=spec.blanket_mass)


def _variance_with_half_width(parts) -> tuple[float, float]:
  # parts holds per-chunk power sums (count, S1, S2, S3, S4); l_0 has mean
  # zero under any valid reference, so raw power sums lose little precision.
  count = sum(c[0] for c in parts)
  s1, s2, s3, s4 = (math.fsum(c[k] for c in parts) for k in range(1, 5))
  mean = s1 / count
  m2 = s2 - count * mean ** 2
  m4 = s4 - 4 * mean * s3 + 6 * mean ** 2 * s2 - 3 * count * mean ** 4
  var = m2 / (count - 1)
  # Sampling variance of s^2: (mu4 - sigma^4)/n + 2 sigma^4/(n(n-1)). The
  # second-order term keeps the interval honest when l_0 is two-point and
  # the leading term vanishes.
  var_s2 = (max(m4 / count - var ** 2, 0.0) / count +
            2.0 * var ** 2 / (count * (count - 1)))
  se = math.sqrt(max(var_s2, 0.0))
  return var, Z95 * se


def mc_ell0_variance(spec: RandomizerSpec, x1, x1p, reference, samples: int,
                     seed: int = 0, chunk: int = 200_000, threads: int = 1):
  """Monte Carlo estimate of Var[l_0(Y; x1, x1p, R_ref)] with Y ~ R_ref.

  Args:
    spec: randomizer.
    x1, x1p: a zero-out adjacent pair; exactly one of them is ``BOTTOM``.
    reference: ``"blanket"`` or an input point x (Y is drawn from R_x).
    samples: number of draws.
    seed: draws in chunk i use ``make_rng(seed, i)``, so the estimate does not
      depend on ``threads``.
    chunk: draws per chunk.
    threads: worker threads.

  Returns:
    (variance estimate, 95% half-width from the asymptotic normality of the
    sample variance).
  """
  if (x1 is BOTTOM) == (x1p is BOTTOM):
    if x1 is BOTTOM:
      # l_0 is identically zero when both records are BOTTOM.
      return 0.0, 0.0
    raise ValueError("zero-out adjacency needs exactly one of x1, x1p to be BOTTOM")
  if samples < 2:
    raise ValueError("need at least two samples")
  ref = BOTTOM if (isinstance(reference, str) and reference == "blanket") else reference
  randomizers.check_input(spec, x1)
  randomizers.check_input(spec, x1p)
  ref = randomizers.check_input(spec, ref)

  sizes = [chunk] * (samples // chunk)
  if samples % chunk:
    sizes.append(samples % chunk)

  def run(i):
    rng = randomizers.make_rng(seed, i)
    y = randomizers.sample(spec, ref, rng, size=sizes[i])
    ell = (randomizers.density_ratio(spec, x1, ref, y) -
           randomizers.density_ratio(spec, x1p, ref, y))
    return (len(ell), math.fsum(ell), math.fsum(ell ** 2), math.fsum(ell ** 3),
            math.fsum(ell ** 4))

  if threads > 1:
    with ThreadPoolExecutor(threads) as pool:
      parts = list(pool.map(run, range(len(sizes))))
  else:
    parts = [run(i) for i in range(len(sizes))]
  return _variance_with_half_width(parts)


def log_template_delta(n: int, eps: float, chi: float) -> float:
  return (-0.5 * chi * chi * eps * eps * n - 0.5 * math.log(2.0 * math.pi) -
          3.0 * math.log(chi) - 2.0 * math.log(eps) - 1.5 * math.log(n))


def template_delta(n: int, eps: float, chi: float) -> float:
  """f_{n,eps}(chi) = exp(-chi^2 eps^2 n / 2) / (sqrt(2 pi) chi^3 eps^2 n^{3/2}).

  Not clamped: for small eps * chi * sqrt(n) the value exceeds 1.
  """
  if n < 1 or not eps > 0 or not chi > 0:
    raise ValueError("template needs n >= 1, eps > 0 and chi > 0")
  return math.exp(log_template_delta(n, eps, chi))


class BracketError(ArithmeticError):
  """A root-finding target lies outside the attainable range."""


def invert_template_for_chi(n: int, eps: float, delta: float,
                            chi_min: float | None = None,
                            chi_max: float | None = None) -> float:
  """Solves template_delta(n, eps, chi) = delta for chi by bisection.

  The template is strictly decreasing in chi. The default lower end of the
  bracket is chi_min = 1 / (eps sqrt(n)); below it the Gaussian-tail
  template no longer describes a small-delta regime.
  """
  if not 0.0 < delta:
    raise ValueError(f"delta must be positive, got {delta}")
  if chi_min is None:
    chi_min = 1.0 / (eps * math.sqrt(n))
  if chi_max is None:
    chi_max = chi_min
    while log_template_delta(n, eps, chi_max) > math.log(delta):
      chi_max *= 2.0
  target = math.log(delta)
  g = lambda log_chi: log_template_delta(n, eps, math.exp(log_chi)) - target
  lo, hi = math.log(chi_min), math.log(chi_max)
  sup = math.exp(g(lo) + target)
  inf = math.exp(g(hi) + target)
  if not inf <= delta <= sup:
    raise BracketError(
        f"delta={delta} is outside the attainable range [{inf:.6g}, {sup:.6g}] of "
        f"the template on chi in [{chi_min:.6g}, {chi_max:.6g}] (n={n}, eps={eps})")
  root = optimize.bisect(g, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps,
                         maxiter=400)
  return math.exp(root)
