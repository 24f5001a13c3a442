"""Privacy profiles: analytic Gaussian, FFT-certified shuffled BMG, Monte Carlo.

Shuffled BMG accounting
-----------------------
For the zero-out pair (x, BOTTOM) with |x| = 1, the shuffled BMG satisfies

    delta(eps) <= E[(sum_{i <= M} l_eps(Y_i))_+] / (n gamma),  M ~ Bin(n, gamma),

with l_eps(Y) = gamma - e^eps + (1 - gamma) L and L = exp(<x, Y>/s0^2 - 1/(2 s0^2))
lognormal with log-mean -1/(2 s0^2) and log-variance 1/s0^2. Writing the sum
as sum_{i <= n} Z_i with Z_i = B_i l_eps(Y_i), B_i ~ Bernoulli(gamma), the
expectation is that of the positive part of an n-fold i.i.d. sum.

``fft_delta_bmg`` turns this into a certified number:

1. L is capped at c. The excess enters through (a + b)_+ <= a_+ + b for
   b >= 0, adding (1 - gamma) E[L; L > c] to delta.
2. The capped l_eps is placed on the lattice spacing * Z. The default
   "split" policy sends each cell's mass to its two end points, keeping the
   cell's mean. The result dominates the true law in convex order, so
   E[(.)_+] can only go up. "round-up" moves all mass to the upper end
   point, which is also certified but looser. "round-to-nearest" is not
   certified and is marked as such.
3. The n-fold sum is computed as a circular convolution (rfft power).
   Chernoff bounds on the lattice law control what falls outside the window.
   They add the above-window contribution to delta, and they add the
   aliased mass times the largest positive window value to the error budget.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from shuffle_dp import numerics
from shuffle_dp import randomizers

Z95 = 1.959963984540054
DELTA_FLOOR = 1e-300
PESSIMISM = ("split", "round-up", "round-to-nearest")
METHODS = ("analytic-gaussian", "template-f", "fft-certified", "monte-carlo")


class GridError(ArithmeticError):
  """The grid cannot certify the requested quantity (aliasing, FFT noise)."""


class CalibrationError(ArithmeticError):
  """No parameter in the search range meets the target."""


@dataclass(frozen=True)
class AccountantGrid:
  """Lattice used to discretize the per-user privacy-loss contribution.

  Attributes:
    spacing: lattice step h; every support point is an integer multiple of h.
    origin: smallest value of the convolution window (a multiple of h).
    points: window length, a power of two >= 2**10.
    lower_trunc_mass: per-user mass dropped below the lattice (always 0 for
      BMG, whose loss is bounded below).
    upper_trunc_mass: per-user tail mass Pr(L > cap) handled by capping.
    pessimism: rounding policy, one of "split", "round-up", "round-to-nearest".
    allow_large_truncation: lifts the 1e-3 limit on total truncated mass.
  """

  spacing: float
  origin: float
  points: int
  lower_trunc_mass: float = 0.0
  upper_trunc_mass: float = 1e-20
  pessimism: str = "split"
  allow_large_truncation: bool = False

  def __post_init__(self):
    if not self.spacing > 0 or not math.isfinite(self.spacing):
      raise ValueError(f"grid spacing must be positive, got {self.spacing}")
    if self.points < 2 ** 10 or self.points & (self.points - 1):
      raise ValueError(f"grid points must be a power of two >= 1024, got {self.points}")
    if self.pessimism not in PESSIMISM:
      raise ValueError(f"unknown pessimism policy {self.pessimism!r}")
    if not 0.0 < self.upper_trunc_mass < 1.0 or self.lower_trunc_mass < 0:
      raise ValueError("truncation masses must be probabilities (upper one > 0)")
    if (self.lower_trunc_mass + self.upper_trunc_mass > 1e-3 and
        not self.allow_large_truncation):
      raise ValueError("truncated mass exceeds 1e-3 per user; pass "
                      "allow_large_truncation=True to override")

  @property
  def origin_index(self) -> int:
    return int(round(self.origin / self.spacing))

  @property
  def top(self) -> float:
    return (self.origin_index + self.points - 1) * self.spacing

  @property
  def certified(self) -> bool:
    return self.pessimism != "round-to-nearest"


@dataclass(frozen=True)
class ProfilePoint:
  """One (eps, delta) point of a privacy profile with its provenance.

  ``error_budget`` is the part of ``delta`` that is certified slack:
  truncation, aliasing and discretization allowances (fft-certified
  only). ``half_width`` is the 95% Monte Carlo half-width (monte-carlo only).
  """

  eps: float
  delta: float
  n: int
  method: str
  error_budget: float | None = None
  half_width: float | None = None
  certified: bool = False
  underflow: bool = False
  adjacency: str = "zero-out"

  def __post_init__(self):
    if self.method not in METHODS:
      raise ValueError(f"unknown profile method {self.method!r}")

  def to_replace_one(self) -> "ProfilePoint":
    """(2 eps, 2 delta) guarantee under replace-one adjacency."""
    if self.adjacency != "zero-out":
      raise ValueError("already converted")
    return dataclasses.replace(self, eps=2 * self.eps, delta=min(1.0, 2 * self.delta),
                               adjacency="replace-one")

  def to_json(self) -> dict:
    return dataclasses.asdict(self)


def _floor(delta: float) -> tuple[float, bool]:
  if delta < DELTA_FLOOR:
    return 0.0, delta > 0.0
  return delta, False


def gaussian_profile_delta(sigma_gm: float, sensitivity: float, eps: float) -> float:
  """Analytic profile of the Gaussian mechanism with noise std sigma_gm.

  delta = Phi(D/(2s) - eps s/D) - e^eps Phi(-D/(2s) - eps s/D), clamped to [0, 1].
  """
  if not sigma_gm > 0 or not sensitivity > 0:
    raise ValueError("sigma_gm and sensitivity must be positive")
  if eps < 0:
    raise ValueError(f"eps must be >= 0, got {eps}")
  ratio = sensitivity / sigma_gm
  shift = eps / ratio
  first = numerics.std_normal_cdf(0.5 * ratio - shift)
  second_log = eps + float(special.log_ndtr(-0.5 * ratio - shift))
  delta = first - math.exp(second_log)
  return min(1.0, max(0.0, delta))


def gm_profile_delta(sigma: float, n: int, eps: float) -> float:
  """Profile of the mean-estimation Gaussian mechanism GM(sigma) on n users.

  The noise std is sigma / sqrt(n) and the zero-out sensitivity is 1 / n.
  """
  return gaussian_profile_delta(sigma / math.sqrt(n), 1.0 / n, eps)


def gaussian_asymptotic_ratio(sigma: float, n: int, eps: float) -> float | None:
  """delta_GM(sigma)(eps) / f_{n,eps}(sigma); None when either side underflows."""
  from shuffle_dp import shuffle_index

  delta = gm_profile_delta(sigma, n, eps)
  log_f = shuffle_index.log_template_delta(n, eps, sigma)
  if delta < DELTA_FLOOR or log_f < math.log(DELTA_FLOOR):
    return None
  return delta / math.exp(log_f)


# ---------------------------------------------------------------------------
# Shuffled BMG: per-user loss law on a lattice.


@dataclass(frozen=True)
class LatticeLaw:
  """A distribution on spacing * {offset, offset + 1, ...}.

  ``cap_excess`` is E[(l - l_capped)] per unit of l-mass, i.e. the
  certified correction for the capped upper tail.
  """

  spacing: float
  offset: int
  pmf: np.ndarray
  cap: float
  cap_excess: float

  @property
  def values(self) -> np.ndarray:
    return (self.offset + np.arange(self.pmf.size)) * self.spacing

  def mean(self) -> float:
    return float(np.dot(self.values, self.pmf))


def _lognormal_params(sigma0: float) -> tuple[float, float]:
  s = 1.0 / sigma0
  return -0.5 * s * s, s


def _cap_for(sigma0: float, upper_trunc_mass: float) -> float:
  mu, s = _lognormal_params(sigma0)
  return numerics.lognormal_upper_quantile(upper_trunc_mass, mu, s)


def _lognormal_cell_moments(edges_l: np.ndarray, s: float):
  """Mass and partial first moment of L between consecutive edges (in L units)."""
  with np.errstate(divide="ignore"):
    log_e = np.log(edges_l)
  z_mass = (log_e + 0.5 * s * s) / s
  z_mom = (log_e - 0.5 * s * s) / s
  # Differences of the CDF below the median and of the survival function
  # above it keep absolute precision in both tails.
  def cell_diff(z):
    cdf = special.ndtr(z)
    sf = special.ndtr(-z)
    lower = np.diff(cdf)
    upper = -np.diff(sf)
    use_sf = z[:-1] > 0
    return np.where(use_sf, upper, lower)
  return cell_diff(z_mass), cell_diff(z_mom)


def bmg_loss_distribution(gamma: float, sigma0: float, eps: float,
                          grid: AccountantGrid) -> LatticeLaw:
  """Law of l_eps(Y), Y ~ blanket, discretized onto the grid lattice.

  l_eps = gamma - e^eps + (1 - gamma) L with L lognormal(-1/(2 s0^2), 1/s0^2).
  L is capped at its (1 - upper_trunc_mass) quantile; the capped mass sits
  at the cap value and is rounded like every other cell.
  """
  if not 0.0 < gamma <= 1.0 or not sigma0 > 0 or eps < 0:
    raise ValueError("need 0 < gamma <= 1, sigma0 > 0 and eps >= 0")
  h = grid.spacing
  c0 = gamma - math.exp(eps)
  if gamma == 1.0:
    k = math.floor(c0 / h)
    return _round_point(c0, k, h, grid.pessimism, cap=math.inf, cap_excess=0.0)
  a = 1.0 - gamma
  _, s = _lognormal_params(sigma0)
  cap = _cap_for(sigma0, grid.upper_trunc_mass)
  top_value = c0 + a * cap
  k_lo = math.floor(c0 / h)
  k_hi = math.ceil(top_value / h)
  if k_hi == k_lo:
    k_hi += 1
  if k_hi - k_lo + 1 > grid.points:
    raise ValueError(
        f"per-user loss support [{c0:.6g}, {top_value:.6g}] needs "
        f"{k_hi - k_lo + 1} lattice points but the window has {grid.points}; "
        f"increase spacing to at least {(top_value - c0) / (grid.points - 2):.6g}")
  lattice = (k_lo + np.arange(k_hi - k_lo + 1)) * h
  # Cell edges in L units, clipped to [0, cap].
  edges_l = np.clip((lattice - c0) / a, 0.0, cap)
  mass, moment_l = _lognormal_cell_moments(edges_l, s)
  mass = np.clip(mass, 0.0, None)
  moment_l = np.clip(moment_l, 0.0, None)
  # Capped tail mass is a point at l = top_value.
  tail = numerics.std_normal_sf((math.log(cap) + 0.5 * s * s) / s)
  cap_excess = a * numerics.std_normal_sf((math.log(cap) - 0.5 * s * s) / s)
  cell = int(min(max(math.floor((top_value - lattice[0]) / h), 0), lattice.size - 2))
  mass[cell] += tail
  moment_l[cell] += tail * cap
  pmf = np.zeros(lattice.size)
  lower = lattice[:-1]
  if grid.pessimism == "round-up":
    pmf[1:] += mass
  else:
    # Offset of the cell mean from the lower end point, in units of h.
    frac_mass = ((c0 - lower) * mass + a * moment_l) / h
    frac_mass = np.clip(frac_mass, 0.0, mass)
    if grid.pessimism == "split":
      pmf[1:] += frac_mass
      pmf[:-1] += mass - frac_mass
    else:
      with np.errstate(invalid="ignore", divide="ignore"):
        go_up = np.where(mass > 0, frac_mass / mass, 0.0) >= 0.5
      pmf[1:] += np.where(go_up, mass, 0.0)
      pmf[:-1] += np.where(go_up, 0.0, mass)
  pmf /= pmf.sum()
  return LatticeLaw(spacing=h, offset=k_lo, pmf=pmf, cap=cap, cap_excess=cap_excess)


def _round_point(value, k, h, pessimism, cap, cap_excess):
  frac = (value - k * h) / h
  if pessimism == "round-up":
    pmf = np.array([0.0, 1.0]) if frac > 0 else np.array([1.0, 0.0])
  elif pessimism == "split":
    pmf = np.array([1.0 - frac, frac])
  else:
    pmf = np.array([0.0, 1.0]) if frac >= 0.5 else np.array([1.0, 0.0])
  return LatticeLaw(spacing=h, offset=k, pmf=pmf, cap=cap, cap_excess=cap_excess)


def _user_contribution(law: LatticeLaw, gamma: float) -> LatticeLaw:
  """(1 - gamma) * point mass at 0 + gamma * law."""
  lo = min(law.offset, 0)
  hi = max(law.offset + law.pmf.size - 1, 0)
  pmf = np.zeros(hi - lo + 1)
  pmf[law.offset - lo: law.offset - lo + law.pmf.size] += gamma * law.pmf
  pmf[-lo] += 1.0 - gamma
  return LatticeLaw(spacing=law.spacing, offset=lo, pmf=pmf, cap=law.cap,
                    cap_excess=law.cap_excess)


def _log_mgf(law: LatticeLaw, lam: float) -> float:
  positive = law.pmf > 0
  return float(special.logsumexp(lam * law.values[positive] + np.log(law.pmf[positive])))


def _lambda_bounds(law: LatticeLaw, n: int, upper: bool) -> tuple[float, float]:
  # Search log(lambda) between 1e-3 and 1e4 inverse standard deviations of
  # the sum, capped so that exp(lambda * value) never overflows on the
  # side being tilted toward.
  vals = law.values
  sd = math.sqrt(n * float(np.dot(law.pmf, (vals - law.mean()) ** 2)))
  scale = max(sd, law.spacing)
  reach = vals[-1] if upper else -vals[0]
  hi = min(1e4 / scale, 600.0 / max(float(reach), law.spacing))
  lo = min(1e-3 / scale, 1e-3 * hi)
  return math.log(lo), math.log(hi)


def _chernoff_upper(law: LatticeLaw, n: int, threshold: float) -> tuple[float, float]:
  """Bounds on Pr(S > T) and E[S_+; S > T] for the n-fold sum S.

  Any lambda > 0 gives a valid bound; lambda is tuned numerically.
  """
  t_pos = max(threshold, 0.0)
  if law.values[-1] * n <= threshold:
    return 0.0, 0.0
  bounds = _lambda_bounds(law, n, upper=True)

  def log_tail_mean(log_lam):
    lam = math.exp(log_lam)
    return n * _log_mgf(law, lam) - lam * t_pos + math.log(t_pos + 1.0 / lam)

  def log_tail_prob(log_lam):
    lam = math.exp(log_lam)
    return n * _log_mgf(law, lam) - lam * threshold

  lp = optimize.minimize_scalar(log_tail_prob, bounds=bounds, method="bounded").fun
  lm = optimize.minimize_scalar(log_tail_mean, bounds=bounds, method="bounded").fun
  return min(1.0, math.exp(min(lp, 0.0))), math.exp(lm)


def _chernoff_lower(law: LatticeLaw, n: int, threshold: float) -> float:
  """Bound on Pr(S < B) for the n-fold sum S."""
  if law.values[0] * n >= threshold:
    return 0.0
  bounds = _lambda_bounds(law, n, upper=False)

  def log_tail(log_lam):
    lam = math.exp(log_lam)
    return n * _log_mgf(law, -lam) + lam * threshold

  res = optimize.minimize_scalar(log_tail, bounds=bounds, method="bounded")
  return min(1.0, math.exp(min(res.fun, 0.0)))


def make_grid(n: int, gamma: float, sigma0: float, eps, points: int = 2 ** 18,
              upper_trunc_mass: float = 1e-20, pessimism: str = "split",
              tail_target: float = 1e-18, guard: float = 0.25) -> AccountantGrid:
  """Chooses spacing and window for the shuffled BMG accountant.

  ``eps`` may be a number or an (eps_min, eps_max) pair; the window then
  covers every eps in the range, so one grid serves a whole sweep and the
  computed profile is exactly monotone in eps.

  The window is the Chernoff window of the n-fold sum at tail probability
  ``tail_target``, clipped to the sum's full support and widened by
  ``guard`` (fraction of its width) on top.
  """
  eps_lo, eps_hi = (eps, eps) if np.ndim(eps) == 0 else (min(eps), max(eps))
  cap = _cap_for(sigma0, upper_trunc_mass) if gamma < 1 else 1.0
  support_lo = min(gamma - math.exp(eps_hi), 0.0)
  support_hi = max(gamma - math.exp(eps_lo) + (1.0 - gamma) * cap, 0.0)
  # Mean-preserving rounding keeps the coarse pass centred on the true sum.
  coarse_h = (support_hi - support_lo) / 2 ** 15
  coarse = AccountantGrid(spacing=coarse_h, origin=0.0, points=2 ** 16,
                          upper_trunc_mass=upper_trunc_mass, pessimism="split")
  # Window top from the smallest eps (largest losses), bottom from the largest.
  law_top = _user_contribution(bmg_loss_distribution(gamma, sigma0, eps_lo, coarse), gamma)
  law_bot = _user_contribution(bmg_loss_distribution(gamma, sigma0, eps_hi, coarse), gamma)
  top = _solve_window_edge(law_top, n, tail_target, upper=True)
  bot = _solve_window_edge(law_bot, n, tail_target, upper=False)
  top = min(top, n * support_hi + coarse_h)
  bot = max(bot, n * support_lo - coarse_h)
  top = max(top, 0.0)
  width = (top - bot) * (1.0 + guard)
  width = max(width, (support_hi - support_lo) * 1.05)
  center = 0.5 * (top + bot)
  spacing = width / (points - 1)
  origin = math.floor((center - 0.5 * width) / spacing) * spacing
  return AccountantGrid(spacing=spacing, origin=origin, points=points,
                        upper_trunc_mass=upper_trunc_mass, pessimism=pessimism)


def _solve_window_edge(law: LatticeLaw, n: int, target: float, upper: bool) -> float:
  mean = n * law.mean()
  sd = math.sqrt(max(n * float(np.dot(law.pmf, (law.values - law.mean()) ** 2)), 0.0))
  sd = max(sd, law.spacing)
  if upper:
    prob = lambda t: _chernoff_upper(law, n, t)[0]
    bound = n * law.values[-1]
    step = lambda k: mean + k * sd
  else:
    prob = lambda t: _chernoff_lower(law, n, t)
    bound = n * law.values[0]
    step = lambda k: mean - k * sd
  k = 4.0
  while True:
    edge = step(k)
    if (upper and edge >= bound) or (not upper and edge <= bound):
      return bound
    if prob(edge) <= target:
      return edge
    k *= 1.25


def fft_delta_bmg(n: int, gamma: float, sigma0: float, eps: float,
                  grid: AccountantGrid | None = None,
                  alias_tolerance: float = 1e-9) -> ProfilePoint:
  """Certified upper bound on the shuffled BMG profile at eps.

  Args:
    n: number of users.
    gamma, sigma0: BMG parameters.
    eps: privacy level (>= 0).
    grid: accountant grid; ``make_grid`` is used when omitted.
    alias_tolerance: largest tolerated bound on the window-escaping mass.

  Returns:
    A ``ProfilePoint`` whose ``delta`` already includes every certified
    allowance (cap excess, above-window tail); ``error_budget`` itemizes
    them together with the aliasing and discretization slack.
  """
  if n < 1:
    raise ValueError("n must be >= 1")
  if grid is None:
    grid = make_grid(n, gamma, sigma0, eps)
  if gamma == 1.0 and eps >= 0:
    # Input-independent mechanism: l_eps = 1 - e^eps <= 0 always.
    return ProfilePoint(eps=eps, delta=0.0, n=n, method="fft-certified",
                        error_budget=0.0, certified=True)
  law = bmg_loss_distribution(gamma, sigma0, eps, grid)
  user = _user_contribution(law, gamma)
  h = grid.spacing
  size = grid.points
  if user.pmf.size > size:
    raise ValueError("per-user support does not fit in the grid window")
  buf = np.zeros(size)
  idx = (user.offset + np.arange(user.pmf.size)) % size
  np.add.at(buf, idx, user.pmf)
  spectrum = np.fft.rfft(buf)
  conv = np.fft.irfft(spectrum ** n, size)
  worst = float(conv.min())
  if worst < -1e-12:
    raise GridError(f"negative spectral artifact {worst:.3g} exceeds 1e-12; refine the grid")
  conv = np.clip(conv, 0.0, None)
  k0 = grid.origin_index
  window_k = k0 + np.arange(size)
  q = conv[window_k % size]
  values = window_k * h
  positive = values > 0
  e_pos = float(np.dot(values[positive], q[positive]))
  p_pos = float(q[positive].sum())

  top, bottom = values[-1], values[0]
  p_above, e_above = _chernoff_upper(user, n, top)
  p_below = _chernoff_lower(user, n, bottom)
  p_out = p_above + p_below
  if p_out > alias_tolerance:
    suggestion = make_grid(n, gamma, sigma0, eps, points=size)
    raise GridError(
        f"window [{bottom:.6g}, {top:.6g}] leaks up to {p_out:.3g} probability "
        f"(tolerance {alias_tolerance:g}); suggested window "
        f"[{suggestion.origin:.6g}, {suggestion.top:.6g}] with spacing {suggestion.spacing:.6g}")

  norm = n * gamma
  cap_term = law.cap_excess
  tail_term = e_above / norm
  alias_slack = p_out * max(top, 0.0) / norm
  # (S_r)_+ - S_+ <= N 1{S_r > 0} with E[N^2] <= n gamma h^2 / 4 (split) or
  # E[N^2] <= h^2 E[M^2] (round-up); Cauchy-Schwarz bounds the slack.
  p_pos_total = min(1.0, p_pos + p_above)
  if grid.pessimism == "split":
    disc_slack = h * math.sqrt(norm * p_pos_total) / (2.0 * norm)
  elif grid.pessimism == "round-up":
    second = norm * (1.0 - gamma) + norm * norm
    disc_slack = h * math.sqrt(second * p_pos_total) / norm
  else:
    disc_slack = 0.0
  delta = e_pos / norm + tail_term + cap_term
  delta = min(delta, 1.0)
  delta, underflow = _floor(delta)
  # Nearest rounding has no one-sided slack, so no budget is claimed.
  budget = (float(cap_term + tail_term + alias_slack + disc_slack)
            if grid.certified else None)
  return ProfilePoint(eps=eps, delta=delta, n=n, method="fft-certified",
                      error_budget=budget, certified=grid.certified,
                      underflow=underflow)


def fft_profile_bmg(n: int, gamma: float, sigma0: float, eps_values,
                    grid: AccountantGrid | None = None) -> list[ProfilePoint]:
  """Certified profile on an eps sweep, non-increasing by construction.

  All points share one grid. Since the true profile is non-increasing,
  delta(eps_i) <= delta(eps_k) <= bound_k for every k <= i, so the running
  minimum of the pointwise bounds is still a bound. It removes round-off
  wiggle near the floating-point floor.
  """
  eps_values = [float(e) for e in eps_values]
  if not eps_values:
    return []
  order = sorted(range(len(eps_values)), key=eps_values.__getitem__)
  if grid is None:
    grid = make_grid(n, gamma, sigma0, (min(eps_values), max(eps_values)))
  out = [None] * len(eps_values)
  best = None
  for i in order:
    point = fft_delta_bmg(n, gamma, sigma0, eps_values[i], grid=grid)
    if best is not None and best.delta < point.delta:
      # Lowering delta keeps the point's own overestimate budget valid.
      point = dataclasses.replace(point, delta=best.delta)
    best = point
    out[i] = point
  return out


def mc_delta_bmg(n: int, gamma: float, sigma0: float, eps, trials: int,
                 seed: int = 0, chunk: int = 20_000, threads: int = 1):
  """Monte Carlo estimate of E[(sum_{i <= M} l_eps(Y_i))_+] / (n gamma).

  ``eps`` may be a sequence; all levels then share the same draws (common
  random numbers), because l_eps only shifts with eps.

  Returns:
    (estimate, 95% half-width); arrays when ``eps`` is a sequence.
  """
  if trials < 10_000:
    raise ValueError("mc_delta_bmg needs at least 1e4 trials")
  eps_arr = np.atleast_1d(np.asarray(eps, dtype=float))
  if gamma == 1.0:
    zeros = np.zeros_like(eps_arr)
    return (0.0, 0.0) if np.ndim(eps) == 0 else (zeros, zeros)
  mu, s = _lognormal_params(sigma0)
  sizes = [chunk] * (trials // chunk)
  if trials % chunk:
    sizes.append(trials % chunk)
  shift = gamma - np.exp(eps_arr)

  def run(i):
    rng = randomizers.make_rng(seed, i)
    m = rng.binomial(n, gamma, size=sizes[i])
    total = int(m.sum())
    w = np.exp(mu + s * rng.standard_normal(total))
    # Per-trial sums of M lognormals; empty trials sum to zero.
    csum = np.concatenate(([0.0], np.cumsum(w)))
    ends = np.cumsum(m)
    sums = csum[ends] - csum[ends - m]
    vals = np.maximum(m[:, None] * shift[None, :] + (1.0 - gamma) * sums[:, None], 0.0)
    return vals.sum(axis=0), (vals ** 2).sum(axis=0)

  if threads > 1:
    with ThreadPoolExecutor(threads) as pool:
      parts = list(pool.map(run, range(len(sizes))))
  else:
    parts = [run(i) for i in range(len(sizes))]
  s1 = np.array([math.fsum(p[0][j] for p in parts) for j in range(eps_arr.size)])
  s2 = np.array([math.fsum(p[1][j] for p in parts) for j in range(eps_arr.size)])
  norm = n * gamma
  mean = s1 / trials
  var = np.maximum(s2 / trials - mean ** 2, 0.0) * trials / (trials - 1)
  est = mean / norm
  half = Z95 * np.sqrt(var / trials) / norm
  if np.ndim(eps) == 0:
    return float(est[0]), float(half[0])
  return est, half


def mc_profile_point(n, gamma, sigma0, eps, trials, seed=0, threads=1) -> ProfilePoint:
  est, half = mc_delta_bmg(n, gamma, sigma0, eps, trials, seed=seed, threads=threads)
  return ProfilePoint(eps=eps, delta=est, n=n, method="monte-carlo", half_width=half)


def calibrate_eps_bmg(n: int, gamma: float, sigma0: float, delta_target: float,
                      eps_max: float = 20.0, rel_tol: float = 1e-6,
                      points: int = 2 ** 18) -> float:
  """Smallest eps whose certified shuffled-BMG delta is <= delta_target.

  The bracket [0, eps_hi] is first found with per-point grids. Bisection
  then runs on one grid covering the whole bracket, where the computed
  delta is exactly non-increasing in eps.
  """
  if not 0.0 < delta_target < 1.0:
    raise ValueError("delta_target must lie in (0, 1)")
  if gamma == 1.0:
    return 0.0
  at = lambda e, g=None: fft_delta_bmg(n, gamma, sigma0, e, grid=g).delta
  if at(0.0) <= delta_target:
    return 0.0
  hi = min(1e-3, eps_max)
  while at(hi) > delta_target:
    if hi >= eps_max:
      raise CalibrationError(
          f"delta target {delta_target:g} is below the floor {at(eps_max):.3g} "
          f"attainable at eps_max={eps_max}")
    hi = min(2.0 * hi, eps_max)
  lo = 0.0 if hi <= 1e-3 else 0.5 * hi
  grid = make_grid(n, gamma, sigma0, (lo, hi), points=points)
  if at(hi, grid) > delta_target:
    hi = hi * 1.01
    grid = make_grid(n, gamma, sigma0, (lo, hi), points=points)
  while hi - lo > rel_tol * hi:
    mid = 0.5 * (lo + hi)
    if at(mid, grid) <= delta_target:
      hi = mid
    else:
      lo = mid
  return hi


def calibrate_sigma_gm(n: int, eps: float, delta_target: float,
                       rel_tol: float = 1e-12) -> float:
  """Smallest sigma with gm_profile_delta(sigma, n, eps) <= delta_target."""
  if not eps > 0:
    raise ValueError("eps must be positive")
  if not 0.0 < delta_target < 1.0:
    raise ValueError("delta_target must lie in (0, 1)")
  f = lambda sigma: gm_profile_delta(sigma, n, eps)
  lo, hi = 1.0, 1.0
  while f(lo) <= delta_target:
    lo *= 0.5
  while f(hi) > delta_target:
    hi *= 2.0
  while hi - lo > rel_tol * hi:
    mid = 0.5 * (lo + hi)
    if f(mid) <= delta_target:
      hi = mid
    else:
      lo = mid
  return hi
