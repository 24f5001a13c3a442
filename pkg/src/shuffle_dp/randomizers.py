"""Local randomizers and their unbiased estimators.

Four families are supported: the blanket-mixed Gaussian (BMG), the plain
Gaussian randomizer (BMG with gamma = 0), randomized response on {-1, +1},
and PrivUnit on the unit sphere. The zero-out symbol is ``BOTTOM``; its
output law is always the family's blanket distribution.

Random sources are numpy Generators driven by the counter-based Philox
bit generator, keyed by ``(seed, stream)`` through ``make_rng``. Identical
keys reproduce identical draws bit for bit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from shuffle_dp import numerics


class _Bottom:
  """The zero-out symbol. Use the module-level ``BOTTOM`` instance."""

  _instance = None

  def __new__(cls):
    if cls._instance is None:
      cls._instance = super().__new__(cls)
    return cls._instance

  def __repr__(self):
    return "BOTTOM"


BOTTOM = _Bottom()

NORM_SLACK = 1e-9


class Family(str, enum.Enum):
  BMG = "bmg"
  GAUSSIAN_LOCAL = "gaussian"
  RR = "rr"
  PRIVUNIT = "privunit"


class DegenerateScaleError(ValueError):
  """The unbiased estimator's scale is zero, so it is undefined."""


@dataclass(frozen=True)
class RandomizerSpec:
  """Validated parameters of one local randomizer.

  Build instances through the ``bmg``, ``gaussian_local``, ``rr`` and
  ``privunit`` constructors rather than directly.
  """

  family: Family
  d: int
  gamma: float = 0.0
  sigma0: float = 0.0
  p: float = 0.0
  theta: float = 0.0

  def __post_init__(self):
    object.__setattr__(self, "family", Family(self.family))
    if isinstance(self.d, bool) or int(self.d) != self.d or self.d < 1:
      raise ValueError(f"dimension must be an integer >= 1, got {self.d}")
    object.__setattr__(self, "d", int(self.d))
    fam = self.family
    if fam in (Family.BMG, Family.GAUSSIAN_LOCAL):
      if not (math.isfinite(self.sigma0) and self.sigma0 > 0):
        raise ValueError(f"sigma0 must be > 0, got {self.sigma0}")
      if fam is Family.BMG and not 0.0 < self.gamma <= 1.0:
        raise ValueError(f"BMG blanket mass gamma must lie in (0, 1], got {self.gamma}")
      if fam is Family.GAUSSIAN_LOCAL and self.gamma != 0.0:
        raise ValueError("the Gaussian local randomizer has gamma = 0")
    elif fam is Family.RR:
      if self.d != 1:
        raise ValueError("randomized response is one-dimensional (d = 1)")
      if not 0.5 <= self.p <= 1.0:
        raise ValueError(f"randomized response needs 1/2 <= p <= 1, got {self.p}")
    elif fam is Family.PRIVUNIT:
      if self.d < 2:
        raise ValueError("PrivUnit needs d >= 2")
      if not 0.0 <= self.p <= 1.0:
        raise ValueError(f"PrivUnit needs 0 <= p <= 1, got {self.p}")
      if not -1.0 <= self.theta <= 1.0:
        raise ValueError(f"PrivUnit needs theta in [-1, 1], got {self.theta}")

  @property
  def blanket_mass(self) -> float:
    """Largest gamma with R_x >= gamma * R_BG for every input x."""
    if self.family in (Family.BMG, Family.GAUSSIAN_LOCAL):
      return self.gamma
    if self.family is Family.RR:
      return 2.0 * (1.0 - self.p)
    q = numerics.cap_moments(self.theta, self.d).q
    return min(_privunit_levels(self.p, q))


def bmg(d: int, gamma: float, sigma0: float) -> RandomizerSpec:
  return RandomizerSpec(Family.BMG, d, gamma=gamma, sigma0=sigma0)


def gaussian_local(d: int, sigma0: float) -> RandomizerSpec:
  return RandomizerSpec(Family.GAUSSIAN_LOCAL, d, gamma=0.0, sigma0=sigma0)


def rr(p: float) -> RandomizerSpec:
  return RandomizerSpec(Family.RR, 1, p=p)


def privunit(d: int, p: float, theta: float) -> RandomizerSpec:
  return RandomizerSpec(Family.PRIVUNIT, d, p=p, theta=theta)


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
  """Philox generator keyed by (seed, stream); independent across streams."""
  seq = np.random.SeedSequence(int(seed), spawn_key=(int(stream),))
  return np.random.Generator(np.random.Philox(seq))


def _privunit_levels(p: float, q: float) -> tuple[float, float]:
  # Density of PrivUnit w.r.t. the uniform measure: h on the cap, l off it.
  h = p / (1.0 - q) if q < 1.0 else math.inf
  low = (1.0 - p) / q if q > 0.0 else math.inf
  return h, low


def check_input(spec: RandomizerSpec, x):
  """Validates one input against the family's domain.

  Returns ``BOTTOM`` or a float array (a float for RR). Ball inputs at most
  1e-9 outside the unit ball are pulled back onto it.
  """
  if x is BOTTOM:
    return BOTTOM
  if spec.family is Family.RR:
    value = float(np.asarray(x).reshape(()))
    if value not in (-1.0, 1.0):
      raise ValueError(f"randomized response input must be -1 or +1, got {x}")
    return value
  x = np.asarray(x, dtype=float)
  if x.shape != (spec.d,):
    raise ValueError(f"input must have shape ({spec.d},), got {x.shape}")
  norm = float(np.linalg.norm(x))
  if spec.family is Family.PRIVUNIT:
    if abs(norm - 1.0) > NORM_SLACK:
      raise ValueError(f"PrivUnit input must be a unit vector, norm is {norm}")
    return x / norm
  if norm > 1.0 + NORM_SLACK:
    raise ValueError(f"input must lie in the unit ball, norm is {norm}")
  if norm > 1.0:
    x = x / norm
  return x


def _cap_marginal(rng, a: float, theta: float, size: int, inside: bool):
  """Draws T = <Y, v> restricted to [theta, 1] (inside) or [-1, theta)."""
  u = rng.random(size)
  if inside:
    # 1 - (1 + T)/2 = (1 - T)/2 ~ Beta(a, a), restricted below (1 - theta)/2.
    top = special.betainc(a, a, 0.5 * (1.0 - theta))
    w = special.betaincinv(a, a, u * top)
    return 1.0 - 2.0 * w
  top = special.betainc(a, a, 0.5 * (1.0 + theta))
  b = special.betaincinv(a, a, u * top)
  return 2.0 * b - 1.0


def _orthogonal_directions(rng, v: np.ndarray, size: int) -> np.ndarray:
  g = rng.standard_normal((size, v.shape[0]))
  g -= np.outer(g @ v, v)
  g /= np.linalg.norm(g, axis=1, keepdims=True)
  return g


def _sample_privunit(spec, v, rng, size):
  a = 0.5 * (spec.d - 1)
  in_cap = rng.random(size) < spec.p
  t = np.empty(size)
  n_in = int(in_cap.sum())
  if n_in:
    t[in_cap] = _cap_marginal(rng, a, spec.theta, n_in, inside=True)
  if size - n_in:
    t[~in_cap] = _cap_marginal(rng, a, spec.theta, size - n_in, inside=False)
  t = np.clip(t, -1.0, 1.0)
  w = _orthogonal_directions(rng, v, size)
  y = t[:, None] * v[None, :] + np.sqrt(1.0 - t * t)[:, None] * w
  # Remove rounding drift so outputs sit on the sphere to ~1e-15.
  return y / np.linalg.norm(y, axis=1, keepdims=True)


def sample(spec: RandomizerSpec, x, rng: np.random.Generator, size: int | None = None):
  """Draws message(s) from R_x.

  Args:
    spec: randomizer parameters.
    x: an input in the family's domain, or ``BOTTOM``.
    rng: numpy Generator (see ``make_rng``).
    size: number of i.i.d. draws; ``None`` returns a single message.

  Returns:
    A float (RR) or a length-d array when ``size`` is None, otherwise an
    array of shape (size,) for RR and (size, d) for vector families.
  """
  x = check_input(spec, x)
  m = 1 if size is None else int(size)
  fam = spec.family
  if fam in (Family.BMG, Family.GAUSSIAN_LOCAL):
    y = spec.sigma0 * rng.standard_normal((m, spec.d))
    if x is not BOTTOM:
      informative = rng.random(m) >= spec.gamma
      y[informative] += x
  elif fam is Family.RR:
    if x is BOTTOM:
      y = np.where(rng.random(m) < 0.5, 1.0, -1.0)
    else:
      y = np.where(rng.random(m) < spec.p, x, -x)
  else:
    if x is BOTTOM:
      g = rng.standard_normal((m, spec.d))
      y = g / np.linalg.norm(g, axis=1, keepdims=True)
    else:
      y = _sample_privunit(spec, x, rng, m)
  return y[0] if size is None else y


def estimator_scale(spec: RandomizerSpec) -> float:
  """Scale m with E[Y | x] = m x; the unbiased estimator is Y / m."""
  fam = spec.family
  if fam is Family.BMG:
    m = 1.0 - spec.gamma
  elif fam is Family.GAUSSIAN_LOCAL:
    m = 1.0
  elif fam is Family.RR:
    m = 2.0 * spec.p - 1.0
  else:
    cap = numerics.cap_moments(spec.theta, spec.d)
    if cap.q == 0.0:
      m = 0.0
    else:
      m = cap.alpha * (spec.p + cap.q - 1.0) / cap.q
  if m == 0.0:
    raise DegenerateScaleError(
        f"{fam.value} estimator is undefined: its scale is zero for {spec}")
  return m


def estimate(spec: RandomizerSpec, msg):
  """Universal unbiased estimate of the input from message(s): Y / m."""
  return np.asarray(msg, dtype=float) / estimator_scale(spec)


def _gaussian_log_ratio(spec, x, y):
  # log of dR_x / dN(0, sigma0^2 I) at y; y has shape (..., d).
  if x is BOTTOM:
    return np.zeros(np.shape(y)[:-1])
  s2 = spec.sigma0 ** 2
  z = (y @ x) / s2 - float(x @ x) / (2.0 * s2)
  if spec.gamma == 0.0:
    return z
  if spec.gamma == 1.0:
    return np.zeros_like(z)
  return np.logaddexp(math.log(spec.gamma), math.log1p(-spec.gamma) + z)


def log_likelihood_ratio_to_blanket(spec: RandomizerSpec, x, y):
  """log R_x(y) / R_BG(y) for the Gaussian families.

  For BMG this is log(gamma + (1 - gamma) exp(<x, y>/s^2 - |x|^2/(2 s^2))),
  evaluated with logaddexp so it stays finite for any finite y.
  """
  if spec.family not in (Family.BMG, Family.GAUSSIAN_LOCAL):
    raise ValueError(
        f"likelihood ratio to the blanket is implemented for the Gaussian families only, "
        f"not {spec.family.value}")
  x = check_input(spec, x)
  y = np.asarray(y, dtype=float)
  out = _gaussian_log_ratio(spec, x, y)
  return float(out) if np.ndim(out) == 0 else out


def density_ratio(spec: RandomizerSpec, a, b, y):
  """R_a(y) / R_b(y) for inputs a, b (either may be ``BOTTOM``).

  ``y`` is a batch of messages: shape (m,) for RR and (m, d) otherwise.
  """
  a = check_input(spec, a)
  b = check_input(spec, b)
  y = np.asarray(y, dtype=float)
  fam = spec.family
  if fam in (Family.BMG, Family.GAUSSIAN_LOCAL):
    return np.exp(_gaussian_log_ratio(spec, a, y) - _gaussian_log_ratio(spec, b, y))
  if fam is Family.RR:
    def dens(x):
      if x is BOTTOM:
        return np.full(y.shape, 0.5)
      return np.where(y == x, spec.p, 1.0 - spec.p)
    return dens(a) / dens(b)
  q = numerics.cap_moments(spec.theta, spec.d).q
  h, low = _privunit_levels(spec.p, q)

  def dens(x):
    # Density w.r.t. the uniform measure on the sphere.
    if x is BOTTOM:
      return np.ones(y.shape[0])
    return np.where(y @ x >= spec.theta, h, low)
  return dens(a) / dens(b)
