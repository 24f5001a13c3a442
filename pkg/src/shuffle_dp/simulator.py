"""Monte Carlo of the randomize, shuffle, analyze protocol.

Every user randomizes its input, the shuffler applies a uniform random
permutation, and the analyzer averages the per-message unbiased estimates.
The analyzer sorts each coordinate before summing, so its output is bit for
bit the same for any ordering of the messages; each trial asserts this.

Trials run in fixed-size chunks. Chunk i draws from ``make_rng(seed, i)``
and chunk results are combined with ``math.fsum``, so results do not depend
on the number of worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from shuffle_dp import randomizers
from shuffle_dp.randomizers import Family, RandomizerSpec

Z95 = 1.959963984540054


@dataclass(frozen=True)
class ProtocolRun:
  """A simulation job.

  Attributes:
    spec: the local randomizer.
    n: number of users.
    inputs: array of shape (n, d), or (n,) of +-1 for randomized response.
    trials: number of independent protocol executions.
    seed: base seed; chunk i uses stream i.
    chunk: trials per chunk.
    threads: worker threads.
  """

  spec: RandomizerSpec
  n: int
  inputs: np.ndarray
  trials: int
  seed: int = 0
  chunk: int = 2_000
  threads: int = 1

  def __post_init__(self):
    if self.n < 1 or self.trials < 1:
      raise ValueError("need n >= 1 and trials >= 1")
    randomizers.estimator_scale(self.spec)  # rejects undefined estimators
    x = np.asarray(self.inputs, dtype=float)
    want = (self.n,) if self.spec.family is Family.RR else (self.n, self.spec.d)
    if x.shape != want:
      raise ValueError(f"inputs must have shape {want}, got {x.shape}")
    for row in x:
      randomizers.check_input(self.spec, row)
    object.__setattr__(self, "inputs", x)

  @property
  def true_mean(self) -> np.ndarray:
    return np.atleast_1d(self.inputs.mean(axis=0))


def worst_case_inputs(spec: RandomizerSpec, n: int) -> np.ndarray:
  """All users at e_1 (or +1 for randomized response)."""
  if spec.family is Family.RR:
    return np.ones(n)
  x = np.zeros((n, spec.d))
  x[:, 0] = 1.0
  return x


def random_sphere_inputs(spec: RandomizerSpec, n: int, seed: int = 0) -> np.ndarray:
  rng = randomizers.make_rng(seed, 2 ** 31)
  if spec.family is Family.RR:
    return np.where(rng.random(n) < 0.5, 1.0, -1.0)
  g = rng.standard_normal((n, spec.d))
  return g / np.linalg.norm(g, axis=1, keepdims=True)


def analyze(spec: RandomizerSpec, messages: np.ndarray) -> np.ndarray:
  """Mean of per-message estimates over the user axis (axis 1).

  Sorting first makes the float sum independent of message order.
  """
  est = randomizers.estimate(spec, messages)
  return np.sort(est, axis=1).sum(axis=1) / messages.shape[1]


def _chunk_sizes(trials: int, chunk: int) -> list[int]:
  sizes = [chunk] * (trials // chunk)
  if trials % chunk:
    sizes.append(trials % chunk)
  return sizes


def _messages(run: ProtocolRun, rng, m: int) -> np.ndarray:
  """Messages for m trials: shape (m, n, d), or (m, n, 1) for RR."""
  spec, x = run.spec, run.inputs
  d = 1 if spec.family is Family.RR else spec.d
  out = np.empty((m, run.n, d))
  # Users with identical inputs are sampled in one call.
  keys, inverse = np.unique(x.reshape(run.n, -1), axis=0, return_inverse=True)
  inverse = np.asarray(inverse).reshape(-1)
  for k, key in enumerate(keys):
    users = np.flatnonzero(inverse == k)
    value = key[0] if spec.family is Family.RR else key
    y = randomizers.sample(spec, value, rng, size=m * users.size)
    out[:, users, :] = np.asarray(y).reshape(m, users.size, d)
  return out


def _run_chunk(run: ProtocolRun, i: int, m: int):
  rng = randomizers.make_rng(run.seed, i)
  msgs = _messages(run, rng, m)
  before = analyze(run.spec, msgs)
  shuffled = rng.permuted(msgs, axis=1)
  after = analyze(run.spec, shuffled)
  if not np.array_equal(before, after):
    raise AssertionError("additive analyzer output changed under shuffling")
  return after


def _map_chunks(run: ProtocolRun, fn):
  sizes = _chunk_sizes(run.trials, run.chunk)
  job = lambda i: fn(_run_chunk(run, i, sizes[i]))
  if run.threads > 1:
    with ThreadPoolExecutor(run.threads) as pool:
      return list(pool.map(job, range(len(sizes))))
  return [job(i) for i in range(len(sizes))]


def _mean_half_width(sums: list, sq_sums: list, count: int):
  s1 = math.fsum(sums)
  s2 = math.fsum(sq_sums)
  mean = s1 / count
  var = max(s2 / count - mean * mean, 0.0) * count / max(count - 1, 1)
  return mean, Z95 * math.sqrt(var / count)


def simulate_mse(run: ProtocolRun) -> tuple[float, float]:
  """Mean squared l2 error of the analyzer and its 95% half-width."""
  mu = run.true_mean

  def stats(out):
    err = ((out - mu) ** 2).sum(axis=1)
    return math.fsum(err), math.fsum(err * err)

  parts = _map_chunks(run, stats)
  return _mean_half_width([p[0] for p in parts], [p[1] for p in parts], run.trials)


def simulate_unbiasedness(run: ProtocolRun) -> tuple[np.ndarray, np.ndarray]:
  """Per-coordinate bias of the analyzer and 95% half-widths."""
  mu = run.true_mean

  def stats(out):
    dev = out - mu
    return ([math.fsum(c) for c in dev.T], [math.fsum(c) for c in dev.T ** 2])

  parts = _map_chunks(run, stats)
  dims = mu.size
  bias, half = np.empty(dims), np.empty(dims)
  for j in range(dims):
    bias[j], half[j] = _mean_half_width([p[0][j] for p in parts],
                                        [p[1][j] for p in parts], run.trials)
  return bias, half


def simulate_gm_mse(sigma: float, n: int, d: int, trials: int, seed: int = 0,
                    chunk: int = 100_000) -> tuple[float, float]:
  """MSE of the central Gaussian mechanism: mean plus N(0, (sigma^2/n) I_d)."""
  if not sigma > 0 or n < 1 or d < 1 or trials < 2:
    raise ValueError("need sigma > 0, n >= 1, d >= 1 and trials >= 2")
  scale = sigma / math.sqrt(n)
  s1, s2 = [], []
  for i, m in enumerate(_chunk_sizes(trials, chunk)):
    rng = randomizers.make_rng(seed, i)
    err = ((scale * rng.standard_normal((m, d))) ** 2).sum(axis=1)
    s1.append(math.fsum(err))
    s2.append(math.fsum(err * err))
  return _mean_half_width(s1, s2, trials)
