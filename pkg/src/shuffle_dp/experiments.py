"""Experiment sweeps written as CSV.

A config is a flat text file with one ``key = value`` per line and ``#``
comments. Lists are comma separated. Each experiment accepts a fixed set of
keys and rejects anything else.

Experiments:
  utility-vs-eps  RMSE of BMG and GM at a fixed (n, delta) over eps.
  profile-vs-eps  delta(eps) of one fixed BMG and the RMSE-matched GM.
  n-scaling       calibrated eps and RMSE over n for a fixed BMG.
  custom-sweep    certified delta(eps) for user-given (n, gamma, sigma0).
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from shuffle_dp import accountant
from shuffle_dp import optimizer
from shuffle_dp import shuffle_index

CSV_FIELDS = ("experiment", "mechanism", "n", "d", "eps", "delta", "delta_method",
              "gamma", "sigma0", "sigma_gm", "chi", "rmse", "seed")
EXPERIMENTS = ("utility-vs-eps", "profile-vs-eps", "n-scaling", "custom-sweep")
DEFAULT_EPS = tuple(float(e) for e in np.geomspace(1e-2, 1.0, 13))

_COMMON = {"experiment", "output", "seed", "d", "threads", "grid_points",
           "pessimism", "upper_trunc_mass"}
_KEYS = {
    "utility-vs-eps": ({"n", "delta"}, {"eps"}),
    "profile-vs-eps": ({"n"}, {"eps", "rmse_target", "gamma", "sigma0", "adjacency"}),
    "n-scaling": ({"n_values"}, {"gamma", "sigma0", "delta"}),
    "custom-sweep": ({"n", "gamma", "sigma0", "eps"}, {"adjacency"}),
}
_INT_KEYS = {"n", "seed", "d", "threads", "grid_points"}
_LIST_KEYS = {"eps", "n_values"}
_STR_KEYS = {"experiment", "output", "pessimism", "adjacency"}


class ConfigError(ValueError):
  pass


@dataclass
class ExperimentConfig:
  experiment: str
  params: dict = field(default_factory=dict)
  output: str | None = None
  seed: int = 0
  threads: int = 1

  def get(self, key, default=None):
    return self.params.get(key, default)


def _parse_value(key: str, raw: str):
  try:
    if key in _STR_KEYS:
      return raw
    if key in _LIST_KEYS:
      items = [t.strip() for t in raw.split(",") if t.strip()]
      conv = (lambda t: int(float(t))) if key == "n_values" else float
      return [conv(t) for t in items]
    if key in _INT_KEYS:
      value = float(raw)
      if value != int(value):
        raise ValueError
      return int(value)
    return float(raw)
  except ValueError:
    raise ConfigError(f"cannot parse {key} = {raw!r}") from None


def parse_config(text: str) -> ExperimentConfig:
  """Parses and validates a ``key = value`` config."""
  values = {}
  for lineno, line in enumerate(text.splitlines(), 1):
    line = line.split("#", 1)[0].strip()
    if not line:
      continue
    if "=" not in line:
      raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
    key, raw = (t.strip() for t in line.split("=", 1))
    if key in values:
      raise ConfigError(f"line {lineno}: duplicate key {key!r}")
    values[key] = _parse_value(key, raw)
  name = values.get("experiment")
  if name not in EXPERIMENTS:
    raise ConfigError(f"experiment must be one of {', '.join(EXPERIMENTS)}; got {name!r}")
  required, optional = _KEYS[name]
  missing = required - values.keys()
  if missing:
    raise ConfigError(f"{name} needs keys: {', '.join(sorted(missing))}")
  extra = values.keys() - required - optional - _COMMON
  if extra:
    raise ConfigError(f"{name} does not accept keys: {', '.join(sorted(extra))}")
  for key in _LIST_KEYS & values.keys():
    if not values[key]:
      raise ConfigError(f"{key} must list at least one value")
  if name == "profile-vs-eps":
    has_rmse = "rmse_target" in values
    has_pair = {"gamma", "sigma0"} <= values.keys()
    if has_rmse == has_pair or (not has_pair and ({"gamma", "sigma0"} & values.keys())):
      raise ConfigError("profile-vs-eps needs either rmse_target or both gamma and sigma0")
  if values.get("adjacency", "zero-out") not in ("zero-out", "replace-one"):
    raise ConfigError("adjacency must be zero-out or replace-one")
  params = {k: v for k, v in values.items()
            if k not in ("experiment", "output", "seed", "threads")}
  cfg = ExperimentConfig(experiment=name, params=params, output=values.get("output"),
                         seed=values.get("seed", 0), threads=values.get("threads", 1))
  _validate_ranges(cfg)
  return cfg


def _validate_ranges(cfg: ExperimentConfig):
  p = cfg.params
  for key in ("n", "d"):
    if key in p and p[key] < 1:
      raise ConfigError(f"{key} must be >= 1")
  if any(v < 1 for v in p.get("n_values", [])):
    raise ConfigError("n_values must be >= 1")
  if any(not e > 0 for e in p.get("eps", [])):
    raise ConfigError("eps values must be positive")
  if "delta" in p and not 0 < p["delta"] < 1:
    raise ConfigError("delta must lie in (0, 1)")
  if "gamma" in p and not 0 < p["gamma"] < 1:
    raise ConfigError("gamma must lie in (0, 1)")
  if "sigma0" in p and not p["sigma0"] > 0:
    raise ConfigError("sigma0 must be positive")
  if "rmse_target" in p and not p["rmse_target"] > 0:
    raise ConfigError("rmse_target must be positive")
  if cfg.threads < 1:
    raise ConfigError("threads must be >= 1")


# ---------------------------------------------------------------------------
# Rows.


def _row(cfg: ExperimentConfig, mechanism: str, **fields) -> dict:
  row = dict.fromkeys(CSV_FIELDS)
  row.update(experiment=cfg.experiment, mechanism=mechanism, seed=cfg.seed,
             d=cfg.get("d", 1))
  row.update(fields)
  return row


def _fmt(value) -> str:
  if value is None:
    return ""
  if isinstance(value, (bool, np.bool_)):
    return str(value).lower()
  if isinstance(value, (int, np.integer)):
    return str(int(value))
  if isinstance(value, (float, np.floating)):
    return format(float(value), ".17g")
  return str(value)


def rows_to_csv(rows) -> str:
  buf = io.StringIO()
  writer = csv.writer(buf, lineterminator="\n")
  writer.writerow(CSV_FIELDS)
  for row in rows:
    writer.writerow([_fmt(row[k]) for k in CSV_FIELDS])
  return buf.getvalue()


def _grid_kwargs(cfg: ExperimentConfig) -> dict:
  out = {}
  if "grid_points" in cfg.params:
    out["points"] = cfg.params["grid_points"]
  if "pessimism" in cfg.params:
    out["pessimism"] = cfg.params["pessimism"]
  if "upper_trunc_mass" in cfg.params:
    out["upper_trunc_mass"] = cfg.params["upper_trunc_mass"]
  return out


def _failure(cfg, mechanism, exc, **fields):
  return _row(cfg, mechanism, delta_method=f"failed: {type(exc).__name__}: {exc}",
              **fields)


def _parallel(cfg, fn, items):
  if cfg.threads > 1:
    with ThreadPoolExecutor(cfg.threads) as pool:
      return list(pool.map(fn, items))
  return [fn(x) for x in items]


def _utility_point(cfg: ExperimentConfig, eps: float) -> list[dict]:
  n, delta, d = cfg.params["n"], cfg.params["delta"], cfg.get("d", 1)
  rows = []
  try:
    design = optimizer.pipeline_bmg_params_from_privacy(n, eps, delta, d=d, certify=False)
    grid = accountant.make_grid(n, design.gamma, design.sigma0, eps, **_grid_kwargs(cfg))
    cert = accountant.fft_delta_bmg(n, design.gamma, design.sigma0, eps, grid=grid)
    rows.append(_row(cfg, "BMG", n=n, eps=eps, delta=cert.delta,
                     delta_method=cert.method, gamma=design.gamma, sigma0=design.sigma0,
                     chi=design.chi, rmse=design.risk.rmse))
  except ArithmeticError as exc:
    rows.append(_failure(cfg, "BMG", exc, n=n, eps=eps))
  sigma = accountant.calibrate_sigma_gm(n, eps, delta)
  rows.append(_row(cfg, "GM", n=n, eps=eps, delta=accountant.gm_profile_delta(sigma, n, eps),
                   delta_method="analytic-gaussian", sigma_gm=sigma,
                   rmse=sigma / math.sqrt(n)))
  # Plain Gaussian randomizer: sized through the open conjecture, so the
  # delta here is the template value and certifies nothing.
  try:
    chi = shuffle_index.invert_template_for_chi(n, eps, delta)
    sigma0 = shuffle_index.sigma0_from_chi_chua(chi)
    rows.append(_row(cfg, "GaussianLocal-conjecture", n=n, eps=eps,
                     delta=shuffle_index.template_delta(n, eps, chi),
                     delta_method="template-f", gamma=0.0, sigma0=sigma0, chi=chi,
                     rmse=sigma0 / math.sqrt(n)))
  except ArithmeticError as exc:
    rows.append(_failure(cfg, "GaussianLocal-conjecture", exc, n=n, eps=eps))
  return rows


def run_utility_vs_eps(cfg: ExperimentConfig) -> list[dict]:
  eps_values = cfg.get("eps", list(DEFAULT_EPS))
  return [r for rows in _parallel(cfg, lambda e: _utility_point(cfg, e), eps_values)
          for r in rows]


def _adjusted(point: accountant.ProfilePoint, cfg) -> accountant.ProfilePoint:
  return point.to_replace_one() if cfg.get("adjacency") == "replace-one" else point


def run_profile_vs_eps(cfg: ExperimentConfig) -> list[dict]:
  n, d = cfg.params["n"], cfg.get("d", 1)
  eps_values = cfg.get("eps", list(DEFAULT_EPS))
  if "rmse_target" in cfg.params:
    design = optimizer.design_for_rmse(n, d, cfg.params["rmse_target"])
    gamma, sigma0 = design.gamma, design.sigma0
  else:
    gamma, sigma0 = cfg.params["gamma"], cfg.params["sigma0"]
  rmse = math.sqrt(optimizer.err1_bmg(d, gamma, sigma0) / (n * d))
  chi = shuffle_index.chi_lo_bmg(gamma, sigma0)
  rows = []
  grid = accountant.make_grid(n, gamma, sigma0, (min(eps_values), max(eps_values)),
                              **_grid_kwargs(cfg))
  try:
    certified = accountant.fft_profile_bmg(n, gamma, sigma0, eps_values, grid=grid)
  except ArithmeticError as exc:
    certified = [exc] * len(eps_values)
  sigma_gm = rmse * math.sqrt(n)
  for eps, cert in zip(eps_values, certified):
    if isinstance(cert, Exception):
      rows.append(_failure(cfg, "BMG", cert, n=n, eps=eps, gamma=gamma, sigma0=sigma0))
    else:
      pt = _adjusted(cert, cfg)
      rows.append(_row(cfg, "BMG", n=n, eps=pt.eps, delta=pt.delta, delta_method=pt.method,
                       gamma=gamma, sigma0=sigma0, chi=chi, rmse=rmse))
    tmpl = accountant.ProfilePoint(eps=eps, delta=shuffle_index.template_delta(n, eps, chi),
                                   n=n, method="template-f")
    tmpl = _adjusted(tmpl, cfg)
    rows.append(_row(cfg, "BMG", n=n, eps=tmpl.eps, delta=tmpl.delta,
                     delta_method=tmpl.method, gamma=gamma, sigma0=sigma0, chi=chi,
                     rmse=rmse))
    gm = accountant.ProfilePoint(eps=eps, delta=accountant.gm_profile_delta(sigma_gm, n, eps),
                                 n=n, method="analytic-gaussian")
    gm = _adjusted(gm, cfg)
    rows.append(_row(cfg, "GM", n=n, eps=gm.eps, delta=gm.delta, delta_method=gm.method,
                     sigma_gm=sigma_gm, rmse=rmse))
  return rows


def _n_scaling_point(cfg: ExperimentConfig, n: int) -> list[dict]:
  gamma = cfg.get("gamma", 0.95)
  sigma0 = cfg.get("sigma0", 4.6)
  delta = cfg.get("delta", 1e-5)
  d = cfg.get("d", 1)
  rmse = math.sqrt(optimizer.err1_bmg(d, gamma, sigma0) / (n * d))
  chi = shuffle_index.chi_lo_bmg(gamma, sigma0)
  try:
    eps = accountant.calibrate_eps_bmg(n, gamma, sigma0, delta,
                                       points=cfg.get("grid_points", 2 ** 18))
    cert = accountant.fft_delta_bmg(n, gamma, sigma0, eps)
  except ArithmeticError as exc:
    return [_failure(cfg, "BMG", exc, n=n, gamma=gamma, sigma0=sigma0, chi=chi, rmse=rmse)]
  sigma = accountant.calibrate_sigma_gm(n, eps, delta)
  return [
      _row(cfg, "BMG", n=n, eps=eps, delta=cert.delta, delta_method=cert.method,
           gamma=gamma, sigma0=sigma0, chi=chi, rmse=rmse),
      _row(cfg, "GM", n=n, eps=eps, delta=accountant.gm_profile_delta(sigma, n, eps),
           delta_method="analytic-gaussian", sigma_gm=sigma, rmse=sigma / math.sqrt(n)),
  ]


def run_n_scaling(cfg: ExperimentConfig) -> list[dict]:
  return [r for rows in _parallel(cfg, lambda n: _n_scaling_point(cfg, n),
                                  cfg.params["n_values"]) for r in rows]


def run_custom_sweep(cfg: ExperimentConfig) -> list[dict]:
  n, gamma, sigma0 = cfg.params["n"], cfg.params["gamma"], cfg.params["sigma0"]
  d = cfg.get("d", 1)
  eps_values = cfg.params["eps"]
  rmse = math.sqrt(optimizer.err1_bmg(d, gamma, sigma0) / (n * d))
  chi = shuffle_index.chi_lo_bmg(gamma, sigma0)
  grid = accountant.make_grid(n, gamma, sigma0, (min(eps_values), max(eps_values)),
                              **_grid_kwargs(cfg))
  try:
    points = accountant.fft_profile_bmg(n, gamma, sigma0, eps_values, grid=grid)
  except ArithmeticError as exc:
    return [_failure(cfg, "BMG", exc, n=n, gamma=gamma, sigma0=sigma0)]
  rows = []
  for pt in points:
    pt = _adjusted(pt, cfg)
    rows.append(_row(cfg, "BMG", n=n, eps=pt.eps, delta=pt.delta, delta_method=pt.method,
                     gamma=gamma, sigma0=sigma0, chi=chi, rmse=rmse))
  return rows


RUNNERS = {
    "utility-vs-eps": run_utility_vs_eps,
    "profile-vs-eps": run_profile_vs_eps,
    "n-scaling": run_n_scaling,
    "custom-sweep": run_custom_sweep,
}


def run_experiment(cfg: ExperimentConfig) -> list[dict]:
  return RUNNERS[cfg.experiment](cfg)


def has_failures(rows) -> bool:
  return any(str(r["delta_method"] or "").startswith("failed") for r in rows)
