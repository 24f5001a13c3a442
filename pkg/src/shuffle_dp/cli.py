"""Command-line entry point: ``shuffle-dp <command> ...``.

Exit codes: 0 success, 2 invalid usage or parameters, 3 numerical failure
(bracketing, grid certification, calibration).
"""

from __future__ import annotations

import argparse
import json
import math
import sys

from shuffle_dp import accountant
from shuffle_dp import experiments
from shuffle_dp import optimizer
from shuffle_dp import randomizers
from shuffle_dp import shuffle_index
from shuffle_dp import simulator

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(ValueError):
  pass


def _global_flags(parser, suppress: bool):
  default = argparse.SUPPRESS if suppress else None
  parser.add_argument("--seed", type=int, default=default, help="random seed (default 0)")
  parser.add_argument("--threads", type=int, default=default,
                      help="worker threads (default 1); results do not depend on it")
  parser.add_argument("--output", default=default, help="write output here instead of stdout")


def _spec_flags(parser):
  parser.add_argument("--family", required=True, choices=[f.value for f in randomizers.Family])
  parser.add_argument("--d", type=int, default=None)
  parser.add_argument("--gamma", type=float)
  parser.add_argument("--sigma0", type=float)
  parser.add_argument("--p", type=float)
  parser.add_argument("--theta", type=float)


def _need(args, *names):
  missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
  if missing:
    raise UsageError(f"{args.command} needs {', '.join(missing)}")


def _spec(args) -> randomizers.RandomizerSpec:
  fam = args.family
  if fam == "bmg":
    _need(args, "gamma", "sigma0")
    return randomizers.bmg(args.d or 1, args.gamma, args.sigma0)
  if fam == "gaussian":
    _need(args, "sigma0")
    return randomizers.gaussian_local(args.d or 1, args.sigma0)
  if fam == "rr":
    _need(args, "p")
    if args.d not in (None, 1):
      raise UsageError("randomized response has d = 1")
    return randomizers.rr(args.p)
  _need(args, "p", "theta", "d")
  return randomizers.privunit(args.d, args.p, args.theta)


def _json(obj) -> str:
  return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def cmd_chi(args) -> str:
  spec = _spec(args)
  report = shuffle_index.shuffle_index_report(spec, mc_samples=args.mc_samples, seed=args.seed)
  out = report.to_json()
  out["family"] = spec.family.value
  return _json(out)


def _grid(args, n, gamma, sigma0, eps):
  kwargs = {"points": args.grid_points, "pessimism": args.pessimism,
            "upper_trunc_mass": args.upper_trunc_mass}
  return accountant.make_grid(n, gamma, sigma0, eps, **kwargs)


def cmd_delta(args) -> str:
  _need(args, "n", "eps")
  method = args.method
  if method == "gaussian":
    _need(args, "sigma")
    delta = accountant.gm_profile_delta(args.sigma, args.n, args.eps)
    point = accountant.ProfilePoint(eps=args.eps, delta=delta, n=args.n,
                                    method="analytic-gaussian")
  elif method == "template":
    _need(args, "chi")
    point = accountant.ProfilePoint(
        eps=args.eps, delta=shuffle_index.template_delta(args.n, args.eps, args.chi),
        n=args.n, method="template-f")
  else:
    _need(args, "gamma", "sigma0")
    if not 0 < args.gamma <= 1:
      raise UsageError("--gamma must lie in (0, 1]")
    if method == "fft":
      grid = None if args.gamma == 1 else _grid(args, args.n, args.gamma, args.sigma0, args.eps)
      point = accountant.fft_delta_bmg(args.n, args.gamma, args.sigma0, args.eps, grid=grid)
    else:
      point = accountant.mc_profile_point(args.n, args.gamma, args.sigma0, args.eps,
                                          args.trials, seed=args.seed, threads=args.threads)
  if args.replace_one:
    point = point.to_replace_one()
  return _json(point.to_json())


def cmd_calibrate(args) -> str:
  _need(args, "n", "delta")
  if args.target == "eps-bmg":
    _need(args, "gamma", "sigma0")
    eps = accountant.calibrate_eps_bmg(args.n, args.gamma, args.sigma0, args.delta,
                                       eps_max=args.eps_max, points=args.grid_points)
    cert = accountant.fft_delta_bmg(args.n, args.gamma, args.sigma0, eps)
    out = {"eps": eps, "certified": cert.to_json(), "gamma": args.gamma,
           "sigma0": args.sigma0, "n": args.n, "delta_target": args.delta}
  else:
    _need(args, "eps")
    sigma = accountant.calibrate_sigma_gm(args.n, args.eps, args.delta)
    out = {"sigma": sigma, "sigma_gm": sigma / math.sqrt(args.n),
           "delta": accountant.gm_profile_delta(sigma, args.n, args.eps),
           "delta_method": "analytic-gaussian", "eps": args.eps, "n": args.n,
           "rmse": sigma / math.sqrt(args.n), "delta_target": args.delta}
  return _json(out)


def _design_json(design: optimizer.BmgDesign) -> dict:
  out = {"chi": design.chi, "gamma": design.gamma, "sigma0": design.sigma0,
         "n": design.n, "d": design.d, "err1": design.risk.err1,
         "err_n": design.risk.err_n, "rmse": design.risk.rmse}
  if design.eps is not None:
    out.update(eps=design.eps, delta_target=design.delta_target,
               template_delta=design.template_delta, meets_target=design.meets_target,
               certified=None if design.certified is None else design.certified.to_json())
  return out


def cmd_optimize(args) -> str:
  d = args.d or 1
  if args.chi is not None:
    gamma, sigma0, risk = optimizer.design_for_chi(args.n or 1, d, args.chi)
    design = optimizer.BmgDesign(n=args.n or 1, d=d, eps=None, delta_target=None,
                                 chi=args.chi, gamma=gamma, sigma0=sigma0, risk=risk)
  elif args.rmse_target is not None:
    _need(args, "n")
    design = optimizer.design_for_rmse(args.n, d, args.rmse_target)
  else:
    _need(args, "n", "eps", "delta")
    design = optimizer.pipeline_bmg_params_from_privacy(args.n, args.eps, args.delta, d=d)
  return _json(_design_json(design))


def cmd_simulate(args) -> str:
  spec = _spec(args)
  _need(args, "n", "trials")
  if args.inputs == "worst-case":
    x = simulator.worst_case_inputs(spec, args.n)
  else:
    x = simulator.random_sphere_inputs(spec, args.n, seed=args.seed)
  run = simulator.ProtocolRun(spec, args.n, x, args.trials, seed=args.seed,
                             threads=args.threads)
  mse, half = simulator.simulate_mse(run)
  out = {"family": spec.family.value, "n": args.n, "trials": args.trials,
         "inputs": args.inputs, "mse": mse, "half_width": half, "n_times_mse": args.n * mse}
  if spec.family is randomizers.Family.BMG and spec.gamma < 1:
    out["err1_closed_form"] = optimizer.err1_bmg(spec.d, spec.gamma, spec.sigma0)
  return _json(out)


def cmd_experiment(args) -> tuple[str, bool]:
  try:
    with open(args.config) as fh:
      text = fh.read()
  except OSError as exc:
    raise UsageError(f"cannot read config: {exc}") from None
  cfg = experiments.parse_config(text)
  # Command-line globals override the config file.
  if args.seed_given:
    cfg.seed = args.seed
  if args.threads_given:
    cfg.threads = args.threads
  if args.output is None and cfg.output is not None:
    args.output = cfg.output
  rows = experiments.run_experiment(cfg)
  return experiments.rows_to_csv(rows), experiments.has_failures(rows)


def build_parser() -> argparse.ArgumentParser:
  parser = argparse.ArgumentParser(prog="shuffle-dp",
                                   description="Shuffle-model DP accounting and design.")
  _global_flags(parser, suppress=False)
  sub = parser.add_subparsers(dest="command", required=True)

  p = sub.add_parser("chi", help="shuffle indices of a randomizer")
  _global_flags(p, suppress=True)
  _spec_flags(p)
  p.add_argument("--mc-samples", type=int, default=0)

  p = sub.add_parser("delta", help="privacy profile at one eps")
  _global_flags(p, suppress=True)
  p.add_argument("--method", choices=["fft", "mc", "gaussian", "template"], required=True)
  p.add_argument("--n", type=int)
  p.add_argument("--eps", type=float)
  p.add_argument("--gamma", type=float)
  p.add_argument("--sigma0", type=float)
  p.add_argument("--sigma", type=float, help="GM(sigma) parameter for --method gaussian")
  p.add_argument("--chi", type=float, help="index for --method template")
  p.add_argument("--trials", type=int, default=10 ** 6)
  p.add_argument("--grid-points", type=int, default=2 ** 18)
  p.add_argument("--pessimism", choices=accountant.PESSIMISM, default="split")
  p.add_argument("--upper-trunc-mass", type=float, default=1e-20)
  p.add_argument("--replace-one", action="store_true",
                 help="report the (2 eps, 2 delta) replace-one guarantee")

  p = sub.add_parser("calibrate", help="smallest eps (BMG) or sigma (GM) meeting delta")
  _global_flags(p, suppress=True)
  p.add_argument("--target", choices=["eps-bmg", "sigma-gm"], required=True)
  p.add_argument("--n", type=int)
  p.add_argument("--delta", type=float)
  p.add_argument("--gamma", type=float)
  p.add_argument("--sigma0", type=float)
  p.add_argument("--eps", type=float)
  p.add_argument("--eps-max", type=float, default=20.0)
  p.add_argument("--grid-points", type=int, default=2 ** 18)

  p = sub.add_parser("optimize", help="risk-optimal BMG parameters")
  _global_flags(p, suppress=True)
  p.add_argument("--chi", type=float)
  p.add_argument("--rmse-target", type=float)
  p.add_argument("--n", type=int)
  p.add_argument("--eps", type=float)
  p.add_argument("--delta", type=float)
  p.add_argument("--d", type=int)

  p = sub.add_parser("simulate", help="Monte Carlo MSE of the shuffled protocol")
  _global_flags(p, suppress=True)
  _spec_flags(p)
  p.add_argument("--n", type=int)
  p.add_argument("--trials", type=int, default=10 ** 4)
  p.add_argument("--inputs", choices=["worst-case", "random-sphere"], default="worst-case")

  p = sub.add_parser("experiment", help="run a sweep config and write CSV")
  _global_flags(p, suppress=True)
  p.add_argument("config")
  return parser


COMMANDS = {"chi": cmd_chi, "delta": cmd_delta, "calibrate": cmd_calibrate,
            "optimize": cmd_optimize, "simulate": cmd_simulate, "experiment": cmd_experiment}


def main(argv=None) -> int:
  parser = build_parser()
  args = parser.parse_args(argv)
  args.seed_given = args.seed is not None
  args.threads_given = args.threads is not None
  args.seed = 0 if args.seed is None else args.seed
  args.threads = 1 if args.threads is None else args.threads
  failed = False
  try:
    if args.threads < 1:
      raise UsageError("--threads must be >= 1")
    result = COMMANDS[args.command](args)
    if isinstance(result, tuple):
      result, failed = result
  except ArithmeticError as exc:
    print(f"shuffle-dp: numerical failure: {exc}", file=sys.stderr)
    return EXIT_NUMERIC
  except ValueError as exc:
    print(f"shuffle-dp: {exc}", file=sys.stderr)
    return EXIT_USAGE
  if args.output:
    with open(args.output, "w", newline="") as fh:
      fh.write(result)
  else:
    sys.stdout.write(result)
  return EXIT_NUMERIC if failed else EXIT_OK


if __name__ == "__main__":
  sys.exit(main())
