import csv
import io
import json

import pytest

from shuffle_dp import accountant
from shuffle_dp import cli
from shuffle_dp import experiments as E


def run(capsys, *argv):
  code = cli.main(list(argv))
  out = capsys.readouterr()
  return code, out.out, out.err


def test_chi_bmg(capsys):
  code, out, _ = run(capsys, "chi", "--family", "bmg", "--gamma", "0.95", "--sigma0", "4.6")
  assert code == 0
  assert json.loads(out)["chi_lo"] == pytest.approx(88.6131845643649)


def test_chi_rr_zero(capsys):
  code, out, _ = run(capsys, "chi", "--family", "rr", "--p", "1.0")
  assert code == 0 and json.loads(out)["chi_lo"] == 0.0


def test_chi_privunit_infinite(capsys):
  code, out, _ = run(capsys, "chi", "--family", "privunit", "--p", "0.5", "--theta", "0", "--d", "3")
  assert code == 0 and json.loads(out)["chi_lo"]["infinite"] is True


def test_chi_mc(capsys):
  code, out, _ = run(capsys, "--seed", "3", "chi", "--family", "rr", "--p", "0.75",
                     "--mc-samples", "100000")
  js = json.loads(out)
  assert code == 0 and js["mc_variance"]["estimate"] == pytest.approx(0.25, rel=0.02)


@pytest.mark.parametrize("argv", [
    ["chi", "--family", "bmg", "--gamma", "1.5", "--sigma0", "1"],
    ["chi", "--family", "bmg", "--gamma", "0.5"],
    ["chi", "--family", "rr", "--p", "0.2"],
    ["delta", "--method", "fft", "--n", "10", "--eps", "0.1", "--gamma", "0.5", "--sigma0", "1",
     "--grid-points", "1000"],
    ["--threads", "0", "chi", "--family", "rr", "--p", "0.7"],
])
def test_validation_exit_code(capsys, argv):
  code, _, err = run(capsys, *argv)
  assert code == 2 and err


def test_unknown_family_is_usage_error():
  with pytest.raises(SystemExit) as exc:
    cli.main(["chi", "--family", "nope"])
  assert exc.value.code == 2


def test_delta_gaussian(capsys):
  code, out, _ = run(capsys, "delta", "--method", "gaussian", "--sigma", "1", "--n", "1000",
                     "--eps", "0.1")
  js = json.loads(out)
  assert code == 0 and js["method"] == "analytic-gaussian"
  assert js["delta"] == accountant.gm_profile_delta(1.0, 1000, 0.1)


def test_delta_fft_trivial(capsys):
  code, out, _ = run(capsys, "delta", "--method", "fft", "--n", "1", "--gamma", "1", "--sigma0", "1",
                     "--eps", "0.1")
  assert code == 0 and json.loads(out)["delta"] == 0.0


def test_delta_fft_vs_mc(capsys):
  args = ["--n", "100", "--gamma", "0.5", "--sigma0", "2", "--eps", "0.05"]
  _, fft, _ = run(capsys, "delta", "--method", "fft", *args)
  _, mc, _ = run(capsys, "--seed", "1", "delta", "--method", "mc", "--trials", "200000", *args)
  fft, mc = json.loads(fft), json.loads(mc)
  assert abs(fft["delta"] - mc["delta"]) <= 0.05 * fft["delta"] + 3 * mc["half_width"]


def test_delta_replace_one(capsys):
  _, out, _ = run(capsys, "delta", "--method", "template", "--n", "1000", "--eps", "0.05",
                  "--chi", "2", "--replace-one")
  js = json.loads(out)
  assert js["eps"] == 0.1 and js["adjacency"] == "replace-one" and js["method"] == "template-f"


def test_numerical_failure_exit_code(capsys):
  code, _, err = run(capsys, "calibrate", "--target", "eps-bmg", "--n", "10", "--gamma", "0.01",
                     "--sigma0", "0.05", "--delta", "1e-12", "--eps-max", "0.5")
  assert code == 3 and "numerical failure" in err
  code, _, _ = run(capsys, "optimize", "--n", "100", "--eps", "0.01", "--delta", "1e6")
  assert code == 3


def test_calibrate_and_optimize(capsys):
  code, out, _ = run(capsys, "calibrate", "--target", "sigma-gm", "--n", "1000", "--eps", "0.01",
                     "--delta", "1e-5")
  assert code == 0 and json.loads(out)["delta"] <= 1e-5
  code, out, _ = run(capsys, "optimize", "--chi", "100")
  js = json.loads(out)
  assert code == 0 and js["err1"] >= 1e4
  code, out, _ = run(capsys, "optimize", "--n", "1000", "--rmse-target", "3.16")
  assert json.loads(out)["rmse"] == pytest.approx(3.16)


def test_simulate(capsys):
  code, out, _ = run(capsys, "simulate", "--family", "bmg", "--d", "3", "--gamma", "0.5",
                     "--sigma0", "2", "--n", "100", "--trials", "20000")
  js = json.loads(out)
  assert code == 0 and js["err1_closed_form"] == pytest.approx(49.0)
  assert abs(js["mse"] - 0.49) <= 3 * js["half_width"]


def test_json_deterministic(capsys):
  argv = ["--seed", "5", "chi", "--family", "bmg", "--gamma", "0.5", "--sigma0", "1",
          "--mc-samples", "20000"]
  _, a, _ = run(capsys, *argv)
  _, b, _ = run(capsys, *argv)
  assert a == b


# ---------------------------------------------------------------------------
# Experiments


def write(tmp_path, text, name="c.cfg"):
  path = tmp_path / name
  path.write_text(text)
  return str(path)


def test_config_parsing():
  cfg = E.parse_config("experiment = custom-sweep  # sweep\nn = 100\ngamma = 0.5\n"
                       "sigma0 = 2\neps = 0.1, 0.2\n")
  assert cfg.params["eps"] == [0.1, 0.2] and cfg.params["n"] == 100


@pytest.mark.parametrize("text", [
    "experiment = custom-sweep\nn = 100\ngamma = 0.5\nsigma0 = 2\neps = 0.1\ncolour = red\n",
    "experiment = custom-sweep\nn = 100\ngamma = 0.5\nsigma0 = 2\n",
    "experiment = custom-sweep\nn = 100\ngamma = 0.5\nsigma0 = 2\neps =\n",
    "experiment = profile-vs-eps\nn = 100\ngamma = 0.5\n",
    "experiment = profile-vs-eps\nn = 100\ngamma = 0.5\nsigma0 = 1\nrmse_target = 1\n",
    "experiment = nope\n",
    "experiment = n-scaling\nn_values = 100\nn_values = 200\n",
    "experiment = utility-vs-eps\nn = ten\ndelta = 1e-5\n",
    "experiment = utility-vs-eps\nn = 100\ndelta = 2\n",
])
def test_config_rejections(text):
  with pytest.raises(E.ConfigError):
    E.parse_config(text)


def test_empty_sweep_exit_2(tmp_path, capsys):
  path = write(tmp_path, "experiment = n-scaling\nn_values = \n")
  code, _, err = run(capsys, "experiment", path)
  assert code == 2 and "n_values" in err


def test_csv_schema_and_determinism(tmp_path, capsys):
  path = write(tmp_path, "experiment = custom-sweep\nn = 100\ngamma = 0.5\nsigma0 = 2\n"
                         "eps = 0.05, 0.1, 0.2\n")
  out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
  assert cli.main(["--output", str(out1), "experiment", path]) == 0
  assert cli.main(["--threads", "3", "experiment", path, "--output", str(out2)]) == 0
  a, b = out1.read_bytes(), out2.read_bytes()
  assert a == b
  lines = a.decode().splitlines()
  assert lines[0] == ",".join(E.CSV_FIELDS)
  rows = list(csv.DictReader(io.StringIO(a.decode())))
  assert all(r["delta_method"] == "fft-certified" for r in rows)
  assert rows[0]["sigma_gm"] == ""
  assert rows[0]["eps"] == "0.050000000000000003"  # 17 significant digits


def test_every_delta_tagged(tmp_path):
  cfg = E.parse_config("experiment = profile-vs-eps\nn = 1000\ngamma = 0.95\nsigma0 = 4.6\n"
                       "eps = 0.001, 0.01\n")
  for row in E.run_experiment(cfg):
    assert row["delta"] is not None and row["delta_method"] in accountant.METHODS


def test_profile_vs_eps_replace_one():
  base = "experiment = profile-vs-eps\nn = 1000\ngamma = 0.95\nsigma0 = 4.6\neps = 0.001\n"
  zo = E.run_experiment(E.parse_config(base))
  ro = E.run_experiment(E.parse_config(base + "adjacency = replace-one\n"))
  for a, b in zip(zo, ro):
    assert b["eps"] == 2 * a["eps"] and b["delta"] == min(1.0, 2 * a["delta"])


def test_utility_rows_flag_conjecture():
  cfg = E.parse_config("experiment = utility-vs-eps\nn = 10000\ndelta = 1e-5\neps = 0.05\n")
  rows = E.run_experiment(cfg)
  assert [r["mechanism"] for r in rows] == ["BMG", "GM", "GaussianLocal-conjecture"]
  assert rows[2]["delta_method"] == "template-f"


def test_failure_row_written(tmp_path, capsys, monkeypatch):
  def boom(*a, **k):
    raise accountant.CalibrationError("no eps in range")
  monkeypatch.setattr(accountant, "calibrate_eps_bmg", boom)
  path = write(tmp_path, "experiment = n-scaling\nn_values = 100, 1000\n")
  code, out, _ = run(capsys, "experiment", path)
  assert code == 3
  rows = list(csv.DictReader(io.StringIO(out)))
  assert len(rows) == 2 and all(r["delta_method"].startswith("failed") for r in rows)
