import math

import numpy as np
import pytest

from shuffle_dp import optimizer as O
from shuffle_dp import shuffle_index as S


def test_err1_bmg_values():
  assert O.err1_bmg(3, 0.0, 2.0) == 12.0
  assert O.err1_bmg(3, 0.5, 2.0) == pytest.approx(49.0, rel=1e-14)
  assert O.err1_bmg(1, 0.95, 4.6) == pytest.approx(8483.0, rel=1e-12)
  with pytest.raises(ValueError):
    O.err1_bmg(1, 1.0, 1.0)


def test_rmse_at_figure_parameters():
  # (0.95, 4.6) at n = 1000 gives per-coordinate RMSE sqrt(8.483), not 3.16.
  r = O.RiskBreakdown.from_err1(O.err1_bmg(1, 0.95, 4.6), 1000, 1)
  assert r.rmse == pytest.approx(2.9125590122776881, rel=1e-12)
  assert r.err_n * r.n == r.err1


def test_substitution_identity():
  rng = np.random.default_rng(0)
  for _ in range(200):
    gamma = rng.uniform(0.01, 0.99)
    chi = math.exp(rng.uniform(math.log(0.1), math.log(1e4)))
    d = int(rng.integers(1, 10))
    s0 = O.sigma0_from_chi(gamma, chi)
    assert O.err1_bmg(d, gamma, s0) == pytest.approx(O.err1_bmg_given_chi(d, gamma, chi), rel=1e-12)
    assert S.chi_lo_bmg(gamma, s0) == pytest.approx(chi, rel=1e-10)


def test_objective_at_asymptotic_rule():
  chi = 100.0
  gamma = 1 - chi ** (-2 / 3)
  val = O.err1_bmg_given_chi(1, gamma, chi)
  assert val == pytest.approx(1e4 * (1 + 1.5 * chi ** (-2 / 3)), rel=0.05)


def test_optimize_gamma_against_grid():
  chi = 1e3
  gs = np.linspace(0.95, 0.999, 4901)  # resolution 1e-5
  vals = np.array([O.err1_bmg_given_chi(1, g, chi) for g in gs])
  g_star, e_star = O.optimize_gamma(1, chi)
  assert abs(g_star - gs[vals.argmin()]) <= 2e-5
  assert e_star <= vals.min() * (1 + 1e-12)
  assert (e_star / chi ** 2 - 1) == pytest.approx(1.5 * chi ** (-2 / 3), rel=0.25)


def test_objective_unimodal():
  chi = 50.0
  gs = np.linspace(1e-3, 1 - 1e-3, 1000)
  vals = np.array([O.err1_bmg_given_chi(2, g, chi) for g in gs])
  i = vals.argmin()
  assert np.all(np.diff(vals[:i + 1]) < 0) and np.all(np.diff(vals[i:]) > 0)
  g_star, _ = O.optimize_gamma(2, chi)
  assert gs[max(i - 1, 0)] <= g_star <= gs[min(i + 1, 999)]


@pytest.mark.parametrize("chi", [0.05, 0.5, 1.0, 3.0, 10.0, 1e2, 1e3, 1e4, 1e5])
@pytest.mark.parametrize("d", [1, 4])
def test_lower_bound_respected(chi, d):
  _, err = O.optimize_gamma(d, chi)
  assert err >= d * chi * chi * (1 - 1e-9)


def test_expansion_convergence():
  gaps = [abs(O.normalized_excess(1, c) - 1.5) for c in (1e2, 1e3, 1e4)]
  assert gaps[0] > gaps[1] > gaps[2]


def test_chua_check():
  for s0, tol in ((10.0, 0.1), (100.0, 0.01)):
    _, _, term = O.gaussian_chi_chua_risk_check(s0)
    assert term == pytest.approx(4.5, rel=tol)
  assert O.gaussian_chi_chua_risk_check(10.0, d=1)[2] == O.gaussian_chi_chua_risk_check(10.0, d=7)[2]


def test_rr():
  for chi in (0.5, 10.0, 1e3):
    p = O.rr_p_from_chi(chi)
    assert S.chi_lo_rr(p) == pytest.approx(chi, rel=1e-10)
  assert O.err1_rr(0.75) == pytest.approx(3.0)
  with pytest.raises(ValueError):
    O.err1_rr(0.5)


def test_privunit_risk():
  # d = 3, theta = 0: m = 0.25 at p = 0.75
  assert O.err1_privunit(0.75, 0.0, 3) == pytest.approx(15.0, rel=1e-10)
  assert O.privunit_constant(0.0, 3) == pytest.approx(0.5 / (0.5 * 3 * 0.25), rel=1e-10)


def test_pipeline_consistency():
  d = O.pipeline_bmg_params_from_privacy(10 ** 4, 0.03, 1e-5)
  assert S.chi_lo_bmg(d.gamma, d.sigma0) >= d.chi - 1e-9
  assert d.template_delta == pytest.approx(1e-5, rel=1e-9)
  assert d.certified.method == "fft-certified"
  assert d.meets_target == (d.certified.delta <= 1e-5)


def test_pipeline_certified_within_factor_three():
  n = 10 ** 4
  eps = math.sqrt(math.log(n) / n)
  d = O.pipeline_bmg_params_from_privacy(n, eps, 1e-5)
  assert 1 / 3 <= d.certified.delta / d.template_delta <= 3


def test_pipeline_rmse_non_increasing_in_eps():
  eps = np.geomspace(0.01, 1, 8)
  rmse = [O.pipeline_bmg_params_from_privacy(10 ** 4, e, 1e-5, certify=False).risk.rmse
          for e in eps]
  assert all(b <= a for a, b in zip(rmse, rmse[1:]))


def test_pipeline_propagates_inversion_failure():
  with pytest.raises(S.BracketError):
    O.pipeline_bmg_params_from_privacy(100, 0.01, 1e6, certify=False)


def test_design_for_rmse():
  d = O.design_for_rmse(1000, 1, 3.16)
  assert d.risk.rmse == pytest.approx(3.16, rel=1e-9)
  assert S.chi_lo_bmg(d.gamma, d.sigma0) == pytest.approx(d.chi, rel=1e-9)
