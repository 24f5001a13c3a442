import math

import numpy as np
import pytest

from shuffle_dp import randomizers as R
from shuffle_dp import shuffle_index as S
from shuffle_dp.randomizers import BOTTOM


def e1(d):
  x = np.zeros(d)
  x[0] = 1.0
  return x


def test_chi_lo_bmg_values():
  assert S.chi_lo_bmg(0.5, 1 / math.sqrt(math.log(2))) ** 2 == pytest.approx(2.0, rel=1e-12)
  assert S.chi_lo_bmg(0.95, 4.6) == pytest.approx(88.613184564364986483, rel=1e-12)


@pytest.mark.parametrize("gamma", [0.0, 1.0, -0.1])
def test_chi_lo_bmg_rejects(gamma):
  with pytest.raises(ValueError):
    S.chi_lo_bmg(gamma, 1.0)


def test_chi_lo_bmg_monotone():
  gs = np.linspace(0.01, 0.99, 99)
  vals = [S.chi_lo_bmg(g, 2.0) for g in gs]
  assert all(b > a for a, b in zip(vals, vals[1:]))
  ss = np.linspace(0.2, 20, 100)
  vals = [S.chi_lo_bmg(0.5, s) for s in ss]
  assert all(b > a for a, b in zip(vals, vals[1:]))


def test_chi_lo_rr():
  assert S.chi_lo_rr(0.75) ** 2 == pytest.approx(2.0, rel=1e-12)
  assert S.chi_lo_rr(1.0) == 0.0
  assert S.chi_lo_rr(0.5 + 1 / 200) ** 2 == pytest.approx(9900.0, rel=1e-9)
  with pytest.raises(ValueError):
    S.chi_lo_rr(0.4)


def test_chi_lo_rr_two_outcome_variance():
  # Blanket is the fair coin with mass gamma = 1 - t; l_0 = (R_x - R_bot)/R_BG.
  p = 0.5 + 1 / 200
  t = 2 * p - 1
  ell = np.array([(p - 0.5) / 0.5, ((1 - p) - 0.5) / 0.5])
  var = 0.5 * (ell ** 2).sum()
  assert (1 - t) / var == pytest.approx(S.chi_lo_rr(p) ** 2, rel=1e-12)


def test_chi_lo_privunit():
  assert S.chi_lo_privunit(0.6, 0.0, 3) ** 2 == pytest.approx(20.0, rel=1e-9)
  inf = S.chi_lo_privunit(0.5, 0.0, 3)
  assert isinstance(inf, S.InfiniteIndex)
  assert inf.to_json()["infinite"] is True


def test_privunit_variance_identity():
  # Var_U[f_v(U) - 1] = Delta^2 / (q (1 - q)) for the two-level density f_v.
  p, theta, d = 0.7, 0.2, 5
  spec = R.privunit(d, p, theta)
  from shuffle_dp import numerics
  q = numerics.cap_moments(theta, d).q
  delta = p + q - 1
  u = R.sample(spec, BOTTOM, R.make_rng(0), size=10 ** 6)
  f = R.density_ratio(spec, e1(d), BOTTOM, u)
  var = np.var(f)
  assert var == pytest.approx(delta ** 2 / (q * (1 - q)), rel=0.01)


def test_chi_lo_dispatch():
  assert isinstance(S.chi_lo(R.bmg(2, 1.0, 1.0)), S.InfiniteIndex)
  assert isinstance(S.chi_lo(R.rr(0.5)), S.InfiniteIndex)
  assert S.chi_lo(R.gaussian_local(2, 1.0)) == 0.0


def test_chi_chua():
  assert S.chi_chua_variance(1.0) == pytest.approx(42.538319663741983859, rel=1e-12)
  assert S.chi_chua_gaussian(1.0) == pytest.approx(0.1533238919315386351, rel=1e-12)
  for s in (0.05, 0.3, 1, 10, 1e3):
    assert S.chi_chua_variance(s) > 0


def test_chi_chua_series():
  # chi_chua^2 = s^2 - 9/2 + O(1/s^2)
  for s in (30.0, 100.0, 300.0):
    chi2 = S.chi_chua_gaussian(s) ** 2
    assert (s ** 2 - chi2) == pytest.approx(4.5, abs=20.0 / s ** 2)


def test_sigma0_from_chi_chua_round_trip():
  for chi in (0.01, 0.5, 2.5, 40.0):
    assert S.chi_chua_gaussian(S.sigma0_from_chi_chua(chi)) == pytest.approx(chi, rel=1e-12)


def test_mc_both_bottom():
  assert S.mc_ell0_variance(R.bmg(2, 0.5, 1.0), BOTTOM, BOTTOM, "blanket", 100) == (0.0, 0.0)


def test_mc_rejects_non_adjacent():
  with pytest.raises(ValueError):
    S.mc_ell0_variance(R.bmg(2, 0.5, 1.0), e1(2), e1(2), "blanket", 100)


@pytest.mark.parametrize("spec,x1", [
    (R.bmg(1, 0.95, 4.6), e1(1)),
    (R.rr(0.75), 1.0),
    (R.privunit(3, 0.6, 0.0), e1(3)),
    (R.bmg(4, 0.5, 1.0), e1(4)),
], ids=["bmg", "rr", "privunit", "bmg-d4"])
def test_mc_matches_closed_form(spec, x1):
  var, hw = S.mc_ell0_variance(spec, x1, BOTTOM, "blanket", 10 ** 6, seed=1)
  want = spec.blanket_mass / S.chi_lo(spec) ** 2
  assert abs(var - want) <= 3 * hw


def test_mc_gaussian_worst_triple():
  # x1 = e, x1' = R_0 (BOTTOM is N(0, s^2 I) for the plain Gaussian), reference R_{-e}.
  spec = R.gaussian_local(1, 1.0)
  var, hw = S.mc_ell0_variance(spec, e1(1), BOTTOM, -e1(1), 2 * 10 ** 6, seed=3)
  assert abs(var - 42.538319663741983859) <= 3 * hw


def test_mc_thread_invariant():
  spec = R.bmg(2, 0.5, 1.0)
  a = S.mc_ell0_variance(spec, e1(2), BOTTOM, "blanket", 50_000, seed=5, chunk=7_000, threads=1)
  b = S.mc_ell0_variance(spec, e1(2), BOTTOM, "blanket", 50_000, seed=5, chunk=7_000, threads=4)
  assert a == b


def test_report_json():
  rep = S.shuffle_index_report(R.gaussian_local(1, 1.0))
  js = rep.to_json()
  assert js["chi_lo"] == 0.0 and js["chi_chua"] == pytest.approx(0.15332389193153864)
  rep = S.shuffle_index_report(R.bmg(1, 0.95, 4.6), mc_samples=10 ** 5, seed=0)
  est, hw = rep.mc_variance
  assert abs(0.95 / est - S.chi_lo_bmg(0.95, 4.6) ** 2) <= 3 * hw * 0.95 / est ** 2


def test_template_values():
  assert S.template_delta(10 ** 4, 0.1, 1.0) == pytest.approx(7.6945986267064193463e-27, rel=1e-12)
  assert S.template_delta(10 ** 4, 0.1, 2.0) < S.template_delta(10 ** 4, 0.1, 1.0)
  assert S.template_delta(100, 0.1, 1e-6) > 1e10


def test_template_decreasing_in_chi():
  for n, eps in [(100, 0.01), (10 ** 4, 0.05), (10 ** 6, 0.003)]:
    chis = np.geomspace(1e-3, 50, 400)
    vals = [S.log_template_delta(n, eps, c) for c in chis]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_template_decreasing_in_eps_in_regime():
  n, chi = 10 ** 4, 2.0
  eps0 = math.sqrt(3 / (chi ** 2 * n))
  eps = np.linspace(eps0, 20 * eps0, 300)
  vals = [S.log_template_delta(n, e, chi) for e in eps]
  assert all(b < a for a, b in zip(vals, vals[1:]))


def test_invert_round_trip():
  d = S.template_delta(10 ** 4, 0.05, 5.0)
  assert S.invert_template_for_chi(10 ** 4, 0.05, d) == pytest.approx(5.0, rel=1e-9)


def test_invert_residual():
  chi = S.invert_template_for_chi(10 ** 4, 0.03, 1e-5)
  assert S.template_delta(10 ** 4, 0.03, chi) == pytest.approx(1e-5, rel=1e-10)


def test_invert_unbracketable():
  with pytest.raises(S.BracketError, match="attainable range"):
    S.invert_template_for_chi(10 ** 4, 0.05, 1e6)
