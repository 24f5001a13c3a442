"""Single-message shuffle differential privacy: randomizers, shuffle indices,
privacy accounting, parameter design and protocol simulation."""

from shuffle_dp.randomizers import BOTTOM, Family, RandomizerSpec, bmg, gaussian_local, privunit, rr

__all__ = ["BOTTOM", "Family", "RandomizerSpec", "bmg", "gaussian_local", "privunit", "rr"]
__version__ = "0.1.0"
