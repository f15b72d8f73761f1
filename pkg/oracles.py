"""
Reference Systems for the Verification Scripts

Small polling systems whose answers are known in closed form. With d = 1
every station matrix is a scalar, (lambda_ahead + gamma mu) / (mu - lambda_n),
so the cycle value of a two-station system is a product of two fractions.

- null_recurrent: cycle values 1/4 and 2 (probability 1/2 each),
  s0 = log2((1 + sqrt 5) / 2) = 0.6942, top exponent (ln(1/4) + ln 2) / 2
- transient: deterministic cycle value 8
- all_moments: deterministic cycle value 1/8
- stable: both stations mu = 3, cycle value 1/4; D = E tau = 4 from 4 customers
- theta(t): deterministic cycle value t for t in {0.5, 2}
- random_d2: three stations, two atoms each (eps0 = 1, M0 = 4); overloaded
- stable_d2: three stations, two atoms each; stable
"""

import math

from regen_polling.models import Discipline, PollingSpec, Regime, RegimeLaw
from regen_polling.services.model_core import validate_spec

NULL_S0 = math.log2((1 + math.sqrt(5)) / 2)
NULL_TOP_EXPONENT = 0.5 * (math.log(0.25) + math.log(2.0))


def scalar_spec(station0: list[tuple[float, float]], mu1: float, lam=(1.0, 1.0)) -> PollingSpec:
    """d = 1 system: station 0 atoms as (weight, mu), station 1 a single mu."""
    law0 = RegimeLaw.of(*((Regime(mu=mu, gamma=(0.0,)), w) for w, mu in station0))
    law1 = RegimeLaw.single(Regime(mu=mu1, gamma=(0.0,)))
    return PollingSpec(d=1, lam=lam, nu=(law0, law1))


def null_recurrent():
    return validate_spec(scalar_spec([(0.5, 3.0), (0.5, 1.25)], 3.0))


def transient():
    return validate_spec(scalar_spec([(1.0, 1.25)], 1.5))


def all_moments():
    return validate_spec(scalar_spec([(1.0, 3.0)], 5.0))


def stable():
    return validate_spec(scalar_spec([(1.0, 3.0)], 3.0))


def theta(value: float):
    if value == 0.5:
        return validate_spec(scalar_spec([(1.0, 3.0)], 2.0))
    if value == 2.0:
        return validate_spec(scalar_spec([(1.0, 1.25)], 3.0))
    raise ValueError(f"no reference system for theta={value}")


def slow_atom(mu: float):
    """The thick null-recurrence family: slow atom mu at station 0."""
    return validate_spec(scalar_spec([(0.5, 3.0), (0.5, mu)], 3.0))


def random_d2(discipline: Discipline = Discipline.EXHAUSTIVE):
    fast = Regime(mu=4.0, gamma=(0.25, 0.25))
    slow = Regime(mu=2.0, gamma=(0.0, 0.0))
    law = RegimeLaw.of((fast, 0.5), (slow, 0.5))
    nu = (law,) if discipline == Discipline.REVOLVER else (law, law, law)
    return validate_spec(PollingSpec(d=2, lam=(1.0, 1.0, 1.0), nu=nu, discipline=discipline))


def stable_d2():
    """Three stations, load 3/4 under the fast atom: every run empties."""
    fast = Regime(mu=4.0, gamma=(0.25, 0.25))
    slow = Regime(mu=3.0, gamma=(0.0, 0.0))
    law = RegimeLaw.of((fast, 0.5), (slow, 0.5))
    return validate_spec(PollingSpec(d=2, lam=(0.5, 0.5, 0.5), nu=(law, law, law)))
