from fractions import Fraction
from numbers import Rational


def as_fraction(x) -> Fraction:
    """Exact rational for ``x``; floats are read as their shortest decimal repr.

    ``as_fraction(2.1) == Fraction(21, 10)``, so floor-style arithmetic on
    user-facing decimals (durations, ratios) behaves as written rather than
    tripping over binary rounding.
    """
    if isinstance(x, (Fraction, Rational)):
        return Fraction(x)
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)
