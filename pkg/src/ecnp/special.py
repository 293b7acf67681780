"""Log-gamma and digamma for positive real arrays.

``lgamma`` uses the Lanczos approximation with g=7 and nine coefficients,
with the reflection formula below 0.5. ``digamma`` shifts its argument up
to at least 6 with the recurrence psi(x) = psi(x + 1) - 1/x and then
applies the asymptotic series.
"""
import numpy as np

_G = 7.0
_LANCZOS = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

# Bernoulli-number terms B_2k / (2k) for the digamma asymptotic series.
_DIGAMMA_SERIES = np.array([
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
])


def _lgamma_lanczos(x):
    # valid for x >= 0.5
    z = x - 1.0
    acc = np.full_like(z, _LANCZOS[0])
    for k in range(1, 9):
        acc = acc + _LANCZOS[k] / (z + k)
    t = z + _G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(acc)


def lgamma(x):
    """Natural log of the gamma function for x > 0."""
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)
    big = x >= 0.5
    out[big] = _lgamma_lanczos(x[big])
    small = ~big
    if np.any(small):
        xs = x[small]
        # Gamma(x) Gamma(1 - x) = pi / sin(pi x); sin(pi x) > 0 on (0, 0.5)
        out[small] = np.log(np.pi / np.sin(np.pi * xs)) - _lgamma_lanczos(1.0 - xs)
    return out[0] if scalar else out


def digamma(x):
    """Derivative of lgamma for x > 0."""
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 0
    x = np.array(np.atleast_1d(x), dtype=np.float64)
    shift = np.zeros_like(x)
    while True:
        low = x < 6.0
        if not np.any(low):
            break
        shift[low] -= 1.0 / x[low]
        x[low] += 1.0
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    for c in _DIGAMMA_SERIES[::-1]:
        series = (series + c) * inv2
    out = np.log(x) - 0.5 / x - series + shift
    return out[0] if scalar else out
