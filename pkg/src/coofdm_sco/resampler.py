"""Time-domain interpolation for sampling clock offset compensation.

A Farrow interpolator evaluates ``y = sum_p mu**p * (c_p * x)[n]``: a bank of
fixed FIR branches combined by Horner's rule in the fractional delay ``mu``.
Two branch sets are provided: the 4-tap cubic Lagrange kernel, and a longer
kernel whose coefficients are polynomial fits (in ``mu``) of a Kaiser-windowed
sinc.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .channel import SINC_BETA, SINC_TAPS, kaiser_sinc_weights, sinc_interpolate
from .errors import ParameterError
from .ofdm import IqStream

MAX_RATIO_DEVIATION = 1e-3


class Structure(str, Enum):
    FARROW_CUBIC = "farrow_cubic"
    FARROW_SINC = "farrow_sinc"
    WINDOWED_SINC = "windowed_sinc"


@dataclass(frozen=True)
class ResampleSpec:
    """Interpolator selection.

    ``taps`` and ``poly_order`` apply to the sinc-based structures;
    ``beta`` is the Kaiser window shape.
    """

    structure: Structure = Structure.FARROW_SINC
    taps: int = 24
    poly_order: int = 5
    beta: float = 6.0

    def __post_init__(self):
        object.__setattr__(self, "structure", Structure(self.structure))
        if self.taps < 2 or self.taps % 2:
            raise ParameterError(f"taps must be even and >= 2, got {self.taps}")


@dataclass(frozen=True)
class FarrowBank:
    """Branch coefficients ``coeffs[p, i]`` for tap offsets ``offsets[i]``."""

    offsets: np.ndarray
    coeffs: np.ndarray

    def weights(self, mu) -> np.ndarray:
        """Effective FIR weights for each fractional delay, shape ``(m, taps)``."""
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        v = np.vander(mu, self.coeffs.shape[0], increasing=True)
        return v @ self.coeffs


@lru_cache(maxsize=None)
def lagrange_bank(taps: int = 4) -> FarrowBank:
    """Lagrange interpolation through the ``taps`` nearest samples.

    Reproduces polynomials of degree ``taps - 1`` exactly.
    """
    if taps < 2 or taps % 2:
        raise ParameterError(f"taps must be even and >= 2, got {taps}")
    nodes = np.arange(-(taps // 2) + 1, taps // 2 + 1).astype(float)
    coeffs = np.empty((taps, taps))
    for i, d in enumerate(nodes):
        others = np.delete(nodes, i)
        # np.poly gives highest power first
        coeffs[:, i] = (np.poly(others) / np.prod(d - others))[::-1]
    return FarrowBank(nodes.astype(int), coeffs)


def cubic_lagrange_bank() -> FarrowBank:
    return lagrange_bank(4)


@lru_cache(maxsize=None)
def sinc_farrow_bank(taps: int = 24, poly_order: int = 5, beta: float = 6.0) -> FarrowBank:
    mu = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, 16 * (poly_order + 1)))
    offsets, w = kaiser_sinc_weights(mu, taps, beta)
    # pin the constant branch to the mu = 0 kernel (a unit impulse) so that a
    # zero offset passes samples through untouched; fit the rest
    c0 = (offsets == 0).astype(float)[None, :]
    v = np.vander(mu, poly_order + 1, increasing=True)[:, 1:]
    # rows of w and c0 both sum to one, so every fitted kernel keeps unit DC gain
    rest, *_ = np.linalg.lstsq(v, w - c0, rcond=None)
    return FarrowBank(offsets, np.vstack([c0, rest]))


def _bank(spec: ResampleSpec) -> FarrowBank:
    if spec.structure is Structure.FARROW_CUBIC:
        return cubic_lagrange_bank()
    return sinc_farrow_bank(spec.taps, spec.poly_order, spec.beta)


def farrow_interpolate(samples, positions, bank: FarrowBank) -> np.ndarray:
    """Evaluate ``samples`` (``(..., n)``) at ``positions`` with a Farrow bank.

    Out-of-range neighbours are taken as zero.
    """
    samples = np.asarray(samples, dtype=complex)
    positions = np.asarray(positions, dtype=np.float64)
    base = np.floor(positions)
    mu = positions - base
    base = base.astype(np.int64)
    lo, hi = -bank.offsets.min(), bank.offsets.max()
    pad = samples.shape[:-1]
    x = np.concatenate([np.zeros(pad + (lo + 1,)), samples, np.zeros(pad + (hi + 1,))], axis=-1)
    n = samples.shape[-1]
    sel = np.clip(base, -1, n) + lo + 1
    out = np.zeros(pad + positions.shape, dtype=complex)
    for p in range(bank.coeffs.shape[0] - 1, -1, -1):
        branch = np.zeros(pad + positions.shape, dtype=complex)
        for c, off in zip(bank.coeffs[p], bank.offsets):
            if c:
                branch += c * x[..., sel + off]
        out = out * mu + branch
    return out


def _check_gamma(gamma_hat):
    if not abs(gamma_hat) <= MAX_RATIO_DEVIATION:
        raise ParameterError(f"|gamma_hat| must be <= {MAX_RATIO_DEVIATION}, got {gamma_hat}")


def resample(stream: IqStream, gamma_hat: float, spec: ResampleSpec | None = None, origin: float = 0.0) -> IqStream:
    """Undo a sampling period of ``(1 + gamma_hat)`` transmitter periods.

    Output sample ``m`` is the input interpolated at position
    ``origin + (m - origin) / (1 + gamma_hat)``, so indices stay aligned with
    the input near ``origin``. Output length is the number of such positions
    inside the input; the outermost ``taps/2`` samples at either end see
    zero-extended input.
    """
    _check_gamma(gamma_hat)
    spec = spec or ResampleSpec()
    n_in = len(stream)
    scale = np.longdouble(1) + np.longdouble(gamma_hat)
    n_out = int(np.floor((n_in - 1 - origin) * scale + origin)) + 1
    m = np.arange(n_out, dtype=np.longdouble)
    pos = (origin + (m - origin) / scale).astype(np.float64)
    data = stream.as_array()
    if spec.structure is Structure.WINDOWED_SINC:
        out = sinc_interpolate(data, pos, taps=spec.taps, beta=spec.beta)
    else:
        out = farrow_interpolate(data, pos, _bank(spec))
    return IqStream(out[0], out[1], stream.sample_rate * (1.0 + gamma_hat))


def fractional_delay(stream: IqStream, mu: float, taps: int = 24) -> IqStream:
    """Lagrange value of the input at ``n + mu`` for every ``n``.

    ``taps = 4`` is the classic cubic Farrow; the 24-tap default keeps the
    phase error of tones below 0.3 fs under 1e-3 rad while still reproducing
    polynomials exactly.
    """
    if not 0 <= mu < 1:
        raise ParameterError(f"mu must be in [0, 1), got {mu}")
    pos = np.arange(len(stream)) + float(mu)
    out = farrow_interpolate(stream.as_array(), pos, lagrange_bank(taps))
    return IqStream(out[0], out[1], stream.sample_rate)


__all__ = [
    "FarrowBank",
    "ResampleSpec",
    "Structure",
    "cubic_lagrange_bank",
    "lagrange_bank",
    "farrow_interpolate",
    "fractional_delay",
    "resample",
    "sinc_farrow_bank",
    "SINC_TAPS",
    "SINC_BETA",
]
