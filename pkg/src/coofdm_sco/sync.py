"""Training-symbol sampling clock offset estimation.

A relative clock offset ``gamma`` rotates subcarrier ``k`` of symbol ``l`` by
approximately ``s_l * k`` with ``s_l = 2*pi*l*N_s*gamma / N``. The estimator
measures that slope on the training symbols with a least-squares line fit
and inverts the relation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ParameterError
from .ofdm import IqStream, OfdmConfig, frame_symbols
from .resampler import MAX_RATIO_DEVIATION, ResampleSpec, resample

DEFAULT_RESIDUAL_THRESHOLD = 0.5


class EstimationMode(str, Enum):
    DIFFERENTIAL = "differential_ts"
    ABSOLUTE = "absolute_ts"


class PolCombining(str, Enum):
    MRC = "mrc"
    MEAN = "mean"


@dataclass(frozen=True)
class PhaseProfile:
    phases: np.ndarray
    k: np.ndarray
    symbol_index: int = 0


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    residual_rms: float


@dataclass(frozen=True)
class ScoEstimate:
    gamma_hat: float
    mode: EstimationMode
    fits: tuple
    ts_symbol_indices: tuple[int, int]
    per_pol: tuple[float, ...] = ()
    flags: tuple[str, ...] = ()

    @property
    def out_of_range(self) -> bool:
        return abs(self.gamma_hat) > MAX_RATIO_DEVIATION

    @property
    def reliable(self) -> bool:
        return not self.flags


def extract_phase(received_ts, known_ts, l: int = 0, k=None) -> PhaseProfile:
    """Per-subcarrier phase of ``received * conj(known)``, principal value."""
    r = np.asarray(received_ts, dtype=complex)
    x = np.asarray(known_ts, dtype=complex)
    if r.shape != x.shape:
        raise ParameterError(f"shape mismatch {r.shape} vs {x.shape}")
    if np.any(x == 0):
        raise ParameterError("known training symbol has zero entries")
    if k is None:
        k = np.arange(r.size) - r.size // 2 + 1
    d = np.angle(r) - np.angle(x)
    # wrap into the principal branch (-pi, pi]; identical inputs give exact zeros
    phases = d - 2 * np.pi * np.ceil((d - np.pi) / (2 * np.pi))
    return PhaseProfile(phases, np.asarray(k), l)


def unwrap(profile: PhaseProfile) -> PhaseProfile:
    """Remove 2*pi jumps between neighbouring subcarriers."""
    p = np.asarray(profile.phases, dtype=float)
    if p.size == 0:
        return profile
    d = np.diff(p)
    # whole turns that bring each step into (-pi, pi]; adding only those keeps
    # an already continuous profile bit-for-bit unchanged
    turns = -np.ceil((d - np.pi) / (2 * np.pi))
    out = p + 2 * np.pi * np.concatenate([[0.0], np.cumsum(turns)])
    return PhaseProfile(out, profile.k, profile.symbol_index)


def ls_fit(profile: PhaseProfile) -> SlopeFit:
    """Ordinary least-squares line ``phase = slope * k + intercept``."""
    k = np.asarray(profile.k, dtype=float)
    phi = np.asarray(profile.phases, dtype=float)
    if k.size < 8:
        raise ParameterError(f"need at least 8 points, got {k.size}")
    kc = k - k.mean()
    sxx = kc @ kc
    if sxx == 0:
        raise ParameterError("degenerate subcarrier set")
    slope = (kc @ (phi - phi.mean())) / sxx
    intercept = phi.mean() - slope * k.mean()
    resid = phi - (slope * k + intercept)
    return SlopeFit(float(slope), float(intercept), float(np.sqrt(np.mean(resid**2))))


def slope_for_gamma(gamma, l, config: OfdmConfig) -> float:
    """Phase slope per subcarrier index at symbol ``l``."""
    return 2 * np.pi * l * config.n_sym * gamma / config.n_fft


def estimate_gamma(fit1: SlopeFit, fit2: SlopeFit | None, l1: int, l2: int | None, config: OfdmConfig,
                   mode=EstimationMode.DIFFERENTIAL) -> ScoEstimate:
    mode = EstimationMode(mode)
    n, ns = config.n_fft, config.n_sym
    if mode is EstimationMode.DIFFERENTIAL:
        if fit2 is None or l2 is None:
            raise ParameterError("differential mode needs two fits")
        if l2 == l1:
            raise ParameterError("differential mode needs distinct symbol indices")
        if l1 < 0:
            raise ParameterError("symbol indices must be non-negative")
        gamma = (fit2.slope - fit1.slope) * n / (2 * np.pi * (l2 - l1) * ns)
        fits = (fit1, fit2)
    else:
        if l1 < 1:
            raise ParameterError("absolute mode needs l1 >= 1")
        gamma = fit1.slope * n / (2 * np.pi * l1 * ns)
        fits = (fit1,)
    flags = ("out_of_range",) if abs(gamma) > MAX_RATIO_DEVIATION else ()
    ts = (l1, l2 if l2 is not None else l1)
    return ScoEstimate(float(gamma), mode, fits, ts, (float(gamma),), flags)


@dataclass
class ScoLoopSettings:
    mode: EstimationMode = EstimationMode.DIFFERENTIAL
    residual_threshold: float = DEFAULT_RESIDUAL_THRESHOLD
    resampler: ResampleSpec = field(default_factory=ResampleSpec)
    enabled: bool = True
    combining: PolCombining = PolCombining.MRC


def coarse_slope(z, k) -> float:
    """Mean phase step between neighbouring subcarriers.

    ``z`` may have leading axes (e.g. polarisations); they are summed, which
    weights each row by its power.
    """
    adj = np.flatnonzero(np.diff(k) == 1)
    return float(np.angle(np.sum(z[..., adj + 1] * np.conj(z[..., adj]))))


def _robust_profile(z, k, l):
    # take out a coarse ramp and the mean phase first so noise cannot
    # produce 2*pi slips; both are added back after unwrapping
    s0 = coarse_slope(z, k)
    z = z * np.exp(-1j * s0 * k)
    c0 = np.angle(z.sum())
    prof = unwrap(extract_phase(z * np.exp(-1j * c0), np.ones_like(z), l, k))
    return PhaseProfile(prof.phases + s0 * k + c0, prof.k, l)


def combine_polarisations(rows, known, k) -> np.ndarray:
    """Maximal-ratio combine ``rows * conj(known)`` over the received polarisations.

    ``rows`` is ``(2, n_sc)`` for one training symbol. Each received
    polarisation holds the same phase profile scaled by a complex gain; the
    gains are estimated after removing a coarse slope.
    """
    z = rows * np.conj(known)
    s0 = coarse_slope(z, k)
    gains = np.sum(z * np.exp(-1j * s0 * k), axis=-1)
    return np.sum(np.conj(gains)[:, None] * z, axis=0)


def estimate_from_frame(samples, config: OfdmConfig, known_base, start: int = 0,
                        mode=EstimationMode.DIFFERENTIAL,
                        residual_threshold=DEFAULT_RESIDUAL_THRESHOLD,
                        combining=PolCombining.MRC) -> ScoEstimate:
    """Estimate ``gamma`` from the training pair of a frame.

    ``samples`` is ``(2, n)`` with the frame starting at ``start``. Every
    received training subcarrier is a polarisation-dependent scalar times
    ``known_base[k]``, which is therefore the phase reference. With MRC the
    two received polarisations are combined per training symbol before the
    fit; with MEAN each polarisation is fitted alone and the two estimates
    are averaged.
    """
    mode = EstimationMode(mode)
    combining = PolCombining(combining)
    l1, l2 = config.ts_indices
    rows = frame_symbols(samples, config, start, [l1, l2])
    k = config.occupied
    used = [0, 1] if mode is EstimationMode.DIFFERENTIAL else [0]
    ls = (l1, l2)

    def fit_pol(pol):
        fits = [ls_fit(_robust_profile(rows[pol, t] * np.conj(known_base), k, ls[t])) for t in used]
        return _gamma_from_fits(fits, ls, config, mode)

    per_pol = tuple(fit_pol(pol) for pol in range(2))
    if combining is PolCombining.MRC:
        fits = tuple(
            ls_fit(_robust_profile(combine_polarisations(rows[:, t], known_base, k), k, ls[t])) for t in used
        )
        gamma = _gamma_from_fits(fits, ls, config, mode)[0]
        all_fits = (fits,)
    else:
        gamma = float(np.mean([g for g, _ in per_pol]))
        all_fits = tuple(f for _, f in per_pol)
    flags = []
    for i, fits in enumerate(all_fits):
        if max(f.residual_rms for f in fits) > residual_threshold:
            flags.append("unreliable_fit" if combining is PolCombining.MRC else f"unreliable_fit_{'xy'[i]}")
    if abs(gamma) > MAX_RATIO_DEVIATION:
        flags.append("out_of_range")
    return ScoEstimate(gamma, mode, all_fits, (l1, l2), tuple(g for g, _ in per_pol), tuple(flags))


def _gamma_from_fits(fits, ls, config, mode):
    if mode is EstimationMode.DIFFERENTIAL:
        est = estimate_gamma(fits[0], fits[1], ls[0], ls[1], config, mode)
    else:
        est = estimate_gamma(fits[0], None, ls[0], None, config, mode)
    return est.gamma_hat, tuple(fits)


def run_sco_loop(raw: IqStream, config: OfdmConfig, rx_context, settings: ScoLoopSettings | None = None):
    """One pass of estimate-then-resample; the estimator is not re-run.

    ``raw`` must already be CD compensated and frequency aligned;
    ``rx_context`` supplies ``timing_offset`` and ``training`` (a
    :class:`TrainingPair`). Returns ``(stream, estimate)``; when the estimate
    is flagged the input stream is returned unchanged.
    """
    settings = settings or ScoLoopSettings()
    start = rx_context.timing_offset
    est = estimate_from_frame(raw.as_array(), config, rx_context.training.base, start,
                              settings.mode, settings.residual_threshold, settings.combining)
    if est.flags:
        return raw, est
    out = resample(raw, est.gamma_hat, settings.resampler, origin=rx_context.sco_origin)
    return out, est
