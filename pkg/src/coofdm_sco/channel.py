"""Baseband-equivalent link impairments.

Every stage maps an :class:`IqStream` to a new one and leaves its input
untouched. Random stages draw from a generator seeded per call.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import i0
from scipy.stats import unitary_group

from .errors import ParameterError
from .ofdm import IqStream

SPEED_OF_LIGHT = 299_792_458.0
OSNR_REF_BANDWIDTH = 12.5e9

SINC_TAPS = 64
SINC_BETA = 10.0


@dataclass(frozen=True)
class ChannelParams:
    """Impairment settings; a neutral value bypasses its stage.

    ``linewidth_hz`` is the combined transmitter plus local-oscillator
    linewidth. ``osnr_db = inf``, ``pol_rotation_seed = None`` and
    ``adc_bits = None`` disable their stages. ``sco_origin`` is the input
    sample index at which transmitter and receiver clocks coincide.
    """

    gamma_ppm: float = 0.0
    cfo_hz: float = 0.0
    linewidth_hz: float = 0.0
    fiber_km: float = 0.0
    dispersion_ps_nm_km: float = 16.0
    wavelength_nm: float = 1550.0
    osnr_db: float = math.inf
    adc_bits: int | None = None
    clip_sigma: float = 4.0
    pol_rotation_seed: int | None = None
    noise_seed: int = 0
    sco_origin: float = 0.0

    def __post_init__(self):
        if not abs(self.gamma_ppm) <= 1000:
            raise ParameterError(f"|gamma_ppm| must be <= 1000, got {self.gamma_ppm}")
        if math.isnan(self.osnr_db) or self.osnr_db == -math.inf:
            raise ParameterError("osnr_db must be finite or +inf")
        if self.adc_bits is not None and not 1 <= self.adc_bits <= 16:
            raise ParameterError(f"adc_bits must be in [1, 16], got {self.adc_bits}")

    @property
    def gamma(self) -> float:
        return self.gamma_ppm * 1e-6


def _sub_seeds(seed):
    ss = np.random.SeedSequence(seed)
    return ss.spawn(3)


def kaiser_sinc_weights(frac, taps=SINC_TAPS, beta=SINC_BETA):
    """Windowed-sinc interpolation weights.

    For fractional positions ``frac`` (shape ``(m,)``) returns tap offsets
    ``(taps,)`` relative to ``floor(position)`` and weights ``(m, taps)``
    normalised to unit DC gain.
    """
    half = taps // 2
    offsets = np.arange(-half + 1, half + 1)
    x = offsets[None, :] - np.asarray(frac, dtype=float)[:, None]
    arg = np.clip(1.0 - (x / half) ** 2, 0.0, None)
    w = np.sinc(x) * i0(beta * np.sqrt(arg)) / i0(beta)
    w /= w.sum(axis=1, keepdims=True)
    return offsets, w


def sinc_interpolate(samples, positions, taps=SINC_TAPS, beta=SINC_BETA, chunk=1 << 15):
    """Evaluate ``samples`` (shape ``(..., n)``) at fractional ``positions``.

    Samples outside the buffer are treated as zero.
    """
    samples = np.asarray(samples, dtype=complex)
    positions = np.asarray(positions, dtype=np.float64)
    n = samples.shape[-1]
    half = taps // 2
    padded = np.concatenate(
        [np.zeros(samples.shape[:-1] + (half,)), samples, np.zeros(samples.shape[:-1] + (half + 1,))],
        axis=-1,
    )
    out = np.empty(samples.shape[:-1] + positions.shape, dtype=complex)
    for s in range(0, positions.size, chunk):
        pos = positions[s : s + chunk]
        base = np.floor(pos)
        offsets, w = kaiser_sinc_weights(pos - base, taps, beta)
        idx = base.astype(np.int64)[:, None] + offsets[None, :] + half
        idx = np.clip(idx, 0, n + 2 * half)
        out[..., s : s + chunk] = np.einsum("...mt,mt->...m", padded[..., idx], w)
    return out


def apply_sco_oracle(stream: IqStream, gamma: float, origin: float = 0.0) -> IqStream:
    """Resample as an ADC whose period is ``(1 + gamma)`` transmitter periods.

    Output sample ``m`` is the band-limited value of the input at position
    ``origin + (m - origin) * (1 + gamma)``. The output stops at the last
    position inside the input.
    """
    if abs(gamma) > 1e-3:
        raise ParameterError(f"|gamma| must be <= 1e-3, got {gamma}")
    if gamma == 0:
        return IqStream(stream.x_pol.copy(), stream.y_pol.copy(), stream.sample_rate)
    n_in = len(stream)
    scale = np.longdouble(1) + np.longdouble(gamma)
    n_out = int(np.floor((n_in - 1 - origin) / scale + origin)) + 1
    m = np.arange(n_out, dtype=np.longdouble)
    pos = (origin + (m - origin) * scale).astype(np.float64)
    out = sinc_interpolate(stream.as_array(), pos)
    return IqStream(out[0], out[1], stream.sample_rate / (1.0 + gamma))


def cd_phase(n, sample_rate, fiber_km, dispersion_ps_nm_km, wavelength_nm):
    """Quadratic spectral phase of ``fiber_km`` of fibre on an ``n``-point FFT grid."""
    f = np.fft.fftfreq(n, d=1.0 / sample_rate)
    lam = wavelength_nm * 1e-9
    d_si = dispersion_ps_nm_km * 1e-6
    return -np.pi * lam**2 * d_si * (fiber_km * 1e3) * f**2 / SPEED_OF_LIGHT


def _all_pass(stream, phase):
    h = np.exp(1j * phase)
    out = np.fft.ifft(np.fft.fft(stream.as_array(), axis=-1) * h, axis=-1)
    return IqStream(out[0], out[1], stream.sample_rate)


def apply_cd(stream: IqStream, fiber_km, dispersion_ps_nm_km=16.0, wavelength_nm=1550.0) -> IqStream:
    """Chromatic dispersion as a whole-stream all-pass filter."""
    if fiber_km == 0:
        return IqStream(stream.x_pol.copy(), stream.y_pol.copy(), stream.sample_rate)
    phase = cd_phase(len(stream), stream.sample_rate, fiber_km, dispersion_ps_nm_km, wavelength_nm)
    return _all_pass(stream, phase)


def apply_cfo_phase_noise(stream: IqStream, cfo_hz, linewidth_hz, seed=0) -> IqStream:
    """Shared carrier offset and Wiener laser phase noise on both polarisations."""
    fs = stream.sample_rate
    if abs(cfo_hz) >= fs / 2:
        raise ParameterError(f"|cfo| {cfo_hz} Hz must be below fs/2 = {fs / 2} Hz")
    n = len(stream)
    phase = 2 * np.pi * cfo_hz * np.arange(n) / fs
    if linewidth_hz > 0:
        rng = np.random.default_rng(seed)
        steps = rng.normal(0.0, np.sqrt(2 * np.pi * linewidth_hz / fs), n - 1)
        phase = phase + np.concatenate([[0.0], np.cumsum(steps)])
    rot = np.exp(1j * phase)
    return IqStream(stream.x_pol * rot, stream.y_pol * rot, fs)


def osnr_to_snr_db(osnr_db, sample_rate):
    """Per-polarisation SNR in the simulation bandwidth for a dual-pol OSNR."""
    return osnr_db + 10 * np.log10(2 * OSNR_REF_BANDWIDTH / sample_rate)


def snr_to_osnr_db(snr_db, sample_rate):
    return snr_db - 10 * np.log10(2 * OSNR_REF_BANDWIDTH / sample_rate)


def add_ase_for_osnr(stream: IqStream, osnr_db, symbol_rate_hz=None, seed=0) -> IqStream:
    """Add white circular Gaussian noise for a dual-polarisation OSNR.

    The noise variance is the same on both polarisations and set from the
    mean per-polarisation signal power. ``symbol_rate_hz`` is accepted for
    call-site symmetry; the noise bandwidth is the stream's sample rate.
    """
    if osnr_db == math.inf:
        return IqStream(stream.x_pol.copy(), stream.y_pol.copy(), stream.sample_rate)
    p_pol = stream.power() / 2
    if not p_pol > 0:
        raise ParameterError("cannot set OSNR on a zero-power stream")
    snr = 10 ** (osnr_to_snr_db(osnr_db, stream.sample_rate) / 10)
    sigma = np.sqrt(p_pol / snr / 2)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, (2, 2, len(stream)))
    noise = noise[:, 0] + 1j * noise[:, 1]
    return IqStream(stream.x_pol + noise[0], stream.y_pol + noise[1], stream.sample_rate)


def jones_matrix(seed) -> np.ndarray:
    """Haar-random 2x2 unitary for ``seed``; identity for ``None``."""
    if seed is None:
        return np.eye(2, dtype=complex)
    return unitary_group.rvs(2, random_state=np.random.default_rng(seed))


def apply_pol_rotation(stream: IqStream, seed=None, jones=None) -> IqStream:
    j = jones_matrix(seed) if jones is None else np.asarray(jones, dtype=complex)
    out = j @ stream.as_array()
    return IqStream(out[0], out[1], stream.sample_rate)


def quantize_adc(stream: IqStream, bits: int, clip_sigma: float = 4.0) -> IqStream:
    """Clip each rail at ``clip_sigma`` times its RMS and quantise mid-rise."""
    if not 1 <= bits <= 16:
        raise ParameterError(f"bits must be in [1, 16], got {bits}")
    levels = 2**bits

    def rail(v):
        rms = np.sqrt(np.mean(v**2))
        if rms == 0:
            return v.copy()
        full = clip_sigma * rms
        step = 2 * full / levels
        code = np.clip(np.floor(v / step), -levels // 2, levels // 2 - 1)
        return (code + 0.5) * step

    out = []
    for pol in (stream.x_pol, stream.y_pol):
        out.append(rail(pol.real) + 1j * rail(pol.imag))
    return IqStream(out[0], out[1], stream.sample_rate)


def run_channel(stream: IqStream, params: ChannelParams) -> IqStream:
    """Pol rotation, CD, ASE, SCO, CFO and phase noise, quantisation.

    The carrier offset is applied on the receiver's sample grid: shifting the
    spectrum first would push it past the Nyquist edge the SCO interpolator
    relies on.
    """
    ase_seed, pn_seed, _ = _sub_seeds(params.noise_seed)
    out = stream
    if params.pol_rotation_seed is not None:
        out = apply_pol_rotation(out, params.pol_rotation_seed)
    if params.fiber_km:
        out = apply_cd(out, params.fiber_km, params.dispersion_ps_nm_km, params.wavelength_nm)
    if params.osnr_db != math.inf:
        out = add_ase_for_osnr(out, params.osnr_db, seed=ase_seed)
    if params.gamma_ppm:
        out = apply_sco_oracle(out, params.gamma, origin=params.sco_origin)
    if params.cfo_hz or params.linewidth_hz:
        out = apply_cfo_phase_noise(out, params.cfo_hz, params.linewidth_hz, seed=pn_seed)
    if params.adc_bits is not None:
        out = quantize_adc(out, params.adc_bits, params.clip_sigma)
    return out


_IQ_MAGIC = b"IQS1"
_IQ_HEADER = struct.Struct("<4sIdQ8x")


def write_iq(path, stream: IqStream, version: int = 1):
    """Write the raw interleaved float64 dump (x stream, then y stream)."""
    with open(path, "wb") as fh:
        fh.write(_IQ_HEADER.pack(_IQ_MAGIC, version, float(stream.sample_rate), len(stream)))
        for pol in (stream.x_pol, stream.y_pol):
            inter = np.empty(2 * pol.size, dtype="<f8")
            inter[0::2] = pol.real
            inter[1::2] = pol.imag
            fh.write(inter.tobytes())


def read_iq(path) -> IqStream:
    with open(path, "rb") as fh:
        header = fh.read(_IQ_HEADER.size)
        if len(header) != _IQ_HEADER.size:
            raise ParameterError("truncated IQ header")
        magic, _version, rate, n = _IQ_HEADER.unpack(header)
        if magic != _IQ_MAGIC:
            raise ParameterError(f"bad magic {magic!r}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != 4 * n:
        raise ParameterError(f"expected {4 * n} values, found {data.size}")
    x = data[0 : 2 * n : 2] + 1j * data[1 : 2 * n : 2]
    y = data[2 * n :: 2] + 1j * data[2 * n + 1 :: 2]
    return IqStream(x, y, rate)
