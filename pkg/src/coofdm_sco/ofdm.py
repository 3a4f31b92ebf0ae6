"""OFDM frame construction and deconstruction.

Subcarriers are addressed by signed index ``k``; FFT bin ``k mod N`` carries
subcarrier ``k``. Both FFT directions use unitary ``1/sqrt(N)`` scaling.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ParameterError

_PAM4 = {(0, 0): -3.0, (0, 1): -1.0, (1, 1): 1.0, (1, 0): 3.0}
_QAM16_SCALE = 1.0 / np.sqrt(10.0)


@dataclass(frozen=True)
class OfdmConfig:
    """Frame and grid constants.

    ``n_sc`` is the number of occupied subcarriers (data plus pilots). With
    ``dc_null`` the occupied set is ``{-n_sc/2, ..., -1, 1, ..., n_sc/2}``,
    otherwise ``{-n_sc/2 + 1, ..., n_sc/2}``.
    """

    n_fft: int = 512
    n_sc: int = 420
    n_cp: int = 46
    n_frame_syms: int = 22
    tx_sample_period: float = 1.0 / 40e9
    qam_order: int = 16
    pilot_indices: tuple[int, ...] | None = None
    ts_indices: tuple[int, int] = (4, 5)
    n_pilots: int = 8
    dc_null: bool = True
    pilot_seed: int = 0x5EED
    _occupied: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.qam_order != 16:
            raise ParameterError("only 16-QAM is supported")
        if self.n_sc % 2 or not 0 < self.n_sc <= self.n_fft - int(self.dc_null):
            raise ParameterError(f"n_sc={self.n_sc} must be even and fit in n_fft={self.n_fft}")
        if self.n_cp < 0 or self.n_cp > self.n_fft:
            raise ParameterError(f"n_cp={self.n_cp} out of range")
        half = self.n_sc // 2
        if self.dc_null:
            occ = np.r_[np.arange(-half, 0), np.arange(1, half + 1)]
        else:
            occ = np.arange(-half + 1, half + 1)
        object.__setattr__(self, "_occupied", occ)
        if self.pilot_indices is None:
            pos = ((np.arange(self.n_pilots) + 0.5) * self.n_sc / self.n_pilots).astype(int)
            object.__setattr__(self, "pilot_indices", tuple(int(k) for k in occ[pos]))
        else:
            object.__setattr__(self, "pilot_indices", tuple(int(k) for k in self.pilot_indices))
            object.__setattr__(self, "n_pilots", len(self.pilot_indices))
        if not set(self.pilot_indices) <= set(occ.tolist()):
            raise ParameterError("pilot indices must be occupied subcarriers")
        if len(set(self.pilot_indices)) != len(self.pilot_indices):
            raise ParameterError("duplicate pilot indices")
        t0, t1 = self.ts_indices
        if not 0 <= t0 < t1 < self.n_frame_syms:
            raise ParameterError(f"ts_indices={self.ts_indices} invalid for L={self.n_frame_syms}")

    @property
    def n_sym(self) -> int:
        return self.n_fft + self.n_cp

    @property
    def sample_rate(self) -> float:
        return 1.0 / self.tx_sample_period

    @property
    def occupied(self) -> np.ndarray:
        """Signed subcarrier indices in ascending order."""
        return self._occupied.copy()

    @property
    def pilot_positions(self) -> np.ndarray:
        """Positions of the pilots inside the occupied vector."""
        return np.searchsorted(self._occupied, np.asarray(self.pilot_indices))

    @property
    def data_positions(self) -> np.ndarray:
        mask = np.ones(self.n_sc, dtype=bool)
        mask[self.pilot_positions] = False
        return np.flatnonzero(mask)

    @property
    def n_data(self) -> int:
        return self.n_sc - self.n_pilots

    @property
    def data_symbol_indices(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_frame_syms), self.ts_indices)

    @property
    def bits_per_frame(self) -> int:
        """Data bits carried by one frame on one polarisation."""
        return len(self.data_symbol_indices) * self.n_data * 4

    @property
    def bins(self) -> np.ndarray:
        return self._occupied % self.n_fft

    def with_data_bits(self, bits_per_pol: int) -> "OfdmConfig":
        """Copy with the frame length chosen to carry ``bits_per_pol`` data bits."""
        n_data_syms = -(-bits_per_pol // (self.n_data * 4))
        # short payloads are padded so the training pair still fits
        return OfdmConfig(
            n_fft=self.n_fft,
            n_sc=self.n_sc,
            n_cp=self.n_cp,
            n_frame_syms=max(n_data_syms + 2, self.ts_indices[1] + 1),
            tx_sample_period=self.tx_sample_period,
            qam_order=self.qam_order,
            pilot_indices=None if self._default_pilots() else self.pilot_indices,
            ts_indices=self.ts_indices,
            n_pilots=self.n_pilots,
            dc_null=self.dc_null,
            pilot_seed=self.pilot_seed,
        )

    def _default_pilots(self) -> bool:
        pos = ((np.arange(self.n_pilots) + 0.5) * self.n_sc / self.n_pilots).astype(int)
        return tuple(int(k) for k in self._occupied[pos]) == self.pilot_indices


@dataclass
class IqStream:
    """Dual-polarisation complex baseband samples."""

    x_pol: np.ndarray
    y_pol: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.x_pol = np.asarray(self.x_pol, dtype=complex)
        self.y_pol = np.asarray(self.y_pol, dtype=complex)
        if self.x_pol.shape != self.y_pol.shape or self.x_pol.ndim != 1:
            raise ParameterError("polarisation sequences must be 1-D and equal length")

    def __len__(self):
        return self.x_pol.size

    @classmethod
    def from_array(cls, samples, sample_rate):
        samples = np.asarray(samples)
        return cls(samples[0], samples[1], sample_rate)

    def as_array(self) -> np.ndarray:
        """Shape ``(2, n)`` copy, row 0 is x."""
        return np.vstack([self.x_pol, self.y_pol])

    def power(self) -> float:
        """Mean total (x + y) power per sample."""
        return float(np.mean(np.abs(self.x_pol) ** 2) + np.mean(np.abs(self.y_pol) ** 2))


@dataclass
class QamGrid:
    """Transmitted frequency-domain content, ``symbols[pol, l, position]``."""

    symbols: np.ndarray
    config: OfdmConfig

    def data(self) -> np.ndarray:
        cfg = self.config
        return self.symbols[:, cfg.data_symbol_indices][:, :, cfg.data_positions]


@dataclass(frozen=True)
class TrainingPair:
    """Correlated dual-polarisation training symbols.

    ``t1`` and ``t2`` have shape ``(2, n_sc)`` (rows x, y) and equal
    ``(A, A)`` and ``(A, -A)`` respectively.
    """

    base: np.ndarray
    t1: np.ndarray
    t2: np.ndarray

    def matrix(self) -> np.ndarray:
        """Per-subcarrier known matrix ``P_k``, shape ``(n_sc, 2, 2)``.

        Rows index transmit polarisation, columns index the training symbol.
        """
        return np.stack([self.t1, self.t2], axis=-1).transpose(1, 0, 2)


# feedback taps of primitive polynomials over GF(2), one per degree
_PRIMITIVE_TAPS = {
    2: (2, 1), 3: (3, 2), 4: (4, 3), 5: (5, 3), 6: (6, 5), 7: (7, 6), 8: (8, 6, 5, 4),
    9: (9, 5), 10: (10, 7), 11: (11, 9), 12: (12, 6, 4, 1), 13: (13, 4, 3, 1),
    14: (14, 5, 3, 1), 15: (15, 14), 16: (16, 15, 13, 4), 17: (17, 14), 18: (18, 11),
    19: (19, 6, 2, 1), 20: (20, 17), 21: (21, 19), 22: (22, 21), 23: (23, 18),
    24: (24, 23, 22, 17),
}


@lru_cache(maxsize=8)
def _debruijn_canonical(order: int) -> np.ndarray:
    # maximal-length LFSR sequence with one extra 0 lengthening its zero run
    if order == 1:
        seq = np.array([0, 1], dtype=np.uint8)
    else:
        taps = _PRIMITIVE_TAPS[order]
        period = (1 << order) - 1
        s = bytearray(period)
        s[order - 1] = 1
        for n in range(order, period):
            v = 0
            for t in taps:
                v ^= s[n - t]
            s[n] = v
        seq = np.frombuffer(bytes(s), dtype=np.uint8)
        # the unique run of order-1 zeros starts at index 0
        seq = np.concatenate([[0], seq]).astype(np.uint8)
    seq.setflags(write=False)
    return seq


def debruijn_bits(order: int, seed: int = 0) -> np.ndarray:
    """Binary de Bruijn sequence of length ``2**order``.

    Built from a maximal-length shift-register sequence, so the bits look
    pseudo-random. ``seed`` selects a cyclic rotation; seed 0 starts with the
    run of ``order`` zeros.
    """
    if not 1 <= order <= 24:
        raise ParameterError(f"de Bruijn order must be in [1, 24], got {order}")
    seq = _debruijn_canonical(order)
    if seed == 0:
        return seq.copy()
    shift = int(np.random.default_rng(seed).integers(seq.size))
    return np.roll(seq, shift)


def qam16_map(bits) -> np.ndarray:
    """Gray-map groups of four bits to unit-energy 16-QAM symbols.

    Accepts a single 4-bit word or any bit array whose last axis length is a
    multiple of 4; returns a complex scalar or array accordingly.
    """
    b = np.asarray(bits, dtype=np.int64)
    if b.shape[-1] % 4:
        raise ParameterError("bit count must be a multiple of 4")
    b = b.reshape(b.shape[:-1] + (-1, 4))
    i = _pam4(b[..., 0], b[..., 1])
    q = _pam4(b[..., 2], b[..., 3])
    sym = (i + 1j * q) * _QAM16_SCALE
    if sym.shape == (1,) and np.ndim(bits) == 1:
        return sym[0]
    return sym


def _pam4(b0, b1):
    # 00 -> -3, 01 -> -1, 11 -> +1, 10 -> +3
    return ((2 * b0 - 1) * (3 - 2 * b1)).astype(float)


def qam16_demap(symbols) -> np.ndarray:
    """Hard-decision inverse of :func:`qam16_map`.

    Returns an array of bits with a trailing axis of 4 per symbol, flattened
    over the last symbol axis (``(..., n) -> (..., 4n)``). A scalar input
    gives a length-4 vector.
    """
    s = np.asarray(symbols) / _QAM16_SCALE
    scalar = s.ndim == 0
    s = np.atleast_1d(s)
    bits = np.empty(s.shape + (4,), dtype=np.uint8)
    bits[..., 0], bits[..., 1] = _pam4_decide(s.real)
    bits[..., 2], bits[..., 3] = _pam4_decide(s.imag)
    bits = bits.reshape(s.shape[:-1] + (-1,))
    return bits if not scalar else bits.reshape(4)


def _pam4_decide(v):
    b0 = (v > 0).astype(np.uint8)
    b1 = (np.abs(v) < 2).astype(np.uint8)
    return b0, b1


def qam16_constellation() -> np.ndarray:
    words = (np.arange(16)[:, None] >> np.arange(3, -1, -1)) & 1
    return qam16_map(words.reshape(-1)).reshape(16)


def modulate_symbol(grid_row, config: OfdmConfig) -> np.ndarray:
    """Map one row of occupied-subcarrier values to ``n_sym`` time samples."""
    row = np.asarray(grid_row, dtype=complex)
    if row.shape[-1] != config.n_sc:
        raise ParameterError(f"grid row has {row.shape[-1]} entries, expected {config.n_sc}")
    spec = np.zeros(row.shape[:-1] + (config.n_fft,), dtype=complex)
    spec[..., config.bins] = row
    t = np.fft.ifft(spec, norm="ortho")
    if config.n_cp:
        t = np.concatenate([t[..., -config.n_cp :], t], axis=-1)
    return t


def demodulate_symbol(samples, config: OfdmConfig) -> np.ndarray:
    """Strip the cyclic prefix, FFT and return the occupied bins."""
    s = np.asarray(samples, dtype=complex)
    if s.shape[-1] != config.n_sym:
        raise ParameterError(f"got {s.shape[-1]} samples, expected {config.n_sym}")
    spec = np.fft.fft(s[..., config.n_cp :], norm="ortho")
    return spec[..., config.bins]


def _qpsk(rng, shape):
    return np.exp(1j * (np.pi / 4 + np.pi / 2 * rng.integers(0, 4, size=shape)))


def gen_training_pair(config: OfdmConfig, seed: int = 1) -> TrainingPair:
    a = _qpsk(np.random.default_rng(seed), config.n_sc)
    t1 = np.vstack([a, a])
    t2 = np.vstack([a, -a])
    for arr in (a, t1, t2):
        arr.setflags(write=False)
    return TrainingPair(base=a, t1=t1, t2=t2)


def pilot_symbols(config: OfdmConfig) -> np.ndarray:
    """Known pilot values, shape ``(2, n_frame_syms, n_pilots)``.

    Each pilot tone keeps its value in every symbol, so symbol-to-symbol
    phase changes can be measured before the channel is known.
    """
    rng = np.random.default_rng(config.pilot_seed)
    tones = _qpsk(rng, (2, 1, config.n_pilots))
    return np.repeat(tones, config.n_frame_syms, axis=1)


def assemble_frame(bits, config: OfdmConfig, seed: int = 1) -> tuple[QamGrid, IqStream]:
    """Build one transmitted frame.

    ``bits`` has shape ``(2, n)`` (one row per polarisation); the first
    ``config.bits_per_frame`` bits of each row are used. ``seed`` selects the
    training sequence.
    """
    bits = np.asarray(bits)
    need = config.bits_per_frame
    if bits.ndim != 2 or bits.shape[0] != 2:
        raise ParameterError("bits must have shape (2, n)")
    if bits.shape[1] < need:
        raise ParameterError(f"need {need} bits per polarisation, got {bits.shape[1]}")
    data_syms = config.data_symbol_indices
    grid = np.zeros((2, config.n_frame_syms, config.n_sc), dtype=complex)
    payload = qam16_map(bits[:, :need]).reshape(2, len(data_syms), config.n_data)
    grid[:, data_syms[:, None], config.data_positions[None, :]] = payload
    pilots = pilot_symbols(config)
    grid[:, data_syms[:, None], config.pilot_positions[None, :]] = pilots[:, data_syms]
    ts = gen_training_pair(config, seed)
    grid[:, config.ts_indices[0]] = ts.t1
    grid[:, config.ts_indices[1]] = ts.t2
    time = modulate_symbol(grid, config).reshape(2, -1)
    return QamGrid(grid, config), IqStream(time[0], time[1], config.sample_rate)


def frame_symbols(samples, config: OfdmConfig, start: int = 0, symbols=None) -> np.ndarray:
    """Demodulate symbols of a frame beginning at ``start``.

    ``samples`` is a ``(2, n)`` array; returns ``(2, len(symbols), n_sc)``.
    """
    samples = np.asarray(samples)
    if symbols is None:
        symbols = np.arange(config.n_frame_syms)
    symbols = np.atleast_1d(symbols)
    idx = start + symbols[:, None] * config.n_sym + np.arange(config.n_sym)[None, :]
    if idx.min() < 0 or idx.max() >= samples.shape[-1]:
        raise ParameterError("frame extends beyond the sample buffer")
    return demodulate_symbol(samples[:, idx], config)
