"""Dual-polarisation RGI-CO-OFDM baseband simulator with training-symbol SCO
estimation and Farrow-based compensation."""

from .errors import ConfigError, ParameterError
from .ofdm import (IqStream, OfdmConfig, QamGrid, TrainingPair, assemble_frame, debruijn_bits,
                   demodulate_symbol, gen_training_pair, modulate_symbol, qam16_demap, qam16_map)
from .channel import ChannelParams, read_iq, run_channel, write_iq
from .resampler import ResampleSpec, Structure, resample
from .sync import EstimationMode, PolCombining, ScoEstimate, estimate_from_frame, estimate_gamma
from .rx import RunReport, RxContext, RxParams, run_rx_pipeline
from .harness import SweepSpec, emit_phase_profile, parse_config, run_single, sweep

__version__ = "0.1.0"

__all__ = [
    "ChannelParams", "ConfigError", "EstimationMode", "IqStream", "OfdmConfig", "ParameterError",
    "PolCombining", "QamGrid", "ResampleSpec", "RunReport", "RxContext", "RxParams", "ScoEstimate",
    "Structure", "SweepSpec", "TrainingPair", "assemble_frame", "debruijn_bits", "demodulate_symbol",
    "emit_phase_profile", "estimate_from_frame", "estimate_gamma", "gen_training_pair",
    "modulate_symbol", "parse_config", "qam16_demap", "qam16_map", "read_iq", "resample",
    "run_channel", "run_rx_pipeline", "run_single", "sweep", "write_iq",
]
