"""Experiment runner: configuration, seeded link runs, sweeps and CSV output."""
from __future__ import annotations

import csv
import datetime as _dt
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .channel import ChannelParams, jones_matrix, run_channel
from .errors import ConfigError, ParameterError
from .ofdm import IqStream, OfdmConfig, assemble_frame, debruijn_bits, frame_symbols, gen_training_pair
from .resampler import ResampleSpec
from .rx import RunReport, RxContext, RxParams, remove_cfo, compensate_cd, run_rx_pipeline
from .sync import EstimationMode, PolCombining, ScoLoopSettings, extract_phase, ls_fit, slope_for_gamma, unwrap

TS_SEED = 1

CSV_COLUMNS = [
    "variable_name", "variable_value", "seed", "ber", "bit_errors", "bits_counted",
    "evm_db", "gamma_true", "gamma_hat", "rel_err", "flags",
]


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _parse_opt_int(text):
    return None if text.strip().lower() in ("none", "off", "") else int(text)


def _parse_rotation_seed(text):
    t = text.strip().lower()
    return "run" if t == "run" else _parse_opt_int(t)


def _parse_float_list(text):
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


def _parse_choice(*choices):
    def parse(text):
        t = text.strip().lower()
        if t not in choices:
            raise ValueError(text)
        return t
    parse.__name__ = "one of " + "/".join(choices)
    return parse


# key -> (default, parser, description)
PARAMETERS = {
    "n_fft": (512, int, "IFFT size"),
    "n_data": (412, int, "data subcarriers"),
    "n_pilots": (8, int, "pilot subcarriers added on top of the data"),
    "n_cp": (46, int, "cyclic prefix samples"),
    "qam_order": (16, int, "constellation size"),
    "sample_rate_hz": (40e9, float, "DAC sample rate"),
    "ts_first": (4, int, "symbol index of the first training symbol"),
    "ts_second": (5, int, "symbol index of the second training symbol"),
    "bits_per_run": (2**15, int, "data bits per polarisation per run"),
    "guard_samples": (256, int, "cyclic guard on each side of the frame"),
    "impairments": (True, _parse_bool, "master switch for CFO, phase noise, CD, pol rotation and ADC"),
    "gamma_ppm": (0.0, float, "relative sampling clock offset"),
    "cfo_hz": (5e9, float, "coarse carrier offset, removed genie-aided"),
    "residual_cfo_hz": (10e6, float, "carrier offset left for the CPE stage"),
    "tx_linewidth_hz": (100e3, float, "signal laser linewidth"),
    "lo_linewidth_hz": (100e3, float, "local oscillator linewidth"),
    "fiber_km": (800.0, float, "total fibre length"),
    "dispersion_ps_nm_km": (16.0, float, "fibre dispersion"),
    "wavelength_nm": (1550.0, float, "carrier wavelength"),
    "osnr_db": (math.inf, float, "dual-pol OSNR in 12.5 GHz"),
    "adc_bits": (8, _parse_opt_int, "ADC resolution (none disables)"),
    "clip_sigma": (4.0, float, "ADC clipping level in rail RMS"),
    "pol_rotation_seed": ("run", _parse_rotation_seed, "Jones matrix seed; 'run' follows the run seed, none disables"),
    "sco_compensation": (True, _parse_bool, "enable the SCO estimate/resample loop"),
    "pol_combining": ("mrc", _parse_choice("mrc", "mean"), "how the two received polarisations are combined"),
    "sco_mode": ("differential", _parse_choice("differential", "absolute"), "estimator mode"),
    "resampler": ("farrow_sinc", _parse_choice("farrow_sinc", "farrow_cubic", "windowed_sinc"), "interpolator"),
    "resampler_taps": (24, int, "taps of the sinc-based interpolators"),
    "residual_threshold": (0.5, float, "fit residual RMS above which the estimate is rejected"),
    "isfa_window": (5, int, "ISFA window in subcarriers"),
    "rcfo": (True, _parse_bool, "pilot-aided residual carrier offset removal"),
    "cpe": (True, _parse_bool, "pilot-based common phase correction"),
    "genie_channel": (False, _parse_bool, "use the true Jones matrix instead of the estimate"),
    "sweep_osnr_db": ((14.0, 16.0, 18.0, 20.0, 22.0, 26.0), _parse_float_list, "OSNR sweep grid"),
    "sweep_sco_ppm": ((-200.0, -100.0, 0.0, 100.0, 200.0), _parse_float_list, "SCO sweep grid"),
    "workers": (1, int, "parallel processes for sweeps"),
}


def default_params() -> dict:
    return {k: v[0] for k, v in PARAMETERS.items()}


def parse_config_text(text: str) -> dict:
    params = default_params()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in PARAMETERS:
            raise ConfigError(f"unknown key {key!r}", key=key, line=lineno)
        parser = PARAMETERS[key][1]
        try:
            params[key] = parser(value)
        except ValueError:
            kind = getattr(parser, "__name__", "value")
            raise ConfigError(f"type mismatch for {key!r}: expected {kind}, got {value!r}",
                              key=key, line=lineno) from None
    return params


def parse_config(path) -> dict:
    """Read a ``key = value`` file on top of the built-in defaults."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config_text(text)


def resolve_params(source=None, **overrides) -> dict:
    """Accept a path, a dict of overrides, or nothing."""
    if source is None:
        params = default_params()
    elif isinstance(source, dict):
        params = default_params()
        params.update(source)
    else:
        params = parse_config(source)
    for key in overrides:
        if key not in PARAMETERS:
            raise ConfigError(f"unknown key {key!r}", key=key)
    params.update(overrides)
    unknown = set(params) - set(PARAMETERS)
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r}", key=sorted(unknown)[0])
    return params


def build_config(p: dict) -> OfdmConfig:
    base = OfdmConfig(
        n_fft=p["n_fft"], n_sc=p["n_data"] + p["n_pilots"], n_cp=p["n_cp"],
        n_frame_syms=max(p["ts_second"] + 1, 2), tx_sample_period=1.0 / p["sample_rate_hz"],
        qam_order=p["qam_order"], ts_indices=(p["ts_first"], p["ts_second"]), n_pilots=p["n_pilots"],
    )
    cfg = base.with_data_bits(p["bits_per_run"])
    if cfg.n_frame_syms <= p["ts_second"]:
        raise ConfigError("bits_per_run too small for the training symbol placement")
    return cfg


def channel_params(p: dict, cfg: OfdmConfig, seed: int) -> ChannelParams:
    on = p["impairments"]
    return ChannelParams(
        gamma_ppm=p["gamma_ppm"],
        cfo_hz=(p["cfo_hz"] + p["residual_cfo_hz"]) if on else 0.0,
        linewidth_hz=(p["tx_linewidth_hz"] + p["lo_linewidth_hz"]) if on else 0.0,
        fiber_km=p["fiber_km"] if on else 0.0,
        dispersion_ps_nm_km=p["dispersion_ps_nm_km"],
        wavelength_nm=p["wavelength_nm"],
        osnr_db=p["osnr_db"],
        adc_bits=p["adc_bits"] if on else None,
        clip_sigma=p["clip_sigma"],
        pol_rotation_seed=_rotation_seed(p["pol_rotation_seed"], seed) if on else None,
        noise_seed=seed,
        sco_origin=sco_origin(p, cfg),
    )


def _rotation_seed(setting, seed):
    if setting == "run":
        return 10_000 + seed
    return setting


def sco_origin(p: dict, cfg: OfdmConfig) -> float:
    """Centre of the first FFT window, where both clocks are taken to agree."""
    return p["guard_samples"] + cfg.n_cp + (cfg.n_fft - 1) / 2


def rx_params(p: dict) -> RxParams:
    spec = ResampleSpec(p["resampler"], taps=p["resampler_taps"],
                        beta=10.0 if p["resampler"] == "windowed_sinc" else 6.0)
    mode = EstimationMode.DIFFERENTIAL if p["sco_mode"] == "differential" else EstimationMode.ABSOLUTE
    return RxParams(
        fiber_km=p["fiber_km"] if p["impairments"] else 0.0,
        dispersion_ps_nm_km=p["dispersion_ps_nm_km"],
        wavelength_nm=p["wavelength_nm"],
        sco=ScoLoopSettings(mode, p["residual_threshold"], spec, p["sco_compensation"],
                            PolCombining(p["pol_combining"])),
        isfa_window=p["isfa_window"],
        rcfo=p["rcfo"],
        cpe=p["cpe"],
        genie_channel=p["genie_channel"],
    )


def payload_bits(cfg: OfdmConfig, bits_per_run: int, seed: int) -> np.ndarray:
    """De Bruijn payload per polarisation, repeated cyclically to fill the frame."""
    order = min(24, max(1, math.ceil(math.log2(max(bits_per_run, 2)))))
    rows = []
    for pol in range(2):
        seq = debruijn_bits(order, 2 * seed + pol + 1)
        rows.append(np.resize(seq, cfg.bits_per_frame))
    return np.vstack(rows)


@dataclass
class Link:
    """Everything one run needs: the received stream plus receiver context."""

    config: OfdmConfig
    received: IqStream
    context: RxContext
    channel: ChannelParams


def build_link(p: dict, seed: int) -> Link:
    cfg = build_config(p)
    bits = payload_bits(cfg, p["bits_per_run"], seed)
    grid, tx = assemble_frame(bits, cfg, TS_SEED)
    g = p["guard_samples"]
    data = tx.as_array()
    if g:
        data = np.concatenate([data[:, -g:], data, data[:, :g]], axis=1)
    stream = IqStream.from_array(data, tx.sample_rate)
    ch = channel_params(p, cfg, seed)
    rx = run_channel(stream, ch)
    ctx = RxContext(
        config=cfg,
        training=gen_training_pair(cfg, TS_SEED),
        timing_offset=g,
        genie_cfo_hz=p["cfo_hz"] if p["impairments"] else 0.0,
        residual_cfo_hz=p["residual_cfo_hz"] if p["impairments"] else 0.0,
        sco_origin=sco_origin(p, cfg),
        jones=jones_matrix(ch.pol_rotation_seed),
        tx_grid=grid.symbols,
        tx_bits=bits,
        gamma_true=ch.gamma,
    )
    return Link(cfg, rx, ctx, ch)


def run_single(source=None, seed: int = 0, **overrides) -> RunReport:
    """Transmit one frame through the channel and receiver and score it."""
    p = resolve_params(source, **overrides)
    link = build_link(p, seed)
    _, report = run_rx_pipeline(link.received, link.context, rx_params(p))
    report.config = {k: p[k] for k in PARAMETERS if not k.startswith("sweep_")}
    report.config["seed"] = seed
    return report


@dataclass
class SweepSpec:
    variable: str
    values: tuple
    fixed: dict = field(default_factory=dict)
    seeds: int = 1
    bits_per_run: int | None = None
    base_seed: int = 0

    def __post_init__(self):
        if self.variable not in ("osnr_db", "sco_ppm"):
            raise ParameterError(f"unknown sweep variable {self.variable!r}")
        if not len(self.values):
            raise ParameterError("sweep needs at least one value")
        if self.seeds < 1:
            raise ParameterError("seeds must be >= 1")


def _sweep_task(args):
    params, key, value, seed = args
    return run_single(dict(params), seed, **{key: value})


def sweep_reports(spec: SweepSpec, workers: int = 1):
    """Run every ``(value, seed)`` point; results in deterministic order."""
    params = resolve_params(spec.fixed)
    if spec.bits_per_run is not None:
        params["bits_per_run"] = spec.bits_per_run
    key = "osnr_db" if spec.variable == "osnr_db" else "gamma_ppm"
    tasks = [(params, key, float(v), spec.base_seed + s) for v in spec.values for s in range(spec.seeds)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_sweep_task, tasks))
    else:
        reports = [_sweep_task(t) for t in tasks]
    return [(t[2], t[3], r) for t, r in zip(tasks, reports)]


def _fmt(v):
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(float(v))
    return str(v)


def report_row(name, value, seed, r: RunReport) -> list:
    return [name, _fmt(float(value)), seed, _fmt(r.ber), r.bit_errors, r.bits_counted, _fmt(r.evm_db),
            _fmt(r.gamma_true), _fmt(r.gamma_hat), _fmt(r.rel_err), ";".join(r.flags)]


def _header(title, timestamp: bool):
    lines = [f"# coofdm-sco {title}"]
    if timestamp:
        lines.append(f"# generated {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}")
    lines.append("# rel_err = |gamma_hat - gamma_true| / |gamma_true| (nan when gamma_true == 0)")
    return "\n".join(lines) + "\n"


def format_sweep_csv(name, results, timestamp: bool = False) -> str:
    buf = io.StringIO()
    buf.write(_header(f"sweep {name}", timestamp))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for value, seed, r in results:
        w.writerow(report_row(name, value, seed, r))
    for value in dict.fromkeys(v for v, _, _ in results):
        group = [r for v, _, r in results if v == value]
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            def agg(attr):
                vals = np.array([getattr(r, attr) for r in group], dtype=float)
                return _fmt(float(fn(vals)))
            flags = sorted({f for r in group for f in r.flags})
            w.writerow([name, _fmt(float(value)), stat, agg("ber"), agg("bit_errors"), agg("bits_counted"),
                        agg("evm_db"), agg("gamma_true"), agg("gamma_hat"), agg("rel_err"), ";".join(flags)])
    return buf.getvalue()


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def sweep(spec: SweepSpec, output_path=None, timestamp: bool = False, workers: int = 1):
    """Run a sweep and write (or return) its CSV."""
    results = sweep_reports(spec, workers)
    text = format_sweep_csv(spec.variable, results, timestamp)
    if output_path is not None:
        _write(output_path, text)
    return results, text


def phase_profiles(source=None, symbols: int = 7, seed: int = 0, **overrides):
    """Per-symbol SCO phase versus subcarrier on the x polarisation.

    The channel carries only the configured SCO and OSNR; the receiver
    does not compensate. Returns ``[(l, PhaseProfile, SlopeFit), ...]``.
    """
    p = resolve_params(source, **overrides)
    p = dict(p, impairments=False, sco_compensation=False)
    if symbols < 1:
        raise ParameterError("symbols must be >= 1")
    cfg = build_config(p)
    if cfg.n_frame_syms <= symbols:
        raise ParameterError(f"frame has {cfg.n_frame_syms} symbols, need more than {symbols}")
    link = build_link(p, seed)
    s = remove_cfo(link.received, link.context.genie_cfo_hz, cfg.sample_rate)
    ls = np.arange(1, symbols + 1)
    rows = frame_symbols(s.as_array(), cfg, link.context.timing_offset, ls)
    k = cfg.occupied
    out = []
    for i, l in enumerate(ls):
        prof = unwrap(extract_phase(rows[0, i], link.context.tx_grid[0, l], int(l), k))
        out.append((int(l), prof, ls_fit(prof)))
    return cfg, p, out


def emit_phase_profile(source=None, symbols: int = 7, output_path=None, seed: int = 0,
                       timestamp: bool = False, **overrides) -> str:
    cfg, p, profiles = phase_profiles(source, symbols, seed, **overrides)
    gamma = p["gamma_ppm"] * 1e-6
    buf = io.StringIO()
    buf.write(_header("phase-profile", timestamp))
    buf.write(f"# gamma_ppm = {_fmt(float(p['gamma_ppm']))}, osnr_db = {_fmt(float(p['osnr_db']))}\n")
    for l, _, fit in profiles:
        buf.write(f"# l = {l}: slope = {_fmt(fit.slope)}, intercept = {_fmt(fit.intercept)}, "
                  f"residual_rms = {_fmt(fit.residual_rms)}, predicted_slope = "
                  f"{_fmt(slope_for_gamma(gamma, l, cfg))}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["l", "k", "phase", "fitted"])
    for l, prof, fit in profiles:
        for k, ph in zip(prof.k, prof.phases):
            w.writerow([l, int(k), _fmt(float(ph)), _fmt(float(fit.slope * k + fit.intercept))])
    text = buf.getvalue()
    if output_path is not None:
        _write(output_path, text)
    return text


def report_to_dict(r: RunReport) -> dict:
    return asdict(r)


__all__ = [
    "CSV_COLUMNS", "Link", "PARAMETERS", "SweepSpec", "build_config", "build_link", "default_params",
    "emit_phase_profile", "format_sweep_csv", "parse_config", "parse_config_text", "phase_profiles",
    "resolve_params", "run_single", "sweep", "sweep_reports",
]
