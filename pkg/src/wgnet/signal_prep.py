"""Time-domain filtering, spectral descriptors, and energy-deviation targets.

The preprocessing chain per sample is:

    high-pass filter -> subtract mean pristine signal -> FFT over the
    selected band -> z-score amplitudes with train-only statistics

and per-path energy-deviation targets are the clamped, E_max-normalized mean
deviation of absolute normalized amplitudes from the pristine reference.

All statistics (signal baseline, per-(path, bin) amplitude mean/std, E_max)
are fit exclusively on the training partition; the fitted state is carried by
:class:`PreprocessModel` and applied unchanged to validation and test samples.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, filtfilt

from .errors import ConfigError, DataError, InsufficientDataError
from .geometry import P_UNDAMAGED, ForwardPathSet

log = logging.getLogger(__name__)

DEFAULT_FILTER_ORDER = 3
DEFAULT_CUTOFF_HZ = 20e3
DEFAULT_BAND_LOW_HZ = 69.4e3
DEFAULT_BAND_HIGH_HZ = 128e3
DEFAULT_BINS = 256
STD_FLOOR = 1e-8
E_MAX_FLOOR = 1e-12


@dataclass
class RawSample:
    """One acquisition: per-path time signals plus its label.

    ``signals`` is (T, n_paths) with one column per canonical path.
    Pristine samples carry ``damage_label=None`` and ``coordinate=None``.
    """

    sample_id: str
    signals: np.ndarray
    sampling_rate_hz: float
    excitation_freq_hz: float
    damage_label: str | None = None
    coordinate: np.ndarray | None = None

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.float64)
        if self.signals.ndim != 2 or self.signals.shape[0] < 1:
            raise DataError(f"{self.sample_id}: signals must be a (T, n_paths) matrix")
        if self.coordinate is not None:
            self.coordinate = np.asarray(self.coordinate, dtype=np.float64).reshape(2)

    @property
    def pristine(self) -> bool:
        return self.coordinate is None

    @property
    def target_coordinate(self) -> np.ndarray:
        """Regression target: true coordinate, or the out-of-domain no-damage point."""
        return P_UNDAMAGED.copy() if self.pristine else self.coordinate.copy()


@dataclass(frozen=True)
class BandSelection:
    """A contiguous run of FFT bins realizing the analysis band."""

    bin_indices: np.ndarray  # (K,) into the rfft spectrum
    frequencies_hz: np.ndarray  # (K,)
    n_time: int
    sampling_rate_hz: float

    @property
    def n_bins(self) -> int:
        return int(self.bin_indices.size)


@dataclass
class NormalizationStats:
    """Per-(path, bin) amplitude statistics fit on the training partition."""

    amp_mean: np.ndarray  # (n_paths, K)
    amp_std: np.ndarray  # (n_paths, K), floored at STD_FLOOR
    e_max: float

    def normalize(self, amplitudes: np.ndarray) -> np.ndarray:
        return (amplitudes - self.amp_mean) / self.amp_std


@dataclass
class BaselineSet:
    """Pristine references: mean time signals and mean absolute normalized
    band amplitudes, both from training pristine samples only."""

    mean_signals: np.ndarray  # (T, n_paths)
    mean_abs_amplitudes: np.ndarray  # (n_paths, K)


@dataclass
class SpectralDescriptor:
    """Per-path amplitudes and phases over the selected band."""

    amplitudes: np.ndarray  # (n_paths, K), z-scored when stats were supplied
    phases: np.ndarray  # (n_paths, K) in (-pi, pi], 0 at zero-amplitude bins
    band: BandSelection

    @property
    def matrix(self) -> np.ndarray:
        """(n_paths, 2K) layout: K amplitudes then K phases per path."""
        return np.concatenate([self.amplitudes, self.phases], axis=1)


@dataclass
class EnergyTarget:
    """Per-forward-path energy deviation, every entry in [0, 1]."""

    values: np.ndarray


def select_band(
    n_time: int,
    sampling_rate_hz: float,
    low_hz: float = DEFAULT_BAND_LOW_HZ,
    high_hz: float = DEFAULT_BAND_HIGH_HZ,
    n_bins: int = DEFAULT_BINS,
) -> BandSelection:
    """Map the physical band to exactly ``n_bins`` contiguous rfft bins.

    Bins are taken from the first bin whose center frequency reaches
    ``low_hz``; the run is truncated to ``n_bins`` if the band holds more, or
    extended upward past ``high_hz`` if it holds fewer. The realized indices
    land in the run manifest so any run is reproducible from its config.
    """
    nyquist = sampling_rate_hz / 2.0
    if not 0 <= low_hz < high_hz:
        raise ConfigError(f"invalid band [{low_hz}, {high_hz}]")
    if high_hz >= nyquist:
        raise ConfigError(f"band upper edge {high_hz} Hz must lie below Nyquist {nyquist} Hz")
    freqs = np.fft.rfftfreq(n_time, d=1.0 / sampling_rate_hz)
    start_candidates = np.nonzero(freqs >= low_hz)[0]
    if start_candidates.size == 0:
        raise ConfigError("band lies entirely above the available spectrum")
    start = int(start_candidates[0])
    stop = start + n_bins
    if stop > freqs.size:
        raise ConfigError(
            f"cannot realize {n_bins} bins from {low_hz} Hz with T={n_time}, fs={sampling_rate_hz}"
        )
    idx = np.arange(start, stop)
    return BandSelection(
        bin_indices=idx,
        frequencies_hz=freqs[idx],
        n_time=n_time,
        sampling_rate_hz=sampling_rate_hz,
    )


def highpass(
    signals: np.ndarray,
    sampling_rate_hz: float,
    order: int = DEFAULT_FILTER_ORDER,
    cutoff_hz: float = DEFAULT_CUTOFF_HZ,
) -> np.ndarray:
    """Zero-phase Butterworth high-pass, column-wise; shape preserved."""
    nyquist = sampling_rate_hz / 2.0
    if cutoff_hz >= nyquist:
        raise ConfigError(f"cutoff {cutoff_hz} Hz must be below Nyquist {nyquist} Hz")
    b, a = butter(order, cutoff_hz / nyquist, btype="highpass")
    return filtfilt(b, a, signals, axis=0)


def highpass_filter(
    sample: RawSample,
    order: int = DEFAULT_FILTER_ORDER,
    cutoff_hz: float = DEFAULT_CUTOFF_HZ,
) -> RawSample:
    """Return a copy of ``sample`` with every path signal high-pass filtered."""
    return RawSample(
        sample_id=sample.sample_id,
        signals=highpass(sample.signals, sample.sampling_rate_hz, order, cutoff_hz),
        sampling_rate_hz=sample.sampling_rate_hz,
        excitation_freq_hz=sample.excitation_freq_hz,
        damage_label=sample.damage_label,
        coordinate=None if sample.coordinate is None else sample.coordinate.copy(),
    )


def differential(signals: np.ndarray, mean_signals: np.ndarray) -> np.ndarray:
    """Element-wise baseline subtraction against the mean pristine signal."""
    signals = np.asarray(signals)
    mean_signals = np.asarray(mean_signals)
    if signals.shape != mean_signals.shape:
        raise DataError(
            f"signal shape {signals.shape} does not match baseline {mean_signals.shape}"
        )
    return signals - mean_signals


def band_spectrum(diff: np.ndarray, band: BandSelection) -> tuple[np.ndarray, np.ndarray]:
    """Amplitude and phase of the differential signal at the selected bins.

    Returns (amplitudes, phases), each (n_paths, K). Zero-amplitude bins get
    phase 0 by convention.
    """
    if diff.shape[0] != band.n_time:
        raise ConfigError(f"band was built for T={band.n_time}, got T={diff.shape[0]}")
    spectrum = np.fft.rfft(diff, axis=0)[band.bin_indices, :]
    amplitudes = np.abs(spectrum).T
    phases = np.angle(spectrum).T
    phases[amplitudes == 0.0] = 0.0
    return amplitudes, phases


def spectral_descriptor(
    diff: np.ndarray,
    band: BandSelection,
    stats: NormalizationStats | None = None,
) -> SpectralDescriptor:
    """Per-path band descriptor of a differential signal.

    With ``stats`` supplied, amplitudes are z-scored per (path, bin) with the
    train-fit statistics; phases are never normalized.
    """
    amplitudes, phases = band_spectrum(diff, band)
    if stats is not None:
        amplitudes = stats.normalize(amplitudes)
    return SpectralDescriptor(amplitudes=amplitudes, phases=phases, band=band)


def energy_deviation(
    normalized_amplitudes: np.ndarray,
    mean_abs_amplitudes: np.ndarray,
    e_max: float,
    fwd_paths: ForwardPathSet | np.ndarray,
) -> EnergyTarget:
    """Clamped, normalized mean amplitude deviation per forward path.

    The mean over bins of (|normalized amplitude| - pristine reference) is
    clamped at zero, divided by ``e_max``, and finally clipped to [0, 1] so
    samples exceeding the train-set maximum saturate rather than overflow.
    """
    if e_max <= 0:
        raise ConfigError("e_max must be positive")
    indices = np.asarray(
        fwd_paths.indices if isinstance(fwd_paths, ForwardPathSet) else fwd_paths, dtype=int
    )
    dev = np.mean(np.abs(normalized_amplitudes) - mean_abs_amplitudes, axis=1)
    dev = np.maximum(dev, 0.0) / e_max
    return EnergyTarget(values=np.clip(dev[indices], 0.0, 1.0))


def _fit(
    train_samples: list[RawSample],
    band: BandSelection,
    fwd_indices: np.ndarray | None,
    order: int,
    cutoff_hz: float,
) -> tuple[BaselineSet, NormalizationStats]:
    """Self-consistent fit over the training partition.

    Loop order: filter everything; mean pristine signal; per-sample
    differential spectra; per-(path, bin) amplitude mean/std; normalized
    pristine amplitudes -> mean absolute reference; train deviations -> E_max.
    """
    if not train_samples:
        raise InsufficientDataError("cannot fit preprocessing on an empty training set")
    shapes = {s.signals.shape for s in train_samples}
    if len(shapes) != 1:
        raise DataError(f"inconsistent sample shapes in training set: {shapes}")

    filtered = [highpass(s.signals, s.sampling_rate_hz, order, cutoff_hz) for s in train_samples]
    pristine_idx = [k for k, s in enumerate(train_samples) if s.pristine]
    if not pristine_idx:
        raise InsufficientDataError("training set holds no pristine samples for the baseline")
    mean_signals = np.mean([filtered[k] for k in pristine_idx], axis=0)

    amps = np.stack(
        [band_spectrum(differential(f, mean_signals), band)[0] for f in filtered]
    )  # (n_train, n_paths, K)
    amp_mean = amps.mean(axis=0)
    amp_std = amps.std(axis=0)
    n_floored = int(np.count_nonzero(amp_std < STD_FLOOR))
    if n_floored:
        log.warning("flooring %d degenerate amplitude std entries at %.0e", n_floored, STD_FLOOR)
        amp_std = np.maximum(amp_std, STD_FLOOR)

    abs_norm = np.abs((amps - amp_mean) / amp_std)
    mean_abs_amplitudes = abs_norm[pristine_idx].mean(axis=0)

    deviations = np.maximum(np.mean(abs_norm - mean_abs_amplitudes, axis=2), 0.0)
    if fwd_indices is not None:
        deviations = deviations[:, np.asarray(fwd_indices, dtype=int)]
    e_max = float(deviations.max()) if deviations.size else 0.0
    if e_max < E_MAX_FLOOR:
        log.warning("maximum training deviation %.3e is degenerate; flooring E_max", e_max)
        e_max = E_MAX_FLOOR

    baseline = BaselineSet(mean_signals=mean_signals, mean_abs_amplitudes=mean_abs_amplitudes)
    stats = NormalizationStats(amp_mean=amp_mean, amp_std=amp_std, e_max=e_max)
    return baseline, stats


def compute_baseline(
    pristine_train: list[RawSample],
    band: BandSelection,
    order: int = DEFAULT_FILTER_ORDER,
    cutoff_hz: float = DEFAULT_CUTOFF_HZ,
) -> BaselineSet:
    """Pristine reference set fit from training pristine samples."""
    baseline, _ = _fit(pristine_train, band, None, order, cutoff_hz)
    return baseline


def fit_normalization(
    train_samples: list[RawSample],
    band: BandSelection,
    fwd_paths: ForwardPathSet | np.ndarray | None = None,
    order: int = DEFAULT_FILTER_ORDER,
    cutoff_hz: float = DEFAULT_CUTOFF_HZ,
) -> NormalizationStats:
    """Amplitude statistics and E_max over the training partition only."""
    fwd_indices = None
    if fwd_paths is not None:
        fwd_indices = np.asarray(
            fwd_paths.indices if isinstance(fwd_paths, ForwardPathSet) else fwd_paths, dtype=int
        )
    _, stats = _fit(train_samples, band, fwd_indices, order, cutoff_hz)
    return stats


@dataclass
class PreprocessModel:
    """Fitted preprocessing state, applied identically to every partition."""

    band: BandSelection
    baseline: BaselineSet
    stats: NormalizationStats
    fwd_indices: np.ndarray
    filter_order: int = DEFAULT_FILTER_ORDER
    cutoff_hz: float = DEFAULT_CUTOFF_HZ

    @classmethod
    def fit(
        cls,
        train_samples: list[RawSample],
        band: BandSelection,
        fwd_paths: ForwardPathSet,
        filter_order: int = DEFAULT_FILTER_ORDER,
        cutoff_hz: float = DEFAULT_CUTOFF_HZ,
    ) -> "PreprocessModel":
        fwd_indices = np.asarray(fwd_paths.indices, dtype=int)
        baseline, stats = _fit(train_samples, band, fwd_indices, filter_order, cutoff_hz)
        return cls(
            band=band,
            baseline=baseline,
            stats=stats,
            fwd_indices=fwd_indices,
            filter_order=filter_order,
            cutoff_hz=cutoff_hz,
        )

    def descriptor(self, sample: RawSample) -> SpectralDescriptor:
        filtered = highpass(
            sample.signals, sample.sampling_rate_hz, self.filter_order, self.cutoff_hz
        )
        diff = differential(filtered, self.baseline.mean_signals)
        return spectral_descriptor(diff, self.band, self.stats)

    def energy_target(self, sample: RawSample) -> EnergyTarget:
        desc = self.descriptor(sample)
        return energy_deviation(
            desc.amplitudes,
            self.baseline.mean_abs_amplitudes,
            self.stats.e_max,
            self.fwd_indices,
        )

    def apply(self, sample: RawSample) -> tuple[np.ndarray, np.ndarray]:
        """(descriptor matrix (n_paths, 2K), energy target (|P_f|,))."""
        desc = self.descriptor(sample)
        target = energy_deviation(
            desc.amplitudes,
            self.baseline.mean_abs_amplitudes,
            self.stats.e_max,
            self.fwd_indices,
        )
        return desc.matrix, target.values

    def save(self, path) -> None:
        np.savez_compressed(
            path,
            bin_indices=self.band.bin_indices,
            frequencies_hz=self.band.frequencies_hz,
            n_time=self.band.n_time,
            sampling_rate_hz=self.band.sampling_rate_hz,
            mean_signals=self.baseline.mean_signals,
            mean_abs_amplitudes=self.baseline.mean_abs_amplitudes,
            amp_mean=self.stats.amp_mean,
            amp_std=self.stats.amp_std,
            e_max=self.stats.e_max,
            fwd_indices=self.fwd_indices,
            filter_order=self.filter_order,
            cutoff_hz=self.cutoff_hz,
        )

    @classmethod
    def load(cls, path) -> "PreprocessModel":
        with np.load(path) as z:
            band = BandSelection(
                bin_indices=z["bin_indices"],
                frequencies_hz=z["frequencies_hz"],
                n_time=int(z["n_time"]),
                sampling_rate_hz=float(z["sampling_rate_hz"]),
            )
            baseline = BaselineSet(
                mean_signals=z["mean_signals"],
                mean_abs_amplitudes=z["mean_abs_amplitudes"],
            )
            stats = NormalizationStats(
                amp_mean=z["amp_mean"], amp_std=z["amp_std"], e_max=float(z["e_max"])
            )
            return cls(
                band=band,
                baseline=baseline,
                stats=stats,
                fwd_indices=z["fwd_indices"],
                filter_order=int(z["filter_order"]),
                cutoff_hz=float(z["cutoff_hz"]),
            )
