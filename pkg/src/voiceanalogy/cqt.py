"""Constant-Q analysis/synthesis for the voice-conversion pipeline.

Log-spaced filterbank of Hann-windowed complex exponentials, forward
transform by direct per-bin inner products, log-compressed magnitude
spectrograms, Griffin-Lim-style iterative inversion back to audio, and a
simple fundamental-frequency estimator used for evaluation.
"""

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_GAMMA = 100.0


class CqtConfigError(ValueError):
    pass


class SignalLengthError(ValueError):
    pass


@dataclass(frozen=True)
class CqtConfig:
    sample_rate: int = 8000
    f_min: float = 110.0
    bins_per_octave: int = 12
    n_bins: int = 48
    hop: int = 64
    q_scale: float = 1.0

    def __post_init__(self):
        if self.f_min <= 0 or self.hop <= 0 or self.bins_per_octave <= 0 or self.n_bins <= 0:
            raise CqtConfigError("f_min, hop, bins_per_octave and n_bins must be positive")
        top = self.center_frequency(self.n_bins - 1)
        if top >= self.sample_rate / 2:
            raise CqtConfigError(
                f"top bin at {top:.1f} Hz reaches Nyquist ({self.sample_rate / 2:.1f} Hz)")

    def center_frequency(self, k):
        return self.f_min * 2.0 ** (k / self.bins_per_octave)

    @property
    def q_factor(self):
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)


@dataclass
class Filterbank:
    config: CqtConfig
    center_frequencies: np.ndarray
    window_lengths: np.ndarray
    kernels: list  # per-bin complex arrays, unit L1 norm

    @property
    def max_window(self):
        return int(self.window_lengths.max())


@dataclass
class Spectrogram:
    """K x T grid of log-compressed CQT magnitudes."""

    values: np.ndarray
    config: CqtConfig
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def bins(self):
        return self.values.shape[0]

    @property
    def frames(self):
        return self.values.shape[1]


def design_filterbank(config):
    q = config.q_factor
    freqs = np.array([config.center_frequency(k) for k in range(config.n_bins)])
    lengths = np.array([int(math.ceil(config.q_scale * q * config.sample_rate / f))
                        for f in freqs])
    kernels = []
    for f, length in zip(freqs, lengths):
        n = np.arange(length) - (length - 1) / 2.0
        window = np.hanning(length)
        kern = window * np.exp(2j * np.pi * f * n / config.sample_rate)
        kern /= np.abs(kern).sum()
        kernels.append(kern)
    return Filterbank(config, freqs, lengths, kernels)


def n_frames(signal_length, hop):
    return signal_length // hop + 1


def forward_cqt(signal, filterbank):
    """Complex K x T grid; entry (k, t) is the inner product of kernel k
    against the window centered at t*hop (zero-padded at the edges)."""
    signal = np.asarray(signal, dtype=np.float64)
    cfg = filterbank.config
    if signal.size < filterbank.max_window:
        raise SignalLengthError(
            f"signal of {signal.size} samples shorter than longest kernel "
            f"({filterbank.max_window} samples)")
    t_frames = n_frames(signal.size, cfg.hop)
    out = np.empty((cfg.n_bins, t_frames), dtype=np.complex128)
    centers = np.arange(t_frames) * cfg.hop
    for k, kern in enumerate(filterbank.kernels):
        length = kern.size
        pad = length  # enough margin on both sides for centered windows
        padded = np.concatenate([np.zeros(pad), signal, np.zeros(pad)])
        starts = centers + pad - (length - 1) // 2
        windows = np.lib.stride_tricks.sliding_window_view(padded, length)[starts]
        out[k] = windows @ np.conj(kern)
    return out


def compress(grid, config, gamma=DEFAULT_GAMMA):
    """Magnitude compression: log(1 + gamma*|z|)."""
    return Spectrogram(np.log1p(gamma * np.abs(grid)), config, gamma)


def decompress(values, gamma=DEFAULT_GAMMA):
    return np.expm1(np.maximum(values, 0.0)) / gamma


def _adjoint_cqt(grid, filterbank, signal_length):
    """Exact adjoint of forward_cqt under the real inner product."""
    cfg = filterbank.config
    t_frames = grid.shape[1]
    centers = np.arange(t_frames) * cfg.hop
    pad = filterbank.max_window
    x = np.zeros(signal_length + 2 * pad)
    for k, kern in enumerate(filterbank.kernels):
        length = kern.size
        frames = np.real(np.outer(grid[k], kern))  # t_frames x length
        starts = centers + pad - (length - 1) // 2
        for t, s in enumerate(starts):
            x[s:s + length] += frames[t]
    return x[pad:pad + signal_length]


def _lsq_synthesize(grid, filterbank, signal_length, x0, cg_iterations):
    """Least-squares audio for a complex grid: conjugate-gradient solve of
    the normal equations, warm-started from the previous iterate."""

    def normal_op(x):
        return _adjoint_cqt(forward_cqt(x, filterbank), filterbank, signal_length)

    b = _adjoint_cqt(grid, filterbank, signal_length)
    x = x0
    r = b - normal_op(x)
    p = r.copy()
    rs = r @ r
    for _ in range(cg_iterations):
        np_ = normal_op(p)
        denom = p @ np_
        if denom <= 0:
            break
        alpha = rs / denom
        x = x + alpha * p
        r = r - alpha * np_
        rs_next = r @ r
        if rs_next < 1e-20 * rs:
            break
        p = r + (rs_next / rs) * p
        rs = rs_next
    return x


def inverse_cqt(spec, filterbank, iterations=50, signal_length=None, seed=0,
                cg_iterations=6, return_errors=False):
    """Iterative phase recovery from a magnitude spectrogram.

    Alternates least-squares synthesis with re-analysis, replacing
    magnitudes by the targets each round. Keeps the best iterate seen, so
    the reported error sequence is non-increasing by construction.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    cfg = filterbank.config
    target = decompress(spec.values, spec.gamma)
    t_frames = target.shape[1]
    if signal_length is None:
        signal_length = (t_frames - 1) * cfg.hop + cfg.hop - 1
        signal_length = max(signal_length, filterbank.max_window)
    target_norm = np.linalg.norm(target)
    if target_norm == 0.0:
        zeros = np.zeros(signal_length)
        return (zeros, [0.0] * iterations) if return_errors else zeros
    rng = np.random.default_rng(seed)
    phases = np.exp(2j * np.pi * rng.random(target.shape))
    grid = target * phases
    audio = np.zeros(signal_length)
    best_audio = audio
    best_error = np.inf
    errors = []
    for _ in range(iterations):
        audio = _lsq_synthesize(grid, filterbank, signal_length, audio, cg_iterations)
        reanalysis = forward_cqt(audio, filterbank)
        err = np.linalg.norm(np.abs(reanalysis) - target) / target_norm
        if err < best_error:
            best_error = err
            best_audio = audio
        errors.append(best_error)
        mags = np.abs(reanalysis)
        grid = target * reanalysis / np.maximum(mags, 1e-300)
    return (best_audio, errors) if return_errors else best_audio


def estimate_f0(spec, silence_threshold=1e-6, peak_fraction=0.5):
    """Median across frames of the lowest strong local-maximum bin, in Hz.

    Returns None for silent input.
    """
    values = spec.values
    if values.shape[1] < 1:
        raise ValueError("spectrogram has no frames")
    cfg = spec.config
    bins = []
    for t in range(values.shape[1]):
        frame = values[:, t]
        peak = frame.max()
        if peak < silence_threshold:
            continue
        for k in range(frame.size):
            lo = frame[k - 1] if k > 0 else -np.inf
            hi = frame[k + 1] if k < frame.size - 1 else -np.inf
            if frame[k] > lo and frame[k] >= hi and frame[k] >= peak_fraction * peak:
                bins.append(k)
                break
    if not bins:
        return None
    median_bin = int(np.median(bins))
    return cfg.center_frequency(median_bin)


def frequency_to_bin(freq, config):
    """Nearest filterbank bin for a frequency in Hz."""
    return int(round(config.bins_per_octave * math.log2(freq / config.f_min)))
