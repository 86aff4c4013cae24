"""39-dimensional MFCC frontend for 16 kHz PCM16 audio.

Recipe: pre-emphasis 0.97, 25 ms Hamming window, 10 ms shift, 512-point
FFT, 26 mel filters, 13 cepstra with C0 replaced by log frame energy, then
delta and delta-delta over +-2 frames.
"""

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct, rfft

from .corpus import FeatureSequence
from .errors import CorpusIOError, FormatError, ValidationError

SAMPLE_RATE = 16000
_LOG_FLOOR = 1e-10


class UnsupportedRateError(ValidationError):
    pass


@dataclass(frozen=True)
class MFCCConfig:
    sample_rate: int = SAMPLE_RATE
    window_ms: float = 25.0
    shift_ms: float = 10.0
    preemphasis: float = 0.97
    n_fft: int = 512
    n_filters: int = 26
    n_ceps: int = 13
    delta_window: int = 2

    @property
    def window(self):
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def shift(self):
        return int(round(self.sample_rate * self.shift_ms / 1000.0))


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + hz / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (mel / 2595.0) - 1.0)


def mel_filterbank(n_filters, n_fft, sample_rate):
    """Triangular filters on the mel scale, shape (n_filters, n_fft//2 + 1)."""
    n_bins = n_fft // 2 + 1
    mels = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_filters + 2)
    edges = _mel_to_hz(mels)
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    bank = np.zeros((n_filters, n_bins))
    for i in range(n_filters):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        bank[i] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


def deltas(feats, width=2):
    """Regression deltas over +-width frames with edge replication."""
    T = feats.shape[0]
    padded = np.pad(feats, ((width, width), (0, 0)), mode="edge")
    denom = 2.0 * sum(k * k for k in range(1, width + 1))
    out = np.zeros_like(feats)
    for k in range(1, width + 1):
        out += k * (padded[width + k:width + k + T] - padded[width - k:width - k + T])
    return out / denom


def extract_mfcc(samples, config=None, sample_rate=SAMPLE_RATE, utterance_id="utt"):
    config = config or MFCCConfig()
    if sample_rate != config.sample_rate or sample_rate != SAMPLE_RATE:
        raise UnsupportedRateError(f"only 16 kHz input is supported, got {sample_rate} Hz")
    x = np.asarray(samples, dtype=np.float64).ravel()
    win, shift = config.window, config.shift
    if x.size < win:
        raise ValidationError(f"signal too short: {x.size} samples < window {win}")

    emph = np.empty_like(x)
    emph[0] = x[0]
    emph[1:] = x[1:] - config.preemphasis * x[:-1]

    T = (x.size - win) // shift + 1
    idx = np.arange(win)[None, :] + shift * np.arange(T)[:, None]
    frames = emph[idx]
    log_energy = np.log(np.maximum(np.sum(frames ** 2, axis=1), _LOG_FLOOR))

    spec = np.abs(rfft(frames * np.hamming(win), n=config.n_fft, axis=1)) ** 2 / config.n_fft
    fbank = spec @ mel_filterbank(config.n_filters, config.n_fft, config.sample_rate).T
    ceps = dct(np.log(np.maximum(fbank, _LOG_FLOOR)), type=2, axis=1, norm="ortho")
    ceps = ceps[:, :config.n_ceps]
    ceps[:, 0] = log_energy

    d1 = deltas(ceps, config.delta_window)
    d2 = deltas(d1, config.delta_window)
    return FeatureSequence(utterance_id, np.hstack([ceps, d1, d2]), frame_period_ms=config.shift_ms)


def read_wav(path):
    """Return (samples as float64 in PCM16 units, sample rate)."""
    path = Path(path)
    if not path.exists():
        raise CorpusIOError(path)
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
                raise FormatError(f"{path}: expected mono PCM16 WAV")
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise FormatError(f"{path}: {exc}") from None
    return np.frombuffer(raw, dtype="<i2").astype(np.float64), rate


def wav_to_features(path, config=None):
    samples, rate = read_wav(path)
    return extract_mfcc(samples, config, sample_rate=rate, utterance_id=Path(path).stem)
