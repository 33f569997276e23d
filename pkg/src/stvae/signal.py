"""Audio I/O and the sine-window STFT / iSTFT pair.

Frames are taken without zero-padding: frame ``t`` covers samples
``[t*hop, t*hop + window_len)`` and the trailing samples that do not fill a
whole frame are dropped. Overlap-add resynthesis is therefore exact only on
the interior region ``[window_len, N - window_len)``; see :func:`interior`.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np

PCM16_SCALE = 32768.0


class AudioFormatError(ValueError):
    """Raised for WAV files outside the supported PCM16 mono subset."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip expects a 1-D (mono) signal")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 1024
    hop: int = 256
    window_kind: str = "sine"

    def __post_init__(self):
        if self.window_kind != "sine":
            raise ValueError(f"unsupported window kind {self.window_kind!r}")
        if not 0 < self.hop <= self.window_len:
            raise ValueError("hop must satisfy 0 < hop <= window_len")
        if self.window_len % self.hop:
            raise ValueError("hop must divide window_len")
        if self.window_len % 2:
            raise ValueError("window_len must be even")

    @property
    def n_freq(self) -> int:
        return self.window_len // 2 + 1

    def window(self) -> np.ndarray:
        n = np.arange(self.window_len)
        return np.sin(np.pi * (n + 0.5) / self.window_len)

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.window_len) // self.hop + 1


@dataclass
class Spectrogram:
    """Complex STFT coefficients, frequency along rows and frames along columns."""

    data: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 2:
            raise ValueError("spectrogram data must be a 2-D F x T matrix")
        if self.data.shape[0] != self.config.n_freq:
            raise ValueError(
                f"spectrogram has {self.data.shape[0]} rows, config implies {self.config.n_freq}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("spectrogram entries must be finite")

    @property
    def shape(self):
        return self.data.shape


def read_wav(path, sample_rate=None) -> AudioClip:
    """Read a PCM16 mono WAV file; sample ``v`` maps to ``v / 32768``.

    If ``sample_rate`` is given, a file at any other rate is rejected rather
    than resampled.
    """
    try:
        with wave.open(str(path), "rb") as f:
            n_channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            comp = f.getcomptype()
            raw = f.readframes(f.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    if comp != "NONE":
        raise AudioFormatError(f"{path}: compressed WAV ({comp}) is not supported")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
    if n_channels != 1:
        raise AudioFormatError(f"{path}: expected mono audio, got {n_channels} channels")
    if sample_rate is not None and rate != sample_rate:
        raise AudioFormatError(
            f"{path}: sample rate {rate} Hz does not match configured {sample_rate} Hz"
        )
    ints = np.frombuffer(raw, dtype="<i2")
    return AudioClip(ints.astype(np.float64) / PCM16_SCALE, rate)


def to_pcm16(samples) -> np.ndarray:
    """Scale to 16-bit integers, saturating outside [-1, 1)."""
    scaled = np.round(np.asarray(samples, dtype=np.float64) * PCM16_SCALE)
    return np.clip(scaled, -32768, 32767).astype("<i2")


def write_wav(clip: AudioClip, path) -> None:
    ints = to_pcm16(clip.samples)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(clip.sample_rate))
        f.writeframes(ints.tobytes())


def frame_signal(x: np.ndarray, config: StftConfig) -> np.ndarray:
    """Return the T x window_len matrix of (unwindowed) interior frames."""
    n_frames = config.n_frames(len(x))
    idx = np.arange(config.window_len)[None, :] + config.hop * np.arange(n_frames)[:, None]
    return x[idx]


def stft(clip: AudioClip, config: StftConfig = StftConfig()) -> Spectrogram:
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if len(x) < config.window_len:
        raise ValueError(
            f"signal has {len(x)} samples, shorter than one window ({config.window_len})"
        )
    frames = frame_signal(x, config) * config.window()
    return Spectrogram(np.fft.rfft(frames, n=config.window_len, axis=1).T, config)


def overlap_add_norm(config: StftConfig) -> float:
    """Constant value of the overlapped squared window, or raise if it is not constant."""
    w2 = config.window() ** 2
    acc = w2.reshape(-1, config.hop).sum(axis=0)
    if config.window_len == config.hop or not np.allclose(acc, acc[0], rtol=1e-12, atol=0.0):
        raise ValueError(
            f"window_len={config.window_len}, hop={config.hop} does not satisfy constant overlap-add"
        )
    return float(acc.mean())


def istft(spec: Spectrogram, sample_rate: int = 16000) -> AudioClip:
    """Weighted overlap-add synthesis with the sine window.

    Returns ``(T - 1) * hop + window_len`` samples. Only the interior region
    reproduces the analysed signal; the first and last ``window_len`` samples
    are missing overlap contributions.
    """
    config = spec.config
    norm = overlap_add_norm(config)
    frames = np.fft.irfft(spec.data.T, n=config.window_len, axis=1) * config.window()
    n_frames = frames.shape[0]
    out = np.zeros((n_frames - 1) * config.hop + config.window_len)
    for t in range(n_frames):
        start = t * config.hop
        out[start:start + config.window_len] += frames[t]
    return AudioClip(out / norm, sample_rate)


def interior(x, config: StftConfig = StftConfig()) -> np.ndarray:
    """Crop a signal to ``[window_len, N - window_len)``."""
    x = x.samples if isinstance(x, AudioClip) else np.asarray(x)
    if len(x) <= 2 * config.window_len:
        raise ValueError("signal too short to have an interior region")
    return x[config.window_len:len(x) - config.window_len]


def power_frames(spec) -> np.ndarray:
    data = spec.data if isinstance(spec, Spectrogram) else np.asarray(spec)
    return data.real ** 2 + data.imag ** 2


def mix_at_snr(speech: AudioClip, noise: AudioClip, snr_db: float, seed: int = 0) -> AudioClip:
    """Add ``noise`` to ``speech`` scaled to the requested SNR.

    A random excerpt of the noise (chosen from ``seed``) is used; noise shorter
    than the speech is looped first.
    """
    s = speech.samples
    n = noise.samples
    p_speech = np.mean(s ** 2)
    if p_speech == 0:
        raise ValueError("speech signal has zero power; SNR is undefined")
    if len(n) == 0 or not np.any(n):
        raise ValueError("noise signal has zero power")
    rng = np.random.default_rng(seed)
    if len(n) < len(s):
        n = np.tile(n, -(-len(s) // len(n)))
    offset = int(rng.integers(0, len(n) - len(s) + 1))
    n = n[offset:offset + len(s)]
    p_noise = np.mean(n ** 2)
    if p_noise == 0:
        raise ValueError("selected noise excerpt has zero power")
    gain = np.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0)))
    return AudioClip(s + gain * n, speech.sample_rate)
