"""Synthetic pseudo-speech / noise corpus and manifest files.

Manifests are UTF-8 text, one tab-separated record per line:

* training manifests: ``role<TAB>path`` with role ``speech`` or ``outlier``;
* pair manifests: ``reference<TAB>noisy<TAB>noise<TAB>snr_db`` and, for
  evaluation, an optional fifth ``enhanced`` column.

Relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signal import AudioClip, StftConfig, mix_at_snr, power_frames, read_wav, stft, write_wav

ROLES = ("speech", "outlier")
NOISE_KINDS = ("white", "lowpass")


@dataclass
class SynthConfig:
    sample_rate: int = 16000
    clip_seconds: float = 2.0
    n_train: int = 150
    n_valid: int = 30
    n_test: int = 20
    outlier_fraction: float = 0.2
    test_snrs: tuple = (0.0,)
    noise_kinds: tuple = NOISE_KINDS
    seed: int = 0


def pseudo_speech(n_samples, sample_rate, rng, floor_db=45.0) -> np.ndarray:
    """Voiced syllables separated by short pauses.

    Each syllable has a fundamental drawn from 80-300 Hz, 3-8 harmonics with
    1/k amplitudes and a smooth random envelope. A faint white background at
    ``floor_db`` below the voiced RMS stands in for a recording noise floor.
    """
    t_all = np.arange(n_samples) / sample_rate
    out = np.zeros(n_samples)
    pos = int(rng.uniform(0.02, 0.15) * sample_rate)
    while pos < n_samples:
        length = int(rng.uniform(0.12, 0.40) * sample_rate)
        seg = slice(pos, min(pos + length, n_samples))
        t = t_all[seg] - t_all[pos]
        n = len(t)
        phase = 2 * np.pi * rng.uniform(80.0, 300.0) * t
        n_harm = int(rng.integers(3, 9))
        voiced = sum(np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k for k in range(1, n_harm + 1))
        # smooth envelope: Hann-shaped syllable times a slow random modulation
        shape = np.sin(np.pi * (np.arange(n) + 0.5) / length) ** 2
        n_knots = max(2, int(n / sample_rate * 8) + 2)
        knots = rng.uniform(0.4, 1.0, n_knots)
        mod = np.interp(np.linspace(0, n_knots - 1, n), np.arange(n_knots), knots)
        out[seg] += rng.uniform(0.3, 1.0) * shape * mod * voiced
        pos += length + int(rng.uniform(0.03, 0.20) * sample_rate)
    voiced_rms = np.sqrt(np.mean(out[out != 0] ** 2)) if np.any(out) else 1.0
    out += voiced_rms * 10 ** (-floor_db / 20) * rng.standard_normal(n_samples)
    return out * (rng.uniform(0.3, 0.6) / np.max(np.abs(out)))


def noise_signal(kind, n_samples, rng, level=0.1) -> np.ndarray:
    white = rng.standard_normal(n_samples)
    if kind == "white":
        x = white
    elif kind == "lowpass":
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n_samples)
        cutoff = rng.uniform(0.01, 0.05)  # cycles per sample
        x = np.fft.irfft(spec / (1.0 + (freqs / cutoff) ** 2), n=n_samples)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return level * x / np.sqrt(np.mean(x ** 2))


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def read_manifest(path):
    """Return ``(role, Path)`` entries of a training manifest."""
    path = Path(path)
    base = path.parent
    entries = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2 or fields[0] not in ROLES:
            raise ValueError(f"{path}:{n}: expected 'role<TAB>path' with role in {ROLES}")
        entries.append((fields[0], _resolve(base, fields[1])))
    if not entries:
        raise ValueError(f"{path}: manifest is empty")
    return entries


def write_manifest(path, entries):
    lines = [f"{role}\t{p}" for role, p in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pairs(path, enhanced_dir=None):
    """Return ``(reference, noisy, enhanced, noise, snr)`` tuples; ``enhanced`` may be None."""
    path = Path(path)
    base = path.parent
    pairs = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) not in (4, 5):
            raise ValueError(f"{path}:{n}: expected reference, noisy, noise, snr[, enhanced]")
        ref, noisy = _resolve(base, fields[0]), _resolve(base, fields[1])
        enhanced = _resolve(base, fields[4]) if len(fields) == 5 else None
        if enhanced_dir is not None:
            enhanced = Path(enhanced_dir) / noisy.name
        pairs.append((ref, noisy, enhanced, fields[2], fields[3]))
    return pairs


def load_power_frames(paths, config: StftConfig = StftConfig(), sample_rate=16000) -> np.ndarray:
    """Stack the power-spectrogram frames (T x F) of several WAV files."""
    frames = [power_frames(stft(read_wav(p, sample_rate), config)).T for p in paths]
    return np.concatenate(frames, axis=0)


def synthesize(out_dir, config: SynthConfig = SynthConfig(), stft_config: StftConfig = StftConfig()):
    """Write the corpus and its manifests under ``out_dir``; returns manifest paths."""
    out = Path(out_dir)
    for sub in ("train", "valid", "test", "outlier", "noise", "mix"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    n_samples = int(round(config.clip_seconds * config.sample_rate))
    if n_samples < 4 * stft_config.window_len:
        raise ValueError("clips must be at least four windows long")
    sr = config.sample_rate
    root = np.random.SeedSequence(config.seed)
    s_train, s_valid, s_test, s_out, s_noise, s_mix = root.spawn(6)

    def speech_set(name, count, seq):
        rng = np.random.default_rng(seq)
        paths = []
        for i in range(count):
            p = Path(name) / f"speech_{i:04d}.wav"
            write_wav(AudioClip(pseudo_speech(n_samples, sr, rng), sr), out / p)
            paths.append(p)
        return paths

    train = speech_set("train", config.n_train, s_train)
    valid = speech_set("valid", config.n_valid, s_valid)
    test = speech_set("test", config.n_test, s_test)

    # outliers make up `outlier_fraction` of the contaminated manifest
    n_out = int(round(config.outlier_fraction * config.n_train / (1.0 - config.outlier_fraction)))
    rng = np.random.default_rng(s_out)
    outliers = []
    for i in range(n_out):
        kind = config.noise_kinds[i % len(config.noise_kinds)]
        p = Path("outlier") / f"{kind}_{i:04d}.wav"
        write_wav(AudioClip(noise_signal(kind, n_samples, rng), sr), out / p)
        outliers.append(p)

    rng = np.random.default_rng(s_noise)
    noises = {}
    for kind in config.noise_kinds:
        p = Path("noise") / f"{kind}.wav"
        write_wav(AudioClip(noise_signal(kind, 4 * n_samples, rng), sr), out / p)
        noises[kind] = p

    mix_seeds = np.random.default_rng(s_mix)
    pair_lines = []
    for kind in config.noise_kinds:
        noise = read_wav(out / noises[kind], sr)
        for snr in config.test_snrs:
            for i, ref in enumerate(test):
                clean = read_wav(out / ref, sr)
                mix = mix_at_snr(clean, noise, snr, seed=int(mix_seeds.integers(2 ** 31)))
                p = Path("mix") / f"mix_{kind}_{snr:+g}dB_{i:04d}.wav"
                write_wav(mix, out / p)
                pair_lines.append(f"{ref}\t{p}\t{kind}\t{snr:g}")

    manifests = {
        "train": out / "train.tsv",
        "train_outlier": out / "train_outlier.tsv",
        "valid": out / "valid.tsv",
        "test_pairs": out / "test_pairs.tsv",
    }
    write_manifest(manifests["train"], [("speech", p) for p in train])
    write_manifest(manifests["train_outlier"],
                   [("speech", p) for p in train] + [("outlier", p) for p in outliers])
    write_manifest(manifests["valid"], [("speech", p) for p in valid])
    manifests["test_pairs"].write_text("\n".join(pair_lines) + "\n", encoding="utf-8")
    return manifests
