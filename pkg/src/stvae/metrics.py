"""SI-SDR and reconstruction SNR, plus corpus-level reporting.

A perfect estimate yields ``math.inf``; such values are excluded from means
and medians and counted separately in the aggregate rows. A residual whose
energy is within rounding error of zero (below ``ZERO_RESIDUAL`` times the
signal energy, about -299 dB) counts as perfect.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .signal import read_wav

ZERO_RESIDUAL = (8 * np.finfo(np.float64).eps) ** 2


def si_sdr(reference, estimate) -> float:
    r = np.asarray(reference, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if r.shape != e.shape:
        raise ValueError(f"length mismatch: reference {r.shape}, estimate {e.shape}")
    energy = np.dot(r, r)
    if energy == 0:
        raise ValueError("reference signal is all zeros")
    target = (np.dot(e, r) / energy) * r
    residual = target - e
    noise = np.dot(residual, residual)
    if not np.any(target):
        return -math.inf  # no component along the reference at all
    if noise <= ZERO_RESIDUAL * np.dot(target, target):
        return math.inf
    return float(10 * np.log10(np.dot(target, target) / noise))


def reconstruction_snr(reference, estimate) -> float:
    """``10 log10(sum ref^2 / sum (ref - est)^2)`` over all entries.

    Spectrogram SNR passes magnitude spectrograms; :func:`time_domain_snr`
    is the waveform variant.
    """
    r = np.asarray(reference, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if r.shape != e.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {e.shape}")
    signal = np.sum(r ** 2)
    if signal == 0:
        raise ValueError("reference is all zeros")
    err = np.sum((r - e) ** 2)
    if err <= ZERO_RESIDUAL * signal:
        return math.inf
    return float(10 * np.log10(signal / err))


def spectrogram_snr(reference_spec, estimate_spec) -> float:
    return reconstruction_snr(np.abs(reference_spec.data), np.abs(estimate_spec.data))


def time_domain_snr(reference, estimate) -> float:
    return reconstruction_snr(reference, estimate)


def center_align(*signals):
    """Crop every signal symmetrically to the shortest length."""
    n = min(len(s) for s in signals)
    out = []
    for s in signals:
        extra = len(s) - n
        if extra % 2:
            raise ValueError(f"cannot center-align lengths {len(s)} and {n}")
        out.append(np.asarray(s)[extra // 2:extra // 2 + n])
    return out


@dataclass
class PairRecord:
    name: str
    noise: str
    snr: str
    input_si_sdr: float
    output_si_sdr: float

    @property
    def improvement(self):
        return self.output_si_sdr - self.input_si_sdr


@dataclass
class Aggregate:
    count: int
    n_infinite: int
    mean: float
    median: float


def aggregate(values) -> Aggregate:
    values = list(values)
    finite = [v for v in values if math.isfinite(v)]
    if finite:
        return Aggregate(len(values), len(values) - len(finite),
                         float(np.mean(finite)), float(np.median(finite)))
    return Aggregate(len(values), len(values), math.nan, math.nan)


@dataclass
class MetricReport:
    records: list = field(default_factory=list)

    def groups(self):
        keys = sorted({(r.noise, r.snr) for r in self.records})
        return {k: [r for r in self.records if (r.noise, r.snr) == k] for k in keys}

    def summary(self, metric):
        return aggregate(getattr(r, metric) for r in self.records)

    def to_text(self) -> str:
        """Tab-separated report.

        One ``utt`` line per pair (name, noise, snr, input, output, improvement),
        then ``agg`` lines per (noise, snr) group and an overall ``all`` group,
        each with metric, count, n_inf, mean, median.
        """
        lines = ["#kind\tname\tnoise\tsnr\tinput_si_sdr\toutput_si_sdr\timprovement"]
        for r in self.records:
            lines.append(f"utt\t{r.name}\t{r.noise}\t{r.snr}\t{_fmt(r.input_si_sdr)}\t"
                         f"{_fmt(r.output_si_sdr)}\t{_fmt(r.improvement)}")
        lines.append("#kind\tnoise\tsnr\tmetric\tcount\tn_inf\tmean\tmedian")
        groups = list(self.groups().items()) + [(("all", "all"), self.records)]
        for (noise, snr), recs in groups:
            for metric in ("input_si_sdr", "output_si_sdr", "improvement"):
                a = aggregate(getattr(r, metric) for r in recs)
                lines.append(f"agg\t{noise}\t{snr}\t{metric}\t{a.count}\t{a.n_infinite}\t"
                             f"{_fmt(a.mean)}\t{_fmt(a.median)}")
        return "\n".join(lines) + "\n"


def _fmt(x):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.6f}"


def offset_align(reference, noisy, enhanced, offset):
    """Crop reference and noisy to ``[offset, offset + len(enhanced))``."""
    n = len(enhanced)
    if offset + n > min(len(reference), len(noisy)):
        raise ValueError(f"estimate of length {n} at offset {offset} overruns the reference")
    return reference[offset:offset + n], noisy[offset:offset + n], enhanced


def evaluate_corpus(pairs, offset=None) -> MetricReport:
    """Evaluate ``(reference, noisy, enhanced, noise, snr)`` path tuples.

    An enhanced signal shorter than its reference is taken to start at sample
    ``offset`` of it (the window length for interior-only resynthesis); with
    ``offset=None`` all three are center-cropped to the shortest one.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs to evaluate")
    report = MetricReport()
    for ref_path, noisy_path, enh_path, noise, snr in pairs:
        ref, noisy, enh = (read_wav(p).samples for p in (ref_path, noisy_path, enh_path))
        if offset is not None and len(enh) < len(ref):
            ref, noisy, enh = offset_align(ref, noisy, enh, offset)
        else:
            ref, noisy, enh = center_align(ref, noisy, enh)
        name = Path(enh_path).name
        report.records.append(PairRecord(name, noise, snr, si_sdr(ref, noisy), si_sdr(ref, enh)))
    return report
