"""Framewise acoustic features and feature-matrix assembly.

Ten handcrafted channels (prosodic: F0, ENERGY, VPROB on 60 ms frames;
voice quality: JITTER, DJITTER, SHIMMER, HNR; spectral: SFLUX, SHARP;
temporal: ZCR on 20 ms frames) plus 13 MFCCs, all on a shared 10 ms hop
grid.  Unvoiced frames carry zeros in the F0 and voice-quality channels so
every channel stays dense for the CNN.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.fft import dct

from . import dsp, pitch
from .corpus import Waveform
from .dsp import Spectrum

logger = logging.getLogger(__name__)

PROSODIC_IDS = ("F0", "ENERGY", "VPROB")
VOICE_QUALITY_IDS = ("JITTER", "DJITTER", "SHIMMER", "HNR")
SPECTRAL_IDS = ("SFLUX", "SHARP")
TEMPORAL_IDS = ("ZCR",)
HANDCRAFTED_IDS = PROSODIC_IDS + VOICE_QUALITY_IDS + SPECTRAL_IDS + TEMPORAL_IDS
MFCC_IDS = tuple(f"MFCC_{i}" for i in range(13))
ALL_IDS = HANDCRAFTED_IDS + MFCC_IDS

PROSODIC_FRAME_MS = 60.0
OTHER_FRAME_MS = 20.0
MIN_WAVEFORM_MS = 100.0

FEATURESET_NAMES = {
    "handcrafted": HANDCRAFTED_IDS,
    "mfcc": MFCC_IDS,
    "all": ALL_IDS,
}

__all__ = [
    "HANDCRAFTED_IDS", "MFCC_IDS", "ALL_IDS", "FEATURESET_NAMES",
    "FeatureMatrix", "NormStats", "MfccConfig", "DEFAULT_MFCC",
    "resolve_featureset", "energy", "zcr", "jitter", "jitter_derivative",
    "shimmer", "hnr", "spectral_centroid", "sharpness", "spectral_flux",
    "mfcc", "mel_filterbank", "extract_matrix", "fit_norm", "apply_norm",
    "write_feature_csv",
]


def resolve_featureset(spec: str | Iterable[str]) -> tuple[str, ...]:
    """Named set ('handcrafted', 'mfcc', 'all') or explicit ids -> canonical order."""
    if isinstance(spec, str):
        name = spec.strip().lower()
        if name in FEATURESET_NAMES:
            return FEATURESET_NAMES[name]
        ids = [s.strip().upper() for s in spec.split(",") if s.strip()]
    else:
        ids = [str(s).strip().upper() for s in spec]
    unknown = [i for i in ids if i not in ALL_IDS]
    if unknown:
        raise ValueError(f"unknown feature ids {unknown}; valid ids: {', '.join(ALL_IDS)}")
    wanted = set(ids)
    if not wanted:
        raise ValueError("empty feature set")
    return tuple(i for i in ALL_IDS if i in wanted)


@dataclass(frozen=True)
class FeatureMatrix:
    """Channels x frames matrix on the shared 10 ms grid."""

    values: np.ndarray
    channel_ids: tuple[str, ...]
    hop_ms: float = dsp.HOP_MS
    source_id: str = ""

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]

    @property
    def duration_s(self) -> float:
        return self.num_frames * self.hop_ms / 1000.0

    def channels(self, ids: Sequence[str]) -> "FeatureMatrix":
        """Row subset in the order given."""
        index = {c: i for i, c in enumerate(self.channel_ids)}
        missing = [c for c in ids if c not in index]
        if missing:
            raise KeyError(f"channels not present: {missing}")
        rows = [index[c] for c in ids]
        return FeatureMatrix(values=self.values[rows], channel_ids=tuple(ids),
                             hop_ms=self.hop_ms, source_id=self.source_id)


@dataclass(frozen=True)
class NormStats:
    """Per-channel z-score statistics fitted on training data."""

    mean: np.ndarray
    std: np.ndarray  # floored at 1e-8
    channel_ids: tuple[str, ...]


# ---------------------------------------------------------------------------
# Scalar per-frame features

def energy(frame: np.ndarray) -> float:
    """Sum of squared amplitudes of the frame."""
    x = np.asarray(frame, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty frame")
    return float(np.dot(x, x))


def zcr(frame: np.ndarray, sample_rate_hz: int) -> float:
    """Sign changes per second; a zero sample defers to its neighbours."""
    x = np.asarray(frame, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty frame")
    crossings = _zero_crossings(x)
    return crossings / (x.size / sample_rate_hz)


def _zero_crossings(x: np.ndarray) -> int:
    nonzero = x[1:] != 0.0
    direct = (x[:-1] * x[1:] < 0.0) & nonzero
    count = int(np.count_nonzero(direct))
    if x.size >= 3:
        mid_zero = x[1:-1] == 0.0
        skipped = (x[:-2] * x[2:] < 0.0) & mid_zero
        count += int(np.count_nonzero(skipped))
    return count


def jitter(p: pitch.PeriodSequence) -> float:
    """Mean absolute successive period difference over the mean period."""
    t = np.asarray(p.periods_s, dtype=np.float64)
    if t.size < 3:
        raise pitch.TooFewPeriodsError("jitter needs at least 3 periods")
    mean_period = t.mean()
    if mean_period <= 0.0:
        return 0.0
    return float(np.mean(np.abs(np.diff(t))) / mean_period)


def jitter_derivative(p: pitch.PeriodSequence) -> float:
    """Mean absolute second period difference over the mean period."""
    t = np.asarray(p.periods_s, dtype=np.float64)
    if t.size < 4:
        raise pitch.TooFewPeriodsError("jitter derivative needs at least 4 periods")
    mean_period = t.mean()
    if mean_period <= 0.0:
        return 0.0
    first = np.abs(np.diff(t))
    return float(np.mean(np.abs(np.diff(first))) / mean_period)


def shimmer(p: pitch.PeriodSequence) -> float:
    """Mean absolute successive cycle-amplitude difference over the mean amplitude."""
    a = np.asarray(p.peak_amps, dtype=np.float64)
    if a.size < 3:
        raise pitch.TooFewPeriodsError("shimmer needs at least 3 periods")
    mean_amp = a.mean()
    if mean_amp <= 0.0:
        return 0.0
    return float(np.mean(np.abs(np.diff(a))) / mean_amp)


_HNR_CLAMP = (1e-4, 1e4)


def hnr(frame: np.ndarray, f0_hz: float, sample_rate_hz: int) -> float:
    """log10 harmonic-to-noise energy ratio via normalized autocorrelation.

    r at the pitch lag estimates harmonic_energy / total_energy, so the
    ratio r / (1 - r) is harmonic over noise energy; it is clamped to
    [1e-4, 1e4] before taking the log.
    """
    if f0_hz <= 0.0:
        raise pitch.UnvoicedFrameError("unvoiced frame (f0 = 0)")
    x = np.asarray(frame, dtype=np.float64)
    lag = int(round(sample_rate_hz / f0_hz))
    halo = max(1, int(round(0.04 * lag)))
    best = -1.0
    for dl in range(-halo, halo + 1):
        lg = lag + dl
        if lg < 1 or lg >= x.size - 1:
            continue
        a, b = x[:-lg], x[lg:]
        denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
        if denom > 0.0:
            best = max(best, float(np.dot(a, b) / denom))
    if best < 0.0:
        best = 0.0
    linear = best / max(1.0 - best, 1e-15)
    return float(np.log10(np.clip(linear, *_HNR_CLAMP)))


def spectral_centroid(spec: Spectrum) -> float:
    """Amplitude-weighted mean frequency (Hz) over bins 1..K/2; 0 if silent."""
    total = float(np.sum(spec.magnitudes))
    if total <= 0.0:
        return 0.0
    return float(np.sum(spec.frequencies * spec.magnitudes) / total)


def sharpness(spec: Spectrum) -> float:
    """Spectral centroid on the Bark scale (perceived sharpness); 0 if silent."""
    total = float(np.sum(spec.magnitudes))
    if total <= 0.0:
        return 0.0
    barks = dsp.hz_to_bark(spec.frequencies)
    return float(np.sum(barks * spec.magnitudes) / total)


def spectral_flux(spec: Spectrum, spec_prev: Spectrum) -> float:
    """Squared difference of successive L2-normalized spectra; in [0, 4]."""
    a, b = spec.magnitudes, spec_prev.magnitudes
    na = float(np.sqrt(np.dot(a, a)))
    nb = float(np.sqrt(np.dot(b, b)))
    if na <= 0.0 or nb <= 0.0:
        return 0.0
    d = a / na - b / nb
    return float(np.dot(d, d))


# ---------------------------------------------------------------------------
# MFCC

@dataclass(frozen=True)
class MfccConfig:
    num_coeffs: int = 13
    num_filters: int = 26
    pre_emphasis: float = 0.97
    f_lo_hz: float = 0.0
    f_hi_hz: float | None = None  # defaults to Nyquist
    log_floor: float = 1e-10


DEFAULT_MFCC = MfccConfig()

_mel_cache: dict[tuple, np.ndarray] = {}


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_filterbank(fft_size: int, sample_rate_hz: int,
                   cfg: MfccConfig = DEFAULT_MFCC) -> np.ndarray:
    """(num_filters, fft_size//2) triangular weights over bins 1..K/2.

    Triangles are linear in mel, so interior bins between the first and
    last filter centre see weights summing to exactly 1.
    """
    f_hi = cfg.f_hi_hz if cfg.f_hi_hz is not None else sample_rate_hz / 2.0
    key = (fft_size, sample_rate_hz, cfg.num_filters, cfg.f_lo_hz, f_hi)
    if key in _mel_cache:
        return _mel_cache[key]
    mel_pts = np.linspace(_hz_to_mel(cfg.f_lo_hz), _hz_to_mel(f_hi),
                          cfg.num_filters + 2)
    bin_mels = _hz_to_mel(np.arange(1, fft_size // 2 + 1)
                          * (sample_rate_hz / fft_size))
    bank = np.zeros((cfg.num_filters, fft_size // 2))
    for m in range(cfg.num_filters):
        lo, mid, hi = mel_pts[m], mel_pts[m + 1], mel_pts[m + 2]
        up = (bin_mels - lo) / (mid - lo)
        down = (hi - bin_mels) / (hi - mid)
        bank[m] = np.clip(np.minimum(up, down), 0.0, 1.0)
    _mel_cache[key] = bank
    return bank


def _mfcc_batch(frames: np.ndarray, sample_rate_hz: int,
                cfg: MfccConfig = DEFAULT_MFCC) -> np.ndarray:
    """(n, frame_len) -> (n, num_coeffs)."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    emphasized = np.concatenate(
        [frames[:, :1], frames[:, 1:] - cfg.pre_emphasis * frames[:, :-1]], axis=1)
    fft_size = dsp.default_fft_size(frames.shape[1])
    mags = dsp.magnitude_spectra(emphasized, fft_size, sample_rate_hz)
    bank = mel_filterbank(fft_size, sample_rate_hz, cfg)
    energies = mags ** 2 @ bank.T
    logs = np.log(np.maximum(energies, cfg.log_floor))
    return dct(logs, type=2, norm="ortho", axis=1)[:, :cfg.num_coeffs]


def mfcc(frame: np.ndarray, sample_rate_hz: int,
         cfg: MfccConfig = DEFAULT_MFCC) -> np.ndarray:
    """Mel-frequency cepstral coefficients 0..12 of one 20 ms frame."""
    return _mfcc_batch(frame, sample_rate_hz, cfg)[0]


# ---------------------------------------------------------------------------
# Matrix extraction

def extract_matrix(waveform: Waveform,
                   featureset: str | Iterable[str] = "handcrafted",
                   shs_cfg: pitch.ShsConfig = pitch.DEFAULT_SHS,
                   mfcc_cfg: MfccConfig = DEFAULT_MFCC,
                   source_id: str = "") -> FeatureMatrix:
    """Compute the requested channels for one utterance.

    Prosodic channels use 60 ms frames, everything else 20 ms, all on the
    common 10 ms hop; channels are trimmed to the shortest series length.
    """
    channels = resolve_featureset(featureset)
    sr = waveform.sample_rate_hz
    x = np.asarray(waveform.samples, dtype=np.float64)
    if x.size < dsp.samples_for_ms(MIN_WAVEFORM_MS, sr):
        raise ValueError(
            f"waveform too short: {x.size / sr * 1000.0:.1f} ms < {MIN_WAVEFORM_MS:g} ms")

    wanted = set(channels)
    vq = wanted & set(VOICE_QUALITY_IDS)
    need_pitch = bool(wanted & {"F0", "VPROB"} or vq)
    need60 = need_pitch or "ENERGY" in wanted
    need20 = bool(vq or wanted & {"SFLUX", "SHARP", "ZCR"}
                  or wanted & set(MFCC_IDS))

    lengths = []
    frames60 = frames20 = None
    if need60:
        frames60 = dsp.frame_signal(x, sr, PROSODIC_FRAME_MS)
        lengths.append(frames60.num_frames)
    if need20:
        frames20 = dsp.frame_signal(x, sr, OTHER_FRAME_MS)
        lengths.append(frames20.num_frames)
    num_frames = min(lengths)

    f0s = vprobs = None
    if need_pitch:
        k60 = dsp.default_fft_size(frames60.frame_len)
        mags60 = dsp.magnitude_spectra(frames60.frames[:num_frames], k60, sr)
        f0s, vprobs = pitch.shs_batch(mags60, k60, sr / k60, shs_cfg)
        voiced = vprobs >= shs_cfg.voicing_threshold
        f0s = np.where(voiced, f0s, 0.0)

    mags20 = None
    if wanted & {"SFLUX", "SHARP"}:
        k20 = dsp.default_fft_size(frames20.frame_len)
        mags20 = dsp.magnitude_spectra(frames20.frames[:num_frames], k20, sr)

    rows = {}
    if "F0" in wanted:
        rows["F0"] = f0s
    if "ENERGY" in wanted:
        fr = frames60.frames[:num_frames]
        rows["ENERGY"] = np.einsum("ij,ij->i", fr, fr)
    if "VPROB" in wanted:
        rows["VPROB"] = vprobs
    if vq:
        vq_rows = _voice_quality_rows(frames20.frames[:num_frames], f0s, sr, vq)
        rows.update(vq_rows)
    if "SFLUX" in wanted:
        rows["SFLUX"] = _flux_row(mags20)
    if "SHARP" in wanted:
        k20 = dsp.default_fft_size(frames20.frame_len)
        freqs = np.arange(1, k20 // 2 + 1) * (sr / k20)
        barks = dsp.hz_to_bark(freqs)
        totals = mags20.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            vals = (mags20 @ barks) / totals
        rows["SHARP"] = np.where(totals > 0.0, vals, 0.0)
    if "ZCR" in wanted:
        fr = frames20.frames[:num_frames]
        rows["ZCR"] = _zcr_rows(fr) / (fr.shape[1] / sr)
    if wanted & set(MFCC_IDS):
        coeffs = _mfcc_batch(frames20.frames[:num_frames], sr, mfcc_cfg)
        for i, cid in enumerate(MFCC_IDS):
            if cid in wanted:
                rows[cid] = coeffs[:, i]

    values = np.vstack([rows[c] for c in channels])
    if not np.all(np.isfinite(values)):
        raise ValueError(f"non-finite feature values for {source_id or 'utterance'}")
    return FeatureMatrix(values=values, channel_ids=channels,
                         hop_ms=dsp.HOP_MS, source_id=source_id)


def _voice_quality_rows(frames20: np.ndarray, f0s: np.ndarray, sr: int,
                        wanted: set) -> dict[str, np.ndarray]:
    n = frames20.shape[0]
    out = {c: np.zeros(n) for c in wanted}
    for i in range(n):
        f0 = float(f0s[i])
        if f0 <= 0.0:
            continue
        frame = frames20[i]
        if wanted & {"JITTER", "DJITTER", "SHIMMER"}:
            try:
                seq = pitch.track_periods(frame, f0, sr)
            except pitch.TooFewPeriodsError:
                seq = None
            if seq is not None:
                if "JITTER" in wanted:
                    out["JITTER"][i] = jitter(seq)
                if "DJITTER" in wanted and seq.periods_s.size >= 4:
                    out["DJITTER"][i] = jitter_derivative(seq)
                if "SHIMMER" in wanted:
                    out["SHIMMER"][i] = shimmer(seq)
        if "HNR" in wanted:
            out["HNR"][i] = hnr(frame, f0, sr)
    return out


def _flux_row(mags: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", mags, mags))
    out = np.zeros(mags.shape[0])
    if mags.shape[0] < 2:
        return out
    ok = norms > 0.0
    unit = np.zeros_like(mags)
    unit[ok] = mags[ok] / norms[ok, None]
    d = unit[1:] - unit[:-1]
    flux = np.einsum("ij,ij->i", d, d)
    both = ok[1:] & ok[:-1]
    out[1:] = np.where(both, flux, 0.0)
    return out


def _zcr_rows(frames: np.ndarray) -> np.ndarray:
    nonzero = frames[:, 1:] != 0.0
    direct = (frames[:, :-1] * frames[:, 1:] < 0.0) & nonzero
    counts = direct.sum(axis=1)
    if frames.shape[1] >= 3:
        mid_zero = frames[:, 1:-1] == 0.0
        skipped = (frames[:, :-2] * frames[:, 2:] < 0.0) & mid_zero
        counts = counts + skipped.sum(axis=1)
    return counts.astype(np.float64)


# ---------------------------------------------------------------------------
# Normalization

def fit_norm(matrices: Sequence[FeatureMatrix]) -> NormStats:
    """Per-channel mean/std over all training frames; std floored at 1e-8."""
    if not matrices:
        raise ValueError("empty training set")
    channel_ids = matrices[0].channel_ids
    for m in matrices:
        if m.channel_ids != channel_ids:
            raise ValueError("inconsistent channel ids across training matrices")
    stacked = np.concatenate([m.values for m in matrices], axis=1)
    if stacked.shape[1] < 2:
        raise ValueError("need at least 2 training frames to fit normalization")
    mean = stacked.mean(axis=1)
    std = np.maximum(stacked.std(axis=1), 1e-8)
    return NormStats(mean=mean, std=std, channel_ids=channel_ids)


def apply_norm(matrix: FeatureMatrix, stats: NormStats) -> FeatureMatrix:
    """Z-score each channel with the fitted statistics."""
    if matrix.channel_ids != stats.channel_ids:
        raise ValueError("channel ids do not match normalization stats")
    values = (matrix.values - stats.mean[:, None]) / stats.std[:, None]
    return FeatureMatrix(values=values, channel_ids=matrix.channel_ids,
                         hop_ms=matrix.hop_ms, source_id=matrix.source_id)


# ---------------------------------------------------------------------------
# CSV dump (CLI extract/plot)

def write_feature_csv(matrix: FeatureMatrix, path: str | Path) -> None:
    """One row per frame, header = channel ids."""
    lines = [",".join(matrix.channel_ids)]
    for frame in matrix.values.T:
        lines.append(",".join(repr(float(v)) for v in frame))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
