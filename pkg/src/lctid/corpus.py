"""Corpus handling: manifests, WAV decode/encode, balancing, synthetic data.

Manifest format: UTF-8, tab-separated, header ``id<TAB>path<TAB>dialect``
with dialect in {LT, CT}.  Audio: RIFF/WAVE, PCM16 or IEEE float32, mono or
stereo, 16 kHz canonical (other rates are rejected at pipeline entry; there
is deliberately no resampler).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

DIALECTS = ("LT", "CT")
CANONICAL_RATE_HZ = 16000

__all__ = [
    "DIALECTS",
    "CANONICAL_RATE_HZ",
    "UtteranceRecord",
    "CorpusManifest",
    "Waveform",
    "SynthSpec",
    "CorpusError",
    "load_manifest",
    "save_manifest",
    "read_wav",
    "write_wav",
    "wav_duration_s",
    "load_audio",
    "derive_balanced_subset",
    "synth_corpus",
]


class CorpusError(Exception):
    """Manifest or audio file cannot be used."""


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    audio_path: str
    dialect: str  # "LT" or "CT"
    duration_s: float = 0.0


@dataclass(frozen=True)
class CorpusManifest:
    records: tuple[UtteranceRecord, ...]

    @property
    def total_duration_per_class(self) -> dict[str, float]:
        totals = {d: 0.0 for d in DIALECTS}
        for r in self.records:
            totals[r.dialect] += r.duration_s
        return totals

    def by_dialect(self, dialect: str) -> tuple[UtteranceRecord, ...]:
        return tuple(r for r in self.records if r.dialect == dialect)

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class Waveform:
    """Mono audio, samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


# ---------------------------------------------------------------------------
# Manifest I/O

_HEADER = ("id", "path", "dialect")


def load_manifest(path: str | Path, read_durations: bool = True) -> CorpusManifest:
    """Parse a tab-separated manifest; fills durations from the WAV headers.

    Relative audio paths are resolved against the manifest's directory.
    Raises CorpusError for a missing file, an empty manifest, a malformed
    row (named by row number), or an unknown dialect label.
    """
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    rows = [ln for ln in lines if ln.strip()]
    if rows and tuple(rows[0].rstrip("\n").split("\t")) == _HEADER:
        rows = rows[1:]
    if not rows:
        raise CorpusError(f"no records in manifest {path}")
    records = []
    seen: set[str] = set()
    for i, line in enumerate(rows, start=1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorpusError(f"{path}: malformed row {i}: expected 3 fields, got {len(parts)}")
        uid, audio, dialect = (p.strip() for p in parts)
        if dialect not in DIALECTS:
            raise CorpusError(f"{path}: row {i}: unknown dialect label {dialect!r}")
        if not uid:
            raise CorpusError(f"{path}: row {i}: empty id")
        if uid in seen:
            raise CorpusError(f"{path}: row {i}: duplicate id {uid!r}")
        seen.add(uid)
        audio_path = Path(audio)
        if not audio_path.is_absolute():
            audio_path = path.parent / audio_path
        dur = wav_duration_s(audio_path) if read_durations else 0.0
        records.append(UtteranceRecord(id=uid, audio_path=str(audio_path),
                                       dialect=dialect, duration_s=dur))
    logger.info("loaded %d records from %s", len(records), path)
    return CorpusManifest(records=tuple(records))


def save_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    path = Path(path)
    lines = ["\t".join(_HEADER)]
    lines += [f"{r.id}\t{r.audio_path}\t{r.dialect}" for r in manifest.records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# WAV I/O (RIFF/WAVE, PCM16 and IEEE float32 only)

_FMT_PCM = 1
_FMT_FLOAT = 3


def _parse_wav(data: bytes, path) -> tuple[int, int, int, bytes]:
    """Return (format_code, num_channels, sample_rate, data_bytes)."""
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise CorpusError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise CorpusError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if len(body) < size:
                raise CorpusError(f"{path}: truncated data chunk")
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise CorpusError(f"{path}: missing fmt or data chunk")
    format_code, channels, rate, _byte_rate, _block_align, bits = fmt
    if format_code == _FMT_PCM and bits == 16:
        pass
    elif format_code == _FMT_FLOAT and bits == 32:
        pass
    else:
        raise CorpusError(
            f"{path}: unsupported encoding (format {format_code}, {bits}-bit); "
            "only PCM16 and IEEE float32 are supported")
    return format_code, channels, rate, payload


def read_wav(path: str | Path) -> Waveform:
    """Decode a PCM16 or float32 WAV; stereo is downmixed by channel average.

    PCM16 values are scaled by 1/32768 so output lies in [-1, 1).
    """
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"audio file not found: {path}")
    format_code, channels, rate, payload = _parse_wav(path.read_bytes(), path)
    if format_code == _FMT_PCM:
        raw = np.frombuffer(payload, dtype="<i2")
        samples = raw.astype(np.float64) / 32768.0
    else:
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if channels > 1:
        usable = (samples.size // channels) * channels
        samples = samples[:usable].reshape(-1, channels).mean(axis=1)
    samples = np.clip(samples, -1.0, 1.0)
    if samples.size == 0:
        raise CorpusError(f"{path}: empty audio data")
    return Waveform(samples=samples, sample_rate_hz=rate)


def wav_duration_s(path: str | Path) -> float:
    """Duration from the WAV header without decoding samples."""
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"audio file not found: {path}")
    format_code, channels, rate, payload = _parse_wav(path.read_bytes(), path)
    bytes_per = 2 if format_code == _FMT_PCM else 4
    return len(payload) / (bytes_per * channels * rate)


def write_wav(path: str | Path, waveform: Waveform, encoding: str = "pcm16") -> None:
    """Write mono WAV; pcm16 quantization round-trips within 1 LSB."""
    x = np.asarray(waveform.samples, dtype=np.float64)
    if encoding == "pcm16":
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        payload = q.tobytes()
        fmt = struct.pack("<HHIIHH", _FMT_PCM, 1, waveform.sample_rate_hz,
                          waveform.sample_rate_hz * 2, 2, 16)
    elif encoding == "float32":
        payload = x.astype("<f4").tobytes()
        fmt = struct.pack("<HHIIHH", _FMT_FLOAT, 1, waveform.sample_rate_hz,
                          waveform.sample_rate_hz * 4, 4, 32)
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt \
        + b"data" + struct.pack("<I", len(payload)) + payload
    blob = b"RIFF" + struct.pack("<I", len(body)) + body
    Path(path).write_bytes(blob)


def load_audio(record: UtteranceRecord,
               expected_rate_hz: int = CANONICAL_RATE_HZ) -> Waveform:
    """Decode an utterance and enforce the canonical sample rate."""
    w = read_wav(record.audio_path)
    if w.sample_rate_hz != expected_rate_hz:
        raise CorpusError(
            f"{record.audio_path}: sample rate {w.sample_rate_hz} Hz; "
            f"expected {expected_rate_hz} Hz (no resampler)")
    return w


# ---------------------------------------------------------------------------
# Balanced subsetting

def derive_balanced_subset(manifest: CorpusManifest, hours_per_class: float,
                           seed: int) -> CorpusManifest:
    """Greedy per-class selection in seeded-shuffled order.

    Selection stops as soon as the running total first reaches or exceeds
    the target, so each class lands within one utterance-duration of it.
    Raises CorpusError if a class holds less audio than requested.
    """
    target_s = hours_per_class * 3600.0
    rng = np.random.default_rng(seed)
    chosen: list[UtteranceRecord] = []
    for dialect in DIALECTS:
        recs = list(manifest.by_dialect(dialect))
        available = sum(r.duration_s for r in recs)
        if available < target_s:
            raise CorpusError(
                f"class {dialect} has {available / 3600.0:.3f} h, "
                f"need {hours_per_class:g} h")
        order = rng.permutation(len(recs))
        total = 0.0
        for i in order:
            if total >= target_s:
                break
            chosen.append(recs[i])
            total += recs[i].duration_s
    return CorpusManifest(records=tuple(chosen))


# ---------------------------------------------------------------------------
# Synthetic two-class corpus
#
# Class A ("LT-like"): pulse trains with fast F0/amplitude modulation, strong
# cycle-to-cycle period/amplitude perturbation, and inserted silences.
# Class B ("CT-like"): same generator, slow modulation, mild perturbation,
# no silences.  The contrast shows up in spectral flux, jitter and its
# derivative, so the labels are recoverable from feature statistics alone.

@dataclass(frozen=True)
class SynthSpec:
    num_utterances: int = 200
    dur_min_s: float = 1.0
    dur_max_s: float = 4.0
    sample_rate_hz: int = CANONICAL_RATE_HZ
    out_dir: str = "synth_corpus"


_CLASS_PARAMS = {
    # fm_rate range, fm_depth, am_rate range, am_depth, cycle jitter, cycle shimmer, silences
    # Modulation depths are kept small enough that pitch stays near-stationary
    # inside one 60 ms analysis window, or voicing detection would collapse.
    "LT": ((4.0, 6.0), 0.04, (8.0, 14.0), 0.5, 0.015, 0.30, True),
    "CT": ((0.4, 1.2), 0.03, (0.4, 2.0), 0.15, 0.003, 0.03, False),
}


_PULSE_WIDTH_S = 0.0015


def _add_pulse(x: np.ndarray, t_s: float, amp: float, sample_rate_hz: int) -> None:
    # One sine cycle over [t, t + W], evaluated at exact sample times so the
    # pulse train carries sub-sample period accuracy (integer placement would
    # put a quantization floor under every jitter measurement).
    w = _PULSE_WIDTH_S
    k0 = int(np.ceil(t_s * sample_rate_hz))
    k1 = min(x.size - 1, int(np.floor((t_s + w) * sample_rate_hz)))
    if k1 < k0:
        return
    tau = np.arange(k0, k1 + 1) / sample_rate_hz - t_s
    x[k0:k1 + 1] += amp * np.sin(2.0 * np.pi * tau / w)


def _synth_utterance(rng: np.random.Generator, dialect: str, dur_s: float,
                     sample_rate_hz: int) -> np.ndarray:
    (fm_lo, fm_hi), fm_depth, (am_lo, am_hi), am_depth, jit, shim, silences = \
        _CLASS_PARAMS[dialect]
    sr = sample_rate_hz
    n = int(round(dur_s * sr))
    x = np.zeros(n)
    f0_base = rng.uniform(230.0, 300.0)
    fm_rate = rng.uniform(fm_lo, fm_hi)
    am_rate = rng.uniform(am_lo, am_hi)
    phi_f = rng.uniform(0.0, 2 * np.pi)
    phi_a = rng.uniform(0.0, 2 * np.pi)
    t = rng.uniform(0.0, 1.0 / f0_base)
    while t < dur_s:
        f_inst = f0_base * (1.0 + fm_depth * np.sin(2 * np.pi * fm_rate * t + phi_f))
        amp = 0.35 * (1.0 + am_depth * np.sin(2 * np.pi * am_rate * t + phi_a))
        amp *= 1.0 + shim * rng.uniform(-1.0, 1.0)
        _add_pulse(x, t, amp, sr)
        t += (1.0 / f_inst) * (1.0 + jit * rng.uniform(-1.0, 1.0))
    if silences:
        for _ in range(max(1, int(round(dur_s * 1.2)))):
            gap = int(rng.uniform(0.05, 0.10) * sr)
            start = int(rng.uniform(0.1, 0.85) * n)
            x[start:start + gap] = 0.0
    x += 0.002 * rng.standard_normal(n)
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= 0.8 / peak
    return x


def synth_corpus(spec: SynthSpec, seed: int) -> CorpusManifest:
    """Generate WAV files plus a manifest.tsv; deterministic for a given seed."""
    out = Path(spec.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CorpusError(f"output directory not writable: {out}: {exc}") from exc
    records = []
    half = spec.num_utterances - spec.num_utterances // 2
    for i in range(spec.num_utterances):
        dialect = "LT" if i < half else "CT"
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        dur = rng.uniform(spec.dur_min_s, spec.dur_max_s)
        samples = _synth_utterance(rng, dialect, dur, spec.sample_rate_hz)
        uid = f"{dialect.lower()}_{i:04d}"
        wav_path = out / f"{uid}.wav"
        write_wav(wav_path, Waveform(samples, spec.sample_rate_hz))
        records.append(UtteranceRecord(id=uid, audio_path=str(wav_path),
                                       dialect=dialect,
                                       duration_s=wav_duration_s(wav_path)))
    manifest = CorpusManifest(records=tuple(records))
    save_manifest(manifest, out / "manifest.tsv")
    logger.info("synthesized %d utterances under %s", len(records), out)
    return manifest
