"""Waveforms, canonical 16 kHz mono PCM16 WAV I/O, framing, and power.

Everything downstream assumes 16 kHz mono; any other WAV flavour is rejected
at ingestion rather than resampled.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000


class WavError(Exception):
    pass


class MalformedWavHeader(WavError):
    pass


class UnsupportedEncoding(WavError):
    pass


class UnsupportedChannels(WavError):
    pass


class UnsupportedRate(WavError):
    pass


class UnsupportedBitDepth(WavError):
    pass


class ManifestError(Exception):
    pass


@dataclass
class Waveform:
    """Mono audio, amplitudes as float64 in nominal [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("waveform needs at least one sample")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class Condition:
    """Acoustic provenance of an utterance: clean, reverb, or noise(tag, snr)."""

    kind: str  # clean | reverb | noise
    noise_tag: str | None = None
    snr_db: float | None = None

    def __post_init__(self):
        if self.kind not in ("clean", "reverb", "noise"):
            raise ValueError(f"unknown condition kind: {self.kind}")
        if self.kind == "noise" and (self.noise_tag is None or self.snr_db is None):
            raise ValueError("noise condition needs a source tag and an SNR")
        if self.kind != "noise" and self.snr_db is not None:
            raise ValueError("snr_db is only valid for noise conditions")

    @staticmethod
    def clean() -> "Condition":
        return Condition("clean")

    @staticmethod
    def reverb() -> "Condition":
        return Condition("reverb")

    @staticmethod
    def noise(tag: str, snr_db: float) -> "Condition":
        return Condition("noise", noise_tag=tag, snr_db=float(snr_db))

    def label(self) -> str:
        if self.kind == "noise":
            return f"noise:{self.noise_tag}"
        return self.kind

    @staticmethod
    def parse(label: str, snr_field: str) -> "Condition":
        if label == "clean":
            return Condition.clean()
        if label == "reverb":
            return Condition.reverb()
        if label.startswith("noise:"):
            if snr_field == "-":
                raise ManifestError("noise condition without an SNR value")
            return Condition.noise(label.split(":", 1)[1], float(snr_field))
        raise ManifestError(f"unknown condition label: {label}")


@dataclass
class UtteranceRecord:
    id: str
    waveform: Waveform
    condition: Condition

    def __post_init__(self):
        if not self.id:
            raise ValueError("utterance id must be non-empty")


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def read_wav(path) -> Waveform:
    """Read a RIFF/WAVE file; only PCM16, mono, 16 kHz is accepted."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedWavHeader(f"not a RIFF/WAVE file: {path}")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise MalformedWavHeader("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            data = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None or data is None:
        raise MalformedWavHeader("missing fmt or data chunk")
    audio_format, channels, rate, _byte_rate, _block_align, bits = fmt
    if audio_format != 1:
        raise UnsupportedEncoding(f"compression code {audio_format}, want PCM(1)")
    if channels != 1:
        raise UnsupportedChannels(f"{channels} channels, want mono")
    if rate != SAMPLE_RATE:
        raise UnsupportedRate(f"{rate} Hz, want {SAMPLE_RATE}")
    if bits != 16:
        raise UnsupportedBitDepth(f"{bits}-bit, want 16")

    ints = np.frombuffer(data[:len(data) // 2 * 2], dtype="<i2")
    return Waveform(ints.astype(np.float64) / 32768.0, rate)


def write_wav(waveform: Waveform, path) -> None:
    """Write canonical PCM16 mono WAV; samples clamped to [-1, 1]."""
    x = waveform.samples
    if not np.all(np.isfinite(x)):
        raise ValueError("waveform contains non-finite samples")
    q = np.clip(np.rint(x * 32768.0), -32768, 32767).astype("<i2")
    payload = q.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, 1, 1, waveform.sample_rate_hz,
        waveform.sample_rate_hz * 2, 2, 16,
    )
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------------------
# framing and power
# ---------------------------------------------------------------------------

def rms_power(waveform: Waveform, span: tuple[int, int] | None = None) -> float:
    """Mean squared amplitude over the span (default: whole signal)."""
    x = waveform.samples
    if span is not None:
        start, stop = span
        if start < 0 or stop > x.size or stop <= start:
            raise ValueError(f"empty or out-of-bounds span {span} for length {x.size}")
        x = x[start:stop]
    return float(np.mean(x * x))


def frame_signal(waveform: Waveform, window_ms: float, hop_ms: float) -> np.ndarray:
    """Overlapping frames as a (T, window_samples) array; short input gives T=0."""
    if not (window_ms >= hop_ms > 0):
        raise ValueError("need window >= hop > 0")
    win = int(round(window_ms * waveform.sample_rate_hz / 1000.0))
    hop = int(round(hop_ms * waveform.sample_rate_hz / 1000.0))
    x = waveform.samples
    if x.size < win:
        return np.empty((0, win), dtype=np.float64)
    n_frames = 1 + (x.size - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestRow:
    """One utterance in a corpus manifest.

    Base manifests carry 4 columns (id, path, condition, snr-or-dash);
    augmented manifests append source_utt_id, aug_type, noise_tag, snr_db,
    ir_tag, rescaled_flag.
    """

    id: str
    wav_path: str
    condition: Condition
    source_utt_id: str | None = None
    aug_type: str | None = None
    noise_tag: str | None = None
    ir_tag: str | None = None
    rescaled: bool = False

    @property
    def is_augmented(self) -> bool:
        return self.source_utt_id is not None


def _snr_field(cond: Condition) -> str:
    return "-" if cond.snr_db is None else f"{cond.snr_db:.6g}"


def write_manifest(rows: list[ManifestRow], path) -> None:
    lines = []
    for r in rows:
        cols = [r.id, r.wav_path, r.condition.label(), _snr_field(r.condition)]
        if r.is_augmented:
            cols += [
                r.source_utt_id,
                r.aug_type,
                r.noise_tag or "-",
                _snr_field(r.condition),
                r.ir_tag or "-",
                "1" if r.rescaled else "0",
            ]
        lines.append("\t".join(cols))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_manifest(path) -> list[ManifestRow]:
    rows = []
    seen: set[str] = set()
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) not in (4, 10):
            raise ManifestError(f"{path}:{ln}: expected 4 or 10 columns, got {len(cols)}")
        utt_id, wav_path, label, snr_field = cols[:4]
        if not utt_id:
            raise ManifestError(f"{path}:{ln}: empty utterance id")
        if utt_id in seen:
            raise ManifestError(f"{path}:{ln}: duplicate utterance id {utt_id}")
        seen.add(utt_id)
        cond = Condition.parse(label, snr_field)
        row = ManifestRow(id=utt_id, wav_path=wav_path, condition=cond)
        if len(cols) == 10:
            row.source_utt_id = cols[4]
            row.aug_type = cols[5]
            row.noise_tag = None if cols[6] == "-" else cols[6]
            row.ir_tag = None if cols[8] == "-" else cols[8]
            row.rescaled = cols[9] == "1"
        rows.append(row)
    return rows
