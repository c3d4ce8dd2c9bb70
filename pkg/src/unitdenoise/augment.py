"""Distortion synthesis: exact-SNR noise mixing, impulse-response reverb,
train/test augmentation recipes, and desk-scale synthetic corpora and banks.
"""

from __future__ import annotations

import shutil
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .audio import (
    SAMPLE_RATE,
    Condition,
    ManifestRow,
    Waveform,
    read_wav,
    rms_power,
    write_manifest,
    write_wav,
)


class AugmentError(Exception):
    pass


@dataclass
class ImpulseResponse:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE
    tag: str = "ir"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.size == 0:
            raise ValueError("impulse response must be nonempty")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("impulse response must be finite")
        if np.max(np.abs(self.samples)) == 0.0:
            raise ValueError("impulse response must have a nonzero peak")


@dataclass
class NoiseBank:
    """Named long noise recordings; tags stand in for dataset groupings."""

    sources: dict[str, Waveform]

    def __post_init__(self):
        for tag, wav in self.sources.items():
            if wav.duration_s < 1.0:
                raise ValueError(f"noise source {tag} shorter than 1 s")

    @property
    def tags(self) -> list[str]:
        return sorted(self.sources)


@dataclass(frozen=True)
class TrainRecipe:
    """Per clean utterance: itself, one reverbed copy, one noisy copy per source."""

    rng_seed: int
    snr_low_db: float = 0.0
    snr_high_db: float = 20.0
    keep_clean: bool = True  # validation recipe drops the clean copy

    def __post_init__(self):
        if not self.snr_low_db < self.snr_high_db:
            raise ValueError("need snr_low < snr_high")

    def versions_per_utterance(self, num_sources: int) -> int:
        return (1 if self.keep_clean else 0) + 1 + num_sources


@dataclass(frozen=True)
class TestRecipe:
    """Per clean utterance: itself, one reverbed copy, and every source at the SNR grid."""

    __test__ = False  # not a pytest class

    rng_seed: int
    snr_grid_db: tuple = (5.0, 10.0, 15.0, 20.0)

    def __post_init__(self):
        if tuple(sorted(self.snr_grid_db)) != (5.0, 10.0, 15.0, 20.0):
            raise ValueError("test SNR grid is fixed to {5,10,15,20} dB")

    def versions_per_utterance(self, num_sources: int) -> int:
        return 2 + num_sources * len(self.snr_grid_db)


@dataclass
class MixResult:
    waveform: Waveform
    gain: float
    noise_offset: int
    rescaled: bool


def _noise_segment(noise: np.ndarray, length: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Random crop when the noise is longer; cyclic tile from a random offset otherwise."""
    n = noise.size
    if n >= length:
        offset = int(rng.integers(0, n - length + 1))
        return noise[offset:offset + length], offset
    offset = int(rng.integers(0, n))
    reps = int(np.ceil((offset + length) / n))
    return np.tile(noise, reps)[offset:offset + length], offset


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float,
               rng: np.random.Generator) -> MixResult:
    """Add a noise segment to the clean signal at an exact SNR.

    The gain is computed from powers over the mixed span, so measure_snr
    recovers snr_db exactly unless the mixture had to be peak-rescaled.
    """
    p_clean = rms_power(clean)
    if p_clean == 0.0:
        raise AugmentError("clean signal has zero power")
    segment, offset = _noise_segment(noise.samples, len(clean), rng)
    p_noise = float(np.mean(segment * segment))
    if p_noise == 0.0:
        raise AugmentError("noise segment has zero power")
    gain = float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))
    mixed = clean.samples + gain * segment
    peak = float(np.max(np.abs(mixed)))
    rescaled = peak > 1.0
    if rescaled:
        mixed = mixed / peak
    return MixResult(Waveform(mixed, clean.sample_rate_hz), gain, offset, rescaled)


def measure_snr(mixture: Waveform, clean: Waveform) -> float:
    """10*log10 of clean power over residual power; +inf when the residual is zero."""
    if len(mixture) != len(clean):
        raise AugmentError(f"length mismatch: {len(mixture)} vs {len(clean)}")
    residual = mixture.samples - clean.samples
    p_res = float(np.mean(residual * residual))
    if p_res == 0.0:
        return float("inf")
    return float(10.0 * np.log10(rms_power(clean) / p_res))


def full_convolution(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Full linear convolution (FFT-based; exact product for a length-1 kernel)."""
    if h.size == 1:
        return x * h[0]
    return fftconvolve(x, h, mode="full")


def convolve_rir(clean: Waveform, ir: ImpulseResponse) -> Waveform:
    """Reverberate by convolution, truncated to the clean length and
    peak-matched to the clean signal's level.

    The direct path lands wherever the IR's argmax sits, so the output is
    delayed by that many samples relative to the clean input.
    """
    if ir.sample_rate_hz != clean.sample_rate_hz:
        raise AugmentError(
            f"rate mismatch: clean {clean.sample_rate_hz}, ir {ir.sample_rate_hz}"
        )
    wet = full_convolution(clean.samples, ir.samples)[:len(clean)]
    peak = float(np.max(np.abs(wet)))
    if peak > 0.0:
        wet = wet * (float(np.max(np.abs(clean.samples))) / peak)
    return Waveform(wet, clean.sample_rate_hz)


# ---------------------------------------------------------------------------
# corpus-level augmentation
# ---------------------------------------------------------------------------

def _utt_rng(seed: int, utt_id: str) -> np.random.Generator:
    # per-utterance stream so parallel maps stay deterministic
    return np.random.default_rng([seed, zlib.crc32(utt_id.encode("utf-8"))])


def augment_corpus(rows: list[ManifestRow], recipe, noise_bank: NoiseBank,
                   ir_bank: list[ImpulseResponse], out_dir,
                   manifest_path=None) -> list[ManifestRow]:
    """Materialise one recipe over a clean manifest; returns the augmented rows.

    Deterministic for a fixed recipe seed: every utterance draws from its own
    (seed, id)-keyed stream, so ordering and parallelism cannot change output.
    """
    if not noise_bank.sources:
        raise AugmentError("noise bank is empty")
    if not ir_bank:
        raise AugmentError("impulse response bank is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    out_rows: list[ManifestRow] = []
    for row in rows:
        rng = _utt_rng(recipe.rng_seed, row.id)
        clean = read_wav(row.wav_path)

        keep_clean = getattr(recipe, "keep_clean", True)
        if keep_clean:
            aug_id = f"{row.id}_clean"
            path = out_dir / f"{aug_id}.wav"
            shutil.copyfile(row.wav_path, path)  # clean copy stays bit-identical
            out_rows.append(ManifestRow(
                id=aug_id, wav_path=str(path), condition=Condition.clean(),
                source_utt_id=row.id, aug_type="clean",
            ))

        ir = ir_bank[int(rng.integers(0, len(ir_bank)))]
        aug_id = f"{row.id}_reverb"
        path = out_dir / f"{aug_id}.wav"
        write_wav(convolve_rir(clean, ir), path)
        out_rows.append(ManifestRow(
            id=aug_id, wav_path=str(path), condition=Condition.reverb(),
            source_utt_id=row.id, aug_type="reverb", ir_tag=ir.tag,
        ))

        for tag in noise_bank.tags:
            noise = noise_bank.sources[tag]
            if isinstance(recipe, TestRecipe):
                snrs = list(recipe.snr_grid_db)
            else:
                snrs = [float(rng.uniform(recipe.snr_low_db, recipe.snr_high_db))]
            for snr in snrs:
                mix = mix_at_snr(clean, noise, snr, rng)
                if isinstance(recipe, TestRecipe):
                    aug_id = f"{row.id}_noise_{tag}_{snr:g}db"
                else:
                    aug_id = f"{row.id}_noise_{tag}"
                path = out_dir / f"{aug_id}.wav"
                write_wav(mix.waveform, path)
                out_rows.append(ManifestRow(
                    id=aug_id, wav_path=str(path),
                    condition=Condition.noise(tag, snr),
                    source_utt_id=row.id, aug_type="noise", noise_tag=tag,
                    rescaled=mix.rescaled,
                ))

    if manifest_path is not None:
        write_manifest(out_rows, manifest_path)
    return out_rows


# ---------------------------------------------------------------------------
# synthetic desk-scale corpus
# ---------------------------------------------------------------------------

_SEG_MIN_MS = 80.0
_SEG_MAX_MS = 200.0
_FADE_MS = 5.0


def _unit_prototypes(num_unit_types: int, rng: np.random.Generator) -> list[dict]:
    """Per unit type: a fixed harmonic signature with a characteristic envelope."""
    protos = []
    for k in range(num_unit_types):
        f0 = 180.0 * (1.35 ** k) * float(rng.uniform(0.97, 1.03))
        harmonics = np.array([1.0, 0.5, 0.25])
        attack = float(rng.uniform(0.05, 0.4))
        protos.append({"f0": f0, "harmonics": harmonics, "attack": attack})
    return protos


def _render_unit(proto: dict, n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    x = np.zeros(n)
    for h, amp in enumerate(proto["harmonics"], start=1):
        freq = proto["f0"] * h
        if freq >= SAMPLE_RATE / 2:
            break
        x += amp * np.sin(2.0 * np.pi * freq * t + rng.uniform(0.0, 2.0 * np.pi))
    attack = max(1, int(proto["attack"] * n))
    env = np.ones(n)
    env[:attack] = np.linspace(0.3, 1.0, attack)
    fade = max(1, int(_FADE_MS * SAMPLE_RATE / 1000.0))
    ramp = 0.5 - 0.5 * np.cos(np.linspace(0.0, np.pi, fade))
    env[:fade] *= ramp
    env[-fade:] *= ramp[::-1]
    x *= env
    return x / max(1e-9, np.max(np.abs(x)))


def synth_corpus(num_utterances: int, num_unit_types: int, units_per_utterance: int,
                 seed: int, out_dir) -> tuple[list[ManifestRow], dict[str, list[int]]]:
    """Generate clean utterances as concatenated 80-200 ms unit segments.

    Returns the manifest rows and the generating unit script per utterance
    (diagnostics only; references come from K-means on the rendered audio).
    """
    if num_unit_types < 2:
        raise ValueError("need at least 2 unit types")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    proto_rng = np.random.default_rng([seed, 0xC0])
    protos = _unit_prototypes(num_unit_types, proto_rng)

    rows: list[ManifestRow] = []
    scripts: dict[str, list[int]] = {}
    for i in range(num_utterances):
        utt_id = f"utt{i:04d}"
        rng = _utt_rng(seed, utt_id)
        script: list[int] = []
        pieces = []
        for _ in range(units_per_utterance):
            k = int(rng.integers(0, num_unit_types))
            while script and k == script[-1]:
                k = int(rng.integers(0, num_unit_types))
            script.append(k)
            dur_ms = float(rng.uniform(_SEG_MIN_MS, _SEG_MAX_MS))
            n = int(dur_ms * SAMPLE_RATE / 1000.0)
            amp = float(rng.uniform(0.15, 0.3))
            pieces.append(amp * _render_unit(protos[k], n, rng))
        wav = Waveform(np.concatenate(pieces))
        path = out_dir / f"{utt_id}.wav"
        write_wav(wav, path)
        rows.append(ManifestRow(id=utt_id, wav_path=str(path), condition=Condition.clean()))
        scripts[utt_id] = script
    return rows, scripts


def write_scripts(scripts: dict[str, list[int]], path) -> None:
    lines = [f"{utt}\t{' '.join(str(u) for u in units)}" for utt, units in scripts.items()]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic noise and impulse-response banks
# ---------------------------------------------------------------------------

def synth_noise_bank(seed: int, duration_s: float = 30.0,
                     tag_prefix: str = "") -> NoiseBank:
    """Three sources of distinct character: stationary coloured noise,
    amplitude-modulated babble-like noise, and impulsive clicks."""
    n = int(duration_s * SAMPLE_RATE)
    rng = np.random.default_rng([seed, 0xA0])

    # stationary: white noise through a one-pole lowpass, fixed level
    pole = float(rng.uniform(0.6, 0.9))
    steady = lfilter([1.0 - pole], [1.0, -pole], rng.standard_normal(n))
    steady /= np.max(np.abs(steady))

    # babble-like: coloured noise with a slow random envelope
    pole_b = float(rng.uniform(0.3, 0.6))
    base = lfilter([1.0 - pole_b], [1.0, -pole_b], rng.standard_normal(n))
    lfo_hz = float(rng.uniform(1.0, 3.0))
    t = np.arange(n) / SAMPLE_RATE
    env = 0.55 + 0.45 * np.sin(2.0 * np.pi * lfo_hz * t + rng.uniform(0, 2 * np.pi))
    env *= 0.7 + 0.3 * np.sin(2.0 * np.pi * lfo_hz * 0.37 * t + rng.uniform(0, 2 * np.pi))
    babble = base * env
    babble /= np.max(np.abs(babble))

    # impulsive: sparse clicks with short exponential tails over a quiet floor
    impulsive = 0.01 * rng.standard_normal(n)
    n_clicks = int(duration_s * rng.uniform(4, 8))
    tail = np.exp(-np.arange(256) / 32.0)
    for pos in rng.integers(0, n - 300, size=n_clicks):
        impulsive[pos:pos + 256] += float(rng.uniform(0.5, 1.0) * rng.choice([-1, 1])) * tail
    impulsive /= np.max(np.abs(impulsive))

    def mk(tag, x):
        return f"{tag_prefix}{tag}", Waveform(0.5 * x)

    return NoiseBank(sources=dict([
        mk("steady", steady), mk("babble", babble), mk("impulse", impulsive),
    ]))


def synth_ir_bank(seed: int, count: int = 2, tag_prefix: str = "") -> list[ImpulseResponse]:
    """Synthetic rooms: a unit direct path plus an exponentially decaying
    noise tail with T60 drawn from [0.2, 0.8] s."""
    rng = np.random.default_rng([seed, 0xB0])
    bank = []
    for i in range(max(2, count)):
        t60 = float(rng.uniform(0.2, 0.8))
        n = int(t60 * SAMPLE_RATE)
        tau = t60 * SAMPLE_RATE / np.log(1000.0)  # -60 dB at t60
        tail = np.exp(-np.arange(n) / tau) * rng.standard_normal(n)
        ir = np.zeros(n)
        ir[0] = 1.0
        ir[1:] = 0.25 * tail[1:]
        bank.append(ImpulseResponse(ir, tag=f"{tag_prefix}room{i}_t60_{t60:.2f}s"))
    return bank
