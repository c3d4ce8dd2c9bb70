"""Run waveforms through a pre-trained speech encoder checkpoint and dump
every layer's hidden states as one SSLF file per utterance.

The bridge is a pure boundary tool: it reads the standard corpus manifest,
writes the SSLF feature format, and performs no augmentation or clustering.
"""

from __future__ import annotations

import os
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from transformers import AutoModel


class BridgeError(Exception):
    pass


class CheckpointMismatch(BridgeError):
    pass


class AudioError(BridgeError):
    pass


@dataclass
class BridgeConfig:
    model_id: str             # checkpoint path or hub identifier
    expected_layers: int      # transformer depth the caller planned for
    manifest_path: str
    output_dir: str
    normalize: bool = False   # per-utterance zero-mean/unit-var before inference


def read_manifest_paths(path) -> list[tuple[str, str]]:
    """(utt_id, wav_path) pairs from a 4- or 10-column corpus manifest."""
    pairs = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) not in (4, 10):
            raise BridgeError(f"{path}:{ln}: expected 4 or 10 columns, got {len(cols)}")
        pairs.append((cols[0], cols[1]))
    return pairs


def read_wav_mono16k(path) -> np.ndarray:
    """Samples in [-1, 1]; anything but 16 kHz mono PCM16 is rejected."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            frames = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError, FileNotFoundError) as e:
        raise AudioError(f"unreadable audio {path}: {e}") from e
    if channels != 1 or width != 2 or rate != 16000:
        raise AudioError(
            f"{path}: need 16 kHz mono PCM16, got {channels}ch/{8 * width}bit/{rate}Hz")
    return np.frombuffer(frames, dtype="<i2").astype(np.float32) / 32768.0


_SSLF_MAGIC = b"SSLF"


def write_sslf(stack: np.ndarray, path) -> None:
    """Atomic SSLF write: magic, version=1, (L+1, T, D) u32 LE, float32 LE payload."""
    arr = np.ascontiguousarray(stack, dtype="<f4")
    if arr.ndim != 3:
        raise BridgeError(f"expected (L+1, T, D) stack, got {arr.shape}")
    lp1, t, d = arr.shape
    blob = _SSLF_MAGIC + struct.pack("<IIII", 1, lp1, t, d) + arr.tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_checkpoint(config: BridgeConfig):
    model = AutoModel.from_pretrained(config.model_id)
    depth = getattr(model.config, "num_hidden_layers", None)
    if depth is None:
        raise CheckpointMismatch(f"{config.model_id}: not a layered encoder checkpoint")
    if depth != config.expected_layers:
        raise CheckpointMismatch(
            f"{config.model_id}: checkpoint has {depth} layers, "
            f"config declared {config.expected_layers}")
    model.eval()
    return model


@torch.no_grad()
def extract_stack(model, samples: np.ndarray, normalize: bool = False) -> np.ndarray:
    """(L+1, T, D) float32 hidden-state stack; layer 0 is the frontend output."""
    if normalize:
        samples = (samples - samples.mean()) / (samples.std() + 1e-7)
    x = torch.from_numpy(np.ascontiguousarray(samples, dtype=np.float32))[None, :]
    out = model(x, output_hidden_states=True)
    states = [h[0].cpu().numpy().astype(np.float32) for h in out.hidden_states]
    return np.stack(states)


def dump_corpus(config: BridgeConfig) -> list[tuple[str, int]]:
    """One `<utt_id>.sslf` per manifest row plus a `summary.tsv` of frame counts."""
    model = load_checkpoint(config)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary: list[tuple[str, int]] = []
    for utt_id, wav_path in read_manifest_paths(config.manifest_path):
        samples = read_wav_mono16k(wav_path)
        stack = extract_stack(model, samples, normalize=config.normalize)
        write_sslf(stack, out_dir / f"{utt_id}.sslf")
        summary.append((utt_id, stack.shape[1]))
    (out_dir / "summary.tsv").write_text(
        "\n".join(f"{utt}\t{t}" for utt, t in summary) + ("\n" if summary else ""))
    return summary
