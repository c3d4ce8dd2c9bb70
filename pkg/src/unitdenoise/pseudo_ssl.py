"""Deterministic frozen layered feature encoder (a desk-scale stand-in for a
pre-trained speech encoder) plus the SSLF dump format for ingesting features
from real models.

The encoder body never trains; residual adapter blocks are the only pathway
through which gradients may flow, and only when the caller supplies them as
taped tensors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import erf

from . import substrate
from .audio import Waveform, frame_signal

# fixed standardisation of the log-mel frontend (input-independent so the
# encoder stays a pure function of the waveform)
_LOGMEL_SHIFT = -4.0
_LOGMEL_SCALE = 3.0
_N_FFT = 512


class FeatureError(Exception):
    pass


class FeatureFormatError(FeatureError):
    pass


class BadMagic(FeatureFormatError):
    pass


class TruncatedPayload(FeatureFormatError):
    pass


class DimensionOverflow(FeatureFormatError):
    pass


@dataclass(frozen=True)
class PseudoEncoderConfig:
    num_layers: int = 6
    dim: int = 64
    n_mels: int = 40
    window_ms: float = 25.0
    hop_ms: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 2:
            raise ValueError("need at least 2 encoder layers")
        if self.dim < 8:
            raise ValueError("feature dim must be >= 8")

    @property
    def default_cluster_layer(self) -> int:
        # second-third from the top, mirroring the usual clustering-layer choice
        return self.num_layers - 2


@dataclass
class LayerStackFeatures:
    """All layer states of one utterance: (L+1, T, D); layer 0 is the frontend."""

    layers: np.ndarray
    frame_hop_ms: float = 20.0

    def __post_init__(self):
        self.layers = np.asarray(self.layers)
        if self.layers.ndim != 3:
            raise FeatureError(f"expected (L+1, T, D), got shape {self.layers.shape}")
        if not np.all(np.isfinite(self.layers)):
            raise FeatureError("features contain non-finite entries")

    @property
    def num_layers(self) -> int:  # L (excluding the frontend)
        return self.layers.shape[0] - 1

    @property
    def num_frames(self) -> int:
        return self.layers.shape[1]

    @property
    def dim(self) -> int:
        return self.layers.shape[2]


@dataclass
class AdapterBlock:
    """Residual bottleneck: x + gelu(x @ down + bias_b) @ up + bias_d.

    up and bias_d start at zero so the block is the identity at initialisation.
    """

    down: np.ndarray   # (D, B)
    bias_b: np.ndarray  # (B,)
    up: np.ndarray     # (B, D)
    bias_d: np.ndarray  # (D,)


def init_adapters(config: PseudoEncoderConfig, bottleneck: int, seed: int) -> list[AdapterBlock]:
    """One zero-output adapter per encoder layer (layers 1..L)."""
    rng = np.random.default_rng([seed, 0xAD])
    blocks = []
    for _ in range(config.num_layers):
        down = rng.standard_normal((config.dim, bottleneck)) / np.sqrt(config.dim)
        blocks.append(AdapterBlock(
            down=down,
            bias_b=np.zeros(bottleneck),
            up=np.zeros((bottleneck, config.dim)),
            bias_d=np.zeros(config.dim),
        ))
    return blocks


# ---------------------------------------------------------------------------
# frozen weights
# ---------------------------------------------------------------------------

def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + f / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def _mel_filterbank(n_mels: int, n_fft: int, sr: int) -> np.ndarray:
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sr / 2.0), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, d=1.0 / sr)
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bins - lo) / max(mid - lo, 1e-9)
        down = (hi - bins) / max(hi - mid, 1e-9)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


@dataclass(frozen=True)
class _FrozenWeights:
    mel_fb: np.ndarray
    hann: np.ndarray
    w0: np.ndarray
    b0: np.ndarray
    layer_w: tuple
    layer_b: tuple


@lru_cache(maxsize=8)
def _frozen_weights(config: PseudoEncoderConfig) -> _FrozenWeights:
    rng = np.random.default_rng([config.seed, 0x55])
    win = int(round(config.window_ms * 16))
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    mel_fb = _mel_filterbank(config.n_mels, _N_FFT, 16000)

    w0 = rng.standard_normal((config.n_mels, config.dim)) / np.sqrt(config.n_mels)
    b0 = 0.1 * rng.standard_normal(config.dim)

    ws, bs = [], []
    for _ in range(config.num_layers):
        w = rng.standard_normal((config.dim, config.dim))
        w *= 0.9 / np.linalg.svd(w, compute_uv=False)[0]  # spectral norm 0.9
        ws.append(w)
        bs.append(0.1 * rng.standard_normal(config.dim))
    return _FrozenWeights(mel_fb=mel_fb, hann=hann, w0=w0, b0=b0,
                          layer_w=tuple(ws), layer_b=tuple(bs))


def frontend(waveform: Waveform, config: PseudoEncoderConfig) -> np.ndarray:
    """Log-mel filterbank energies projected to the feature dim: the layer-0 state."""
    fw = _frozen_weights(config)
    frames = frame_signal(waveform, config.window_ms, config.hop_ms)
    if frames.shape[0] == 0:
        raise FeatureError("waveform too short to produce a single frame")
    spec = np.abs(np.fft.rfft(frames * fw.hann, n=_N_FFT, axis=1)) ** 2
    logmel = np.log10(spec @ fw.mel_fb.T + 1e-8)
    logmel = (logmel - _LOGMEL_SHIFT) / _LOGMEL_SCALE
    return logmel @ fw.w0 + fw.b0


_INV_SQRT2 = 1.0 / np.sqrt(2.0)


def _gelu_np(x: np.ndarray) -> np.ndarray:
    # same expression as the substrate op so both paths agree bitwise
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2)))


def stack_from_layer0(layer0: np.ndarray, config: PseudoEncoderConfig,
                      adapters: list[AdapterBlock] | None = None) -> np.ndarray:
    """Run the frozen residual-tanh stack; returns (L+1, T, D)."""
    fw = _frozen_weights(config)
    if adapters is not None and len(adapters) != config.num_layers:
        raise FeatureError("need one adapter per encoder layer")
    states = [layer0]
    x = layer0
    for i in range(config.num_layers):
        x = x + np.tanh(np.matmul(x, fw.layer_w[i]) + fw.layer_b[i])
        if adapters is not None:
            a = adapters[i]
            x = x + np.matmul(_gelu_np(np.matmul(x, a.down) + a.bias_b), a.up) + a.bias_d
        states.append(x)
    return np.stack(states)


def stack_from_layer0_taped(layer0: np.ndarray, config: PseudoEncoderConfig,
                            adapter_tensors: list[dict[str, substrate.Tensor]]
                            ) -> list[substrate.Tensor]:
    """Taped twin of stack_from_layer0: gradients flow to adapter tensors only.

    The frozen maps enter as constants, so their gradients are never built.
    """
    fw = _frozen_weights(config)
    if len(adapter_tensors) != config.num_layers:
        raise FeatureError("need one adapter per encoder layer")
    x = substrate.constant(layer0)
    states = [x]
    for i in range(config.num_layers):
        w = substrate.constant(fw.layer_w[i])
        b = substrate.constant(fw.layer_b[i])
        x = substrate.add(x, substrate.tanh(substrate.add(substrate.matmul(x, w), b)))
        a = adapter_tensors[i]
        hidden = substrate.gelu(substrate.add(substrate.matmul(x, a["down"]), a["bias_b"]))
        x = substrate.add(substrate.add(x, substrate.matmul(hidden, a["up"])), a["bias_d"])
        states.append(x)
    return states


def extract_features(waveform: Waveform, config: PseudoEncoderConfig,
                     adapters: list[AdapterBlock] | None = None) -> LayerStackFeatures:
    """All layer states for one waveform; pure in (waveform, seed, adapters)."""
    layer0 = frontend(waveform, config)
    return LayerStackFeatures(stack_from_layer0(layer0, config, adapters),
                              frame_hop_ms=config.hop_ms)


def select_layer(features: LayerStackFeatures, layer_index: int) -> np.ndarray:
    if not (0 <= layer_index <= features.num_layers):
        raise FeatureError(
            f"layer index {layer_index} out of range 0..{features.num_layers}"
        )
    return features.layers[layer_index]


# ---------------------------------------------------------------------------
# SSLF dump format
# ---------------------------------------------------------------------------

_SSLF_MAGIC = b"SSLF"
_SSLF_VERSION = 1
_MAX_ELEMENTS = 1 << 28  # 1 GiB of float32 per utterance is already absurd


def dump_features(features: LayerStackFeatures, path) -> None:
    arr = np.ascontiguousarray(features.layers, dtype="<f4")
    lp1, t, d = arr.shape
    header = _SSLF_MAGIC + struct.pack("<IIII", _SSLF_VERSION, lp1, t, d)
    Path(path).write_bytes(header + arr.tobytes())


def load_features(path) -> LayerStackFeatures:
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise TruncatedPayload(f"{path}: shorter than the SSLF header")
    if raw[:4] != _SSLF_MAGIC:
        raise BadMagic(f"{path}: bad magic {raw[:4]!r}")
    version, lp1, t, d = struct.unpack_from("<IIII", raw, 4)
    if version != _SSLF_VERSION:
        raise FeatureFormatError(f"{path}: unsupported SSLF version {version}")
    n = lp1 * t * d
    if lp1 == 0 or t == 0 or d == 0 or n > _MAX_ELEMENTS:
        raise DimensionOverflow(f"{path}: implausible dims {(lp1, t, d)}")
    if len(raw) != 20 + 4 * n:
        raise TruncatedPayload(f"{path}: expected {20 + 4 * n} bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4", offset=20).reshape(lp1, t, d)
    return LayerStackFeatures(arr.astype(np.float32))
