"""Audio frontend: log-Mel extraction, normalization, masking augmentation,
and the two-block convolutional subsampler that produces the sequence fed
to the encoder stack.

Raw audio enters as 16 kHz or 8 kHz PCM; precomputed features can be read
from FEAT containers instead. Features are 80-dim log-Mel frames at a
10 ms hop with a 25 ms window.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as tc
from .layers import Conv2D, Linear, Module
from .tensor import InputError, Tensor

WINDOW_MS = 25.0
HOP_MS = 10.0
NUM_MEL_BINS = 80
POWER_FLOOR = 1e-10
VARIANCE_FLOOR = 1e-8


@dataclass
class FeatureMatrix:
    """frames: (S, d0) log-Mel energies; one row per 10 ms hop."""

    frames: np.ndarray
    frame_shift_ms: float = HOP_MS
    normalized: bool = False

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class AugmentPolicy:
    """Frequency/time masking without time warping.

    Widths are drawn uniformly from {0..F} / {0..T}; each mask is placed
    uniformly among the starts where it fits, clipped to the matrix when
    the maximum width exceeds the axis. Disabled policy is the identity.
    """

    freq_mask_width: int = 27
    num_freq_masks: int = 2
    time_mask_width: int = 100
    num_time_masks: int = 2
    enabled: bool = True


# ---------------------------------------------------------------------------
# mel filterbank geometry
# ---------------------------------------------------------------------------

def hz_to_mel(freq_hz):
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_bins: int, nfft: int, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """Triangular filters over FFT bin frequencies, edges mel-spaced 0..Nyquist.

    Returns (weights (num_bins, nfft//2+1), center_freqs_hz (num_bins,)).
    Filters too narrow to touch any FFT bin get unit weight at the bin
    nearest their center so every output stays live.
    """
    nyquist = sample_rate / 2.0
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), num_bins + 2))
    fft_freqs = np.arange(nfft // 2 + 1) * (sample_rate / nfft)
    weights = np.zeros((num_bins, nfft // 2 + 1))
    for m in range(num_bins):
        lo, center, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        up = (fft_freqs - lo) / max(center - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - center, 1e-12)
        weights[m] = np.maximum(0.0, np.minimum(up, down))
        if weights[m].sum() == 0.0:
            weights[m, int(np.argmin(np.abs(fft_freqs - center)))] = 1.0
    return weights, edges_hz[1:-1]


def logmel_extract(pcm: np.ndarray, sample_rate: int) -> FeatureMatrix:
    """25 ms Hann-windowed frames every 10 ms -> 80 natural-log Mel energies.

    Frame count is floor((num_samples - window) / hop) + 1; the power
    spectrum is floored at 1e-10 per FFT bin before Mel weighting.
    """
    if sample_rate not in (8000, 16000):
        raise InputError(f"sample rate must be 8000 or 16000 Hz, got {sample_rate}")
    pcm = np.asarray(pcm, dtype=np.float64).reshape(-1)
    window = int(round(sample_rate * WINDOW_MS / 1000.0))
    hop = int(round(sample_rate * HOP_MS / 1000.0))
    if pcm.size < window:
        raise InputError(f"audio of {pcm.size} samples is shorter than one "
                         f"{window}-sample window")
    num_frames = (pcm.size - window) // hop + 1
    nfft = 1
    while nfft < window:
        nfft *= 2
    weights, _ = mel_filterbank(NUM_MEL_BINS, nfft, sample_rate)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)

    starts = np.arange(num_frames) * hop
    frames = pcm[starts[:, None] + np.arange(window)] * hann
    spectrum = np.fft.rfft(frames, n=nfft, axis=1)
    power = np.maximum((spectrum.real ** 2 + spectrum.imag ** 2), POWER_FLOOR)
    feats = np.log(power @ weights.T)
    return FeatureMatrix(frames=feats, frame_shift_ms=HOP_MS, normalized=False)


def read_wav(path) -> tuple[np.ndarray, int]:
    """Load a 16-bit PCM WAV; multi-channel audio is averaged to mono."""
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise InputError(f"{path}: only 16-bit PCM WAV is supported")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
        channels = fh.getnchannels()
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        pcm = pcm.reshape(-1, channels).mean(axis=1)
    return pcm, rate


# ---------------------------------------------------------------------------
# FEAT container: "FEAT" | version | S | d0 (int64 LE) | row-major float64
# ---------------------------------------------------------------------------

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1


def save_features(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError(f"feature matrix must be 2-D, got shape {arr.shape}")
    with open(Path(path), "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<qqq", FEAT_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f8", copy=False).tobytes())


def load_features(path) -> np.ndarray:
    with open(Path(path), "rb") as fh:
        if fh.read(4) != FEAT_MAGIC:
            raise InputError(f"{path} is not a FEAT container")
        version, num_frames, dim = struct.unpack("<qqq", fh.read(24))
        if version != FEAT_VERSION:
            raise InputError(f"unsupported FEAT version {version}")
        data = np.frombuffer(fh.read(8 * num_frames * dim), dtype="<f8")
        if data.size != num_frames * dim:
            raise InputError(f"{path}: truncated FEAT payload")
    return data.astype(np.float64).reshape(num_frames, dim)


# ---------------------------------------------------------------------------
# normalization and masking
# ---------------------------------------------------------------------------

def normalize(fm: FeatureMatrix) -> FeatureMatrix:
    """Per-dimension zero mean, unit variance over the utterance."""
    if fm.num_frames < 2:
        raise InputError("normalization needs at least 2 frames")
    mean = fm.frames.mean(axis=0)
    var = np.maximum(fm.frames.var(axis=0), VARIANCE_FLOOR)
    out = (fm.frames - mean) / np.sqrt(var)
    return FeatureMatrix(frames=out, frame_shift_ms=fm.frame_shift_ms, normalized=True)


def _mask_spans(axis_len: int, max_width: int, count: int, rng: np.random.Generator):
    spans = []
    for _ in range(count):
        width = int(rng.integers(0, min(max_width, axis_len) + 1))
        if width == 0:
            continue
        start = int(rng.integers(0, axis_len - width + 1))
        spans.append((start, start + width))
    return spans


def spec_augment(fm: FeatureMatrix, policy: AugmentPolicy,
                 rng: np.random.Generator) -> FeatureMatrix:
    """Zero out masked time rows and frequency columns; never warps time.

    Zero is the per-dimension mean after normalization, so masking erases
    rather than biases. Requires a normalized input.
    """
    if not policy.enabled:
        return fm
    if not fm.normalized:
        raise InputError("spec_augment expects normalized features")
    out = fm.frames.copy()
    num_frames, dim = out.shape
    for start, stop in _mask_spans(dim, policy.freq_mask_width,
                                   policy.num_freq_masks, rng):
        out[:, start:stop] = 0.0
    for start, stop in _mask_spans(num_frames, policy.time_mask_width,
                                   policy.num_time_masks, rng):
        out[start:stop, :] = 0.0
    return replace(fm, frames=out)


# ---------------------------------------------------------------------------
# convolutional subsampler
# ---------------------------------------------------------------------------

class VGGFrontend(Module):
    """Two conv blocks over the (time, freq) plane, then a linear lift.

    Block 1: two 3x3 convs, 32 filters, ReLU, 2x2 max-pool.
    Block 2: two 3x3 convs, 64 filters, ReLU, then 2x2 pool in ctc mode
    (total time subsampling x4) or no pool in hybrid mode (x2).
    Channel and frequency axes are flattened and projected to d_model.
    """

    def __init__(self, d_model: int, mode: str, seed: int, d0: int = 80,
                 name: str = "frontend"):
        if mode not in ("ctc", "hybrid"):
            raise InputError(f"frontend mode must be 'ctc' or 'hybrid', got {mode!r}")
        if d0 != NUM_MEL_BINS:
            raise InputError(f"frontend expects {NUM_MEL_BINS}-dim features, got {d0}")
        self.mode = mode
        self.d0 = d0
        self.conv1a = Conv2D(1, 32, 3, seed, f"{name}.conv1a")
        self.conv1b = Conv2D(32, 32, 3, seed, f"{name}.conv1b")
        self.conv2a = Conv2D(32, 64, 3, seed, f"{name}.conv2a")
        self.conv2b = Conv2D(64, 64, 3, seed, f"{name}.conv2b")
        freq_out = d0 // 4 if mode == "ctc" else d0 // 2
        self.proj = Linear(64 * freq_out, d_model, seed, f"{name}.proj")

    @property
    def time_subsampling(self) -> int:
        return 4 if self.mode == "ctc" else 2

    def output_length(self, num_frames: int) -> int:
        return num_frames // self.time_subsampling

    def __call__(self, feats) -> Tensor:
        x = feats if isinstance(feats, Tensor) else Tensor(feats)
        if x.ndim != 2 or x.shape[1] != self.d0:
            raise InputError(f"frontend input must be (S, {self.d0}), got {x.shape}")
        if self.output_length(x.shape[0]) < 1:
            raise InputError(f"{x.shape[0]} frames cannot be subsampled "
                             f"x{self.time_subsampling} in {self.mode} mode")
        h = x.reshape(1, x.shape[0], x.shape[1])
        h = tc.relu(self.conv1a(h))
        h = tc.relu(self.conv1b(h))
        h = tc.maxpool2d(h, 2, 2)
        h = tc.relu(self.conv2a(h))
        h = tc.relu(self.conv2b(h))
        if self.mode == "ctc":
            h = tc.maxpool2d(h, 2, 2)
        ch, s_out, freq = h.shape
        # (ch, S', F) -> (S', F*ch): one flat vector per output position
        h = tc.transpose(h.reshape(ch, s_out * freq))
        h = h.reshape(s_out, freq * ch)
        return self.proj(h)
