"""Audio decoding, resampling, speed perturbation, log-mel filterbanks and SpecAugment."""

from __future__ import annotations

import io
import struct
import wave
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DecodeError, EmptyInputError, UnsupportedFormatError

TARGET_RATE_HZ = 16000
LOG_FLOOR = 1e-10
PRE_EMPHASIS = 0.97

# Kaiser-windowed sinc interpolation
RESAMPLE_TAPS = 64
RESAMPLE_BETA = 8.6
_RESAMPLE_CHUNK = 1 << 15

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if samples.size and not np.all(np.isfinite(samples)):
            raise ValueError("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def slice_seconds(self, offset_s: float, duration_s: float | None = None) -> "AudioBuffer":
        start = int(round(offset_s * self.sample_rate_hz))
        stop = None if duration_s is None else start + int(round(duration_s * self.sample_rate_hz))
        return AudioBuffer(self.samples[start:stop], self.sample_rate_hz)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    frames: np.ndarray  # (T, F)
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_bins(self) -> int:
        return self.frames.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.frames if dtype is None else self.frames.astype(dtype)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def decode_wav(data: bytes) -> AudioBuffer:
    """Decode a RIFF/WAVE byte string (PCM16 or float32), averaging channels to mono."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DecodeError("not a RIFF/WAVE container")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size and chunk_id != b"data":
            raise DecodeError(f"truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            if size < 16:
                raise DecodeError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _WAVE_FORMAT_EXTENSIBLE:
                if size < 40:
                    raise DecodeError("extensible fmt chunk too short")
                (sub,) = struct.unpack_from("<H", body, 24)
                fmt = (sub,) + fmt[1:]
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise DecodeError("missing fmt chunk")
    if payload is None:
        raise DecodeError("missing data chunk")
    tag, channels, rate, _, _, bits = fmt
    if channels < 1 or rate < 1:
        raise DecodeError(f"invalid header: {channels} channels at {rate} Hz")
    if tag == _WAVE_FORMAT_PCM and bits == 16:
        frame_bytes = 2 * channels
        raw = np.frombuffer(payload[: len(payload) // frame_bytes * frame_bytes], dtype="<i2")
        samples = raw.astype(np.float64) / 32768.0
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        frame_bytes = 4 * channels
        raw = np.frombuffer(payload[: len(payload) // frame_bytes * frame_bytes], dtype="<f4")
        samples = raw.astype(np.float64)
        if not np.all(np.isfinite(samples)):
            raise DecodeError("float samples contain NaN or infinity")
        samples = np.clip(samples, -1.0, 1.0)
    else:
        raise UnsupportedFormatError(f"unsupported encoding: format tag {tag:#06x}, {bits} bits")
    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1)
    return AudioBuffer(samples, rate)


def read_wav(path) -> AudioBuffer:
    return decode_wav(Path(path).read_bytes())


def encode_wav(audio: AudioBuffer) -> bytes:
    """Encode as mono PCM16."""
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate_hz)
        w.writeframes(pcm.tobytes())
    return buf.getvalue()


def write_wav(path, audio: AudioBuffer):
    Path(path).write_bytes(encode_wav(audio))


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _sinc_interpolate(x: np.ndarray, ratio: float, out_len: int) -> np.ndarray:
    n = x.shape[0]
    half = RESAMPLE_TAPS // 2
    cutoff = min(1.0, ratio)
    offsets = np.arange(-half + 1, half + 1)
    norm = np.i0(RESAMPLE_BETA)
    out = np.empty(out_len)
    for start in range(0, out_len, _RESAMPLE_CHUNK):
        pos = np.arange(start, min(start + _RESAMPLE_CHUNK, out_len)) / ratio
        k = np.floor(pos).astype(np.int64)[:, None] + offsets
        d = pos[:, None] - k
        win = np.i0(RESAMPLE_BETA * np.sqrt(np.clip(1.0 - (d / half) ** 2, 0.0, None))) / norm
        taps = cutoff * np.sinc(cutoff * d) * win
        valid = (k >= 0) & (k < n)
        vals = np.where(valid, x[np.clip(k, 0, n - 1)], 0.0)
        out[start : start + pos.shape[0]] = np.sum(vals * taps, axis=1)
    return out


def _resample_ratio(samples: np.ndarray, ratio: float) -> np.ndarray:
    out_len = int(round(samples.shape[0] * ratio))
    if samples.shape[0] == 0 or out_len == 0:
        return np.zeros(0)
    return np.clip(_sinc_interpolate(samples, ratio, out_len), -1.0, 1.0)


def resample(audio: AudioBuffer, target_rate_hz: int) -> AudioBuffer:
    if target_rate_hz <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate_hz}")
    if target_rate_hz == audio.sample_rate_hz:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate_hz)
    ratio = target_rate_hz / audio.sample_rate_hz
    return AudioBuffer(_resample_ratio(audio.samples, ratio), target_rate_hz)


def speed_perturb(audio: AudioBuffer, factor: float) -> AudioBuffer:
    """Play back ``factor`` times faster: duration scales by 1/factor, pitch moves with it."""
    if not factor > 0:
        raise ValueError(f"speed factor must be positive, got {factor}")
    if factor == 1.0:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate_hz)
    return AudioBuffer(_resample_ratio(audio.samples, 1.0 / factor), audio.sample_rate_hz)


# ---------------------------------------------------------------------------
# filterbank features
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, low_hz: float = 20.0, high_hz: float = 8000.0):
    """Triangular filters, equally spaced on the mel scale, as an (n_mels, n_fft//2 + 1) matrix.

    Filters narrower than one FFT bin would come out empty; those fall back to
    a unit weight on the bin nearest their centre so every band sees energy.
    """
    if not 0 <= low_hz < high_hz <= sample_rate / 2:
        raise ValueError(f"mel range [{low_hz}, {high_hz}] Hz invalid for {sample_rate} Hz audio")
    edges = np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_mels + 2)
    bin_mel = hz_to_mel(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)
    left, centre, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_mel - left) / (centre - left)
    down = (right - bin_mel) / (right - centre)
    fb = np.clip(np.minimum(up, down), 0.0, None)
    empty = fb.sum(axis=1) == 0
    if np.any(empty):
        centre_hz = mel_to_hz(edges[1:-1][empty])
        nearest = np.round(centre_hz * n_fft / sample_rate).astype(int)
        fb[np.flatnonzero(empty), nearest] = 1.0
    return fb


def extract_fbank(
    audio: AudioBuffer,
    frame_length_ms: float = 25.0,
    frame_shift_ms: float = 10.0,
    n_mels: int = 80,
    low_hz: float = 20.0,
    high_hz: float = 8000.0,
) -> FeatureMatrix:
    sr = audio.sample_rate_hz
    flen = int(round(sr * frame_length_ms / 1000.0))
    shift = int(round(sr * frame_shift_ms / 1000.0))
    n = len(audio)
    if n < flen:
        raise EmptyInputError(f"audio has {n} samples, shorter than one {flen}-sample frame")
    n_frames = 1 + (n - flen) // shift
    x = audio.samples
    frames = np.lib.stride_tricks.sliding_window_view(x, flen)[::shift][:n_frames]
    # per-frame pre-emphasis with x[-1] := x[0]
    emph = np.empty_like(frames)
    emph[:, 1:] = frames[:, 1:] - PRE_EMPHASIS * frames[:, :-1]
    emph[:, 0] = frames[:, 0] * (1.0 - PRE_EMPHASIS)
    n_fft = 1 << (flen - 1).bit_length()
    spec = np.fft.rfft(emph * np.hamming(flen), n=n_fft)
    power = spec.real**2 + spec.imag**2
    energies = power @ mel_filterbank(n_mels, n_fft, sr, low_hz, high_hz).T
    logmel = np.log(np.maximum(energies, LOG_FLOOR)).astype(np.float32)
    return FeatureMatrix(logmel, frame_shift_ms=frame_shift_ms, frame_length_ms=frame_length_ms)


# ---------------------------------------------------------------------------
# SpecAugment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpecAugmentConfig:
    time_warp: int = 80
    freq_masks: int = 2
    freq_width: int = 27
    time_masks: int = 2
    time_width: int = 100
    time_width_ratio: float = 0.2

    @classmethod
    def identity(cls) -> "SpecAugmentConfig":
        return cls(time_warp=0, freq_masks=0, time_masks=0)


def _time_warp(x: np.ndarray, window: int, rng: np.random.Generator) -> np.ndarray:
    t_len = x.shape[0]
    centre = int(rng.integers(window, t_len - window))
    dest = int(np.clip(centre + rng.integers(-window, window + 1), 1, t_len - 2))
    t = np.arange(t_len, dtype=np.float64)
    src = np.where(
        t < dest,
        t * centre / dest,
        centre + (t - dest) * (t_len - 1 - centre) / (t_len - 1 - dest),
    )
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, t_len - 1)
    frac = (src - lo)[:, None]
    return (1.0 - frac) * x[lo] + frac * x[hi]


def spec_augment(feat, rng: np.random.Generator, config: SpecAugmentConfig = SpecAugmentConfig()):
    """Time warp, then frequency and time masks filled with the utterance mean.

    Accepts a :class:`FeatureMatrix` or a bare (T, F) array and returns the same kind.
    """
    frames = feat.frames if isinstance(feat, FeatureMatrix) else np.asarray(feat)
    x = frames.astype(np.float64, copy=True)
    t_len, n_bins = x.shape
    w = config.time_warp
    if w > 0 and t_len >= 2 * w + 2:
        x = _time_warp(x, w, rng)
    if t_len and n_bins:
        fill = x.mean()
        for _ in range(config.freq_masks):
            width = int(rng.integers(0, min(config.freq_width, n_bins) + 1))
            start = int(rng.integers(0, n_bins - width + 1))
            x[:, start : start + width] = fill
        cap = min(config.time_width, int(config.time_width_ratio * t_len))
        for _ in range(config.time_masks):
            width = int(rng.integers(0, cap + 1))
            start = int(rng.integers(0, t_len - width + 1))
            x[start : start + width, :] = fill
    x = x.astype(frames.dtype)
    if isinstance(feat, FeatureMatrix):
        return replace(feat, frames=x)
    return x


# ---------------------------------------------------------------------------
# feature cache files
# ---------------------------------------------------------------------------

_FBNK_MAGIC = b"FBNK"


def save_features(path, feat) -> None:
    """Write ``FBNK`` + u32 T + u32 F + T*F little-endian float32, row-major."""
    frames = feat.frames if isinstance(feat, FeatureMatrix) else np.asarray(feat)
    t_len, n_bins = frames.shape
    with open(path, "wb") as fh:
        fh.write(_FBNK_MAGIC + struct.pack("<II", t_len, n_bins))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def load_features(path) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != _FBNK_MAGIC:
        raise DecodeError(f"{path}: not an FBNK feature file")
    t_len, n_bins = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * t_len * n_bins
    if len(raw) != expected:
        raise DecodeError(f"{path}: expected {expected} bytes, found {len(raw)}")
    frames = np.frombuffer(raw, dtype="<f4", offset=12).reshape(t_len, n_bins).astype(np.float32)
    return FeatureMatrix(frames)
