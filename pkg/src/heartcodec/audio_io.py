"""Mono PCG waveform I/O and the small amount of DSP the pipeline needs.

On-disk format is 16-bit PCM mono RIFF/WAVE.  Reading also accepts 32-bit
float data and stereo files (averaged to mono).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import firwin, resample_poly

WAVE_FORMAT_PCM = 1
WAVE_FORMAT_IEEE_FLOAT = 3
WAVE_FORMAT_EXTENSIBLE = 0xFFFE

KAISER_BETA = 8.6
CUTOFF_FRACTION = 0.45
TAPS_PER_PHASE = 24


class WavError(ValueError):
    """Raised for unreadable or unsupported WAV files."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray  # float64, mono
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {arr.shape}")
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path) -> AudioClip:
    """Decode a RIFF/WAVE file into a mono clip.

    16-bit codes map to amplitude ``s / 32768``; stereo is averaged per sample.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise WavError(f"cannot read {path}: {exc}") from exc
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    pcm = None
    for cid, body in _iter_chunks(data):
        if cid == b"fmt " and fmt is None:
            if len(body) < 16:
                raise WavError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == WAVE_FORMAT_EXTENSIBLE and len(body) >= 26:
                # real format code lives in the first two bytes of the subformat GUID
                sub = struct.unpack_from("<H", body, 24)[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data" and pcm is None:
            pcm = body
    if fmt is None:
        raise WavError(f"{path}: missing fmt chunk")
    if pcm is None:
        raise WavError(f"{path}: missing data chunk")

    code, channels, rate, _, block_align, bits = fmt
    if channels not in (1, 2):
        raise WavError(f"{path}: unsupported channel count {channels}")
    if code == WAVE_FORMAT_PCM and bits == 16:
        dtype = np.dtype("<i2")
    elif code == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype = np.dtype("<f4")
    else:
        raise WavError(
            f"{path}: unsupported encoding in fmt chunk (format code {code}, {bits} bits)"
        )
    frame_bytes = dtype.itemsize * channels
    n_frames = len(pcm) // frame_bytes
    if n_frames == 0:
        raise WavError(f"{path}: zero-length data chunk")

    raw = np.frombuffer(pcm[: n_frames * frame_bytes], dtype=dtype).reshape(n_frames, channels)
    x = raw.astype(np.float64)
    if dtype.kind == "i":
        x /= 32768.0
    return AudioClip(x.mean(axis=1), int(rate))


def to_pcm16(samples) -> np.ndarray:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")


def encode_wav(clip: AudioClip) -> bytes:
    pcm = to_pcm16(clip.samples).tobytes()
    rate = clip.sample_rate
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, WAVE_FORMAT_PCM, 1, rate, rate * 2, 2, 16)
    return header + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm


def write_wav(clip: AudioClip, path) -> None:
    """Write ``clip`` as mono 16-bit PCM, clipping to [-1, 1] first."""
    Path(path).write_bytes(encode_wav(clip))


def design_lowpass(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc prototype for a polyphase ``up/down`` resampler.

    Cutoff is ``CUTOFF_FRACTION`` of the lower of the two Nyquist rates; the
    filter is normalized to unit DC gain at the upsampled rate.
    """
    factor = max(up, down)
    half = TAPS_PER_PHASE * factor // 2
    h = firwin(2 * half + 1, 2 * CUTOFF_FRACTION / factor, window=("kaiser", KAISER_BETA))
    return h / h.sum()


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Windowed-sinc polyphase resampling to ``target_rate`` Hz.

    Output length is ``round(len * target_rate / source_rate)``.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    src = clip.sample_rate
    n_out = int(round(len(clip) * target_rate / src))
    if target_rate == src:
        return AudioClip(clip.samples.copy(), src)
    ratio = Fraction(target_rate, src)
    up, down = ratio.numerator, ratio.denominator
    y = resample_poly(clip.samples, up, down, window=design_lowpass(up, down))
    if y.shape[0] >= n_out:
        y = y[:n_out]
    else:
        y = np.concatenate([y, np.zeros(n_out - y.shape[0])])
    return AudioClip(y, int(target_rate))


def pad_or_crop(clip: AudioClip, target_len: int) -> AudioClip:
    """Zero-pad at the end or truncate at the end to exactly ``target_len``."""
    if target_len <= 0:
        raise ValueError(f"target_len must be positive, got {target_len}")
    x = clip.samples
    if len(x) >= target_len:
        return AudioClip(x[:target_len].copy(), clip.sample_rate)
    out = np.zeros(target_len)
    out[: len(x)] = x
    return AudioClip(out, clip.sample_rate)


def rms(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return math.sqrt(float(np.mean(x * x))) if x.size else 0.0
