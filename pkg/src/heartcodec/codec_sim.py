"""Codec-simulation augmentation.

Two engines share one call shape:

* ``external`` shells out to a transcoder twice per file (encode to Opus/OGG
  at the target bitrate, decode back to 8 kHz WAV), via editable command
  templates.
* ``builtin`` is an in-process lossy transform coder: a 512-sample sine-window
  MDCT with 50% overlap that keeps, per frame, only as many of the largest
  coefficients as the bit budget allows.  It models low-bitrate spectral
  smearing; it is not an Opus implementation.
"""

from __future__ import annotations

import logging
import os
import shlex
import shutil
import subprocess
import tempfile
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, WavError, read_wav, resample, write_wav
from .dataset import CODEC, Manifest, ManifestEntry

log = logging.getLogger(__name__)

OPUS_OGG = "opus_ogg"
BUILTIN_MDCT = "builtin_mdct"
ENGINE_FORMATS = {"external": OPUS_OGG, "builtin": BUILTIN_MDCT}

STANDARD_BITRATES = (4500, 5500, 7700)
CODEC_RATE = 8000

FRAME = 512
HOP = FRAME // 2
BITS_PER_COEF = 6
QUANT_BITS = 4

DEFAULT_ENCODE_TEMPLATE = "ffmpeg -y -loglevel error -i {input} -c:a libopus -b:a {bitrate} {output}"
DEFAULT_DECODE_TEMPLATE = "ffmpeg -y -loglevel error -i {input} -ar 8000 {output}"
ENCODER_ENV = "HEARTCODEC_ENCODER"


class CodecError(RuntimeError):
    pass


@dataclass(frozen=True)
class CodecSpec:
    format: str
    bitrate_bps: int

    def __post_init__(self):
        if self.format not in (OPUS_OGG, BUILTIN_MDCT):
            raise ValueError(f"unknown codec format {self.format!r}")
        if int(self.bitrate_bps) <= 0:
            raise ValueError(f"bitrate must be positive, got {self.bitrate_bps}")

    @property
    def tag(self) -> str:
        return f"{self.format}-{self.bitrate_bps}"


def parse_bitrate(text) -> int:
    """``"4.5k"`` -> 4500, ``"7700"`` -> 7700."""
    s = str(text).strip().lower()
    try:
        value = float(s[:-1]) * 1000 if s.endswith("k") else float(s)
    except ValueError:
        raise ValueError(f"bad bitrate {text!r}") from None
    if value <= 0 or value != round(value):
        raise ValueError(f"bad bitrate {text!r}")
    return int(round(value))


def format_bitrate(bps: int) -> str:
    """4500 -> ``"4.5k"``; inverse of :func:`parse_bitrate`."""
    return f"{bps / 1000:g}k"


def parse_bitrate_list(text: str) -> list[int]:
    return [parse_bitrate(tok) for tok in text.split(",") if tok.strip()]


# --- builtin transform codec --------------------------------------------------------


@lru_cache(maxsize=None)
def _mdct_basis(frame: int = FRAME) -> tuple[np.ndarray, np.ndarray]:
    m = frame // 2
    n = np.arange(frame)
    k = np.arange(m)
    window = np.sin(np.pi * (n + 0.5) / frame)
    basis = np.cos(np.pi / m * (n[:, None] + 0.5 + m / 2) * (k[None, :] + 0.5))
    return window, basis


def mdct_frames(x: np.ndarray, frame: int = FRAME) -> np.ndarray:
    """Coefficients [n_frames, frame/2] of ``x`` with hop frame/2 and one hop of zero padding at each end."""
    hop = frame // 2
    n_blocks = -(-len(x) // hop)
    padded = np.zeros((n_blocks + 2) * hop)
    padded[hop : hop + len(x)] = x
    idx = np.arange(n_blocks + 1)[:, None] * hop + np.arange(frame)[None, :]
    window, basis = _mdct_basis(frame)
    return (padded[idx] * window) @ basis


def imdct_frames(coefs: np.ndarray, length: int, frame: int = FRAME) -> np.ndarray:
    """Inverse of :func:`mdct_frames` by windowed overlap-add (TDAC)."""
    hop = frame // 2
    window, basis = _mdct_basis(frame)
    blocks = (coefs @ basis.T) * window * (2.0 / hop)
    out = np.zeros((coefs.shape[0] + 1) * hop)
    for i, b in enumerate(blocks):
        out[i * hop : i * hop + frame] += b
    return out[hop : hop + length]


def coefficients_per_frame(bitrate_bps: int, sample_rate: int) -> int:
    bits = bitrate_bps * HOP / sample_rate
    return min(HOP, int(bits // BITS_PER_COEF))


def simulate_codec_builtin(clip: AudioClip, spec: CodecSpec, seed: int = 0) -> AudioClip:
    """Lossy round trip through the builtin transform coder.

    Each frame spends ``bitrate * hop / rate`` bits at 6 bits per kept
    coefficient.  The largest-magnitude coefficients are kept and rounded to a
    uniform grid (step = frame peak / 8); the rest are zeroed.  ``seed`` picks
    the offset of the frame grid relative to the first sample, so different
    seeds give different copies while the output stays a deterministic
    function of (clip, spec, seed).
    """
    if spec.format != BUILTIN_MDCT:
        raise ValueError(f"builtin engine needs format {BUILTIN_MDCT!r}, got {spec.format!r}")
    offset = int(np.random.default_rng(seed).integers(0, HOP))
    x = np.concatenate([np.zeros(offset), clip.samples])
    coefs = mdct_frames(x)
    keep = coefficients_per_frame(spec.bitrate_bps, clip.sample_rate)
    out = np.zeros_like(coefs)
    if keep > 0:
        order = np.argsort(-np.abs(coefs), axis=1, kind="stable")[:, :keep]
        kept = np.take_along_axis(coefs, order, axis=1)
        peak = np.abs(kept).max(axis=1, keepdims=True)
        step = np.where(peak > 0, peak / 2 ** (QUANT_BITS - 1), 1.0)
        np.put_along_axis(out, order, step * np.round(kept / step), axis=1)
    return AudioClip(imdct_frames(out, len(x))[offset:], clip.sample_rate)


def spectral_distortion(original: AudioClip, distorted: AudioClip, window: int = 256, hop: int = 128) -> float:
    """Mean absolute log-spectral difference in dB over all STFT frames and bins."""
    if original.sample_rate != distorted.sample_rate or len(original) != len(distorted):
        raise ValueError(
            f"clips differ: {len(original)} samples @ {original.sample_rate} Hz vs "
            f"{len(distorted)} samples @ {distorted.sample_rate} Hz"
        )
    eps = 1e-8
    mx = np.abs(_stft(original.samples, window, hop))
    my = np.abs(_stft(distorted.samples, window, hop))
    return float(np.mean(np.abs(20 * np.log10((mx + eps) / (my + eps)))))


def _stft(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    if len(x) < window:
        x = np.concatenate([x, np.zeros(window - len(x))])
    n_frames = 1 + (len(x) - window) // hop
    idx = np.arange(n_frames)[:, None] * hop + np.arange(window)[None, :]
    return np.fft.rfft(x[idx] * np.hanning(window), axis=1)


# --- external transcoder -------------------------------------------------------------


def _render(template: str, **values) -> list[str]:
    try:
        argv = [tok.format(**values) for tok in shlex.split(template)]
    except (KeyError, IndexError, ValueError) as exc:
        names = ", ".join("{" + k + "}" for k in sorted(values))
        raise CodecError(f"bad command template {template!r}: {exc!r}; placeholders are {names}") from None
    if not argv:
        raise CodecError("empty command template")
    override = os.environ.get(ENCODER_ENV)
    if override and not os.path.isabs(argv[0]):
        argv[0] = override
    return argv


def _run(argv: list[str], template: str) -> None:
    if shutil.which(argv[0]) is None:
        raise CodecError(
            f"encoder program {argv[0]!r} not found (template: {template!r}); install it, "
            f"put it on PATH, set {ENCODER_ENV}, or use the builtin engine"
        )
    proc = subprocess.run(argv, capture_output=True, text=True)
    if proc.returncode != 0:
        tail = (proc.stderr or proc.stdout or "").strip()[-2000:]
        raise CodecError(f"command failed with exit status {proc.returncode}: {shlex.join(argv)}\n{tail}")


def check_external_tools(
    encoder_command_template: str = DEFAULT_ENCODE_TEMPLATE,
    decoder_command_template: str = DEFAULT_DECODE_TEMPLATE,
) -> None:
    """Raise CodecError unless both template programs can be found."""
    values = {"input": "in", "output": "out", "bitrate": "0", "bitrate_k": "0k"}
    for template in (encoder_command_template, decoder_command_template):
        argv = _render(template, **values)
        if shutil.which(argv[0]) is None:
            raise CodecError(
                f"encoder program {argv[0]!r} not found (template: {template!r}); install it, "
                f"put it on PATH, set {ENCODER_ENV}, or use the builtin engine"
            )


def simulate_codec_external(
    clip: AudioClip,
    spec: CodecSpec,
    encoder_command_template: str = DEFAULT_ENCODE_TEMPLATE,
    work_dir=None,
    decoder_command_template: str = DEFAULT_DECODE_TEMPLATE,
) -> AudioClip:
    """Encode to OGG at ``spec.bitrate_bps`` and decode back to an 8 kHz clip.

    Templates use ``{input}``, ``{output}``, ``{bitrate}`` (integer bps) and
    ``{bitrate_k}`` (e.g. ``4.5k``).  Temporary files live in a private
    directory under ``work_dir`` and are removed afterwards.
    """
    if spec.format != OPUS_OGG:
        raise ValueError(f"external engine needs format {OPUS_OGG!r}, got {spec.format!r}")
    if work_dir is not None:
        Path(work_dir).mkdir(parents=True, exist_ok=True)
    values = {"bitrate": str(spec.bitrate_bps), "bitrate_k": format_bitrate(spec.bitrate_bps)}
    with tempfile.TemporaryDirectory(prefix="codec-", dir=work_dir) as tmp:
        src = os.path.join(tmp, "input.wav")
        enc = os.path.join(tmp, "temp_file.ogg")
        dec = os.path.join(tmp, "output.wav")
        write_wav(clip, src)
        _run(_render(encoder_command_template, input=src, output=enc, **values), encoder_command_template)
        _run(_render(decoder_command_template, input=enc, output=dec, **values), decoder_command_template)
        try:
            out = read_wav(dec)
        except WavError as exc:
            raise CodecError(f"decoded file unreadable: {exc}") from exc
    if out.sample_rate != CODEC_RATE:
        out = resample(out, CODEC_RATE)
    return out


# --- manifest augmentation -------------------------------------------------------------


def derived_seed(seed: int, entry_id: str, bitrate_bps: int) -> int:
    """Stable per-(file, bitrate) seed; independent of processing order."""
    return int(np.random.SeedSequence([seed, zlib.crc32(entry_id.encode()), bitrate_bps]).generate_state(1)[0])


def augmented_id(parent_id: str, spec: CodecSpec) -> str:
    return f"{parent_id}@{spec.tag}"


def _augmented_path(out_dir: Path, parent: ManifestEntry, spec: CodecSpec) -> Path:
    stem = parent.id.replace("/", "__")
    return out_dir / parent.class_name / f"{stem}@{spec.tag}.wav"


def _is_valid_wav(path: Path) -> bool:
    try:
        read_wav(path)
    except (WavError, OSError):
        return False
    return True


def _augment_one(job) -> tuple[str, bool]:
    src, dst, spec, engine, seed, encode_t, decode_t, work_dir = job
    dst = Path(dst)
    if dst.exists() and _is_valid_wav(dst):
        return str(dst), False
    try:
        clip = read_wav(src)
        if clip.sample_rate != CODEC_RATE:
            clip = resample(clip, CODEC_RATE)
        if engine == "builtin":
            out = simulate_codec_builtin(clip, spec, seed)
        else:
            out = simulate_codec_external(clip, spec, encode_t, work_dir, decode_t)
    except (CodecError, WavError, OSError) as exc:
        raise CodecError(f"augmenting {src} at {spec.bitrate_bps} bps failed: {exc}") from exc
    dst.parent.mkdir(parents=True, exist_ok=True)
    tmp = dst.with_name(dst.name + ".part")
    write_wav(out, tmp)
    os.replace(tmp, dst)
    return str(dst), True


def augment_manifest(
    manifest: Manifest,
    bitrates=STANDARD_BITRATES,
    engine: str = "builtin",
    work_dir=None,
    seed: int = 0,
    jobs: int = 1,
    encoder_command_template: str = DEFAULT_ENCODE_TEMPLATE,
    decoder_command_template: str = DEFAULT_DECODE_TEMPLATE,
) -> Manifest:
    """Append one codec copy per (original, bitrate); originals are untouched.

    Outputs go under ``work_dir``/<class>/.  Existing readable outputs are
    reused, so an interrupted run can simply be restarted.
    """
    if engine not in ENGINE_FORMATS:
        raise ValueError(f"engine must be one of {sorted(ENGINE_FORMATS)}, got {engine!r}")
    non_original = [e.id for e in manifest if not e.is_original]
    if non_original:
        raise ValueError(f"manifest already contains codec entries (e.g. {non_original[0]!r})")
    bitrates = [int(b) for b in bitrates]
    if not bitrates:
        return Manifest(list(manifest.entries), manifest.root)
    out_dir = Path(work_dir if work_dir is not None else manifest.root / "augmented")
    out_dir.mkdir(parents=True, exist_ok=True)
    fmt = ENGINE_FORMATS[engine]

    jobs_list = []
    new_entries = []
    for parent in manifest.originals():
        for bps in bitrates:
            spec = CodecSpec(fmt, bps)
            dst = _augmented_path(out_dir, parent, spec)
            jobs_list.append(
                (
                    str(manifest.resolve(parent)),
                    str(dst),
                    spec,
                    engine,
                    derived_seed(seed, parent.id, bps),
                    encoder_command_template,
                    decoder_command_template,
                    str(out_dir),
                )
            )
            new_entries.append(
                ManifestEntry(
                    id=augmented_id(parent.id, spec),
                    path=str(dst.resolve()),
                    label=parent.label,
                    provenance=CODEC,
                    parent_id=parent.id,
                    codec_format=fmt,
                    bitrate_bps=bps,
                )
            )
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_augment_one, jobs_list, chunksize=8))
    else:
        results = [_augment_one(j) for j in jobs_list]
    written = sum(1 for _, fresh in results if fresh)
    log.info("augment: %d written, %d reused", written, len(results) - written)
    return manifest.extended(new_entries)
