"""Corpus indexing, fold assignment, synthetic PCG generation and batching."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, WavError, pad_or_crop, read_wav, resample
from .autograd import Tensor

log = logging.getLogger(__name__)

CLASSES = ("N", "AS", "MS", "MR", "MVP")
CLASS_INDEX = {name: i for i, name in enumerate(CLASSES)}

ORIGINAL = "original"
CODEC = "codec"

INPUT_RATE = 2000
INPUT_LEN = 8000


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    label: int
    provenance: str = ORIGINAL
    parent_id: str | None = None
    codec_format: str | None = None
    bitrate_bps: int | None = None

    def __post_init__(self):
        if not 0 <= self.label < len(CLASSES):
            raise ManifestError(f"entry {self.id}: label {self.label} outside 0..{len(CLASSES) - 1}")
        if self.provenance not in (ORIGINAL, CODEC):
            raise ManifestError(f"entry {self.id}: unknown provenance {self.provenance!r}")
        if (self.provenance == CODEC) != (self.parent_id is not None):
            raise ManifestError(f"entry {self.id}: parent_id is required iff provenance is codec")

    @property
    def class_name(self) -> str:
        return CLASSES[self.label]

    @property
    def is_original(self) -> bool:
        return self.provenance == ORIGINAL


@dataclass
class Manifest:
    """Ordered list of entries; relative paths resolve against ``root``."""

    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        self.root = Path(self.root)
        self._index = {}
        for e in self.entries:
            if e.id in self._index:
                raise ManifestError(f"duplicate id {e.id!r}")
            self._index[e.id] = e
        for e in self.entries:
            if e.provenance == CODEC:
                parent = self._index.get(e.parent_id)
                if parent is None or not parent.is_original:
                    raise ManifestError(f"entry {e.id}: parent {e.parent_id!r} is not an original entry")
                if parent.label != e.label:
                    raise ManifestError(f"entry {e.id}: label differs from parent {e.parent_id}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, entry_id) -> bool:
        return entry_id in self._index

    def get(self, entry_id: str) -> ManifestEntry:
        try:
            return self._index[entry_id]
        except KeyError:
            raise KeyError(f"id {entry_id!r} not in manifest") from None

    def originals(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.is_original]

    def codec_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if not e.is_original]

    def resolve(self, entry: ManifestEntry | str) -> Path:
        if isinstance(entry, str):
            entry = self.get(entry)
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def class_counts(self, originals_only: bool = True) -> dict[str, int]:
        counts = {c: 0 for c in CLASSES}
        for e in self.entries:
            if e.is_original or not originals_only:
                counts[e.class_name] += 1
        return counts

    def extended(self, new_entries) -> "Manifest":
        return Manifest(list(self.entries) + list(new_entries), self.root)

    def dumps(self, root=None) -> str:
        """One JSON record per line; paths made relative to ``root`` when possible."""
        root = Path(root) if root is not None else self.root
        lines = []
        for e in self.entries:
            rec = asdict(e)
            rec["label"] = e.class_name
            rec["path"] = _relative_path(self.resolve(e), root)
            lines.append(json.dumps(rec, sort_keys=True))
        return "".join(line + "\n" for line in lines)

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(path.parent.resolve()), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        entries = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                label = rec["label"]
                rec["label"] = CLASS_INDEX[label] if isinstance(label, str) else int(label)
                entries.append(ManifestEntry(**rec))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ManifestError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
        return cls(entries, path.parent.resolve())


def _relative_path(p: Path, root: Path) -> str:
    p = Path(os.path.abspath(p))
    try:
        return p.relative_to(Path(os.path.abspath(root))).as_posix()
    except ValueError:
        return p.as_posix()


def scan_y18(root, class_dirs: dict[str, str] | None = None) -> Manifest:
    """Index a Y-18 style tree: one subdirectory of WAV files per class.

    ``class_dirs`` maps class names (N, AS, MS, MR, MVP) to directory names;
    by default each class directory is found by case-insensitive name match.
    """
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"dataset root {root} is not a directory")
    present = sorted(p.name for p in root.iterdir() if p.is_dir())
    if class_dirs is None:
        lower = {name.lower(): name for name in present}
        class_dirs = {c: lower.get(c.lower(), c) for c in CLASSES}
    entries = []
    skipped = 0
    for cls_name in CLASSES:
        d = root / class_dirs[cls_name]
        if not d.is_dir():
            raise ManifestError(
                f"missing directory for class {cls_name} (expected {d}); found: {', '.join(present) or 'nothing'}"
            )
        wavs = []
        for f in sorted(d.iterdir()):
            if f.is_file() and f.suffix.lower() == ".wav":
                wavs.append(f)
            else:
                skipped += 1
        if not wavs:
            raise ManifestError(f"class {cls_name}: no WAV files in {d}")
        for f in wavs:
            entries.append(ManifestEntry(id=f"{cls_name}/{f.stem}", path=str(f.resolve()), label=CLASS_INDEX[cls_name]))
    if skipped:
        log.warning("scan_y18: skipped %d non-WAV entries under %s", skipped, root)
    entries.sort(key=lambda e: e.id)
    return Manifest(entries, root.resolve())


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: dict[str, int]
    seed: int

    def fold_of(self, manifest: Manifest, entry_id: str) -> int:
        e = manifest.get(entry_id)
        return self.assignment[e.id if e.is_original else e.parent_id]

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "assignment": dict(sorted(self.assignment.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        return cls(int(d["k"]), {str(k): int(v) for k, v in d["assignment"].items()}, int(d["seed"]))


def make_folds(manifest: Manifest, k: int = 10, seed: int = 0) -> FoldPlan:
    """Stratified fold assignment over original entries only.

    Per class, originals are shuffled with the seeded RNG and dealt
    round-robin; the dealing position carries over between classes so overall
    fold sizes stay balanced too.  Codec copies inherit their parent's fold.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    by_class: dict[int, list[str]] = {i: [] for i in range(len(CLASSES))}
    for e in manifest.originals():
        by_class[e.label].append(e.id)
    for label, ids in by_class.items():
        if ids and len(ids) < k:
            raise ValueError(f"class {CLASSES[label]} has {len(ids)} originals, fewer than k={k}")
    rng = np.random.default_rng(seed)
    assignment = {}
    pos = 0
    for label in range(len(CLASSES)):
        ids = by_class[label]
        for i in rng.permutation(len(ids)):
            assignment[ids[i]] = pos % k
            pos += 1
    return FoldPlan(k, assignment, seed)


def fold_split(manifest: Manifest, plan: FoldPlan, fold: int, use_augmented_train: bool = True):
    """(train ids, original test ids, codec test ids) for ``fold``, in manifest order."""
    if not 0 <= fold < plan.k:
        raise ValueError(f"fold {fold} outside 0..{plan.k - 1}")
    train, test_orig, test_codec = [], [], []
    for e in manifest:
        in_test = plan.fold_of(manifest, e.id) == fold
        if e.is_original:
            (test_orig if in_test else train).append(e.id)
        elif in_test:
            test_codec.append(e.id)
        elif use_augmented_train:
            train.append(e.id)
    return train, test_orig, test_codec


# --- synthetic stand-in corpus -------------------------------------------------

S2_DELAY = 0.330
MURMUR_AMP_RANGE = (0.05, 0.5)
NOISE_AMP_RANGE = (0.01, 0.04)


@dataclass(frozen=True)
class PCGParams:
    period: float
    phase: float
    s1_freq: float
    s2_freq: float
    s1_amp: float
    s2_amp: float
    murmur_amp: float
    noise_amp: float


def synth_params(label: int | str, seed: int) -> PCGParams:
    label = CLASS_INDEX[label] if isinstance(label, str) else int(label)
    rng = np.random.default_rng([seed, label, 0x5C6])
    bpm = rng.uniform(60.0, 80.0)
    period = 60.0 / bpm
    return PCGParams(
        period=period,
        phase=rng.uniform(0.0, period),
        s1_freq=rng.uniform(40.0, 60.0),
        s2_freq=rng.uniform(60.0, 90.0),
        s1_amp=rng.uniform(0.8, 1.0),
        s2_amp=rng.uniform(0.6, 0.8),
        murmur_amp=rng.uniform(*MURMUR_AMP_RANGE),
        noise_amp=rng.uniform(*NOISE_AMP_RANGE),
    )


def _pulse(t, center, width, freq):
    u = t - center
    return np.exp(-0.5 * (u / width) ** 2) * np.sin(2 * np.pi * freq * u)


def _band_noise(rng, n, rate, lo, hi):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / rate)
    spec[(f < lo) | (f > hi)] = 0
    x = np.fft.irfft(spec, n)
    return x / (np.sqrt(np.mean(x * x)) + 1e-12)


def _window(t, start, end, shape: str):
    u = (t - start) / (end - start)
    inside = (u >= 0) & (u <= 1)
    if shape == "diamond":
        env = 1 - np.abs(2 * u - 1)
    elif shape == "decrescendo":
        env = 1 - u
    elif shape == "crescendo":
        env = u
    else:
        env = np.ones_like(u)
    # 10 ms raised-cosine edges avoid clicks at the murmur boundaries
    edge = np.clip(np.minimum(t - start, end - t) / 0.01, 0, 1)
    return np.where(inside, env * (0.5 - 0.5 * np.cos(np.pi * edge)), 0.0)


def synth_pcg(label, seed: int, duration_s: float = 2.0, rate: int = 8000) -> AudioClip:
    """Deterministic synthetic heart sound for class ``label``.

    S1/S2 Gaussian-enveloped tone bursts repeat at the heart period (S2
    330 ms after S1) with class-specific murmurs: AS a diamond-shaped
    systolic band-noise burst, MS a decrescendo low-frequency diastolic
    rumble, MR flat holosystolic band noise, MVP a mid-systolic click plus a
    late-systolic crescendo murmur.  Peak amplitude is 0.9.
    """
    label = CLASS_INDEX[label] if isinstance(label, str) else int(label)
    if not 0 <= label < len(CLASSES):
        raise ValueError(f"label {label} outside 0..{len(CLASSES) - 1}")
    p = synth_params(label, seed)
    rng = np.random.default_rng([seed, label, 0xB0D])
    n = int(round(duration_s * rate))
    t = np.arange(n) / rate
    x = p.noise_amp * rng.standard_normal(n)
    murmur = np.zeros(n)
    name = CLASSES[label]
    noise_bands = {"AS": (100, 400), "MR": (150, 450), "MS": (25, 80), "MVP": (120, 400)}
    band = _band_noise(rng, n, rate, *noise_bands[name]) if name in noise_bands else None

    beat = -p.phase
    while beat < duration_s + 0.1:
        s1, s2 = beat, beat + S2_DELAY
        x += p.s1_amp * _pulse(t, s1, 0.018, p.s1_freq)
        x += p.s2_amp * _pulse(t, s2, 0.014, p.s2_freq)
        if name == "AS":
            murmur += _window(t, s1 + 0.05, s2 - 0.03, "diamond")
        elif name == "MR":
            murmur += _window(t, s1 + 0.03, s2, "flat")
        elif name == "MS":
            murmur += 1.4 * _window(t, s2 + 0.08, s2 + 0.08 + 0.6 * (p.period - S2_DELAY), "decrescendo")
        elif name == "MVP":
            click = s1 + 0.6 * S2_DELAY
            x += 0.8 * p.s1_amp * _pulse(t, click, 0.003, 150.0)
            murmur += _window(t, click + 0.02, s2, "crescendo")
        beat += p.period
    if band is not None:
        x += p.murmur_amp * murmur * band
    return AudioClip(0.9 * x / np.max(np.abs(x)), rate)


# --- batching --------------------------------------------------------------------


@dataclass
class Batch:
    inputs: Tensor  # [B, 1, length]
    labels: np.ndarray  # [B]


def preprocess(clip: AudioClip, input_rate: int = INPUT_RATE, input_len: int = INPUT_LEN) -> np.ndarray:
    return pad_or_crop(resample(clip, input_rate), input_len).samples


class ClipLoader:
    """Reads and preprocesses clips once, caching model-ready arrays.

    Every disk read is appended to ``log`` as ``(phase, id)`` so callers can
    audit which files a stage touched.
    """

    def __init__(self, manifest: Manifest, input_rate: int = INPUT_RATE, input_len: int = INPUT_LEN):
        self.manifest = manifest
        self.input_rate = input_rate
        self.input_len = input_len
        self.phase = "default"
        self.log: list[tuple[str, str]] = []
        self._cache: dict[str, np.ndarray] = {}

    def array(self, entry_id: str) -> np.ndarray:
        cached = self._cache.get(entry_id)
        if cached is not None:
            return cached
        path = self.manifest.resolve(entry_id)
        if not path.exists():
            raise FileNotFoundError(f"audio for id {entry_id!r} missing: {path}")
        try:
            clip = read_wav(path)
        except WavError as exc:
            raise WavError(f"id {entry_id!r}: {exc}") from exc
        self.log.append((self.phase, entry_id))
        x = preprocess(clip, self.input_rate, self.input_len)
        self._cache[entry_id] = x
        return x

    def stack(self, ids, dtype=None) -> np.ndarray:
        from .autograd import default_dtype

        out = np.empty((len(ids), 1, self.input_len), dtype=dtype or default_dtype())
        for i, entry_id in enumerate(ids):
            out[i, 0] = self.array(entry_id)
        return out

    def labels(self, ids) -> np.ndarray:
        return np.array([self.manifest.get(i).label for i in ids], dtype=np.int64)


def load_batch(manifest: Manifest, ids, input_rate: int = INPUT_RATE, input_len: int = INPUT_LEN, loader=None) -> Batch:
    """Read, resample, length-standardize and stack ``ids`` in order."""
    ids = list(ids)
    if not ids:
        raise ValueError("load_batch needs at least one id")
    loader = loader or ClipLoader(manifest, input_rate, input_len)
    return Batch(Tensor(loader.stack(ids)), loader.labels(ids))


SYNTH_DURATIONS = (1.0, 2.0, 3.0, 4.0)


def write_synthetic_corpus(out_dir, per_class: int, seed: int = 0, rate: int = 8000) -> Manifest:
    """Write ``per_class`` synthetic WAVs per class in the Y-18 directory layout.

    Durations cycle through 1, 2, 3, 4 s.  Returns a manifest rooted at
    ``out_dir`` (also written there as ``manifest.jsonl``).
    """
    from .audio_io import write_wav

    out_dir = Path(out_dir)
    entries = []
    for label, name in enumerate(CLASSES):
        d = out_dir / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            clip_seed = int(np.random.SeedSequence([seed, label, i]).generate_state(1)[0])
            clip = synth_pcg(label, clip_seed, SYNTH_DURATIONS[i % len(SYNTH_DURATIONS)], rate)
            path = d / f"{name}_{i:04d}.wav"
            write_wav(clip, path)
            entries.append(ManifestEntry(id=f"{name}/{path.stem}", path=str(path.resolve()), label=label))
    entries.sort(key=lambda e: e.id)
    manifest = Manifest(entries, out_dir.resolve())
    manifest.write(out_dir / "manifest.jsonl")
    return manifest
