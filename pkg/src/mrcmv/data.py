"""Feature files, manifests, clip cutting, pseudo-labels and the synthetic corpus.

Feature files use the MRCF container::

    b"MRCF" | u8 version | u32 rank | rank x u32 dims | payload

All integers are little-endian.  Version 1 stores float32 (feature
sequences), version 2 stores float64 (checkpoints, so reloads are lossless).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeding import derive_rng

MAGIC = b"MRCF"
VERSION_F32 = 1
VERSION_F64 = 2
_PAYLOAD_DTYPES = {VERSION_F32: np.dtype("<f4"), VERSION_F64: np.dtype("<f8")}

MODALITIES = ("video_fast", "video_slow", "video_merged", "voiceover", "bgm")
STREAMS = ("video_fast", "video_slow", "voiceover", "bgm")

CLIP_SECONDS = 32.0
LABEL_INTERVAL_S = 7.0


class FeatureFileError(ValueError):
    """Base class for MRCF parse failures."""


class FormatError(FeatureFileError):
    pass


class TruncationError(FeatureFileError):
    pass


class NonFiniteError(FeatureFileError):
    pass


# ---------------------------------------------------------------------------
# MRCF container
# ---------------------------------------------------------------------------

def encode_tensor(array: np.ndarray, version: int = VERSION_F32) -> bytes:
    array = np.asarray(array)
    if version not in _PAYLOAD_DTYPES:
        raise ValueError(f"unknown MRCF version {version}")
    if not np.all(np.isfinite(array)):
        raise NonFiniteError("refusing to write non-finite values")
    header = MAGIC + struct.pack("<BI", version, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_PAYLOAD_DTYPES[version]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    """Parse an MRCF blob into a float64 array."""
    if len(buf) < 9 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    version, rank = struct.unpack_from("<BI", buf, 4)
    if version not in _PAYLOAD_DTYPES:
        raise FormatError(f"unsupported MRCF version {version}")
    head = 9 + 4 * rank
    if len(buf) < head:
        raise TruncationError(f"header needs {head} bytes, file has {len(buf)}")
    dims = struct.unpack_from(f"<{rank}I", buf, 9)
    dtype = _PAYLOAD_DTYPES[version]
    expected = head + math.prod(dims) * dtype.itemsize
    if len(buf) < expected:
        raise TruncationError(f"expected {expected} bytes, got {len(buf)}")
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after payload")
    out = np.frombuffer(buf, dtype=dtype, offset=head).astype(np.float64).reshape(dims)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("payload contains NaN or Inf")
    return out


def save_tensor(path, array: np.ndarray, version: int = VERSION_F32) -> None:
    Path(path).write_bytes(encode_tensor(array, version))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def read_header_shape(path) -> tuple[int, ...]:
    with open(path, "rb") as fh:
        head = fh.read(9)
        if head[:4] != MAGIC:
            raise FormatError(f"bad magic in {path}")
        _, rank = struct.unpack_from("<BI", head, 4)
        return struct.unpack(f"<{rank}I", fh.read(4 * rank))


# ---------------------------------------------------------------------------
# sequences and manifests
# ---------------------------------------------------------------------------

@dataclass
class ModalSequence:
    """An L x d time-ordered feature matrix for one modality of one clip."""

    modality: str
    values: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ValueError(f"{self.modality} needs a non-empty L x d matrix, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.modality} contains non-finite values")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def depth(self) -> int:
        return self.values.shape[1]


def save_features(path, seq: ModalSequence | np.ndarray) -> None:
    values = seq.values if isinstance(seq, ModalSequence) else seq
    save_tensor(path, values, VERSION_F32)


def load_features(path, modality: str = "bgm") -> ModalSequence:
    values = load_tensor(path)
    if values.ndim != 2:
        raise FormatError(f"{path}: feature files hold rank-2 tensors, got rank {values.ndim}")
    return ModalSequence(modality, values)


@dataclass
class VideoManifestEntry:
    id: str
    duration_s: float
    fast_path: str
    slow_path: str
    voiceover_path: str
    bgm_path: str
    fps_fast: float
    fps_slow: float
    fps_audio: float

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError(f"{self.id}: duration must be positive")

    def path_for(self, stream: str) -> str:
        return {
            "video_fast": self.fast_path,
            "video_slow": self.slow_path,
            "voiceover": self.voiceover_path,
            "bgm": self.bgm_path,
        }[stream]

    def fps_for(self, stream: str) -> float:
        return {
            "video_fast": self.fps_fast,
            "video_slow": self.fps_slow,
            "voiceover": self.fps_audio,
            "bgm": self.fps_audio,
        }[stream]


_ENTRY_FIELDS = {f.name for f in fields(VideoManifestEntry)}


def read_manifest(path) -> list[VideoManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        missing = _ENTRY_FIELDS - obj.keys()
        if missing:
            raise ValueError(f"{path}:{lineno}: missing fields {sorted(missing)}")
        entries.append(VideoManifestEntry(**{k: obj[k] for k in _ENTRY_FIELDS}))
    return entries


def write_manifest(path, entries: Iterable[VideoManifestEntry]) -> None:
    lines = [json.dumps(asdict(e), sort_keys=True) for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class VideoStreams:
    """A manifest entry with its four feature streams loaded in memory."""

    entry: VideoManifestEntry
    streams: dict[str, np.ndarray]

    @classmethod
    def load(cls, entry: VideoManifestEntry, root) -> "VideoStreams":
        root = Path(root)
        streams = {}
        for name in STREAMS:
            streams[name] = load_features(root / entry.path_for(name), name).values
        return cls(entry, streams)

    @property
    def id(self) -> str:
        return self.entry.id


def load_dataset(root, manifest_name: str = "manifest.jsonl") -> list[VideoStreams]:
    root = Path(root)
    return [VideoStreams.load(e, root) for e in read_manifest(root / manifest_name)]


# ---------------------------------------------------------------------------
# clips
# ---------------------------------------------------------------------------

@dataclass
class ClipSample:
    source_id: str
    start_s: float
    video_fast: ModalSequence
    video_slow: ModalSequence
    voiceover: ModalSequence
    bgm: ModalSequence
    pseudo_label: int | None = None

    def __post_init__(self):
        lengths = {s.length for s in (self.video_fast, self.video_slow, self.voiceover, self.bgm)}
        if len(lengths) != 1:
            raise ValueError(f"clip {self.source_id}@{self.start_s}: streams have lengths {sorted(lengths)}")


def repetitions(duration_s: float, clip_len_s: float = CLIP_SECONDS) -> int:
    """How many times a video is tiled so it covers at least one clip."""
    if duration_s >= clip_len_s:
        return 1
    return math.ceil(clip_len_s / duration_s)


def max_start(entry: VideoManifestEntry, clip_len_s: float = CLIP_SECONDS) -> float:
    return repetitions(entry.duration_s, clip_len_s) * entry.duration_s - clip_len_s


def resample_indices(count: int, length: int) -> np.ndarray:
    """Nearest-frame selection: target slot j takes the frame under its time centre."""
    j = np.arange(length)
    return np.floor((j + 0.5) * count / length).astype(np.int64)


def cut_stream(
    frames: np.ndarray, fps: float, start_s: float, clip_len_s: float, length: int, reps: int = 1
) -> np.ndarray:
    if frames.shape[0] == 0:
        raise ValueError("empty feature stream")
    if reps > 1:
        frames = np.tile(frames, (reps, 1))
    first = math.floor(start_s * fps + 1e-9)
    count = max(1, round(clip_len_s * fps))
    window = np.minimum(first + np.arange(count), frames.shape[0] - 1)
    return frames[window[resample_indices(count, length)]]


def cut_clip(
    video: VideoStreams, start_s: float, clip_len_s: float = CLIP_SECONDS, length: int = 32
) -> ClipSample:
    """Cut ``[start_s, start_s + clip_len_s)`` from every stream and resample to ``length`` frames.

    Videos shorter than the clip are tiled until they cover it.
    """
    entry = video.entry
    if start_s < 0:
        raise ValueError(f"clip start must be >= 0, got {start_s}")
    reps = repetitions(entry.duration_s, clip_len_s)
    if start_s > max_start(entry, clip_len_s) + 1e-9:
        raise ValueError(
            f"{entry.id}: clip [{start_s}, {start_s + clip_len_s}) runs past "
            f"{reps * entry.duration_s} s"
        )
    seqs = {}
    for name in STREAMS:
        frames = video.streams[name]
        if frames.shape[0] == 0:
            raise ValueError(f"{entry.id}: empty {name} stream")
        seqs[name] = ModalSequence(
            name, cut_stream(frames, entry.fps_for(name), start_s, clip_len_s, length, reps)
        )
    return ClipSample(entry.id, float(start_s), **seqs)


def eval_clip(video: VideoStreams, clip_len_s: float = CLIP_SECONDS, length: int = 32) -> ClipSample:
    """The fixed beginning clip used for evaluation."""
    return cut_clip(video, 0.0, clip_len_s, length)


def random_clips(
    videos: Sequence[VideoStreams],
    rng: np.random.Generator,
    per_video: int = 1,
    clip_len_s: float = CLIP_SECONDS,
    length: int = 32,
) -> list[ClipSample]:
    clips = []
    for video in videos:
        hi = max_start(video.entry, clip_len_s)
        for start in rng.uniform(0.0, hi, size=per_video):
            clips.append(cut_clip(video, float(start), clip_len_s, length))
    return clips


def assign_pseudo_labels(clips: Sequence[ClipSample], interval_s: float = LABEL_INTERVAL_S) -> list[ClipSample]:
    """Label clips so that nearby clips of one video share a class.

    Two clips of the same source are linked when their starts differ by less
    than ``interval_s``; labels are the connected components of that relation.
    Sources are numbered in order of first appearance, components within a
    source by earliest start, giving consecutive labels from 0.
    """
    by_source: dict[str, list[int]] = {}
    for i, clip in enumerate(clips):
        by_source.setdefault(clip.source_id, []).append(i)

    labels = [0] * len(clips)
    next_label = 0
    for members in by_source.values():
        # sweep over sorted starts: a gap >= interval closes the component
        ordered = sorted(members, key=lambda i: clips[i].start_s)
        prev = None
        for i in ordered:
            if prev is not None and clips[i].start_s - prev >= interval_s:
                next_label += 1
            labels[i] = next_label
            prev = clips[i].start_s
        next_label += 1
    return [replace(c, pseudo_label=z) for c, z in zip(clips, labels)]


# ---------------------------------------------------------------------------
# splitting and synthetic data
# ---------------------------------------------------------------------------

def split_dataset(items: Sequence, train_fraction: float, seed: int) -> tuple[list, list]:
    """Seeded disjoint split; each side keeps the input order."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(items)
    n_train = math.floor(n * train_fraction + 0.5)
    if n_train == 0 or n_train == n:
        raise ValueError(f"degenerate split: {n_train} train of {n}")
    perm = derive_rng(seed, "split").permutation(n)
    chosen = set(perm[:n_train].tolist())
    train = [x for i, x in enumerate(items) if i in chosen]
    test = [x for i, x in enumerate(items) if i not in chosen]
    return train, test


@dataclass
class SyntheticSpec:
    n_videos: int = 64
    latent_dim: int = 8
    noise_std: float = 0.1
    d_fast: int = 16
    d_slow: int = 64
    d_vo: int = 32
    d_bgm: int = 32
    duration_range: tuple[float, float] = (20.0, 60.0)
    seed: int = 0
    fps_fast: float = 2.0
    fps_slow: float = 0.25
    fps_audio: float = 2.25
    drift_scale: float = 0.3
    drift_period_s: float = 16.0

    def __post_init__(self):
        if self.n_videos < 1:
            raise ValueError("n_videos must be >= 1")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        lo, hi = self.duration_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad duration range {self.duration_range}")

    def depth(self, stream: str) -> int:
        return {"video_fast": self.d_fast, "video_slow": self.d_slow, "voiceover": self.d_vo, "bgm": self.d_bgm}[stream]


@dataclass
class SyntheticDataset:
    root: Path
    entries: list[VideoManifestEntry]
    mixing: dict[str, np.ndarray] = field(default_factory=dict)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> SyntheticDataset:
    """Write a corpus whose modalities are noisy linear views of a shared per-video latent.

    Frame ``t`` of stream ``m`` is ``A_m (u + drift(t)) + noise`` where ``u`` is
    the video's latent, ``drift`` moves along one fixed latent direction with
    a per-video phase, and the mixing matrices ``A_m`` are shared by all videos.
    """
    root = Path(out_dir)
    (root / "features").mkdir(parents=True, exist_ok=True)
    (root / "mixing").mkdir(exist_ok=True)

    mix_rng = derive_rng(spec.seed, "synthetic/mixing")
    mixing = {
        name: mix_rng.standard_normal((spec.depth(name), spec.latent_dim)) / math.sqrt(spec.latent_dim)
        for name in STREAMS
    }
    direction = mix_rng.standard_normal(spec.latent_dim)
    direction /= np.linalg.norm(direction)
    for name, a in mixing.items():
        save_tensor(root / "mixing" / f"{name}.mrcf", a, VERSION_F32)

    fps = {"video_fast": spec.fps_fast, "video_slow": spec.fps_slow, "voiceover": spec.fps_audio, "bgm": spec.fps_audio}
    entries = []
    for i in range(spec.n_videos):
        vid = f"vid{i:04d}"
        rng = derive_rng(spec.seed, f"synthetic/video/{i}")
        u = rng.standard_normal(spec.latent_dim)
        duration = round(float(rng.uniform(*spec.duration_range)), 2)
        phase = rng.uniform(0.0, 2 * math.pi)
        paths = {}
        for name in STREAMS:
            n = max(1, round(duration * fps[name]))
            t = np.arange(n) / fps[name]
            drift = spec.drift_scale * np.sin(2 * math.pi * t / spec.drift_period_s + phase)
            latent = u[None, :] + drift[:, None] * direction[None, :]
            frames = latent @ mixing[name].T
            frames = frames + spec.noise_std * rng.standard_normal(frames.shape)
            rel = f"features/{vid}.{name}.mrcf"
            save_tensor(root / rel, frames, VERSION_F32)
            paths[name] = rel
        entries.append(
            VideoManifestEntry(
                id=vid,
                duration_s=duration,
                fast_path=paths["video_fast"],
                slow_path=paths["video_slow"],
                voiceover_path=paths["voiceover"],
                bgm_path=paths["bgm"],
                fps_fast=spec.fps_fast,
                fps_slow=spec.fps_slow,
                fps_audio=spec.fps_audio,
            )
        )
    write_manifest(root / "manifest.jsonl", entries)
    (root / "synthetic.json").write_text(json.dumps(asdict(spec), sort_keys=True, indent=2) + "\n")
    return SyntheticDataset(root, entries, mixing)


def load_mixing(root) -> dict[str, np.ndarray]:
    root = Path(root) / "mixing"
    return {name: load_tensor(root / f"{name}.mrcf") for name in STREAMS if (root / f"{name}.mrcf").exists()}
