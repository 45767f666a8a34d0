"""Dataset types, feature-file I/O, temporal resampling and the synthetic corpus."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

PINF_MAGIC = b"PINF"
PINF_VERSION = 1
_HEADER = struct.Struct("<4sIII")

PAD_TOKEN = "<pad>"
MASK_TOKEN = "<mask>"
UNK_TOKEN = "<unk>"
SPECIAL_TOKENS = (PAD_TOKEN, MASK_TOKEN, UNK_TOKEN)
PAD_ID, MASK_ID, UNK_ID = 0, 1, 2


class LoadError(OSError):
    pass


class ValidationError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class MomentAnnotation:
    video_id: str
    start_sec: float
    end_sec: float
    query_text: list[str]
    duration_sec: float

    def __post_init__(self):
        self.query_text = list(self.query_text)
        if not self.query_text:
            raise ValidationError(f"{self.video_id}: empty query")
        if not self.duration_sec > 0:
            raise ValidationError(f"{self.video_id}: duration must be positive, got {self.duration_sec}")
        if not (0 <= self.start_sec < self.end_sec <= self.duration_sec):
            raise ValidationError(
                f"{self.video_id}: need 0 <= start < end <= duration, got "
                f"start={self.start_sec} end={self.end_sec} duration={self.duration_sec}"
            )


@dataclass
class VideoFeatures:
    """Time-major features with a valid-prefix frame mask.

    Frame ``i`` of the ``n`` valid frames covers ``[i, i+1) * duration / n`` seconds,
    so it is centred at ``(i + 0.5) * duration / n``.
    """

    video_id: str
    features: np.ndarray
    frame_mask: np.ndarray
    duration_sec: float

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.frame_mask = np.asarray(self.frame_mask, dtype=bool)
        validate_video(self)

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])

    @property
    def num_valid(self) -> int:
        return int(self.frame_mask.sum())

    @property
    def timestamps(self) -> np.ndarray:
        n = self.num_valid
        return (np.arange(n) + 0.5) * self.duration_sec / n


@dataclass
class QueryFeatures:
    features: np.ndarray
    token_mask: np.ndarray
    token_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.token_mask = np.asarray(self.token_mask, dtype=bool)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValidationError("query features must be a non-empty L x D matrix")
        _check_prefix_mask(self.token_mask, self.features, "token")


def _check_prefix_mask(mask: np.ndarray, feats: np.ndarray, what: str) -> None:
    if mask.shape != (feats.shape[0],):
        raise ValidationError(f"{what} mask length {mask.shape} does not match {feats.shape[0]} rows")
    n = int(mask.sum())
    if not mask[:n].all():
        raise ValidationError(f"{what} mask is not a contiguous valid prefix")
    if np.any(feats[n:] != 0):
        raise ValidationError(f"padded {what} rows must be zero")


def validate_video(v: VideoFeatures) -> None:
    f = v.features
    if f.ndim != 2 or f.shape[0] < 1:
        raise ValidationError(f"{v.video_id}: features must be a non-empty T x D matrix, got {f.shape}")
    if not np.isfinite(f).all():
        raise ValidationError(f"{v.video_id}: features contain NaN/Inf")
    _check_prefix_mask(v.frame_mask, f, "frame")
    if v.num_valid < 1:
        raise ValidationError(f"{v.video_id}: no valid frames")
    if not v.duration_sec > 0:
        raise ValidationError(f"{v.video_id}: duration must be positive")


# -- PINF feature container ---------------------------------------------------

def write_features(path: str | Path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PINF_MAGIC, PINF_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read feature file {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise LoadError(f"{path}: truncated header")
    magic, version, t, d = _HEADER.unpack_from(blob)
    if magic != PINF_MAGIC:
        raise LoadError(f"{path}: bad magic {magic!r}")
    if version != PINF_VERSION:
        raise LoadError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * t * d
    if len(blob) != expected:
        raise LoadError(f"{path}: expected {expected} bytes for {t}x{d}, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(t, d).astype(np.float32)


# -- resampling -----------------------------------------------------------------

def resample_features(raw: np.ndarray, T_target: int) -> tuple[np.ndarray, np.ndarray]:
    """Max-pool down to ``T_target`` rows, or zero-pad up to it."""
    raw = np.asarray(raw)
    if raw.ndim != 2 or raw.shape[0] == 0:
        raise ValueError(f"cannot resample an empty feature matrix (shape {raw.shape})")
    if T_target < 1:
        raise ValueError("T_target must be >= 1")
    t_raw = raw.shape[0]
    if t_raw > T_target:
        # window i covers [floor(i*t_raw/T), floor((i+1)*t_raw/T)); never empty since t_raw > T
        starts = (np.arange(T_target) * t_raw) // T_target
        out = np.maximum.reduceat(raw, starts, axis=0)
        return out, np.ones(T_target, dtype=bool)
    out = np.zeros((T_target, raw.shape[1]), dtype=raw.dtype)
    out[:t_raw] = raw
    mask = np.zeros(T_target, dtype=bool)
    mask[:t_raw] = True
    return out, mask


def resample_video(video: VideoFeatures, T_target: int) -> VideoFeatures:
    valid = video.features[: video.num_valid]
    feats, mask = resample_features(valid, T_target)
    return VideoFeatures(video.video_id, feats, mask, video.duration_sec)


# -- frame <-> seconds ------------------------------------------------------------

def seconds_to_frames(start_sec: float, end_sec: float, duration_sec: float, n_valid: int) -> tuple[int, int]:
    """Indices of the frames whose bins contain the start and end times."""
    scale = n_valid / duration_sec
    # bin-edge times land within float noise of an integer
    s = int(np.floor(start_sec * scale + 1e-9))
    e = int(np.ceil(end_sec * scale - 1e-9)) - 1
    s = min(max(s, 0), n_valid - 1)
    e = min(max(e, s), n_valid - 1)
    return s, e


def frames_to_seconds(start_frame: int, end_frame: int, duration_sec: float, n_valid: int) -> tuple[float, float]:
    step = duration_sec / n_valid
    return start_frame * step, (end_frame + 1) * step


# -- vocabulary -------------------------------------------------------------------

class Vocab:
    """Token <-> id mapping with reserved pad/mask/unk ids 0/1/2."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @classmethod
    def from_itos(cls, itos: Sequence[str]) -> "Vocab":
        if tuple(itos[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary does not start with the reserved tokens")
        return cls(itos[len(SPECIAL_TOKENS) :])

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]]) -> "Vocab":
        seen = sorted({t for toks in token_lists for t in toks if t not in SPECIAL_TOKENS})
        return cls(seen)


# -- manifest ---------------------------------------------------------------------

def write_manifest(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"manifest not found: {path}")
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise LoadError(f"{path}:{lineno + 1}: malformed record: {exc}") from exc
    return records


def load_dataset(manifest_path: str | Path, T_target: int | None = None) -> list[tuple[VideoFeatures, MomentAnnotation]]:
    """Load every manifest record; feature paths are relative to the manifest."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    pairs = []
    for idx, rec in enumerate(read_manifest(manifest_path)):
        fpath = root / rec["feature_path"]
        if not fpath.is_file():
            raise LoadError(f"record {idx}: feature file not found: {fpath}")
        query = rec["query"]
        if isinstance(query, str):
            query = query.split()
        try:
            ann = MomentAnnotation(
                video_id=rec["video_id"],
                start_sec=float(rec["start_sec"]),
                end_sec=float(rec["end_sec"]),
                query_text=query,
                duration_sec=float(rec["duration_sec"]),
            )
        except ValidationError as exc:
            raise ValidationError(f"record {idx}: {exc}") from exc
        raw = read_features(fpath)
        video = VideoFeatures(rec["video_id"], raw, np.ones(raw.shape[0], dtype=bool), ann.duration_sec)
        if T_target is not None:
            video = resample_video(video, T_target)
        pairs.append((video, ann))
    return pairs


# -- synthetic corpus -------------------------------------------------------------

DEFAULT_OBJECTS = (
    "door", "book", "cup", "phone", "laptop", "chair", "towel", "window",
    "shoe", "bag", "box", "pillow", "mirror", "broom", "sandwich", "blanket",
    "camera", "bottle", "light", "table", "closet", "shelf", "picture", "glass",
)
_FILLERS = (
    "a", "the", "person", "is", "then", "at", "in", "on", "with", "and",
    "someone", "opens", "holds", "takes", "puts", "looks", "near", "room",
)


@dataclass(frozen=True)
class SyntheticSpec:
    num_pairs: int = 200
    T: int = 48
    D_in: int = 64
    vocab_size: int = 64
    object_vocab: tuple[str, ...] = DEFAULT_OBJECTS
    planted_snr: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_pairs", "T", "D_in", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.object_vocab:
            raise ConfigError("object_vocab must not be empty")
        if self.planted_snr < 0:
            raise ConfigError("planted_snr must be >= 0")
        if self.vocab_size < len(set(self.object_vocab)):
            raise ConfigError(
                f"vocab_size={self.vocab_size} is smaller than the object vocabulary ({len(set(self.object_vocab))})"
            )
        if self.T < 4:
            raise ConfigError("T must be >= 4 to plant a moment")


class SyntheticSample(NamedTuple):
    video: VideoFeatures
    annotation: MomentAnnotation
    object_positions: list[int]
    frame_tokens: list[list[str]]


def synth_vocabulary(spec: SyntheticSpec) -> tuple[list[str], list[str]]:
    """(object tokens, filler tokens) with ``len(objects) + len(fillers) == vocab_size``."""
    objects = list(dict.fromkeys(spec.object_vocab))
    n_fill = spec.vocab_size - len(objects)
    fillers = [w for w in _FILLERS if w not in objects][:n_fill]
    i = 0
    while len(fillers) < n_fill:
        cand = f"w{i}"
        if cand not in objects:
            fillers.append(cand)
        i += 1
    return objects, fillers


def token_prototypes(spec: SyntheticSpec) -> dict[str, np.ndarray]:
    """Visual direction planted for each object token (per-element RMS 1)."""
    objects, _ = synth_vocabulary(spec)
    rng = np.random.default_rng([spec.seed, 7919])
    protos = rng.standard_normal((len(objects), spec.D_in))
    protos *= np.sqrt(spec.D_in) / np.linalg.norm(protos, axis=1, keepdims=True)
    return {tok: protos[i].astype(np.float32) for i, tok in enumerate(objects)}


def _signal(tokens: Sequence[str], protos: dict[str, np.ndarray]) -> np.ndarray:
    sig = np.sum([protos[t] for t in tokens], axis=0)
    norm = np.linalg.norm(sig)
    # prototypes can cancel exactly when D_in is tiny
    return sig * np.sqrt(sig.size) / norm if norm > 1e-6 else np.zeros_like(sig)


def synth_generate(spec: SyntheticSpec) -> list[SyntheticSample]:
    """Noise features with the query's object signal planted over the target span.

    Each video also carries one distractor segment planted with two other objects,
    so locating the moment needs the query and not just signal detection.
    """
    objects, fillers = synth_vocabulary(spec)
    protos = token_prototypes(spec)
    rng = np.random.default_rng(spec.seed)
    T = spec.T
    n_obj = 2 if len(objects) >= 4 else 1
    samples = []
    for k in range(spec.num_pairs):
        vid = f"synth{spec.seed}_{k:05d}"
        duration = float(np.round(rng.uniform(20.0, 40.0), 3))
        picked = rng.choice(len(objects), size=min(2 * n_obj, len(objects)), replace=False)
        gt_objs = [objects[i] for i in picked[:n_obj]]
        dist_objs = [objects[i] for i in picked[n_obj:]]

        length = int(rng.integers(max(2, int(0.15 * T)), max(3, int(0.45 * T)) + 1))
        s = int(rng.integers(0, T - length + 1))
        e = s + length - 1

        feats = rng.standard_normal((T, spec.D_in)).astype(np.float32)
        frame_tokens: list[list[str]] = [[] for _ in range(T)]
        feats[s : e + 1] += spec.planted_snr * _signal(gt_objs, protos)
        for t in range(s, e + 1):
            frame_tokens[t] = list(gt_objs)

        if dist_objs:
            gaps = [(0, s), (e + 1, T)]
            gaps = [(a, b) for a, b in gaps if b - a >= 2]
            if gaps:
                a, b = gaps[int(rng.integers(len(gaps)))]
                dlen = int(rng.integers(2, min(b - a, max(2, int(0.3 * T))) + 1))
                ds = int(rng.integers(a, b - dlen + 1))
                feats[ds : ds + dlen] += spec.planted_snr * _signal(dist_objs, protos)
                for t in range(ds, ds + dlen):
                    frame_tokens[t] = list(dist_objs)

        query: list[str] = []
        positions: list[int] = []
        for j, obj in enumerate(gt_objs):
            n_before = int(rng.integers(1, 3)) if j == 0 else int(rng.integers(0, 2))
            query.extend(rng.choice(fillers, size=n_before).tolist())
            positions.append(len(query))
            query.append(obj)
        query.extend(rng.choice(fillers, size=int(rng.integers(0, 3))).tolist())

        ann = MomentAnnotation(
            video_id=vid,
            start_sec=s * duration / T,
            end_sec=min((e + 1) * duration / T, duration),
            query_text=query,
            duration_sec=duration,
        )
        video = VideoFeatures(vid, feats, np.ones(T, dtype=bool), duration)
        samples.append(SyntheticSample(video, ann, positions, frame_tokens))
    return samples


def write_synthetic(out_dir: str | Path, spec: SyntheticSpec, samples: Sequence[SyntheticSample]) -> Path:
    """Write features, manifest, object vocabulary and per-frame planted tokens."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    records = []
    for smp in samples:
        rel = f"features/{smp.video.video_id}.pinf"
        write_features(out_dir / rel, smp.video.features)
        ann = smp.annotation
        records.append(
            {
                "video_id": ann.video_id,
                "feature_path": rel,
                "start_sec": ann.start_sec,
                "end_sec": ann.end_sec,
                "duration_sec": ann.duration_sec,
                "query": ann.query_text,
            }
        )
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, records)
    objects, _ = synth_vocabulary(spec)
    (out_dir / "objects.txt").write_text("\n".join(objects) + "\n")
    with open(out_dir / "frame_tokens.jsonl", "w") as fh:
        for smp in samples:
            fh.write(json.dumps({"video_id": smp.video.video_id, "frame_tokens": smp.frame_tokens}) + "\n")
    return manifest


def stable_hash(*parts) -> int:
    """Process-independent 32-bit hash (Python's ``hash`` is salted per run)."""
    return zlib.crc32("\x1f".join(str(p) for p in parts).encode())


def split_ids(video_ids: Iterable[str], val_fraction: float = 0.2) -> tuple[list[str], list[str]]:
    train, val = [], []
    for vid in video_ids:
        (val if stable_hash("split", vid) % 1000 < val_fraction * 1000 else train).append(vid)
    return train, val
