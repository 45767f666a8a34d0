"""Frame-level pseudo-query generation, Top-K filtering and object-word masking."""

from __future__ import annotations

import json
import math
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .datamodel import MASK_TOKEN, QueryFeatures, VideoFeatures, stable_hash


class CaptionError(RuntimeError):
    def __init__(self, frame_index: int, message: str):
        super().__init__(f"captioning failed at frame {frame_index}: {message}")
        self.frame_index = frame_index


@dataclass
class FrameCaption:
    frame_index: int
    tokens: list[str]
    similarity_to_gt: float | None = None

    def __post_init__(self):
        if not self.tokens:
            raise ValueError(f"frame {self.frame_index}: empty caption")


@dataclass
class PseudoQuerySet:
    selected: list[FrameCaption]
    concat_tokens: list[str]
    mask_positions: list[int] = field(default_factory=list)
    num_masked: int = 0

    @classmethod
    def from_selected(cls, selected: Sequence[FrameCaption]) -> "PseudoQuerySet":
        tokens = [t for cap in selected for t in cap.tokens]
        return cls(list(selected), tokens)

    @property
    def length(self) -> int:
        return len(self.concat_tokens)


# -- captioners -----------------------------------------------------------------

class Captioner(Protocol):
    def caption(self, video_id: str, frame_index: int, frame: np.ndarray) -> str | list[str]: ...


class StubCaptioner:
    """Template captions built from the tokens the synthetic generator planted.

    ``noise`` is the per-word probability of swapping an object for a random one,
    which stands in for a real captioner's wrong object words.
    """

    def __init__(
        self,
        frame_tokens: Mapping[str, Sequence[Sequence[str]]],
        objects: Sequence[str],
        seed: int = 0,
        noise: float = 0.1,
    ):
        self.frame_tokens = frame_tokens
        self.objects = list(objects)
        self.seed = seed
        self.noise = noise

    @classmethod
    def from_file(cls, path: str | Path, objects: Sequence[str], **kwargs) -> "StubCaptioner":
        table = {}
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    table[rec["video_id"]] = rec["frame_tokens"]
        return cls(table, objects, **kwargs)

    def caption(self, video_id: str, frame_index: int, frame: np.ndarray | None = None) -> list[str]:
        try:
            planted = self.frame_tokens[video_id][frame_index]
        except (KeyError, IndexError) as exc:
            raise CaptionError(frame_index, f"no planted tokens for {video_id}") from exc
        rng = np.random.default_rng([self.seed, stable_hash(video_id), frame_index])
        if not planted:
            return ["a", "person", "is", "in", "the", "room"]
        words = []
        for tok in planted:
            if rng.random() < self.noise:
                tok = self.objects[int(rng.integers(len(self.objects)))]
            words.append(tok)
        caption = ["a", "person", "with", words[0]]
        for w in words[1:]:
            caption += ["and", w]
        return caption


class HttpCaptioner:
    """Client for a captioning service: POST ``{video_id, frame_index}`` -> ``{text}``."""

    def __init__(self, endpoint: str, timeout: float = 30.0, max_workers: int = 4):
        self.endpoint = endpoint
        self.timeout = timeout
        self.max_workers = max_workers

    def caption(self, video_id: str, frame_index: int, frame: np.ndarray | None = None) -> str:
        body = json.dumps({"video_id": video_id, "frame_index": int(frame_index)}).encode()
        req = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode())
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise CaptionError(frame_index, str(exc)) from exc
        text = payload.get("text") if isinstance(payload, dict) else None
        if not isinstance(text, str):
            raise CaptionError(frame_index, f"response has no text field: {payload!r}")
        return text


def sample_frame_indices(T: int, F: int) -> list[int]:
    if F < 1:
        raise ValueError("F must be >= 1")
    return [(f * T) // F for f in range(F)]


def caption_frames(video: VideoFeatures, F: int, captioner: Captioner) -> list[FrameCaption]:
    """Caption ``F`` uniformly spaced valid frames. Any failure aborts the whole video."""
    indices = sample_frame_indices(video.num_valid, F)

    def run(idx: int) -> FrameCaption:
        try:
            out = captioner.caption(video.video_id, idx, video.features[idx])
        except CaptionError:
            raise
        except Exception as exc:
            raise CaptionError(idx, repr(exc)) from exc
        tokens = out.split() if isinstance(out, str) else list(out)
        if not tokens:
            raise CaptionError(idx, "empty caption")
        return FrameCaption(idx, tokens)

    workers = getattr(captioner, "max_workers", 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, indices))
    return [run(i) for i in indices]


# -- scoring --------------------------------------------------------------------

class WordVectors:
    """Token -> vector lookup used to score captions against the query.

    Tokens missing from ``table`` get a fixed pseudo-random vector derived from the
    token string, so scoring is deterministic without a pretrained file.
    """

    def __init__(self, dim: int = 300, table: Mapping[str, np.ndarray] | None = None, seed: int = 0):
        self.dim = dim
        self.table = dict(table or {})
        self.seed = seed

    @classmethod
    def load(cls, path: str | Path, seed: int = 0) -> "WordVectors":
        table = read_embedding_file(path)
        dim = len(next(iter(table.values()))) if table else 300
        return cls(dim, table, seed)

    def vector(self, token: str) -> np.ndarray:
        vec = self.table.get(token)
        if vec is None:
            rng = np.random.default_rng([self.seed, stable_hash("wv", token)])
            vec = rng.standard_normal(self.dim).astype(np.float32)
            self.table[token] = vec
        return vec

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.stack([self.vector(t) for t in tokens])


def read_embedding_file(path: str | Path) -> dict[str, np.ndarray]:
    """Parse ``token v1 v2 ... vD`` lines."""
    table: dict[str, np.ndarray] = {}
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            vec = np.asarray(parts[1:], dtype=np.float32)
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {vec.size}")
            table[parts[0]] = vec
    return table


def encode_query(tokens: Sequence[str], text_encoder: WordVectors) -> QueryFeatures:
    feats = text_encoder.encode(tokens)
    return QueryFeatures(feats, np.ones(len(tokens), dtype=bool))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.clip(a @ b / denom, -1.0, 1.0))


def score_captions(captions: Sequence[FrameCaption], gt_query: QueryFeatures, text_encoder: WordVectors) -> list[FrameCaption]:
    q = gt_query.features[gt_query.token_mask].mean(axis=0)
    return [replace(c, similarity_to_gt=_cosine(text_encoder.encode(c.tokens).mean(axis=0), q)) for c in captions]


def select_topk(scored: Sequence[FrameCaption], K: int) -> PseudoQuerySet:
    if K < 1:
        raise ValueError("K must be >= 1")
    if not scored:
        raise ValueError("no captions to select from")
    ranked = sorted(scored, key=lambda c: (-c.similarity_to_gt, c.frame_index))
    return PseudoQuerySet.from_selected(ranked[:K])


def score_and_select_topk(
    captions: Sequence[FrameCaption], gt_query: QueryFeatures, text_encoder: WordVectors, K: int
) -> PseudoQuerySet:
    if K < 1:
        raise ValueError("K must be >= 1")
    if not captions:
        raise ValueError("no captions to select from")
    return select_topk(score_captions(captions, gt_query, text_encoder), K)


# -- masking ----------------------------------------------------------------------

def num_to_mask(M_percent: float, n_objects: int) -> int:
    """round-half-up of M% of the object positions."""
    return int(math.floor(M_percent * n_objects / 100.0 + 0.5))


def mask_object_words(pqs: PseudoQuerySet, object_vocab: Iterable[str], M_percent: float, rng_seed: int) -> PseudoQuerySet:
    if not 0 <= M_percent <= 100:
        raise ValueError(f"M_percent must be in [0, 100], got {M_percent}")
    vocab = set(object_vocab)
    positions = [i for i, t in enumerate(pqs.concat_tokens) if t in vocab]
    n_o = num_to_mask(M_percent, len(positions))
    rng = np.random.default_rng(rng_seed)
    chosen = sorted(int(p) for p in rng.choice(positions, size=n_o, replace=False)) if n_o else []
    tokens = list(pqs.concat_tokens)
    for p in chosen:
        tokens[p] = MASK_TOKEN
    return PseudoQuerySet(list(pqs.selected), tokens, chosen, n_o)


# -- files --------------------------------------------------------------------------

def read_object_vocab(path: str | Path) -> set[str]:
    return {line.strip() for line in Path(path).read_text().splitlines() if line.strip()}


def write_pseudo_cache(path: str | Path, captions: Mapping[str, Sequence[FrameCaption]]) -> None:
    with open(path, "w") as fh:
        for vid, caps in captions.items():
            rec = {
                "video_id": vid,
                "captions": [
                    {"frame_index": c.frame_index, "tokens": c.tokens, "score": c.similarity_to_gt} for c in caps
                ],
            }
            fh.write(json.dumps(rec) + "\n")


def read_pseudo_cache(path: str | Path) -> dict[str, list[FrameCaption]]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out[rec["video_id"]] = [
                FrameCaption(c["frame_index"], list(c["tokens"]), c.get("score")) for c in rec["captions"]
            ]
    return out
