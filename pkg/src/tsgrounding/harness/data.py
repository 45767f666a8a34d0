"""Turning (video, annotation) pairs into training examples and padded batches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from ..datamodel import (
    PAD_ID,
    MomentAnnotation,
    VideoFeatures,
    Vocab,
    resample_video,
    split_ids,
    stable_hash,
    synth_generate,
    synth_vocabulary,
)
from ..model import Batch
from ..objectives import SupervisionLabels, make_labels
from ..pgmf import candidate_cells
from ..pseudoquery import (
    FrameCaption,
    PseudoQuerySet,
    StubCaptioner,
    WordVectors,
    caption_frames,
    encode_query,
    mask_object_words,
    score_and_select_topk,
)


@dataclass
class Example:
    video: VideoFeatures
    annotation: MomentAnnotation
    labels: SupervisionLabels
    pseudo: PseudoQuerySet | None = None

    @property
    def video_id(self) -> str:
        return self.video.video_id

    @property
    def n_valid(self) -> int:
        return self.video.num_valid


def build_vocab(pairs: Iterable[tuple[VideoFeatures, MomentAnnotation]], captions: Mapping[str, Sequence[FrameCaption]] | None, objects: Iterable[str]) -> Vocab:
    lists = [ann.query_text for _, ann in pairs]
    if captions:
        lists += [c.tokens for caps in captions.values() for c in caps]
    lists.append(sorted(objects))
    return Vocab.build(lists)


def build_examples(
    pairs: Sequence[tuple[VideoFeatures, MomentAnnotation]],
    T: int,
    captions: Mapping[str, Sequence[FrameCaption]] | None = None,
    word_vectors: WordVectors | None = None,
    K: int = 3,
    extend_ratio: float = 0.25,
    t_min: float = 0.5,
    t_max: float = 1.0,
) -> list[Example]:
    cand_s, cand_e = (c.numpy() for c in candidate_cells(T))
    word_vectors = word_vectors or WordVectors()
    out = []
    for video, ann in pairs:
        if video.num_frames != T:
            video = resample_video(video, T)
        labels = make_labels(ann, T, cand_s, cand_e, video.num_valid, extend_ratio, t_min, t_max)
        pseudo = None
        if captions is not None and video.video_id in captions:
            gt = encode_query(ann.query_text, word_vectors)
            pseudo = score_and_select_topk(captions[video.video_id], gt, word_vectors, K)
        out.append(Example(video, ann, labels, pseudo))
    return out


def _pad_ids(rows: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    L = max(1, max(len(r) for r in rows))
    ids = torch.full((len(rows), L), PAD_ID, dtype=torch.long)
    mask = torch.zeros(len(rows), L, dtype=torch.bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = torch.tensor(r, dtype=torch.long)
        mask[i, : len(r)] = True
    return ids, mask


def collate(
    examples: Sequence[Example],
    vocab: Vocab,
    objects: Iterable[str] = (),
    M_percent: float = 0.0,
    mask_seed: int = 0,
    with_pseudo: bool = True,
) -> Batch:
    """Stack a list of examples; pseudo-query object words are masked with a per-example seed."""
    video = torch.from_numpy(np.stack([e.video.features for e in examples]))
    v_mask = torch.from_numpy(np.stack([e.video.frame_mask for e in examples]))
    query, q_mask = _pad_ids([vocab.encode(e.annotation.query_text) for e in examples])
    batch = Batch(
        video=video,
        v_mask=v_mask,
        query=query,
        q_mask=q_mask,
        y_start=torch.from_numpy(np.stack([e.labels.y_start for e in examples])),
        y_end=torch.from_numpy(np.stack([e.labels.y_end for e in examples])),
        y_highlight=torch.from_numpy(np.stack([e.labels.y_highlight for e in examples])),
        y_match=torch.from_numpy(np.stack([e.labels.y_match for e in examples])),
    )
    if with_pseudo and all(e.pseudo is not None for e in examples):
        objects = set(objects)
        masked = [
            mask_object_words(e.pseudo, objects, M_percent, stable_hash(mask_seed, e.video_id, e.annotation.start_sec))
            for e in examples
        ]
        batch.pq, batch.pq_mask = _pad_ids([vocab.encode(m.concat_tokens) for m in masked])
        batch.mask_positions = [list(m.mask_positions) for m in masked]
    return batch


def iter_batches(examples: Sequence[Example], batch_size: int, order: Sequence[int] | None = None):
    order = range(len(examples)) if order is None else order
    order = list(order)
    for i in range(0, len(order), batch_size):
        yield [examples[j] for j in order[i : i + batch_size]]


@dataclass
class PreparedData:
    train: list[Example]
    val: list[Example]
    vocab: Vocab
    objects: list[str]


def prepare(
    pairs: Sequence[tuple[VideoFeatures, MomentAnnotation]],
    captions: Mapping[str, Sequence[FrameCaption]] | None,
    objects: Iterable[str],
    T: int,
    K: int = 3,
    val_fraction: float = 0.2,
    word_vectors: WordVectors | None = None,
    **label_kw,
) -> PreparedData:
    """Split by video id, build the vocabulary and turn both splits into examples."""
    objects = sorted(set(objects))
    train_ids, _ = split_ids([v.video_id for v, _ in pairs], val_fraction)
    train_ids = set(train_ids)
    tr = [p for p in pairs if p[0].video_id in train_ids]
    va = [p for p in pairs if p[0].video_id not in train_ids]
    vocab = build_vocab(pairs, captions, objects)
    wv = word_vectors or WordVectors()
    return PreparedData(
        build_examples(tr, T, captions, wv, K, **label_kw),
        build_examples(va, T, captions, wv, K, **label_kw),
        vocab,
        objects,
    )


def synthetic_data(spec, T: int | None = None, K: int = 3, val_fraction: float = 0.2, noise: float = 0.1, F: int = 16, **label_kw) -> PreparedData:
    """Generate a synthetic corpus, caption it with the stub and prepare both splits."""
    samples = synth_generate(spec)
    objects = synth_vocabulary(spec)[0]
    stub = StubCaptioner({s.video.video_id: s.frame_tokens for s in samples}, objects, seed=spec.seed, noise=noise)
    captions = {s.video.video_id: caption_frames(s.video, F, stub) for s in samples}
    pairs = [(s.video, s.annotation) for s in samples]
    return prepare(pairs, captions, objects, T or spec.T, K, val_fraction, **label_kw)
