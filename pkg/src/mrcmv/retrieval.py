"""Embedding index, ranking, Recall@K and the evaluation table."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ClipSample, ModalSequence, VideoStreams, eval_clip
from .model import EmbeddingRecord, ModelParameters, embed_catalog, joint_embed

DEFAULT_KS = (1, 5, 10, 25)


class EmbeddingIndex:
    """Immutable set of candidate embeddings, ranked by squared Euclidean distance."""

    def __init__(self, records: Sequence[EmbeddingRecord]):
        ids = [r.id for r in records]
        if len(set(ids)) != len(ids):
            raise ValueError("candidate ids must be unique")
        self._records = tuple(records)
        self._ids = tuple(ids)
        self._matrix = np.stack([r.vector for r in records]) if records else np.zeros((0, 0))
        self._matrix.setflags(write=False)

    def __len__(self) -> int:
        return len(self._records)

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def records(self) -> tuple[EmbeddingRecord, ...]:
        return self._records

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix


@dataclass
class RetrievalResult:
    query_id: str
    ranked_ids: list[str]
    scores: list[float]
    rank_of_ground_truth: int | None = None

    def top(self, n: int) -> list[tuple[str, float]]:
        return list(zip(self.ranked_ids[:n], self.scores[:n]))


def rank_candidates(query: EmbeddingRecord, index: EmbeddingIndex, ground_truth_id: str | None = None) -> RetrievalResult:
    """Rank every candidate by ascending ||q - c||^2, ties by id.

    Scores are ``1 - d^2 / 2``, the cosine similarity for unit vectors, so
    they are non-increasing down the list.  The ground truth defaults to the
    candidate sharing the query's id.
    """
    if len(index) == 0:
        raise ValueError("cannot rank against an empty index")
    diff = index.matrix - query.vector[None, :]
    d2 = (diff * diff).sum(axis=1)
    order = sorted(range(len(index)), key=lambda i: (d2[i], index.ids[i]))
    ranked = [index.ids[i] for i in order]
    scores = [float(1.0 - d2[i] / 2.0) for i in order]
    truth = query.id if ground_truth_id is None else ground_truth_id
    rank = ranked.index(truth) + 1 if truth in ranked else None
    return RetrievalResult(query.id, ranked, scores, rank)


def recall_at_k(results: Sequence[RetrievalResult], k: int) -> float:
    """Percentage of queries whose ground truth is ranked within the top ``k``."""
    if not results:
        raise ValueError("recall needs at least one result")
    if any(r.rank_of_ground_truth is None for r in results):
        raise ValueError("every result must carry a ground-truth rank")
    hits = sum(1 for r in results if r.rank_of_ground_truth <= k)
    return 100.0 * hits / len(results)


def semantic_distance(retrieved: ModalSequence | np.ndarray, truth: ModalSequence | np.ndarray) -> float:
    """Euclidean distance between the time-mean feature vectors of two BGM sequences.

    A training-free stand-in for a learned audio-similarity network.
    """
    a = retrieved.values if isinstance(retrieved, ModalSequence) else np.asarray(retrieved)
    b = truth.values if isinstance(truth, ModalSequence) else np.asarray(truth)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"depth mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    return float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))


@dataclass
class EvaluationReport:
    recall: dict[int, float]
    mean_semantic_distance: float
    n_queries: int
    n_candidates: int
    checkpoint_id: str | None = None
    results: list[RetrievalResult] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "recall_at_k": {str(k): v for k, v in self.recall.items()},
            "mean_semantic_distance": self.mean_semantic_distance,
            "n_queries": self.n_queries,
            "n_candidates": self.n_candidates,
            "checkpoint_id": self.checkpoint_id,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self, label: str = "model") -> str:
        cols = [f"R@{k}" for k in self.recall] + ["MeanFeatDist"]
        vals = [f"{v:.1f}" for v in self.recall.values()] + [f"{self.mean_semantic_distance:.3f}"]
        width = max(len(label), 6)
        head = f"{'Method':<{width}}  " + "  ".join(f"{c:>12}" for c in cols)
        row = f"{label:<{width}}  " + "  ".join(f"{v:>12}" for v in vals)
        return head + "\n" + row


def evaluate_clips(
    clips: Sequence[ClipSample],
    params: ModelParameters,
    ks: Sequence[int] = DEFAULT_KS,
    checkpoint_id: str | None = None,
) -> EvaluationReport:
    """Embed the catalog once, then rank every query against it."""
    ids = [c.source_id for c in clips]
    index = EmbeddingIndex(embed_catalog([c.bgm for c in clips], params, ids=ids))
    joint = joint_embed(
        np.stack([c.video_fast.values for c in clips]),
        np.stack([c.video_slow.values for c in clips]),
        np.stack([c.voiceover.values for c in clips]),
        params,
    ).value
    queries = [EmbeddingRecord(cid, None, v) for cid, v in zip(ids, joint)]
    return report_from_embeddings(queries, index, {c.source_id: c.bgm for c in clips}, ks, checkpoint_id)


def report_from_embeddings(
    queries: Sequence[EmbeddingRecord],
    index: EmbeddingIndex,
    bgm_by_id: dict[str, ModalSequence],
    ks: Sequence[int] = DEFAULT_KS,
    checkpoint_id: str | None = None,
) -> EvaluationReport:
    results = [rank_candidates(q, index) for q in queries]
    dists = [semantic_distance(bgm_by_id[r.ranked_ids[0]], bgm_by_id[r.query_id]) for r in results]
    return EvaluationReport(
        recall={k: recall_at_k(results, k) for k in ks},
        mean_semantic_distance=float(np.mean(dists)),
        n_queries=len(results),
        n_candidates=len(index),
        checkpoint_id=checkpoint_id,
        results=results,
    )


def evaluate(
    videos: Sequence[VideoStreams],
    params: ModelParameters,
    ks: Sequence[int] = DEFAULT_KS,
    checkpoint_id: str | None = None,
    clip_len_s: float = 32.0,
) -> EvaluationReport:
    """Score each video's fixed beginning clip against the catalog of all test BGMs."""
    clips = [eval_clip(v, clip_len_s, params.config.seq_len) for v in videos]
    return evaluate_clips(clips, params, ks, checkpoint_id)


def random_embedding_recall(n: int, k: int, trials: int, dim: int = 16, seed: int = 0) -> float:
    """Mean Recall@K (percent) when queries and candidates are random unit vectors."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(trials):
        q = rng.standard_normal((n, dim))
        c = rng.standard_normal((n, dim))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        ids = [str(i) for i in range(n)]
        index = EmbeddingIndex([EmbeddingRecord(i, None, v) for i, v in zip(ids, c)])
        total += recall_at_k([rank_candidates(EmbeddingRecord(i, None, v), index) for i, v in zip(ids, q)], k)
    return total / trials


def chance_recall_band(
    n_candidates: int, k: int, n_runs: int = 1, trials: int = 10000, level: float = 0.95, seed: int = 0
) -> tuple[float, float, float]:
    """(low, mean, high) of Recall@K averaged over ``n_runs`` runs of uniformly random rankings.

    Each query's ground truth lands at a uniform rank, so this is the
    distribution a model with no signal would produce.
    """
    rng = np.random.default_rng(seed)
    ranks = rng.integers(1, n_candidates + 1, size=(trials, n_runs, n_candidates))
    recall = 100.0 * (ranks <= k).mean(axis=(1, 2))
    tail = (1.0 - level) / 2
    lo, hi = np.quantile(recall, [tail, 1.0 - tail])
    return float(lo), float(recall.mean()), float(hi)
