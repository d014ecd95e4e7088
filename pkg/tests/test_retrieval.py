import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrcmv.data import ModalSequence, SyntheticSpec, eval_clip, generate_synthetic, load_dataset
from mrcmv.model import EmbeddingRecord, ModelConfig, embed_catalog
from mrcmv.retrieval import (
    EmbeddingIndex,
    EvaluationReport,
    RetrievalResult,
    chance_recall_band,
    evaluate,
    evaluate_clips,
    random_embedding_recall,
    rank_candidates,
    recall_at_k,
    semantic_distance,
)
from mrcmv.trainer import init_parameters
from mrcmv.verify import oracle_parameters


def unit_records(rng, n, d, prefix="c"):
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return [EmbeddingRecord(f"{prefix}{i}", None, v) for i, v in enumerate(x)]


def test_ranking_is_by_distance_with_scores_descending(rng):
    index = EmbeddingIndex(unit_records(rng, 20, 5))
    q = unit_records(rng, 1, 5, "c")[0]
    res = rank_candidates(q, index)
    d2 = {r.id: float(((r.vector - q.vector) ** 2).sum()) for r in index.records}
    assert res.ranked_ids == sorted(d2, key=lambda i: (d2[i], i))
    assert all(a >= b for a, b in zip(res.scores, res.scores[1:]))
    assert res.scores[0] == pytest.approx(float(q.vector @ index.matrix[index.ids.index(res.ranked_ids[0])]))


def test_ties_break_by_id():
    v = np.array([1.0, 0.0])
    index = EmbeddingIndex([EmbeddingRecord(i, None, v) for i in ["b", "c", "a"]])
    assert rank_candidates(EmbeddingRecord("q", None, v), index, "c").ranked_ids == ["a", "b", "c"]


def test_ground_truth_rank(rng):
    recs = unit_records(rng, 5, 3)
    res = rank_candidates(recs[2], EmbeddingIndex(recs))
    assert res.rank_of_ground_truth == 1 and res.top(1)[0][0] == "c2"


def test_index_rejects_duplicates_and_is_read_only(rng):
    recs = unit_records(rng, 3, 3)
    with pytest.raises(ValueError):
        EmbeddingIndex(recs + recs[:1])
    index = EmbeddingIndex(recs)
    with pytest.raises(ValueError):
        index.matrix[0, 0] = 2.0
    with pytest.raises(ValueError):
        rank_candidates(recs[0], EmbeddingIndex([]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_ranking_is_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    cands = unit_records(rng, 12, 6)
    q = unit_records(rng, 1, 6, "q")[0]
    rot, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    turn = lambda r: EmbeddingRecord(r.id, r.label, rot @ r.vector)
    a = rank_candidates(q, EmbeddingIndex(cands), "c0")
    b = rank_candidates(turn(q), EmbeddingIndex([turn(c) for c in cands]), "c0")
    assert a.ranked_ids == b.ranked_ids
    np.testing.assert_allclose(a.scores, b.scores, atol=1e-12)


def test_recall_definition():
    results = [RetrievalResult("q", [], [], r) for r in (1, 2, 6, 30)]
    assert recall_at_k(results, 1) == 25.0
    assert recall_at_k(results, 5) == 50.0
    assert recall_at_k(results, 50) == 100.0
    with pytest.raises(ValueError):
        recall_at_k([RetrievalResult("q", [], [], None)], 1)
    with pytest.raises(ValueError):
        recall_at_k([], 1)


def test_random_embeddings_give_chance_recall():
    assert 7.0 <= random_embedding_recall(50, 5, trials=200, seed=3) <= 13.0


def test_chance_band_brackets_k_over_n():
    lo, mean, hi = chance_recall_band(16, 1, n_runs=5, trials=4000)
    assert lo < 100 / 16 < hi and mean == pytest.approx(100 / 16, rel=0.05)


def test_semantic_distance_uses_time_means():
    a = ModalSequence("bgm", np.array([[0.0, 0.0], [2.0, 2.0]]))
    b = np.array([[1.0, 4.0]])
    assert semantic_distance(a, b) == pytest.approx(3.0)
    assert semantic_distance(a, a) == 0.0
    with pytest.raises(ValueError):
        semantic_distance(a, np.zeros((1, 3)))


def test_report_serialisation():
    rep = EvaluationReport({1: 50.0, 5: 100.0}, 0.25, 2, 2, "ck")
    d = json.loads(rep.to_json())
    assert d == {"recall_at_k": {"1": 50.0, "5": 100.0}, "mean_semantic_distance": 0.25,
                 "n_queries": 2, "n_candidates": 2, "checkpoint_id": "ck"}
    assert "R@5" in rep.table() and "MeanFeatDist" in rep.table()


def test_oracle_checkpoint_retrieves_perfectly(tmp_path):
    ds = generate_synthetic(SyntheticSpec(n_videos=10, noise_std=0.0, seed=5), tmp_path)
    videos = load_dataset(tmp_path)
    params = oracle_parameters(ModelConfig(), ds.mixing)
    report = evaluate(videos, params, ks=(1, 5))
    assert report.recall[1] == 100.0 and report.mean_semantic_distance == 0.0


def test_catalog_is_independent_of_queries(small_corpus):
    _, videos = small_corpus
    cfg = ModelConfig(d_model=8, n_heads=2, d_k=4, d_v=4, seq_len=8, d_embed=6)
    params = init_parameters(cfg, 0)
    clips = [eval_clip(v, length=cfg.seq_len) for v in videos[:5]]
    before = embed_catalog([c.bgm for c in clips], params)
    rng = np.random.default_rng(0)
    for _ in range(2):
        # run the full query path on fresh random queries between catalog passes
        scrambled = [
            replace(c, video_fast=ModalSequence("video_fast", rng.standard_normal(c.video_fast.values.shape)),
                    voiceover=ModalSequence("voiceover", rng.standard_normal(c.voiceover.values.shape)))
            for c in clips
        ]
        evaluate_clips(scrambled, params)
        after = embed_catalog([c.bgm for c in clips], params)
        assert all(x.vector.tobytes() == y.vector.tobytes() for x, y in zip(before, after))


def test_recall_is_monotone_and_complete(rng):
    cands = unit_records(rng, 15, 4)
    queries = unit_records(rng, 15, 4)
    results = [rank_candidates(q, EmbeddingIndex(cands)) for q in queries]
    values = [recall_at_k(results, k) for k in range(1, 16)]
    assert values == sorted(values) and values[-1] == 100.0


def test_constant_embeddings_rank_by_id():
    v = np.array([0.0, 1.0])
    ids = [f"c{i:02d}" for i in range(20)]
    index = EmbeddingIndex([EmbeddingRecord(i, None, v) for i in ids])
    results = [rank_candidates(EmbeddingRecord(i, None, v), index) for i in ids]
    assert [r.rank_of_ground_truth for r in results] == list(range(1, 21))
    assert recall_at_k(results, 5) == 25.0


def test_evaluate_embeds_catalog_before_queries(small_corpus, monkeypatch):
    import mrcmv.model as model
    import mrcmv.retrieval as retrieval

    _, videos = small_corpus
    cfg = ModelConfig(d_model=8, n_heads=2, d_k=4, d_v=4, seq_len=8, d_embed=6)
    params = init_parameters(cfg, 0)
    calls = []
    real_bgm, real_joint = model.bgm_embed, retrieval.joint_embed
    monkeypatch.setattr(model, "bgm_embed", lambda *a: calls.append("bgm") or real_bgm(*a))
    monkeypatch.setattr(retrieval, "joint_embed", lambda *a: calls.append("query") or real_joint(*a))
    evaluate(videos[:4], params)
    assert calls == ["bgm", "query"]
