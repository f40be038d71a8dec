"""Acceptance criteria, one test per criterion at its stated tolerance.

Every expected value here is either computed by an in-test independent
oracle (finite differences, brute-force scans, hand-listed literals) or is
a direct boundary assertion.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from artcontext.embeddings import EmbeddingMatrix, HashEmbeddingProvider, cosine
from artcontext.evaluation import (
    RECALL_GRID,
    PRCurve,
    average_precision,
    envelope_on_grid,
    macro_average,
    pr_points,
    rank_candidates,
)
from artcontext.extraction import (
    DocumentText,
    accept_document,
    document_contexts,
    load_document,
)
from artcontext.io_utils import read_jsonl, write_jsonl
from artcontext.lora import (
    PairFeatures,
    ProjectionHead,
    TrainBatch,
    TrainConfig,
    init_adapter,
    loss_and_grad,
    merge,
    project,
    train,
)
from artcontext.pipeline import PipelineConfig, make_eval_queries_from_pairs, run_stage
from artcontext.resources import fixture_dir

from test_lora import build_instance, fd_gradients, max_rel_error

FIX = fixture_dir()


# --- criterion: gradient correctness -----------------------------------------

def test_gradient_correctness_against_finite_differences():
    """Analytic adapter gradients match central differences (eps=1e-4,
    float64) with max relative error <= 1e-4 on three shapes, in < 10 s."""
    t0 = time.monotonic()
    shapes = [(101, 2, 5, 4, 1), (102, 4, 6, 5, 2), (103, 8, 8, 4, 2)]
    for seed, n, d_in, d_e, r in shapes:
        heads, ads, batch = build_instance(seed, n=n, d_in=d_in, d_e=d_e, r=r)
        config = TrainConfig(epochs=1, batch_size=2, learning_rate=0.1, seed=0)
        _, analytic = loss_and_grad(batch, heads, ads, config)
        fd = fd_gradients(heads, ads, batch, config, eps=1e-4)
        err = max_rel_error(analytic, fd)
        assert err <= 1e-4, f"shape (n={n}, d_in={d_in}, d_e={d_e}, r={r}): rel err {err}"
    assert time.monotonic() - t0 < 10.0


# --- criterion: zero-init identity --------------------------------------------

def test_zero_init_identity_on_fifty_pair_fixture():
    """Fresh adapters with dropout off rank exactly like the frozen heads."""
    rng = np.random.Generator(np.random.PCG64(202))
    provider = HashEmbeddingProvider(dim=24)
    d_e = 12
    W_img = (rng.standard_normal((d_e, 24)) / 5).astype(np.float32)
    W_txt = (rng.standard_normal((d_e, 24)) / 5).astype(np.float32)
    head_img = ProjectionHead(W_img, "visual")
    head_txt = ProjectionHead(W_txt, "text")
    ad_img = init_adapter(24, d_e, rank=4, dropout_p=0.05, seed=4)
    ad_txt = init_adapter(24, d_e, rank=4, dropout_p=0.05, seed=5)

    for i in range(50):
        query = provider.embed([f"painting query {i}"]).data[0]
        cand_texts = [f"candidate {i}-{j}" for j in range(20)]
        feats = provider.embed(cand_texts).data

        def ranking(img_vec, txt_rows):
            u = img_vec / np.linalg.norm(img_vec)
            rows = txt_rows / np.linalg.norm(txt_rows, axis=1, keepdims=True)
            m = EmbeddingMatrix([str(j) for j in range(len(rows))], rows.shape[1],
                                rows.astype(np.float32))
            return [cid for cid, _ in rank_candidates(u, m, len(rows))]

        base = ranking(W_img @ query, feats @ W_txt.T)
        adapted = ranking(
            project(head_img, ad_img, query),
            np.stack([project(head_txt, ad_txt, f) for f in feats]),
        )
        assert adapted == base, f"query {i}: rankings diverged"


# --- criterion: merge equivalence ----------------------------------------------

def test_merge_equivalence_hundred_random_triples():
    """|project_merged - project_factored|_inf <= 1e-5 over 100 triples."""
    rng = np.random.Generator(np.random.PCG64(303))
    worst = 0.0
    for i in range(100):
        d_in = int(rng.integers(4, 12))
        d_out = int(rng.integers(3, 9))
        r = int(rng.integers(1, min(d_in, d_out) + 1))
        W = (rng.standard_normal((d_out, d_in)) / math.sqrt(d_in)).astype(np.float32)
        head = ProjectionHead(W, "visual")
        adapter = init_adapter(d_in, d_out, rank=r, alpha=2.0 * r, seed=i)
        adapter.B = (0.1 * rng.standard_normal((d_out, r))).astype(np.float32)
        merged_head = ProjectionHead(merge(head, adapter), "visual")
        zero = init_adapter(d_in, d_out, rank=r, seed=i + 1)
        x = rng.standard_normal(d_in).astype(np.float32)
        diff = np.abs(project(merged_head, zero, x) - project(head, adapter, x)).max()
        worst = max(worst, float(diff))
    assert worst <= 1e-5, f"max deviation {worst}"


# --- criterion: synthetic adaptation gain ----------------------------------------

def _clustered_pairs(seed=1234, n_pairs=200, d=16, k=8, sigma=0.1):
    rng = np.random.Generator(np.random.PCG64(seed))
    mu_img = rng.standard_normal((k, d))
    mu_txt = rng.standard_normal((k, d))  # unrelated to mu_img: baseline is uninformed
    cluster = np.repeat(np.arange(k), n_pairs // k)
    rng.shuffle(cluster)
    img = (mu_img[cluster] + sigma * rng.standard_normal((n_pairs, d))).astype(np.float32)
    txt = (mu_txt[cluster] + sigma * rng.standard_normal((n_pairs, d))).astype(np.float32)
    return img, txt


def _mean_ap(heads, adapters, img, txt):
    from artcontext.lora import batch_embeddings

    U, *_ = batch_embeddings(heads[0], adapters[0], img)
    V, *_ = batch_embeddings(heads[1], adapters[1], txt)
    S = U @ V.T
    aps = []
    for i in range(len(img)):
        labels = [1 if j == i else 0 for j in range(len(txt))]
        aps.append(average_precision(S[i], labels))
    return float(np.mean(aps))


def test_synthetic_adaptation_gain():
    """20 epochs on 150 clustered pairs lifts held-out mean AP by >= 0.10
    absolute over the zero-adapter baseline; loss decreases; < 60 s."""
    t0 = time.monotonic()
    img, txt = _clustered_pairs()
    train_img, train_txt = img[:150], txt[:150]
    held_img, held_txt = img[150:], txt[150:]

    rng = np.random.Generator(np.random.PCG64(99))
    heads = (
        ProjectionHead((rng.standard_normal((16, 16)) / 4).astype(np.float32), "visual"),
        ProjectionHead((rng.standard_normal((16, 16)) / 4).astype(np.float32), "text"),
    )
    zero = (init_adapter(16, 16, seed=0), init_adapter(16, 16, seed=1))
    baseline_ap = _mean_ap(heads, zero, held_img, held_txt)

    features = PairFeatures([f"q{i}" for i in range(150)], train_img, train_txt)
    config = TrainConfig(epochs=20, batch_size=32, learning_rate=0.03, seed=5)
    ad_img, ad_txt, history = train(features, heads, config)  # rank 16, alpha 32, dropout 0.05
    adapted_ap = _mean_ap(heads, (ad_img, ad_txt), held_img, held_txt)

    elapsed = time.monotonic() - t0
    assert history[-1] < history[0], f"loss did not decrease: {history[0]} -> {history[-1]}"
    assert adapted_ap - baseline_ap >= 0.10, (
        f"AP gain {adapted_ap - baseline_ap:.4f} (baseline {baseline_ap:.4f}, adapted {adapted_ap:.4f})"
    )
    assert elapsed < 60.0


# --- criterion: PR protocol oracle equivalence -------------------------------------

def test_pr_protocol_matches_brute_force_oracle():
    """1000 random score/label vectors of length 10: grid envelope equals the
    literal max-over-suffix oracle at all 101 points and is non-increasing;
    the 3-curve macro average matches hand arithmetic to 1e-9."""
    rng = np.random.Generator(np.random.PCG64(404))
    for case in range(1000):
        scores = rng.random(10)
        labels = rng.integers(0, 2, 10).tolist()
        if sum(labels) == 0:
            labels[int(rng.integers(0, 10))] = 1
        points = pr_points(scores, labels)
        curve = envelope_on_grid(points)
        oracle = [max(p for rec, p in points if rec >= r) for r in RECALL_GRID]
        assert list(curve.precision) == oracle, f"case {case}"
        assert all(a >= b for a, b in zip(curve.precision, curve.precision[1:]))

    def step(level_before, level_after, knee):
        return PRCurve(precision=tuple(level_before if r <= knee else level_after for r in RECALL_GRID))

    avg = macro_average([step(1.0, 0.4, 0.5), step(0.8, 0.2, 0.3), step(0.6, 0.6, 0.9)])
    by_r = dict(zip(avg.recall_grid, avg.precision))
    assert abs(by_r[0.0] - (1.0 + 0.8 + 0.6) / 3) <= 1e-9
    assert abs(by_r[0.5] - (1.0 + 0.2 + 0.6) / 3) <= 1e-9
    assert abs(by_r[1.0] - (0.4 + 0.2 + 0.6) / 3) <= 1e-9


# --- criterion: extraction conformance ----------------------------------------------

# Hand-derived sentence list for the shipped conformance document W4301.md,
# in document order after stripping. "Its sky glows." (3 tokens) and no other
# sentence falls under the 4-token center filter.
W4301_SENTENCES = [
    "Vincent van Gogh reached Arles in February 1888.",
    "He painted the Café Terrace at Night in ca. September of that year.",
    "Its sky glows.",
    "The canvas measures 80.7 by 65.3 centimetres today.",
    "A table above lists pigments.",
    "See Fig. 2 for the star field detail.",
    "Scholars such as Dr. Meedendorp compared the terrace to a stage set.",
    "Visit for the catalogue record.",
    "He wrote to Theo.",
    "The letter survives in the archive.",
    "The picture entered the Kröller-Müller collection in 1908.",
    "Curators mounted a centennial exhibition in Arles.",
    "Several catalogue essays treat the night paintings as a group.",
    "The terrace remains a popular pilgrimage site.",
    "Painters still copy its composition from the square.",
]
W4301_CENTER_INDICES = [0, 1, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14]


def test_extraction_conformance_on_shipped_document():
    """The shipped fixture article yields exactly the hand-derived units."""
    doc = load_document(FIX / "corpus" / "W4301.md", work_id="W4301")
    units = document_contexts(doc)

    expected_windows = {}
    s = W4301_SENTENCES
    for idx in W4301_CENTER_INDICES:
        parts = ([s[idx - 1]] if idx > 0 else []) + [s[idx]] + ([s[idx + 1]] if idx + 1 < len(s) else [])
        expected_windows[idx] = " ".join(parts)

    assert [u.index for u in units] == W4301_CENTER_INDICES
    for u in units:
        assert u.sentence == s[u.index]
        assert u.window_text == expected_windows[u.index]
        assert u.token_count == len(s[u.index].split())
        assert u.token_count >= 4
    # the filtered 3-token sentence still appears inside neighbor windows
    assert any("Its sky glows." in u.window_text for u in units)

    # size gate boundaries: 10*2**20 rejected, one byte under accepted
    gate = DocumentText(work_id="big", markdown="", byte_size=10_485_760)
    assert accept_document(gate) is False
    gate = DocumentText(work_id="fits", markdown="", byte_size=10_485_759)
    assert accept_document(gate) is True


def test_extraction_size_gate_on_real_files(tmp_path):
    """The boundary holds on actual files of exactly those sizes."""
    big = tmp_path / "big.md"
    with open(big, "wb") as fh:
        fh.seek(10_485_760 - 1)
        fh.write(b"\n")
    small = tmp_path / "small.md"
    with open(small, "wb") as fh:
        fh.seek(10_485_759 - 1)
        fh.write(b"\n")
    assert accept_document(load_document(big)) is False
    assert accept_document(load_document(small)) is True


# --- criterion: alignment determinism and oracle ----------------------------------------

def _fixture_config(run_dir: Path) -> PipelineConfig:
    return PipelineConfig(
        run_dir=run_dir,
        fixture_dir=FIX / "api",
        roster_path=FIX / "roster.jsonl",
        topics_path=FIX / "topics.json",
        corpus_dir=FIX / "corpus",
        paintings_path=FIX / "paintings.jsonl",
        provider_spec="test",
        provider_dim=32,
        embed_dim=16,
        epochs=5,
        batch_size=2,
        learning_rate=0.05,
        seed=7,
    )


def test_alignment_determinism_and_brute_force_oracle(tmp_path):
    """Two full alignment runs write identical bytes, and every selected
    context equals an exhaustive cosine scan over the creator's candidates."""
    outputs = []
    for sub in ("a", "b"):
        config = _fixture_config(tmp_path / sub)
        for stage in ("harvest", "extract", "embed", "align"):
            run_stage(stage, config)
        outputs.append(config.p_pairs.read_bytes())
    assert outputs[0] == outputs[1]

    config = _fixture_config(tmp_path / "a")
    from artcontext.alignment import PaintingRecord, normalize_name, render_query
    from artcontext.embeddings import load_matrix
    from artcontext.pipeline import _artist_groups, load_contexts

    provider = HashEmbeddingProvider(dim=32)
    contexts = load_contexts(config.p_contexts)
    vectors = load_matrix(config.p_vectors)
    groups = _artist_groups(config, contexts)
    paintings = {r["qid"]: PaintingRecord.from_json(r) for r in read_jsonl(config.paintings_path)}
    pairs = read_jsonl(config.p_pairs)
    assert pairs, "fixture alignment produced no pairs"
    for row in pairs:
        p = paintings[row["qid"]]
        candidates = groups[normalize_name(p.creator_name)]
        qvec = provider.embed([render_query(p)]).data[0]
        best = None
        best_score = -2.0
        for c in candidates:  # brute force, first max wins
            score = cosine(qvec, vectors.row(c.context_id))
            if score > best_score:
                best, best_score = c.context_id, score
        assert row["context_id"] == best
        assert row["similarity"] == pytest.approx(best_score, abs=1e-6)


# --- criterion: end-to-end fixture run ---------------------------------------------------

def test_end_to_end_fixture_run(tmp_path):
    """harvest -> extract -> embed -> align -> train(5 epochs) -> eval on the
    shipped fixtures: manifests reconcile and a 101-row PR CSV appears,
    all inside two minutes."""
    t0 = time.monotonic()
    config = _fixture_config(tmp_path)
    manifests = {}
    for stage in ("harvest", "extract", "embed", "align", "train"):
        manifests[stage] = run_stage(stage, config)

    queries = make_eval_queries_from_pairs(config)
    config.queries_path = config.run_dir / "eval.jsonl"
    write_jsonl(config.queries_path, [q.to_json() for q in queries])
    manifests["eval"] = run_stage("eval", config)

    for stage, manifest in manifests.items():
        c = manifest.counts
        assert c["records_out"] + c["records_skipped"] + c["records_errored"] == c["records_in"], (
            f"{stage}: counts do not reconcile: {c}"
        )

    lines = config.p_out_csv.read_text().split("\n")
    assert lines[0] == "recall,precision_baseline,precision_adapted"
    assert len([l for l in lines[1:] if l]) == 101
    assert len(manifests["train"].detail["epoch_loss"]) == 5
    assert time.monotonic() - t0 < 120.0
