"""Stage orchestration: configuration, manifests with content digests,
staleness checks, and the runners that tie the stages together
(harvest -> extract -> embed -> align -> train -> eval/retrieve)."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import (
    AlignedPair,
    PaintingRecord,
    align_all,
    group_contexts_by_artist,
    normalize_name,
    render_query,
)
from .discovery import (
    DEFAULT_API_BASE,
    FixtureWorksClient,
    LiveWorksClient,
    WorkRecord,
    harvest,
    load_roster,
    load_topic_filter,
)
from .embeddings import (
    EmbeddingMatrix,
    FileVectorSource,
    HashEmbeddingProvider,
    embed_contexts,
    load_matrix,
    save_matrix,
)
from .errors import (
    StaleInput,
    StageFailure,
    UnknownPainting,
    ValidationError,
)
from .evaluation import (
    EvalQuery,
    PRCurve,
    emit_plot_data,
    envelope_on_grid,
    macro_average,
    pr_points,
    rank_candidates,
)
from .extraction import ContextUnit, accept_document, document_contexts, load_document
from .io_utils import atomic_write_text, read_jsonl, sha256_file, write_jsonl
from .lora import (
    LoraAdapter,
    PairFeatures,
    ProjectionHead,
    TrainConfig,
    init_adapter,
    load_adapter,
    merge,
    save_adapter,
    train,
)

STAGE_ORDER = ["harvest", "extract", "embed", "align", "train", "eval"]
STAGE_DEPS = {
    "harvest": [],
    "extract": ["harvest"],
    "embed": ["extract"],
    "align": ["embed"],
    "train": ["align"],
    "eval": ["train"],
}


@dataclass
class PipelineConfig:
    """Everything a stage run may need; the CLI fills this from flags and an
    optional INI file (flags win; only the API base reads the environment)."""

    run_dir: Path = Path(".")
    api_base: str = DEFAULT_API_BASE
    fixture_dir: Path | None = None
    roster_path: Path | None = None
    topics_path: Path | None = None
    rho: float | None = None
    max_attempts: int = 5
    workers: int = 1

    corpus_dir: Path | None = None
    works_path: Path | None = None
    max_bytes: int = 10 * 1024 * 1024
    dedup: bool = False
    contexts_path: Path | None = None

    provider_spec: str = "test"
    provider_dim: int = 32
    batch_size_embed: int = 64
    vectors_path: Path | None = None

    paintings_path: Path | None = None
    min_similarity: float | None = None
    pairs_dir: Path | None = None

    img_feats: Path | None = None
    txt_feats: Path | None = None
    img_proj: Path | None = None
    txt_proj: Path | None = None
    adapters_dir: Path | None = None
    embed_dim: int = 16
    epochs: int = 5
    batch_size: int = 2
    learning_rate: float = 0.05
    seed: int = 7
    rank: int = 16
    alpha: float = 32.0
    dropout: float = 0.05
    momentum: bool = False
    logit_scale: float = math.log(1.0 / 0.07)

    queries_path: Path | None = None
    baseline_scores: Path | None = None
    adapted_scores: Path | None = None
    out_csv: Path | None = None

    def __post_init__(self):
        self.run_dir = Path(self.run_dir)

    # default artifact locations under the run directory
    @property
    def p_works(self) -> Path:
        return Path(self.works_path) if self.works_path else self.run_dir / "works.jsonl"

    @property
    def p_contexts(self) -> Path:
        return Path(self.contexts_path) if self.contexts_path else self.run_dir / "contexts.jsonl"

    @property
    def p_vectors(self) -> Path:
        return Path(self.vectors_path) if self.vectors_path else self.run_dir / "contexts.emb"

    @property
    def p_pairs_dir(self) -> Path:
        return Path(self.pairs_dir) if self.pairs_dir else self.run_dir / "pairs"

    @property
    def p_pairs(self) -> Path:
        return self.p_pairs_dir / "aligned_pairs.jsonl"

    @property
    def p_unmatched(self) -> Path:
        return self.p_pairs_dir / "unmatched.jsonl"

    @property
    def p_features(self) -> dict[str, Path]:
        feats = self.run_dir / "features"
        return {
            "img": Path(self.img_feats) if self.img_feats else feats / "img.emb",
            "txt": Path(self.txt_feats) if self.txt_feats else feats / "txt.emb",
            "img_proj": Path(self.img_proj) if self.img_proj else feats / "Wimg.emb",
            "txt_proj": Path(self.txt_proj) if self.txt_proj else feats / "Wtxt.emb",
        }

    @property
    def p_adapters(self) -> Path:
        return Path(self.adapters_dir) if self.adapters_dir else self.run_dir / "adapters"

    @property
    def p_out_csv(self) -> Path:
        return Path(self.out_csv) if self.out_csv else self.run_dir / "pr.csv"

    def manifest_path(self, stage: str) -> Path:
        return self.run_dir / "manifests" / f"{stage}.json"

    def provider(self):
        spec = self.provider_spec
        if spec == "test":
            return HashEmbeddingProvider(self.provider_dim)
        if spec.startswith("file:"):
            path = spec[len("file:") :]
            return FileVectorSource(load_matrix(path), path)
        raise ValidationError(f"unknown provider spec {spec!r} (use test or file:<path>)")


@dataclass
class StageManifest:
    stage: str
    inputs: dict[str, str]  # path -> sha256
    outputs: dict[str, str]
    counts: dict
    wall_clock_s: float
    tool_version: str
    started_at: str
    finished_at: str
    forced: bool = False
    detail: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "stage": self.stage,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "counts": self.counts,
            "wall_clock_s": self.wall_clock_s,
            "tool_version": self.tool_version,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "forced": self.forced,
            "detail": self.detail,
        }


def _load_manifest(path: Path) -> dict:
    return json.loads(path.read_text("utf-8"))


def _check_upstream(config: PipelineConfig, stage: str) -> None:
    for dep in STAGE_DEPS[stage]:
        mpath = config.manifest_path(dep)
        if not mpath.exists():
            raise StaleInput(f"stage {stage!r} needs {dep!r} to have run first")
        recorded = _load_manifest(mpath)
        for out_path, digest in recorded.get("outputs", {}).items():
            p = Path(out_path)
            if not p.exists():
                raise StaleInput(f"{dep!r} output missing: {out_path}")
            if sha256_file(p) != digest:
                raise StaleInput(f"{dep!r} output changed since its manifest: {out_path}")


def run_stage(name: str, config: PipelineConfig, force: bool = False) -> StageManifest:
    """Execute exactly one stage behind its staleness gate.

    Refuses to run when upstream manifests are missing or their recorded
    outputs changed, unless force is set (the manifest then records it).
    The manifest write is atomic (temp file + rename).
    """
    runners = {
        "harvest": _run_harvest,
        "extract": _run_extract,
        "embed": _run_embed,
        "align": _run_align,
        "train": _run_train,
        "eval": _run_eval,
    }
    if name not in runners:
        raise ValidationError(f"unknown stage {name!r}")
    if not force:
        _check_upstream(config, name)
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.monotonic()
    try:
        inputs, outputs, counts, detail = runners[name](config)
    except (StaleInput, ValidationError, UnknownPainting, OSError):
        raise  # typed for the CLI's validation/I-O exit codes
    except Exception as exc:
        raise StageFailure(name, exc) from exc
    manifest = StageManifest(
        stage=name,
        inputs={str(p): sha256_file(p) for p in inputs if Path(p).exists()},
        outputs={str(p): sha256_file(p) for p in outputs},
        counts=counts,
        wall_clock_s=time.monotonic() - t0,
        tool_version=__version__,
        started_at=started,
        finished_at=datetime.now(timezone.utc).isoformat(),
        forced=force,
        detail=detail,
    )
    mpath = config.manifest_path(name)
    atomic_write_text(mpath, json.dumps(manifest.to_json(), ensure_ascii=False, indent=2) + "\n")
    return manifest


# --- stage bodies -------------------------------------------------------------


def _run_harvest(config: PipelineConfig):
    if config.roster_path is None or config.topics_path is None:
        raise ValidationError("harvest needs --roster and --topics")
    roster = load_roster(config.roster_path)
    topic_filter = load_topic_filter(config.topics_path, rho=config.rho)
    if config.fixture_dir is not None:
        client = FixtureWorksClient(config.fixture_dir)
    else:
        client = LiveWorksClient(config.api_base)
    result = harvest(
        roster,
        topic_filter,
        client,
        api_base=config.api_base,
        max_attempts=config.max_attempts,
        workers=config.workers,
    )
    write_jsonl(config.p_works, [w.to_json() for w in result.works])
    totals = result.manifest["totals"]
    counts = {
        "records_in": totals["works_seen"],
        "records_out": totals["works_kept"],
        "records_skipped": totals["filtered_out"] + totals["duplicates_skipped"],
        "records_errored": totals["malformed_works"],
        "malformed_pages": totals["malformed_pages"],
    }
    inputs = [config.roster_path, config.topics_path]
    return inputs, [config.p_works], counts, result.manifest


def _run_extract(config: PipelineConfig):
    if config.corpus_dir is None:
        raise ValidationError("extract needs --corpus")
    works = [WorkRecord.from_json(r) for r in read_jsonl(config.p_works)]
    ordered_ids: list[str] = []
    for w in works:
        if w.work_id not in ordered_ids:
            ordered_ids.append(w.work_id)
    contexts: list[ContextUnit] = []
    docs_out = 0
    docs_rejected = 0
    docs_missing = 0
    sizes: dict[str, int] = {}
    for work_id in ordered_ids:
        path = Path(config.corpus_dir) / f"{work_id}.md"
        if not path.exists():
            docs_missing += 1
            continue
        doc = load_document(path, work_id=work_id)
        sizes[work_id] = doc.byte_size
        if not accept_document(doc, config.max_bytes):
            docs_rejected += 1
            continue
        contexts.extend(document_contexts(doc, dedup=config.dedup))
        docs_out += 1
    rows = [
        {
            "work_id": c.work_id,
            "index": c.index,
            "sentence": c.sentence,
            "window_text": c.window_text,
            "token_count": c.token_count,
        }
        for c in contexts
    ]
    write_jsonl(config.p_contexts, rows)
    counts = {
        "records_in": len(ordered_ids),
        "records_out": docs_out,
        "records_skipped": docs_rejected,
        "records_errored": docs_missing,
        "contexts_emitted": len(contexts),
    }
    detail = {"size_gate_bytes": config.max_bytes, "gated_on": "markdown file size", "byte_sizes": sizes}
    return [config.p_works], [config.p_contexts], counts, detail


def load_contexts(path) -> list[ContextUnit]:
    return [
        ContextUnit(
            work_id=r["work_id"],
            index=int(r["index"]),
            sentence=r["sentence"],
            window_text=r["window_text"],
            token_count=int(r["token_count"]),
        )
        for r in read_jsonl(path)
    ]


def _run_embed(config: PipelineConfig):
    contexts = load_contexts(config.p_contexts)
    provider = config.provider()
    matrix = embed_contexts(provider, contexts, batch_size=config.batch_size_embed)
    save_matrix(matrix, config.p_vectors)
    counts = {
        "records_in": len(contexts),
        "records_out": len(matrix),
        "records_skipped": 0,
        "records_errored": 0,
    }
    detail = {"provider": provider.model_name, "dim": matrix.dim}
    return [config.p_contexts], [config.p_vectors], counts, detail


def _artist_groups(config: PipelineConfig, contexts: list[ContextUnit]):
    works = [WorkRecord.from_json(r) for r in read_jsonl(config.p_works)]
    work_to_artists: dict[str, list[str]] = {}
    for w in works:
        work_to_artists.setdefault(w.work_id, []).append(w.artist_id)
    roster = load_roster(config.roster_path)
    artist_names = {a.artist_id: a.name for a in roster}
    return group_contexts_by_artist(contexts, work_to_artists, artist_names)


def _run_align(config: PipelineConfig):
    if config.paintings_path is None:
        raise ValidationError("align needs --paintings")
    if config.roster_path is None:
        raise ValidationError("align needs --roster for creator grouping")
    paintings = [PaintingRecord.from_json(r) for r in read_jsonl(config.paintings_path)]
    contexts = load_contexts(config.p_contexts)
    vectors = load_matrix(config.p_vectors)
    groups = _artist_groups(config, contexts)
    provider = config.provider()
    pairs, unmatched = align_all(paintings, groups, vectors, provider, config.min_similarity)
    write_jsonl(config.p_pairs, [p.to_json() for p in pairs])
    write_jsonl(config.p_unmatched, unmatched)
    counts = {
        "records_in": len(paintings),
        "records_out": len(pairs),
        "records_skipped": len(unmatched),
        "records_errored": 0,
    }
    detail = {"provider": provider.model_name, "min_similarity": config.min_similarity}
    inputs = [config.paintings_path, config.p_contexts, config.p_vectors, config.roster_path]
    return inputs, [config.p_pairs, config.p_unmatched], counts, detail


def _paintings_by_qid(config: PipelineConfig) -> dict[str, PaintingRecord]:
    rows = read_jsonl(config.paintings_path)
    return {r["qid"]: PaintingRecord.from_json(r) for r in rows}


def _seeded_projection(seed: int, d_out: int, d_in: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    return (rng.standard_normal((d_out, d_in)) / math.sqrt(d_in)).astype(np.float32)


def synthesize_features(config: PipelineConfig, pairs: list[AlignedPair]) -> None:
    """Desk-scale stand-in for the external model exporter.

    With the test provider, the painting's "image" feature is the embedding
    of its rendered metadata query and the text feature is the embedding of
    the pair label; both heads share one seeded projection matrix. Real runs
    replace these four files with exporter output.
    """
    if config.paintings_path is None:
        raise ValidationError("feature synthesis needs --paintings")
    provider = config.provider()
    if not isinstance(provider, HashEmbeddingProvider):
        raise ValidationError("feature synthesis requires the test provider")
    paintings = _paintings_by_qid(config)
    qids = [p.qid for p in pairs]
    img_rows = np.vstack(
        [provider.embed([render_query(paintings[q])]).data[0] for q in qids]
    )
    txt_rows = np.vstack([provider.embed([p.label_text]).data[0] for p in pairs])
    paths = config.p_features
    save_matrix(EmbeddingMatrix(qids, provider.dim, img_rows), paths["img"])
    save_matrix(EmbeddingMatrix(list(qids), provider.dim, txt_rows), paths["txt"])
    W = _seeded_projection(config.seed, config.embed_dim, provider.dim)
    proj_ids = [f"row{i}" for i in range(config.embed_dim)]
    save_matrix(EmbeddingMatrix(proj_ids, provider.dim, W), paths["img_proj"])
    save_matrix(EmbeddingMatrix(list(proj_ids), provider.dim, W), paths["txt_proj"])


def _config_digest(config: PipelineConfig) -> str:
    payload = json.dumps(
        {
            "epochs": config.epochs,
            "batch_size": config.batch_size,
            "learning_rate": config.learning_rate,
            "seed": config.seed,
            "rank": config.rank,
            "alpha": config.alpha,
            "dropout": config.dropout,
            "momentum": config.momentum,
            "logit_scale": config.logit_scale,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _run_train(config: PipelineConfig):
    pairs = [AlignedPair.from_json(r) for r in read_jsonl(config.p_pairs)]
    paths = config.p_features
    if not all(p.exists() for p in paths.values()):
        if config.provider_spec == "test":
            synthesize_features(config, pairs)
        else:
            missing = [str(p) for p in paths.values() if not p.exists()]
            raise ValidationError(f"feature files missing: {missing}")
    img = load_matrix(paths["img"])
    txt = load_matrix(paths["txt"])
    w_img = load_matrix(paths["img_proj"])
    w_txt = load_matrix(paths["txt_proj"])
    qids = [p.qid for p in pairs]
    features = PairFeatures(
        qids=qids,
        image=img.take(qids).data,
        text=txt.take(qids).data,
    )
    heads = (ProjectionHead(w_img.data, "visual"), ProjectionHead(w_txt.data, "text"))
    tc = TrainConfig(
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        seed=config.seed,
        logit_scale=config.logit_scale,
        momentum=config.momentum,
    )
    ad_img, ad_txt, history = train(
        features, heads, tc, rank=config.rank, alpha=config.alpha, dropout_p=config.dropout
    )
    digest = _config_digest(config)
    adapters = config.p_adapters
    save_adapter(ad_img, adapters / "visual.lora", "visual", digest)
    save_adapter(ad_txt, adapters / "text.lora", "text", digest)
    atomic_write_text(adapters / "history.json", json.dumps({"epoch_loss": history}) + "\n")
    counts = {
        "records_in": len(pairs),
        "records_out": len(features),
        "records_skipped": 0,
        "records_errored": 0,
    }
    detail = {"epoch_loss": history, "config_digest": digest}
    inputs = [config.p_pairs] + list(paths.values())
    outputs = [adapters / "visual.lora", adapters / "text.lora", adapters / "history.json"]
    if config.provider_spec == "test":
        outputs += list(paths.values())
        inputs = [config.p_pairs]
    return inputs, outputs, counts, detail


def _normalized(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows.astype(np.float64), axis=1, keepdims=True)
    return rows.astype(np.float64) / norms


def _score_queries(
    config: PipelineConfig,
    queries: list[EvalQuery],
    adapters: tuple[LoraAdapter, LoraAdapter] | None,
) -> EmbeddingMatrix:
    """Cosine scores of each query's painting against its candidate windows,
    under the frozen heads plus optional adapters. Rows keyed by qid."""
    provider = config.provider()
    paintings = _paintings_by_qid(config)
    window_by_id = {c.context_id: c.window_text for c in load_contexts(config.p_contexts)}
    paths = config.p_features
    w_img = ProjectionHead(load_matrix(paths["img_proj"]).data, "visual")
    w_txt = ProjectionHead(load_matrix(paths["txt_proj"]).data, "text")
    if adapters is None:
        eff_img, eff_txt = w_img.W, w_txt.W
    else:
        eff_img, eff_txt = merge(w_img, adapters[0]), merge(w_txt, adapters[1])
    n_cands = len(queries[0].candidate_ids)
    rows = np.zeros((len(queries), n_cands), dtype=np.float32)
    for qi, q in enumerate(queries):
        if len(q.candidate_ids) != n_cands:
            raise ValidationError("all queries must list the same number of candidates")
        if q.qid not in paintings:
            raise UnknownPainting(q.qid)
        x = provider.embed([render_query(paintings[q.qid])]).data[0]
        u = _normalized((eff_img @ x).reshape(1, -1))[0]
        texts = [window_by_id[cid] for cid in q.candidate_ids]
        feats = provider.embed(texts).data
        v = _normalized(feats @ eff_txt.T)
        rows[qi] = (v @ u).astype(np.float32)
    return EmbeddingMatrix([q.qid for q in queries], n_cands, rows)


def _curves_from_scores(queries: list[EvalQuery], scores: EmbeddingMatrix) -> PRCurve:
    curves = []
    for q in queries:
        row = scores.row(q.qid)
        if len(row) != len(q.candidate_ids):
            raise ValidationError(f"query {q.qid}: score vector length mismatch")
        q = EvalQuery(q.qid, q.candidate_ids, [float(s) for s in row], q.labels)
        q.validate()
        curves.append(envelope_on_grid(pr_points(q.scores, q.labels)))
    return macro_average(curves)


def _run_eval(config: PipelineConfig):
    if config.queries_path is None:
        raise ValidationError("eval needs --queries")
    queries = [EvalQuery.from_json(r) for r in read_jsonl(config.queries_path)]
    if not queries:
        raise ValidationError("queries file is empty")
    b_path = Path(config.baseline_scores) if config.baseline_scores else config.run_dir / "eval" / "baseline.emb"
    a_path = Path(config.adapted_scores) if config.adapted_scores else config.run_dir / "eval" / "adapted.emb"
    computed = False
    if not (b_path.exists() and a_path.exists()):
        if config.provider_spec != "test":
            raise ValidationError("score files missing; supply --baseline-scores/--adapted-scores")
        computed = True
        ad_img, _, _ = load_adapter(config.p_adapters / "visual.lora")
        ad_txt, _, _ = load_adapter(config.p_adapters / "text.lora")
        save_matrix(_score_queries(config, queries, None), b_path)
        save_matrix(_score_queries(config, queries, (ad_img, ad_txt)), a_path)
    baseline_curve = _curves_from_scores(queries, load_matrix(b_path))
    adapted_curve = _curves_from_scores(queries, load_matrix(a_path))
    emit_plot_data(baseline_curve, adapted_curve, config.p_out_csv)
    counts = {
        "records_in": len(queries),
        "records_out": len(queries),
        "records_skipped": 0,
        "records_errored": 0,
    }
    detail = {"scores_computed": computed}
    inputs = [config.queries_path] if computed else [config.queries_path, b_path, a_path]
    outputs = [config.p_out_csv] + ([b_path, a_path] if computed else [])
    return inputs, outputs, counts, detail


# --- qualitative retrieval ------------------------------------------------------


def retrieve_topk(
    config: PipelineConfig,
    qid: str,
    k: int,
    use_adapters: bool = False,
) -> list[dict]:
    """Top-k candidate windows for one painting under baseline or adapted
    scoring; k is clamped to the candidate count."""
    paintings = _paintings_by_qid(config)
    if qid not in paintings:
        raise UnknownPainting(qid)
    p = paintings[qid]
    contexts = load_contexts(config.p_contexts)
    groups = _artist_groups(config, contexts)
    candidates = groups.get(normalize_name(p.creator_name), [])
    if not candidates:
        raise ValidationError(f"creator of {qid} has no harvested contexts")
    provider = config.provider()
    paths = config.p_features
    w_img = ProjectionHead(load_matrix(paths["img_proj"]).data, "visual")
    w_txt = ProjectionHead(load_matrix(paths["txt_proj"]).data, "text")
    if use_adapters:
        ad_img, _, _ = load_adapter(config.p_adapters / "visual.lora")
        ad_txt, _, _ = load_adapter(config.p_adapters / "text.lora")
        eff_img, eff_txt = merge(w_img, ad_img), merge(w_txt, ad_txt)
    else:
        eff_img, eff_txt = w_img.W, w_txt.W
    x = provider.embed([render_query(p)]).data[0]
    u = _normalized((eff_img @ x).reshape(1, -1))[0]
    feats = provider.embed([c.window_text for c in candidates]).data
    v = _normalized(feats @ eff_txt.T)
    matrix = EmbeddingMatrix([c.context_id for c in candidates], v.shape[1], v.astype(np.float32))
    k = min(k, len(candidates))
    ranked = rank_candidates(u, matrix, k)
    window_by_id = {c.context_id: c.window_text for c in candidates}
    return [
        {"rank": i + 1, "context_id": cid, "score": score, "sentence": window_by_id[cid]}
        for i, (cid, score) in enumerate(ranked)
    ]


def make_eval_queries_from_pairs(
    config: PipelineConfig, n_candidates: int = 10
) -> list[EvalQuery]:
    """Deterministic eval set for the fixture pipeline: each aligned painting
    gets its creator's first candidates with the aligned window as the
    positive. Real evaluations replace this with human-labeled queries."""
    pairs = [AlignedPair.from_json(r) for r in read_jsonl(config.p_pairs)]
    paintings = _paintings_by_qid(config)
    contexts = load_contexts(config.p_contexts)
    groups = _artist_groups(config, contexts)
    queries = []
    for pair in pairs:
        p = paintings[pair.qid]
        ids = [c.context_id for c in groups[normalize_name(p.creator_name)]]
        if len(ids) < n_candidates:
            raise ValidationError(f"creator of {pair.qid} has fewer than {n_candidates} contexts")
        short = ids[:n_candidates]
        if pair.context_id not in short:
            short = short[: n_candidates - 1] + [pair.context_id]
        labels = [1 if cid == pair.context_id else 0 for cid in short]
        queries.append(EvalQuery(qid=pair.qid, candidate_ids=short, scores=[], labels=labels))
    return queries
