"""Aligns paintings to their best creator-scoped context window and builds
training labels from painting metadata plus the aligned sentence."""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass

from .embeddings import EmbeddingMatrix, FileVectorSource, argmax_similarity
from .errors import NoContexts
from .extraction import ContextUnit

LABEL_SEPARATOR = " — "  # em dash between metadata prefix and sentence


@dataclass
class PaintingRecord:
    qid: str
    title: str
    creator_name: str
    creator_qid: str
    year: int | None
    depicts: list[str]
    movement: str | None
    link_count: int
    image_ref: str

    def __post_init__(self):
        if not self.title or not self.creator_name:
            raise ValueError(f"painting {self.qid}: title and creator_name required")
        if self.link_count < 0:
            raise ValueError(f"painting {self.qid}: link_count must be >= 0")

    @staticmethod
    def from_json(d: dict) -> "PaintingRecord":
        return PaintingRecord(
            qid=d["qid"],
            title=d["title"],
            creator_name=d["creator_name"],
            creator_qid=d.get("creator_qid", ""),
            year=d.get("year"),
            depicts=list(d.get("depicts", [])),
            movement=d.get("movement"),
            link_count=int(d.get("link_count", 0)),
            image_ref=d.get("image_ref", ""),
        )

    def to_json(self) -> dict:
        return {
            "qid": self.qid,
            "title": self.title,
            "creator_name": self.creator_name,
            "creator_qid": self.creator_qid,
            "year": self.year,
            "depicts": self.depicts,
            "movement": self.movement,
            "link_count": self.link_count,
            "image_ref": self.image_ref,
        }


@dataclass
class AlignedPair:
    qid: str
    context_id: str
    sentence: str  # the aligned window text
    similarity: float
    label_text: str
    image_ref: str

    def to_json(self) -> dict:
        return {
            "qid": self.qid,
            "context_id": self.context_id,
            "sentence": self.sentence,
            "similarity": self.similarity,
            "label_text": self.label_text,
            "image_ref": self.image_ref,
        }

    @staticmethod
    def from_json(d: dict) -> "AlignedPair":
        return AlignedPair(
            qid=d["qid"],
            context_id=d["context_id"],
            sentence=d["sentence"],
            similarity=float(d["similarity"]),
            label_text=d["label_text"],
            image_ref=d.get("image_ref", ""),
        )


def render_query(p: PaintingRecord) -> str:
    """Natural-language query from painting metadata.

    Template: "[Title] is a [Year] painting by [Creator] depicting [Depicts]".
    A missing year drops the year token; empty depicts drops the clause.
    """
    year = f" {p.year}" if p.year is not None else ""
    text = f"{p.title} is a{year} painting by {p.creator_name}"
    if p.depicts:
        text += " depicting " + ", ".join(p.depicts)
    return text


def build_label(p: PaintingRecord, sentence: str) -> str:
    """Metadata prefix plus the aligned sentence, em-dash separated.

    No truncation happens here; token-limit truncation belongs to the text
    encoder's tokenizer downstream.
    """
    prefix = render_query(p)
    if not sentence:
        return prefix
    return f"{prefix}{LABEL_SEPARATOR}{sentence}"


def normalize_name(name: str) -> str:
    """NFC-normalized, case-folded key for exact creator/roster matching."""
    return unicodedata.normalize("NFC", name).casefold()


def query_vector(provider, qid: str, text: str):
    """Query embedding: text encoded by a provider, or a pre-exported row
    keyed by the painting qid when reading from a vector file."""
    if isinstance(provider, FileVectorSource):
        return provider.rows_for([qid]).data[0]
    return provider.embed([text]).data[0]


def align_painting(
    p: PaintingRecord,
    artist_contexts: list[ContextUnit],
    vectors: EmbeddingMatrix,
    provider,
) -> AlignedPair:
    """Best context for one painting among its creator's candidates.

    artist_contexts must already be creator-scoped; vectors holds rows for
    (at least) those context ids. Ties break to the earliest candidate.
    """
    if not artist_contexts:
        raise NoContexts(f"no contexts for creator of {p.qid}")
    qvec = query_vector(provider, p.qid, render_query(p))
    ids = [c.context_id for c in artist_contexts]
    candidates = vectors.take(ids)
    idx, score = argmax_similarity(qvec, candidates)
    chosen = artist_contexts[idx]
    return AlignedPair(
        qid=p.qid,
        context_id=chosen.context_id,
        sentence=chosen.window_text,
        similarity=score,
        label_text=build_label(p, chosen.window_text),
        image_ref=p.image_ref,
    )


def group_contexts_by_artist(
    contexts: list[ContextUnit],
    work_to_artists: dict[str, list[str]],
    artist_names: dict[str, str],
) -> dict[str, list[ContextUnit]]:
    """Creator-name key (normalized) -> that artist's contexts, in input order.

    A work listed under several artists contributes its contexts to every
    owning group; context ids stay globally unique.
    """
    groups: dict[str, list[ContextUnit]] = {}
    for unit in contexts:
        for artist_id in work_to_artists.get(unit.work_id, []):
            name = artist_names.get(artist_id)
            if name is None:
                continue
            groups.setdefault(normalize_name(name), []).append(unit)
    return groups


def align_all(
    paintings: list[PaintingRecord],
    groups: dict[str, list[ContextUnit]],
    vectors: EmbeddingMatrix,
    provider,
    min_similarity: float | None = None,
) -> tuple[list[AlignedPair], list[dict]]:
    """Align every painting; returns (pairs sorted by qid, unmatched rows).

    Unmatched rows carry the qid and an explicit exclusion reason so the
    loss taxonomy is auditable.
    """
    pairs: list[AlignedPair] = []
    unmatched: list[dict] = []
    for p in paintings:
        contexts = groups.get(normalize_name(p.creator_name), [])
        if not contexts:
            unmatched.append({"qid": p.qid, "reason": "no_contexts_for_creator"})
            continue
        pair = align_painting(p, contexts, vectors, provider)
        if min_similarity is not None and pair.similarity < min_similarity:
            unmatched.append(
                {
                    "qid": p.qid,
                    "reason": "below_min_similarity",
                    "similarity": pair.similarity,
                }
            )
            continue
        pairs.append(pair)
    pairs.sort(key=lambda pr: pr.qid)
    return pairs, unmatched
