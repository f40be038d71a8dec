"""Queries an OpenAlex-compatible works API per artist and keeps open-access,
English, topic-relevant PDFs.

Pagination early-stops once a relevance-sorted page falls to the threshold;
unsorted pages fall back to exhaustive pagination for that artist.
"""

from __future__ import annotations

import logging
import time
import urllib.parse
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .errors import MalformedResponse, NetworkError, RateLimited

log = logging.getLogger(__name__)

DEFAULT_API_BASE = "https://api.openalex.org"
DEFAULT_RHO = 1.0
DEFAULT_MAX_ATTEMPTS = 5
BACKOFF_BASE_SECONDS = 0.5
PER_PAGE = 25
MAX_PAGES_PER_ARTIST = 1000  # safety cap when pages keep coming back malformed


@dataclass
class ArtistRecord:
    artist_id: str
    name: str

    def __post_init__(self):
        if not self.name:
            raise ValueError("artist name must be non-empty")


@dataclass
class WorkRecord:
    work_id: str
    title: str
    tags: set[str]
    relevance: float
    language: str
    oa_pdf_url: str | None
    artist_id: str
    byte_size: int | None = None

    def to_json(self) -> dict:
        return {
            "work_id": self.work_id,
            "title": self.title,
            "tags": sorted(self.tags),
            "relevance": self.relevance,
            "language": self.language,
            "oa_pdf_url": self.oa_pdf_url,
            "artist_id": self.artist_id,
            "byte_size": self.byte_size,
        }

    @staticmethod
    def from_json(d: dict) -> "WorkRecord":
        return WorkRecord(
            work_id=d["work_id"],
            title=d["title"],
            tags=set(d["tags"]),
            relevance=float(d["relevance"]),
            language=d["language"],
            oa_pdf_url=d.get("oa_pdf_url"),
            artist_id=d["artist_id"],
            byte_size=d.get("byte_size"),
        )


@dataclass
class TopicFilter:
    art_topics: set[str]
    rho: float = DEFAULT_RHO

    def __post_init__(self):
        if not self.art_topics:
            raise ValueError("art_topics must be non-empty")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")


@dataclass
class QuerySpec:
    """A fully-formed works request: URL plus the parameters that built it."""

    url: str
    params: dict[str, str]
    artist_id: str
    page: int


def build_artist_query(artist: ArtistRecord, page: int, api_base: str = DEFAULT_API_BASE) -> QuerySpec:
    """Deterministic works query: same inputs give a byte-identical URL."""
    if page < 1:
        raise ValueError("page must be >= 1")
    params = {
        "search": artist.name,
        "filter": "language:en,is_oa:true,has_fulltext:true",
        "sort": "relevance_score:desc",
        "per-page": str(PER_PAGE),
        "page": str(page),
    }
    query = urllib.parse.urlencode(params, quote_via=urllib.parse.quote)
    return QuerySpec(
        url=f"{api_base.rstrip('/')}/works?{query}",
        params=params,
        artist_id=artist.artist_id,
        page=page,
    )


def filter_work(work: WorkRecord, topic_filter: TopicFilter) -> bool:
    """Pure conjunction: topical, strictly above the relevance threshold,
    English, and carrying an open-access PDF link."""
    return (
        bool(work.tags & topic_filter.art_topics)
        and work.relevance > topic_filter.rho
        and work.language.lower() == "en"
        and bool(work.oa_pdf_url)
    )


def parse_work(raw: dict, artist_id: str) -> WorkRecord:
    """Map one raw API entry onto a WorkRecord; raises MalformedResponse."""
    try:
        topics = raw.get("topics") or []
        oa = raw.get("best_oa_location") or {}
        return WorkRecord(
            work_id=str(raw["id"]),
            title=str(raw.get("display_name", "")),
            tags={str(t["id"]) for t in topics},
            relevance=float(raw["relevance_score"]),
            language=str(raw.get("language", "")),
            oa_pdf_url=oa.get("pdf_url") or None,
            artist_id=artist_id,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedResponse(f"work entry missing fields: {exc}") from exc


# --- API clients ------------------------------------------------------------

class WorksApiClient(ABC):
    @abstractmethod
    def fetch_page(self, query: QuerySpec) -> dict:
        """One decoded JSON page: {"results": [...], "meta": {...}}."""


class LiveWorksClient(WorksApiClient):
    """HTTP client for a real works API."""

    def __init__(self, api_base: str = DEFAULT_API_BASE, timeout: float = 30.0, session=None):
        import requests

        self.api_base = api_base
        self.timeout = timeout
        self.session = session or requests.Session()

    def fetch_page(self, query: QuerySpec) -> dict:
        import requests

        try:
            resp = self.session.get(query.url, timeout=self.timeout)
        except requests.RequestException as exc:
            raise NetworkError(str(exc)) from exc
        if resp.status_code == 429:
            raise RateLimited(float(resp.headers.get("Retry-After", "60")))
        if resp.status_code >= 500:
            raise NetworkError(f"server error {resp.status_code}")
        if resp.status_code != 200:
            raise MalformedResponse(f"unexpected status {resp.status_code}")
        try:
            return resp.json()
        except ValueError as exc:
            raise MalformedResponse("response body is not JSON") from exc


class FixtureWorksClient(WorksApiClient):
    """Serves canned pages from <root>/<artist_id>/page<N>.json.

    A missing page file means the cursor is exhausted.
    """

    def __init__(self, root):
        self.root = Path(root)

    def fetch_page(self, query: QuerySpec) -> dict:
        import json

        path = self.root / query.artist_id / f"page{query.page}.json"
        if not path.exists():
            return {"results": [], "meta": {"exhausted": True}}
        try:
            return json.loads(path.read_text("utf-8"))
        except ValueError as exc:
            raise MalformedResponse(f"fixture page {path.name} is not JSON") from exc


# --- harvest loop -----------------------------------------------------------

@dataclass
class HarvestResult:
    works: list[WorkRecord]  # grouped: roster order, then page order
    manifest: dict


def _fetch_with_retry(client, query, max_attempts, sleep):
    attempt = 0
    while True:
        attempt += 1
        try:
            return client.fetch_page(query)
        except RateLimited as exc:
            if attempt >= max_attempts:
                raise
            sleep(exc.retry_after)
        except NetworkError:
            if attempt >= max_attempts:
                raise
            sleep(BACKOFF_BASE_SECONDS * 2 ** (attempt - 1))


def _harvest_artist(artist, topic_filter, client, api_base, max_attempts, sleep):
    kept: list[WorkRecord] = []
    seen_ids: set[str] = set()
    stats = {
        "pages_fetched": 0,
        "malformed_pages": 0,
        "malformed_works": 0,
        "works_seen": 0,
        "works_kept": 0,
        "filtered_out": 0,
        "duplicates_skipped": 0,
        "early_stopped": False,
        "unsorted_pages": 0,
    }
    page = 1
    while page <= MAX_PAGES_PER_ARTIST:
        query = build_artist_query(artist, page, api_base)
        try:
            data = _fetch_with_retry(client, query, max_attempts, sleep)
        except MalformedResponse:
            stats["malformed_pages"] += 1
            page += 1
            continue
        results = data.get("results", [])
        if not isinstance(results, list):
            stats["malformed_pages"] += 1
            page += 1
            continue
        if not results:
            break  # exhausted
        stats["pages_fetched"] += 1
        relevances: list[float] = []
        for raw in results:
            stats["works_seen"] += 1
            try:
                work = parse_work(raw, artist.artist_id)
            except MalformedResponse:
                stats["malformed_works"] += 1
                continue
            relevances.append(work.relevance)
            if work.work_id in seen_ids:
                stats["duplicates_skipped"] += 1
                continue
            seen_ids.add(work.work_id)
            if filter_work(work, topic_filter):
                kept.append(work)
            else:
                stats["filtered_out"] += 1
        sorted_desc = all(a >= b for a, b in zip(relevances, relevances[1:]))
        if not sorted_desc:
            stats["unsorted_pages"] += 1  # fall back to exhaustive pagination
        elif relevances and relevances[-1] <= topic_filter.rho:
            stats["early_stopped"] = True
            break
        page += 1
    stats["works_kept"] = len(kept)
    return kept, stats


def harvest(
    roster: list[ArtistRecord],
    topic_filter: TopicFilter,
    client: WorksApiClient,
    *,
    api_base: str = DEFAULT_API_BASE,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    sleep=time.sleep,
    workers: int = 1,
) -> HarvestResult:
    """Harvest all roster artists; records are grouped by artist in roster
    order and every emitted record satisfies filter_work."""
    started = datetime.now(timezone.utc).isoformat()
    per_artist: dict[str, tuple[list[WorkRecord], dict]] = {}

    if workers > 1 and len(roster) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {
                artist.artist_id: pool.submit(
                    _harvest_artist, artist, topic_filter, client, api_base, max_attempts, sleep
                )
                for artist in roster
            }
            for aid, fut in futures.items():
                per_artist[aid] = fut.result()
    else:
        for artist in roster:
            per_artist[artist.artist_id] = _harvest_artist(
                artist, topic_filter, client, api_base, max_attempts, sleep
            )

    works: list[WorkRecord] = []
    artists_manifest: dict[str, dict] = {}
    by_work: dict[str, list[str]] = {}
    for artist in roster:  # results assemble in roster order regardless of completion order
        kept, stats = per_artist[artist.artist_id]
        works.extend(kept)
        artists_manifest[artist.artist_id] = dict(stats, name=artist.name)
        for w in kept:
            by_work.setdefault(w.work_id, []).append(artist.artist_id)
    cross = {wid: aids for wid, aids in by_work.items() if len(aids) > 1}

    manifest = {
        "stage": "harvest",
        "rho": topic_filter.rho,
        "artists": artists_manifest,
        "totals": {
            "artists": len(roster),
            "works_seen": sum(s["works_seen"] for _, s in per_artist.values()),
            "works_kept": len(works),
            "filtered_out": sum(s["filtered_out"] for _, s in per_artist.values()),
            "duplicates_skipped": sum(s["duplicates_skipped"] for _, s in per_artist.values()),
            "malformed_pages": sum(s["malformed_pages"] for _, s in per_artist.values()),
            "malformed_works": sum(s["malformed_works"] for _, s in per_artist.values()),
        },
        "cross_artist_duplicates": cross,
        "started_at": started,
        "finished_at": datetime.now(timezone.utc).isoformat(),
    }
    return HarvestResult(works=works, manifest=manifest)


# --- roster / topics loading -------------------------------------------------

def load_roster(path) -> list[ArtistRecord]:
    from .io_utils import read_jsonl

    rows = read_jsonl(path)
    roster = [ArtistRecord(artist_id=r["artist_id"], name=r["name"]) for r in rows]
    ids = [a.artist_id for a in roster]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate artist_id in roster")
    return roster


def load_topic_filter(path, rho: float | None = None) -> TopicFilter:
    import json

    data = json.loads(Path(path).read_text("utf-8"))
    return TopicFilter(
        art_topics=set(data["art_topics"]),
        rho=float(data.get("rho", DEFAULT_RHO)) if rho is None else rho,
    )
