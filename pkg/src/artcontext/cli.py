"""Command-line entry point: one verb per pipeline stage plus qualitative
retrieval. Exit codes: 0 success, 1 validation error, 2 stage failure,
3 I/O error."""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from pathlib import Path

from . import EMB_FORMAT_VERSION, LORA_FORMAT_VERSION, __version__
from .errors import ArtContextError, StageFailure, StaleInput
from .pipeline import PipelineConfig, retrieve_topk, run_stage

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_STAGE = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation errors
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--run-dir", default=None, help="run directory for artifacts and manifests")
    sub.add_argument("--force", action="store_true", help="run even if upstream manifests are stale")


def build_parser() -> _Parser:
    parser = _Parser(prog="artcontext", description=__doc__)
    parser.add_argument(
        "--version",
        action="version",
        version=f"artcontext {__version__} (emb format {EMB_FORMAT_VERSION}, lora format {LORA_FORMAT_VERSION})",
    )
    parser.add_argument("--config", default=None, help="INI config file; CLI flags win")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("harvest", help="query the works API per artist and filter")
    p.add_argument("--roster", required=True)
    p.add_argument("--topics", required=True)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--out", default=None, help="output directory (works.jsonl lands here)")
    p.add_argument("--fixture", default=None, help="directory of canned JSON pages")
    p.add_argument("--api-base", default=None)
    p.add_argument("--max-attempts", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("extract", help="markdown corpus -> context windows")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default=None, help="contexts JSONL path")
    p.add_argument("--works", default=None, help="harvest works JSONL (defaults to run dir)")
    p.add_argument("--max-bytes", type=int, default=None)
    p.add_argument("--dedup", action="store_true", default=None)
    _add_common(p)

    p = sub.add_parser("embed", help="embed context windows")
    p.add_argument("--contexts", default=None)
    p.add_argument("--provider", default=None, help="test | file:<path>")
    p.add_argument("--dim", type=int, default=None, help="test provider dimension")
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--out", default=None, help="output .emb path")
    _add_common(p)

    p = sub.add_parser("align", help="match each painting to its best context")
    p.add_argument("--paintings", required=True)
    p.add_argument("--contexts", default=None)
    p.add_argument("--vectors", default=None)
    p.add_argument("--provider", default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--out", default=None, help="pairs output directory")
    p.add_argument("--min-sim", type=float, default=None)
    p.add_argument("--roster", default=None)
    p.add_argument("--works", default=None)
    _add_common(p)

    p = sub.add_parser("train", help="train low-rank adapters on aligned pairs")
    p.add_argument("--pairs", default=None, help="pairs directory")
    p.add_argument("--img-feats", default=None)
    p.add_argument("--txt-feats", default=None)
    p.add_argument("--img-proj", default=None)
    p.add_argument("--txt-proj", default=None)
    p.add_argument("--paintings", default=None, help="needed when synthesizing test features")
    p.add_argument("--provider", default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--momentum", action="store_true", default=None)
    p.add_argument("--out", default=None, help="adapters output directory")
    _add_common(p)

    p = sub.add_parser("eval", help="macro-averaged PR curves, baseline vs adapted")
    p.add_argument("--queries", required=True)
    p.add_argument("--baseline-scores", default=None)
    p.add_argument("--adapted-scores", default=None)
    p.add_argument("--out", default=None, help="PR CSV path")
    p.add_argument("--provider", default=None, help="test provider recomputes missing scores")
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--contexts", default=None)
    p.add_argument("--paintings", default=None)
    p.add_argument("--img-proj", default=None)
    p.add_argument("--txt-proj", default=None)
    p.add_argument("--adapters", default=None)
    _add_common(p)

    p = sub.add_parser("retrieve", help="top-k sentences for one painting")
    p.add_argument("--qid", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--adapters", default=None, help="adapter dir; omit for the frozen baseline")
    p.add_argument("--baseline", action="store_true", help="ignore adapters even if present")
    p.add_argument("--paintings", required=True)
    p.add_argument("--contexts", default=None)
    p.add_argument("--provider", default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--img-proj", default=None)
    p.add_argument("--txt-proj", default=None)
    p.add_argument("--roster", default=None)
    p.add_argument("--works", default=None)
    p.add_argument("--out", default=None, help="also write the listing as JSON")
    _add_common(p)
    return parser


class _Settings:
    """Layered lookup: CLI flag, then INI section key, then default."""

    def __init__(self, args: argparse.Namespace, ini: configparser.ConfigParser | None):
        self.args = args
        self.ini = ini

    def get(self, flag: str, section: str, key: str, default=None, cast=str):
        value = getattr(self.args, flag, None)
        if value is not None:
            return value
        if self.ini is not None and self.ini.has_option(section, key):
            raw = self.ini.get(section, key)
            if cast is bool:
                return raw.strip().lower() in ("1", "true", "yes", "on")
            return cast(raw)
        return default


def _build_config(args: argparse.Namespace) -> PipelineConfig:
    ini = None
    if args.config:
        ini = configparser.ConfigParser()
        with open(args.config, "r", encoding="utf-8") as fh:
            ini.read_file(fh)
    s = _Settings(args, ini)
    run_dir = Path(getattr(args, "run_dir", None) or ".")

    api_base = s.get("api_base", "api", "base", None)
    if api_base is None:
        api_base = os.environ.get("ARTCONTEXT_API_BASE", "https://api.openalex.org")

    out = getattr(args, "out", None)
    verb = args.verb
    cfg = PipelineConfig(
        run_dir=run_dir,
        api_base=api_base,
        fixture_dir=getattr(args, "fixture", None),
        roster_path=getattr(args, "roster", None),
        topics_path=getattr(args, "topics", None),
        rho=s.get("rho", "harvest", "rho", None, float),
        max_attempts=s.get("max_attempts", "harvest", "max_attempts", 5, int),
        workers=s.get("workers", "harvest", "workers", 1, int),
        corpus_dir=getattr(args, "corpus", None),
        works_path=getattr(args, "works", None),
        max_bytes=s.get("max_bytes", "extract", "max_bytes", 10 * 1024 * 1024, int),
        dedup=bool(s.get("dedup", "extract", "dedup", False, bool)),
        contexts_path=getattr(args, "contexts", None),
        provider_spec=s.get("provider", "provider", "kind", "test"),
        provider_dim=s.get("dim", "provider", "dim", 32, int),
        batch_size_embed=s.get("batch", "provider", "batch", 64, int) if verb == "embed" else 64,
        vectors_path=getattr(args, "vectors", None),
        paintings_path=getattr(args, "paintings", None),
        min_similarity=getattr(args, "min_sim", None),
        pairs_dir=getattr(args, "pairs", None),
        img_feats=getattr(args, "img_feats", None),
        txt_feats=getattr(args, "txt_feats", None),
        img_proj=getattr(args, "img_proj", None),
        txt_proj=getattr(args, "txt_proj", None),
        adapters_dir=getattr(args, "adapters", None),
        embed_dim=s.get("embed_dim", "train", "embed_dim", 16, int),
        epochs=s.get("epochs", "train", "epochs", 5, int),
        batch_size=s.get("batch", "train", "batch_size", 2, int) if verb == "train" else 2,
        learning_rate=s.get("lr", "train", "learning_rate", 0.05, float),
        seed=s.get("seed", "train", "seed", 7, int),
        rank=s.get("rank", "train", "rank", 16, int),
        alpha=s.get("alpha", "train", "alpha", 32.0, float),
        dropout=s.get("dropout", "train", "dropout", 0.05, float),
        momentum=bool(s.get("momentum", "train", "momentum", False, bool)),
        queries_path=getattr(args, "queries", None),
        baseline_scores=getattr(args, "baseline_scores", None),
        adapted_scores=getattr(args, "adapted_scores", None),
    )

    # per-verb --out targets
    if out is not None:
        if verb == "harvest":
            cfg.works_path = Path(out) / "works.jsonl"
        elif verb == "extract":
            cfg.contexts_path = out
        elif verb == "embed":
            cfg.vectors_path = out
        elif verb == "align":
            cfg.pairs_dir = out
        elif verb == "train":
            cfg.adapters_dir = out
        elif verb == "eval":
            cfg.out_csv = out
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _build_config(args)
        if args.verb == "retrieve":
            use_adapters = bool(args.adapters) and not args.baseline
            rows = retrieve_topk(cfg, args.qid, args.k, use_adapters=use_adapters)
            for row in rows:
                print(f"{row['rank']:2d}. [{row['score']: .4f}] {row['context_id']}  {row['sentence']}")
            if args.out:
                Path(args.out).parent.mkdir(parents=True, exist_ok=True)
                Path(args.out).write_text(
                    json.dumps({"qid": args.qid, "results": rows}, ensure_ascii=False, indent=2) + "\n",
                    encoding="utf-8",
                )
            return EXIT_OK
        manifest = run_stage(args.verb, cfg, force=args.force)
        counts = manifest.counts
        print(
            f"{args.verb}: in={counts.get('records_in')} out={counts.get('records_out')} "
            f"skipped={counts.get('records_skipped')} errored={counts.get('records_errored')} "
            f"({manifest.wall_clock_s:.2f}s)"
        )
        return EXIT_OK
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except StaleInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArtContextError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
