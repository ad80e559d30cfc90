"""Command-line entry point: enroll, query, eval, split, inspect.

Structured JSON goes to stdout, human logs to stderr.  Exit codes: 0 success,
1 runtime error, 2 domain error (unknown target concept), 64 usage error.
Settings resolve flags > environment > config file (``r2p.toml``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .db import ConceptDatabase
from .encoders import EncoderBackendConfig, build_encoder
from .enrollment import enroll_concept, enroll_with_privileged_attributes
from .errors import PerceptError, UnknownTargetConcept
from .evalkit import build_split, run_eval
from .inference import (
    Gateways,
    PipelineConfig,
    QueryTask,
    answer_query,
    load_reference_bytes,
)
from .vlm import VlmBackendConfig, build_vlm

log = logging.getLogger("percept.cli")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_DOMAIN = 2
EXIT_USAGE = 64

ENV_VLM_BASE_URL = "R2P_VLM_BASE_URL"
ENV_VLM_API_KEY_ENV = "R2P_VLM_API_KEY_ENV"
ENV_EMBED_BASE_URL = "R2P_EMBED_BASE_URL"
ENV_EMBED_API_KEY_ENV = "R2P_EMBED_API_KEY_ENV"

DEFAULT_MOCK_DIM = 16


class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # route argparse failures to exit 64
        raise CliUsageError(message)


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _emit_error(exc: Exception) -> None:
    code = getattr(exc, "code", "ERROR")
    _emit({"error": {"code": code, "message": str(exc)}})


def _parse_clock(value: Optional[str]):
    if value is None:
        return lambda: datetime.now(timezone.utc), False
    try:
        moment = datetime.fromtimestamp(int(value), tz=timezone.utc)
    except ValueError:
        moment = datetime.fromisoformat(value)
        if moment.tzinfo is None:
            moment = moment.replace(tzinfo=timezone.utc)
    return (lambda: moment), True


def _deterministic_concept_id(name: str) -> str:
    return hashlib.sha256(name.strip().casefold().encode("utf-8")).hexdigest()[:32]


def _load_config_file(path: Optional[str]) -> dict:
    if path is None:
        default = Path("r2p.toml")
        if not default.exists():
            return {}
        path = str(default)
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _resolve(*values):
    for value in values:
        if value is not None:
            return value
    return None


def _build_backends(args, file_config: dict, db: Optional[ConceptDatabase]):
    encoder_section = file_config.get("encoder", {})
    vlm_section = file_config.get("vlm", {})

    backend = _resolve(args.backend, encoder_section.get("backend"), "mock")
    db_dim = db.embedding_dim if db is not None else None
    dim = _resolve(
        args.embedding_dim, encoder_section.get("embedding_dim"), db_dim,
        DEFAULT_MOCK_DIM,
    )

    encoder_config = EncoderBackendConfig(
        kind=backend,
        model_id=str(encoder_section.get("model_id", f"{backend}-encoder")),
        embedding_dim=int(dim),
        base_url=_resolve(
            os.environ.get(ENV_EMBED_BASE_URL), encoder_section.get("base_url")
        ),
        api_key_env=_resolve(
            os.environ.get(ENV_EMBED_API_KEY_ENV), encoder_section.get("api_key_env")
        ),
        timeout=float(encoder_section.get("timeout_s", 30.0)),
        max_retries=int(encoder_section.get("max_retries", 3)),
        seed=int(_resolve(args.seed, encoder_section.get("seed"), 0)),
        fixture_path=_resolve(args.encoder_fixture, encoder_section.get("fixture")),
        cross_modal=bool(encoder_section.get("cross_modal", True)),
    )
    vlm_config = VlmBackendConfig(
        kind=_resolve(args.backend, vlm_section.get("backend"), "mock"),
        model_id=str(vlm_section.get("model_id", "mock-vlm")),
        base_url=_resolve(
            os.environ.get(ENV_VLM_BASE_URL), vlm_section.get("base_url")
        ),
        api_key_env=_resolve(
            os.environ.get(ENV_VLM_API_KEY_ENV), vlm_section.get("api_key_env")
        ),
        timeout=float(vlm_section.get("timeout_s", 60.0)),
        max_retries=int(vlm_section.get("max_retries", 3)),
        logit_ratio_literal=bool(vlm_section.get("logit_ratio_literal", False)),
        script_path=_resolve(args.vlm_script, vlm_section.get("script")),
    )
    return build_encoder(encoder_config), build_vlm(vlm_config)


def _pipeline_config(args, file_config: dict) -> PipelineConfig:
    section = dict(file_config.get("pipeline", {}))
    if getattr(args, "k", None) is not None:
        section["k"] = args.k
    if getattr(args, "retrieval_mode", None) is not None:
        section["retrieval_mode"] = {"kind": args.retrieval_mode}
        if args.retrieval_mode == "two_step":
            section["retrieval_mode"]["rerank_pool"] = args.rerank_pool or max(
                10, section.get("k", 3)
            )
    elif "retrieval_mode" in section and isinstance(section["retrieval_mode"], str):
        section["retrieval_mode"] = {"kind": section["retrieval_mode"]}
        if section["retrieval_mode"]["kind"] == "two_step":
            section["retrieval_mode"]["rerank_pool"] = section.get("rerank_pool")
    if getattr(args, "verification", None) is not None:
        section["verification"] = args.verification
    if getattr(args, "recognition_mode", None) is not None:
        section["recognition_mode"] = args.recognition_mode
    if getattr(args, "pairwise_threshold", None) is not None:
        section["pairwise_threshold"] = args.pairwise_threshold
    if getattr(args, "no_cot", False):
        section["enable_cot"] = False
    if getattr(args, "no_fingerprints", False):
        section["enable_fingerprints"] = False
    if getattr(args, "no_pairwise", False):
        section["enable_pairwise"] = False
    section.pop("rerank_pool", None)
    return PipelineConfig.from_dict(section)


def _gateways(args, file_config, db) -> Gateways:
    encoder, vlm = _build_backends(args, file_config, db)
    base = db.base_dir if db is not None else None
    return Gateways(
        vlm=vlm,
        encoder=encoder,
        load_reference=lambda ref: load_reference_bytes(ref, base),
    )


# --- subcommands ---------------------------------------------------------------

def cmd_enroll(args) -> int:
    file_config = _load_config_file(args.config)
    clock, fixed = _parse_clock(args.fixed_clock)
    db_path = Path(args.db)
    db = ConceptDatabase.load(db_path) if (db_path / "manifest.json").exists() \
        else ConceptDatabase()
    if db.base_dir is None:
        db.base_dir = db_path
    encoder, vlm = _build_backends(args, file_config, db)

    image_bytes = Path(args.image).read_bytes()
    concept_id = _deterministic_concept_id(args.name) if fixed else None
    kwargs = dict(
        media_type=args.media_type,
        image_path=args.image,
        concept_id=concept_id,
        clock=clock,
    )
    if args.attributes:
        attributes = [a.strip() for a in args.attributes.split(",") if a.strip()]
        record = enroll_with_privileged_attributes(
            image_bytes, args.name, args.category, attributes,
            args.description or "", db, encoder, **kwargs,
        )
    else:
        record = enroll_concept(
            image_bytes, args.name, args.category, db, vlm, encoder, **kwargs,
        )
    db.save(db_path)
    _emit({"enrolled": record.to_json_dict()})
    return EXIT_OK


def cmd_query(args) -> int:
    if args.task == "recognize" and not args.target:
        raise CliUsageError("--target is required for --task recognize")
    if args.task == "vqa" and not args.question:
        raise CliUsageError("--question is required for --task vqa")

    file_config = _load_config_file(args.config)
    db = ConceptDatabase.load(args.db)
    gateways = _gateways(args, file_config, db)
    config = _pipeline_config(args, file_config)

    if args.task == "recognize":
        task = QueryTask.recognition(args.target)
    elif args.task == "caption":
        task = QueryTask.caption()
    else:
        choices = [c.strip() for c in (args.choices or "").split(",") if c.strip()]
        task = QueryTask.vqa(args.question, choices)

    image_bytes = Path(args.image).read_bytes()
    executor = ThreadPoolExecutor(args.jobs) if args.jobs and args.jobs > 1 else None
    try:
        answer = answer_query(
            image_bytes, task, db, gateways, config,
            media_type=args.media_type, executor=executor,
        )
    finally:
        if executor is not None:
            executor.shutdown()

    if args.trace_out:
        Path(args.trace_out).write_text(
            json.dumps(answer.trace.to_json_dict(), sort_keys=True) + "\n",
            encoding="utf-8",
        )
    output = {
        "task": args.task,
        "concept": answer.concept_name,
        "concept_id": answer.concept_id,
        "vlm_calls": answer.trace.vlm_calls,
    }
    if args.task == "recognize":
        output["target"] = args.target
        output["answer"] = answer.text
    else:
        output["text"] = answer.text
    _emit(output)
    return EXIT_OK


def cmd_eval(args) -> int:
    file_config = _load_config_file(args.config)
    clock, _ = _parse_clock(args.fixed_clock)
    db = ConceptDatabase.load(args.db)
    gateways = _gateways(args, file_config, db)
    config = _pipeline_config(args, file_config)

    dataset_path = Path(args.dataset)
    try:
        manifest = json.loads(dataset_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise PerceptError(f"cannot read dataset {dataset_path}: {exc}") from exc

    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    report = run_eval(
        db, manifest, args.task, config, seeds, gateways,
        image_root=dataset_path.parent,
        trace_path=args.trace_out,
        report_path=args.report_out,
        clock=clock,
    )
    _emit(report)
    return EXIT_OK


def cmd_split(args) -> int:
    from .db import Embedding

    manifest_path = Path(args.images_manifest)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise PerceptError(f"cannot read manifest {manifest_path}: {exc}") from exc
    try:
        images = {
            name: [(img["id"], Embedding(img["embedding"])) for img in entries]
            for name, entries in manifest["concepts"].items()
        }
    except (KeyError, TypeError) as exc:
        raise PerceptError(f"malformed images manifest: {exc}") from exc

    split = build_split(images, n_query=args.n_query)
    payload = split.to_json_dict()
    if args.out:
        Path(args.out).write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    _emit(payload)
    return EXIT_OK


def cmd_inspect(args) -> int:
    db = ConceptDatabase.load(args.db)
    _emit(
        {
            "manifest": db.manifest().to_json_dict(),
            "concepts": [
                {
                    "concept_id": r.concept_id,
                    "name": r.name,
                    "category": r.category,
                    "attributes": len(r.attributes),
                    "enrolled_at": r.enrolled_at,
                }
                for r in db.snapshot()
            ],
        }
    )
    return EXIT_OK


# --- argument wiring -------------------------------------------------------------

def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="r2p.toml settings file")
    parser.add_argument("--backend", choices=["mock", "remote"])
    parser.add_argument("--embedding-dim", type=int, dest="embedding_dim")
    parser.add_argument("--encoder-fixture", dest="encoder_fixture",
                        help="mock encoder fixture JSON (label -> vector)")
    parser.add_argument("--vlm-script", dest="vlm_script",
                        help="mock chat script JSON (array of turns)")
    parser.add_argument("--seed", type=int, help="mock encoder seed")
    parser.add_argument("--fixed-clock", dest="fixed_clock",
                        help="epoch seconds or RFC 3339; makes output deterministic")
    parser.add_argument("--log-level", default="warning")
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--media-type", dest="media_type", default="image/png")


def _add_pipeline_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--k", type=int)
    parser.add_argument(
        "--retrieval-mode", dest="retrieval_mode",
        choices=["fused", "image_only", "text_only", "two_step"],
    )
    parser.add_argument("--rerank-pool", dest="rerank_pool", type=int)
    parser.add_argument(
        "--verification",
        choices=["attribute", "abstention", "logits_based", "pairwise_always", "none"],
    )
    parser.add_argument(
        "--recognition-mode", dest="recognition_mode",
        choices=["pipeline_match", "direct_pairwise"],
    )
    parser.add_argument("--pairwise-threshold", dest="pairwise_threshold", type=float)
    parser.add_argument("--no-cot", dest="no_cot", action="store_true")
    parser.add_argument("--no-fingerprints", dest="no_fingerprints",
                        action="store_true")
    parser.add_argument("--no-pairwise", dest="no_pairwise", action="store_true")


def build_parser() -> _Parser:
    parser = _Parser(prog="percept", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    enroll = sub.add_parser("enroll", help="add a concept to the database")
    enroll.add_argument("--db", required=True)
    enroll.add_argument("--image", required=True)
    enroll.add_argument("--name", required=True)
    enroll.add_argument("--category", required=True)
    enroll.add_argument("--attributes",
                        help="comma-separated; skips the model (privileged)")
    enroll.add_argument("--description")
    _add_backend_flags(enroll)
    enroll.set_defaults(func=cmd_enroll)

    query = sub.add_parser("query", help="answer a query about an image")
    query.add_argument("--db", required=True)
    query.add_argument("--image", required=True)
    query.add_argument("--task", required=True,
                       choices=["recognize", "caption", "vqa"])
    query.add_argument("--target", help="concept name (recognize)")
    query.add_argument("--question", help="question text (vqa)")
    query.add_argument("--choices", help="comma-separated answer choices (vqa)")
    query.add_argument("--trace-out", dest="trace_out")
    _add_backend_flags(query)
    _add_pipeline_flags(query)
    query.set_defaults(func=cmd_query)

    evaluate = sub.add_parser("eval", help="run a dataset evaluation")
    evaluate.add_argument("--db", required=True)
    evaluate.add_argument("--dataset", required=True)
    evaluate.add_argument("--task", required=True,
                          choices=["recognition", "caption", "vqa"])
    evaluate.add_argument("--seeds", default="0")
    evaluate.add_argument("--report-out", dest="report_out")
    evaluate.add_argument("--trace-out", dest="trace_out")
    _add_backend_flags(evaluate)
    _add_pipeline_flags(evaluate)
    evaluate.set_defaults(func=cmd_eval)

    split = sub.add_parser("split", help="build a reference/query split")
    split.add_argument("--images-manifest", dest="images_manifest", required=True)
    split.add_argument("--n-query", dest="n_query", type=int)
    split.add_argument("--out")
    split.set_defaults(func=cmd_split)

    inspect = sub.add_parser("inspect", help="print database summary")
    inspect.add_argument("--db", required=True)
    inspect.set_defaults(func=cmd_inspect)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            stream=sys.stderr,
            level=getattr(logging, getattr(args, "log_level", "warning").upper(),
                          logging.WARNING),
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except CliUsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except UnknownTargetConcept as exc:
        _emit_error(exc)
        return EXIT_DOMAIN
    except PerceptError as exc:
        _emit_error(exc)
        return EXIT_RUNTIME
    except ValueError as exc:
        _emit_error(exc)
        return EXIT_RUNTIME
    except OSError as exc:
        sys.stderr.write(f"io error: {exc}\n")
        _emit({"error": {"code": "IO_FAILURE", "message": str(exc)}})
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
