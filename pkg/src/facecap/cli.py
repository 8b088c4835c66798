"""Operator entry point: filter / caption / export / stats / validate-config.

Every failure exits nonzero and prints a single machine-readable JSON error
line to stderr; partial caption manifests remain resumable with --resume.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ._version import __version__
from .config import ConfigError, PipelineConfig, load_config
from .dataset import (
    CorruptIndex,
    DatasetManifest,
    DuplicateImageId,
    EmptyManifest,
    export_training_manifest,
    stats_report,
)
from .fusion import NoValidCaption, ServiceUnreachable
from .pipeline import (
    read_records,
    run_caption_pipeline,
    run_filter,
    write_run_metadata,
)
from .schema import SchemaError

log = logging.getLogger(__name__)

_CONFIG_EXIT = 2
_RUNTIME_EXIT = 1


def _emit_error(kind: str, message: str, **extra) -> None:
    payload = {"error": kind, "message": message, **extra}
    print(json.dumps(payload, ensure_ascii=False), file=sys.stderr)


def _config_overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["global_seed"] = args.seed
    if getattr(args, "profile", None) is not None:
        overrides["profile"] = args.profile
    if getattr(args, "mock_llm", False):
        overrides["mock"] = True
    if getattr(args, "captions_per_image", None) is not None:
        overrides["captions_per_image"] = args.captions_per_image
    if getattr(args, "concurrency", None) is not None:
        overrides["concurrency"] = args.concurrency
    return overrides


def _load(args: argparse.Namespace) -> PipelineConfig:
    return load_config(args.config, _config_overrides(args))


def _cmd_validate_config(args: argparse.Namespace) -> int:
    cfg = _load(args)
    print(json.dumps({"ok": True, "config_hash": cfg.config_hash(), "profile": cfg.profile_name}))
    return 0


def _cmd_filter(args: argparse.Namespace) -> int:
    cfg = _load(args)
    if not cfg.records_path:
        raise ConfigError("paths.records", "required for the filter command")
    records = read_records(cfg.records_path)
    verdicts, counts = run_filter(records, cfg)

    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "verdicts.jsonl", "w", encoding="utf-8") as f:
            for image_id, v in verdicts:
                f.write(json.dumps({"image_id": image_id, "accepted": v.accepted, "reason": v.reason}) + "\n")
        write_run_metadata(out_dir, cfg, "filter")
    print(json.dumps({"input": len(records), "counts": {k: counts[k] for k in sorted(counts)}}))
    return 0


def _cmd_caption(args: argparse.Namespace) -> int:
    cfg = _load(args)
    if not cfg.records_path:
        raise ConfigError("paths.records", "required for the caption command")
    records = read_records(cfg.records_path)
    out_dir = Path(args.out)

    def _progress(n: int, _entry) -> None:
        if n % 1000 == 0:
            log.info("captioned %d entries", n)

    manifest = run_caption_pipeline(records, out_dir, cfg, resume=args.resume, on_entry_written=_progress)
    write_run_metadata(out_dir, cfg, "caption")
    print(
        json.dumps(
            {
                "entries": len(manifest),
                "shards": len(manifest.shards),
                "counts": {k: manifest.counts[k] for k in sorted(manifest.counts)},
            }
        )
    )
    return 0


_MODE_ALIASES = {"all": "all_captions", "one": "one_per_image"}


def _cmd_export(args: argparse.Namespace) -> int:
    cfg = _load(args)
    manifest = DatasetManifest.load(args.manifest_dir)
    mode = _MODE_ALIASES[args.mode]
    out = Path(args.out)
    n = export_training_manifest(manifest, mode, out)
    write_run_metadata(out.parent, cfg, f"export --mode {args.mode}")
    print(json.dumps({"lines": n, "mode": mode, "out": str(out)}))
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    cfg = _load(args)
    manifest = DatasetManifest.load(args.manifest_dir)
    report = stats_report(manifest)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "stats.json").write_text(
            json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        (out_dir / "stats.txt").write_text(report.to_text() + "\n", encoding="utf-8")
        write_run_metadata(out_dir, cfg, "stats")
    print(report.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facecap", description=__doc__)
    parser.add_argument("--version", action="version", version=f"facecap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="pipeline config file (YAML)")
        p.add_argument("--seed", type=int, default=None, help="override global_seed")
        p.add_argument("--profile", default=None, help="override the dataset profile by name")
        p.add_argument("--concurrency", type=int, default=None, help="record-level worker bound")

    p = sub.add_parser("validate-config", help="load and validate the config, then exit")
    add_common(p)
    p.set_defaults(func=_cmd_validate_config)

    p = sub.add_parser("filter", help="run the filtering rules and report verdict counts")
    add_common(p)
    p.add_argument("--out", default=None, help="directory for verdicts.jsonl")
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("caption", help="records -> captions -> sharded manifest")
    add_common(p)
    p.add_argument("--out", required=True, help="manifest output directory")
    p.add_argument("--mock-llm", action="store_true", help="use the offline mock fuser")
    p.add_argument("--captions-per-image", type=int, default=None, help="override fusion.captions_per_image")
    p.add_argument("--resume", action="store_true", help="skip ids already present in the manifest")
    p.set_defaults(func=_cmd_caption)

    p = sub.add_parser("export", help="manifest -> training-pair JSONL")
    add_common(p)
    p.add_argument("manifest_dir", help="manifest directory to export from")
    p.add_argument("--mode", choices=sorted(_MODE_ALIASES), required=True)
    p.add_argument("--out", required=True, help="output JSONL path")
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("stats", help="manifest -> statistics / bias report")
    add_common(p)
    p.add_argument("manifest_dir", help="manifest directory to report on")
    p.add_argument("--out", default=None, help="directory for stats.json / stats.txt")
    p.set_defaults(func=_cmd_stats)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        _emit_error("ConfigError", e.message, field=e.path)
        return _CONFIG_EXIT
    except SchemaError as e:
        _emit_error("SchemaError", e.message, field=e.path)
        return _RUNTIME_EXIT
    except ServiceUnreachable as e:
        _emit_error("ServiceUnreachable", str(e), attempts=e.attempts)
        return _RUNTIME_EXIT
    except NoValidCaption as e:
        _emit_error("NoValidCaption", str(e))
        return _RUNTIME_EXIT
    except (CorruptIndex, DuplicateImageId, EmptyManifest) as e:
        _emit_error(type(e).__name__, str(e))
        return _RUNTIME_EXIT
    except OSError as e:
        _emit_error("IoError", str(e))
        return _RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
