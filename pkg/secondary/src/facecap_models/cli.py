"""CLI for the model-side tools: extract records, emit/run training configs."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .extractors import ExtractorConfig, ExtractorError, extract
from .trainer import TrainerError, emit_config, read_config, train


def _cmd_extract(args: argparse.Namespace) -> int:
    config = ExtractorConfig.from_yaml(args.config) if args.config else ExtractorConfig()
    result = extract(args.image_dir, args.out, batch_size=args.batch_size, config=config)
    print(
        json.dumps(
            {
                "images": result.n_images,
                "records": result.n_records,
                "failures": len(result.failures),
                "records_path": str(result.records_path),
            }
        )
    )
    return 0


def _cmd_emit_config(args: argparse.Namespace) -> int:
    overrides = json.loads(args.overrides) if args.overrides else {}
    config = emit_config(args.manifest, overrides, out=args.out)
    print(json.dumps({"out": args.out, "steps": config.steps, "effective_batch": config.effective_batch}))
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = read_config(args.config)
    result = train(config, args.out, images_root=args.images_root)
    print(
        json.dumps(
            {
                "checkpoint": str(result.checkpoint_path),
                "steps": result.steps,
                "final_loss": result.losses[-1],
            }
        )
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facecap-models", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="images -> attribute-record JSONL")
    p.add_argument("image_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--config", default=None, help="extractor thresholds sidecar (YAML)")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("emit-config", help="write a training config with production defaults")
    p.add_argument("manifest", help="exported training JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--overrides", default=None, help='JSON object, e.g. {"steps": 20}')
    p.set_defaults(func=_cmd_emit_config)

    p = sub.add_parser("train", help="run the configured fine-tune")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--images-root", default=".")
    p.set_defaults(func=_cmd_train)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ExtractorError, TrainerError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    except OSError as e:
        print(json.dumps({"error": "IoError", "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
