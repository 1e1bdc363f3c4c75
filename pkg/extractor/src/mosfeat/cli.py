"""Command line for the feature extractor: ``mosfeat extract ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .extract import (
    AUDIO_SUFFIXES,
    DEFAULT_SAMPLE_RATE,
    ExtractionJob,
    extract,
    load_model,
)


def find_audio(in_dir: Path) -> list[Path]:
    return sorted(p for p in in_dir.rglob("*") if p.suffix.lower() in AUDIO_SUFFIXES)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mosfeat", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)
    p = subs.add_parser("extract", help="featurize a directory of audio files")
    p.add_argument("--model", required=True, help="pretrained checkpoint (path or hub id)")
    p.add_argument("--in", dest="in_dir", required=True, help="directory of audio files")
    p.add_argument("--out", required=True, help="directory for .mosf feature files")
    p.add_argument("--manifest", required=True, help="manifest CSV to create or append to")
    p.add_argument("--layer", type=int, default=-1, help="hidden-state layer (default: last)")
    p.add_argument("--sample-rate", type=int, default=DEFAULT_SAMPLE_RATE)
    args = parser.parse_args(argv)

    in_dir = Path(args.in_dir)
    paths = find_audio(in_dir)
    if not paths:
        print(f"error: no audio files under {in_dir}", file=sys.stderr)
        return 1
    try:
        model = load_model(args.model)
    except Exception as exc:
        print(f"error: cannot load model {args.model!r}: {exc}", file=sys.stderr)
        return 1
    job = ExtractionJob(
        audio_paths=paths,
        model_id=args.model,
        out_dir=Path(args.out),
        manifest_path=Path(args.manifest),
        layer=args.layer,
        sample_rate=args.sample_rate,
    )
    result = extract(job, model=model, audio_root=in_dir)
    print(f"wrote {len(result.written)} feature files, "
          f"{len(result.errors)} failures, manifest: {args.manifest}")
    for path, reason in result.errors.items():
        print(f"skipped {path}: {reason}", file=sys.stderr)
    return 0 if result.written else 1


if __name__ == "__main__":
    raise SystemExit(main())
