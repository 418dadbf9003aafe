"""Command line entry point: ``python -m inccap <command>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import AnnotationError, CheckpointError, ConfigurationError


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def cmd_split(args) -> int:
    from .dataio import build_split, filter_clear_images, load_annotations, merge_annotations, write_manifest

    sets = [load_annotations(p, "train") for p in args.annotations]
    sets += [load_annotations(p, "val") for p in args.val_annotations]
    ann = merge_annotations(*sets)
    classes = [ann.category_id(c) for c in _csv(args.classes)]
    universe = [ann.category_id(c) for c in _csv(args.universe)] if args.universe else list(ann.categories)
    tasks = build_split(filter_clear_images(ann, universe or classes), classes, args.resize)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for task in tasks:
        path = write_manifest(task, out / f"task_{task.task_id:03d}.json")
        print(f"{path}\ttrain={len(task.train)}\tval={len(task.val)}\ttest={len(task.test)}")
    return 0


def cmd_synth(args) -> int:
    from .dataio import generate_synthetic, save_synthetic

    ann, store = generate_synthetic(_csv(args.classes), args.n, args.seed, args.image_size)
    save_synthetic(ann, store, args.out)
    print(f"{len(ann.images)} scenes, {len(ann.captions)} captions -> {args.out}")
    return 0


def _read_references(path: Path) -> dict[int, list[str]]:
    data = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(data, dict) and "annotations" in data:
        from .dataio import parse_annotations

        return parse_annotations(data, source=str(path)).captions_by_image()
    return {int(k): [v] if isinstance(v, str) else list(v) for k, v in data.items()}


def cmd_score(args) -> int:
    from .metrics import score_captions
    from .vocab import tokenize

    cands = json.loads(Path(args.candidates).read_text(encoding="utf-8"))
    refs = _read_references(Path(args.references))
    candidates = {}
    for k, v in cands.items():
        text = v if isinstance(v, str) else v[0]
        candidates[int(k)] = tokenize(text)
    references = {i: [tokenize(c) for c in refs.get(i, [])] for i in candidates}
    empty = sorted(i for i, r in references.items() if not r)
    if empty:
        raise ConfigurationError(f"no reference captions for image ids {empty[:5]}")
    report = score_captions(candidates, references)
    print(json.dumps(report.rounded(args.digits).to_dict(), indent=2))
    return 0


def _print_table(directory: Path) -> None:
    print((directory / "table.txt").read_text(encoding="utf-8"), end="")


def cmd_run(args) -> int:
    from .harness import emit_table, load_plan, run_scenario

    plan, store = load_plan(args.plan)
    records = run_scenario(plan, store, resume=not args.fresh)
    emit_table(records, plan.output_dir)
    _print_table(plan.output_dir)
    failed = [r for r in records if r.error]
    for r in failed:
        print(f"run {r.strategy} seed {r.seed} failed: {r.error}", file=sys.stderr)
    violations = plan.access_log.violations
    if violations:
        print(f"{len(violations)} reads of retired training data", file=sys.stderr)
    return 1 if failed or violations else 0


def cmd_report(args) -> int:
    from .harness import emit_table, load_records

    directory = Path(args.dir)
    records = load_records(directory)
    if not records:
        print(f"no run records under {directory}", file=sys.stderr)
        return 1
    emit_table(records, directory)
    _print_table(directory)
    return 1 if any(r.error for r in records) else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inccap", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="build per-class task manifests from COCO-style annotations")
    p.add_argument("--annotations", nargs="+", required=True, help="training-pool annotation files")
    p.add_argument("--val-annotations", nargs="*", default=[], help="validation-pool annotation files")
    p.add_argument("--classes", required=True, help="comma-separated class names or ids, in task order")
    p.add_argument("--universe", help="comma-separated class universe (default: all declared categories)")
    p.add_argument("--resize", type=int, default=224)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", help="render a synthetic shapes captioning dataset")
    p.add_argument("--classes", required=True)
    p.add_argument("--n", type=int, required=True, help="scenes per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("score", help="score candidate captions against references")
    p.add_argument("--candidates", required=True, help="JSON object: image id -> caption")
    p.add_argument("--references", required=True,
                   help="JSON object: image id -> caption(s), or a COCO caption file")
    p.add_argument("--digits", type=int, default=1)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("run", help="run a scenario plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="rebuild the result table from stored run records")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (AnnotationError, ConfigurationError, CheckpointError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
