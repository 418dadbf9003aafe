"""Scenario runner: base training, class additions, evaluation, checkpoints and tables.

Three addition modes are supported:

``add_one``          one new class after the base task;
``add_multi_once``   several new classes pooled into one task;
``add_sequential``   several new classes, one training stage each.

Every stage accumulates the vocabulary, expands the decoder and trains with the
run's strategy.  The final model is scored on the base task's test split
("old") and on the pooled test splits of all added classes ("new").
"""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .dataio import (ImageStore, TaskSpec, build_split, file_loader, filter_clear_images,
                     generate_synthetic, load_annotations, merge_annotations, merge_tasks)
from .errors import CheckpointError, ConfigurationError
from .metrics import MetricReport, evaluate, score_captions, caption_split, reference_tokens
from .model import (ModelConfig, ModelState, expand_decoder, init_state, load_checkpoint,
                    save_checkpoint)
from .strategies import VARIANTS, StrategyConfig, generate_pseudo_labels, train_task
from .vocab import Vocabulary, accumulate, build_task_vocab

log = logging.getLogger(__name__)

MODES = ("add_one", "add_multi_once", "add_sequential")
SEED_ENV = "INCCAP_SEED"
METRIC_HEADERS = ("BLEU1", "BLEU4", "METEOR", "ROUGE_L", "CIDEr")


class AccessLog:
    """Image store wrapper that records reads and flags reads of retired data.

    ``begin`` names the current stage and the image ids (earlier tasks'
    train/val images) that must not be read any more; every read of such an id
    lands in ``violations``.
    """

    def __init__(self, store):
        self.store = store
        self.stage = None
        self.reads: list[tuple[object, int]] = []
        self.violations: list[tuple[object, int]] = []
        self._retired: set[int] = set()

    def begin(self, stage, retired: Iterable[int] = ()):
        self.stage = stage
        self._retired = set(retired)

    def _touch(self, image_id):
        self.reads.append((self.stage, image_id))
        if image_id in self._retired:
            self.violations.append((self.stage, image_id))

    def image(self, image_id):
        self._touch(image_id)
        return self.store.image(image_id)

    def images(self, ids):
        for i in ids:
            self._touch(i)
        return self.store.images(ids)

    def captions(self, image_id):
        self._touch(image_id)
        return self.store.captions(image_id)


@dataclass
class ScenarioPlan:
    base_task: TaskSpec
    additions: list[TaskSpec]
    mode: str
    strategies: list[StrategyConfig]
    seeds: list[int]
    output_dir: Path
    name: str = "scenario"
    base_config: StrategyConfig = field(default_factory=StrategyConfig)
    model_config: ModelConfig = field(default_factory=ModelConfig)
    min_count: int = 1
    max_len: int = 20
    class_names: Mapping[int, str] = field(default_factory=dict)
    base_dir: Path | None = None

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        self.base_dir = Path(self.base_dir) if self.base_dir else self.output_dir / "base"
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not self.additions:
            raise ConfigurationError("a scenario needs at least one added class")
        if self.mode == "add_one" and len(self.additions) != 1:
            raise ConfigurationError("add_one takes exactly one addition")
        for task in self.additions:
            if task.class_set & self.base_task.class_set:
                raise ConfigurationError(f"added classes {sorted(task.class_set)} overlap the base task")
        if not self.strategies or not self.seeds:
            raise ConfigurationError("at least one strategy and one seed are required")

    def stages(self) -> list[TaskSpec]:
        """Training stages after the base task, in order."""
        if self.mode == "add_multi_once":
            return [merge_tasks(self.additions, task_id=1)]
        return [replace(t, task_id=k) for k, t in enumerate(self.additions, start=1)]

    def new_task(self) -> TaskSpec:
        return merge_tasks(self.additions, task_id=len(self.additions) + 1)


@dataclass
class RunRecord:
    strategy: str
    seed: int
    reports: dict[str, MetricReport] = field(default_factory=dict)
    base_report: MetricReport | None = None
    per_class: dict[str, MetricReport] = field(default_factory=dict)
    stages: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    wall_clock: float = 0.0
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "reports": {k: v.to_dict() for k, v in sorted(self.reports.items())},
            "base_report": self.base_report.to_dict() if self.base_report else None,
            "per_class": {k: v.to_dict() for k, v in sorted(self.per_class.items())},
            "stages": self.stages,
            "checkpoints": self.checkpoints,
            "wall_clock": self.wall_clock,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "RunRecord":
        return cls(
            data["strategy"], int(data["seed"]),
            {k: MetricReport.from_dict(v) for k, v in data.get("reports", {}).items()},
            MetricReport.from_dict(data["base_report"]) if data.get("base_report") else None,
            {k: MetricReport.from_dict(v) for k, v in data.get("per_class", {}).items()},
            list(data.get("stages", [])), list(data.get("checkpoints", [])),
            float(data.get("wall_clock", 0.0)), data.get("error"),
        )


def forgetting_delta(before: MetricReport, after: MetricReport) -> dict[str, float]:
    """``after - before`` for every metric (negative means forgetting)."""
    return {k: getattr(after, k) - getattr(before, k) for k in MetricReport.FIELDS}


# --------------------------------------------------------------------------- running


def _task_vocab(task: TaskSpec, store, min_count: int) -> set[str]:
    return build_task_vocab((c for i in task.train for c in store.captions(i)), min_count)


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _save_stage(state: ModelState, vocab: Vocabulary, path: Path, seed: int, stage: int) -> None:
    save_checkpoint(state, path, rng_state={"seed": seed, "stage": stage})
    try:
        vocab.save(path.with_suffix(".vocab"))
    except OSError as exc:
        raise CheckpointError(f"could not write vocabulary next to {path}: {exc}") from exc


def _load_stage(path: Path) -> tuple[ModelState, Vocabulary]:
    vocab = Vocabulary.load(path.with_suffix(".vocab"))
    state, _ = load_checkpoint(path, vocab)
    return state, vocab


def train_base(plan: ScenarioPlan, store, seed: int, resume: bool = True) -> tuple[ModelState, Vocabulary, MetricReport]:
    """Train (or reload) the base model for ``seed``; returns it with its test report."""
    path = plan.base_dir / f"seed{seed}" / "stage0.npz"
    if resume and path.exists():
        state, vocab = _load_stage(path)
    else:
        vocab = accumulate(Vocabulary(), _task_vocab(plan.base_task, store, plan.min_count))
        state = init_state(plan.model_config, vocab, _derived_seed(seed, 0))
        cfg = replace(plan.base_config, variant="F", seed=seed, max_len=plan.max_len)
        state = train_task(state, plan.base_task, cfg, store, vocab)
        _save_stage(state, vocab, path, seed, 0)
    return state, vocab, evaluate(state, plan.base_task, vocab, store, max_len=plan.max_len)


def _report_new(plan, state, vocab, store) -> tuple[MetricReport, dict[str, MetricReport]]:
    """Pooled report over all added classes plus one report per class."""
    new_task = plan.new_task()
    caps = caption_split(state, new_task.test, vocab, store, plan.max_len)
    refs = reference_tokens(store, new_task.test)
    pooled = score_captions(caps, refs)
    per_class = {}
    for task in plan.additions:
        (cat,) = task.class_set if len(task.class_set) == 1 else (min(task.class_set),)
        key = plan.class_names.get(cat, str(cat))
        if task.test:
            per_class[key] = score_captions({i: caps[i] for i in task.test}, {i: refs[i] for i in task.test})
    return pooled, per_class


def run_one(plan: ScenarioPlan, cfg: StrategyConfig, seed: int, store, base: tuple,
            resume: bool = True) -> RunRecord:
    """Apply every addition stage for one (strategy, seed) pair starting from ``base``."""
    started = time.perf_counter()
    cfg = replace(cfg, seed=seed, max_len=plan.max_len)
    record = RunRecord(cfg.variant, seed)
    run_dir = plan.output_dir / "runs" / f"{cfg.variant}_seed{seed}"
    state, vocab, base_report = base
    record.base_report = base_report
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        stage0 = run_dir / "stage0.npz"
        if not (resume and stage0.exists()):
            _save_stage(state, vocab, stage0, seed, 0)
        record.checkpoints.append(str(stage0.relative_to(plan.output_dir)))
        seen = [plan.base_task]
        for k, task in enumerate(plan.stages(), start=1):
            ckpt = run_dir / f"stage{k}.npz"
            retired = {i for t in seen for i in (*t.train, *t.val)}
            if isinstance(store, AccessLog):
                store.begin((cfg.variant, seed, k), retired)
            if resume and ckpt.exists():
                state, vocab = _load_stage(ckpt)
            else:
                prev = state
                new_vocab = accumulate(vocab, _task_vocab(task, store, plan.min_count))
                expanded = expand_decoder(prev, new_vocab, _derived_seed(seed, k, 1))
                pseudo = teacher = None
                if cfg.variant == "P":
                    pseudo = generate_pseudo_labels(prev, store.images(task.train), task.train,
                                                    run_dir / f"pseudo_stage{k}.json", plan.max_len)
                if cfg.variant == "FD":
                    teacher = prev
                state = train_task(expanded, task, cfg, store, new_vocab, teacher=teacher, pseudo_labels=pseudo)
                vocab = new_vocab
                _save_stage(state, vocab, ckpt, seed, k)
            record.checkpoints.append(str(ckpt.relative_to(plan.output_dir)))
            stage_report = evaluate(state, task, vocab, store, max_len=plan.max_len) if task.test else None
            record.stages.append({
                "stage": k,
                "classes": sorted(task.class_set),
                "vocab_version": vocab.version,
                "vocab_size": len(vocab),
                "test": stage_report.to_dict() if stage_report else None,
            })
            seen.append(task)
        if isinstance(store, AccessLog):
            store.begin((cfg.variant, seed, "eval"), {i for t in seen for i in (*t.train, *t.val)})
        record.reports["old"] = evaluate(state, plan.base_task, vocab, store, max_len=plan.max_len)
        record.reports["new"], record.per_class = _report_new(plan, state, vocab, store)
    except CheckpointError as exc:
        log.error("run %s seed %s aborted: %s", cfg.variant, seed, exc)
        record.error = str(exc)
    record.wall_clock = time.perf_counter() - started
    write_record(record, run_dir / "record.json")
    return record


def write_record(record: RunRecord, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(record.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        log.error("could not write run record %s: %s", path, exc)


def load_records(directory) -> list[RunRecord]:
    paths = sorted(Path(directory).glob("runs/*/record.json"))
    return [RunRecord.from_json(json.loads(p.read_text(encoding="utf-8"))) for p in paths]


def seeds_from_env(seeds: Sequence[int]) -> list[int]:
    value = os.environ.get(SEED_ENV)
    return [int(value)] if value not in (None, "") else list(seeds)


def run_scenario(plan: ScenarioPlan, store, resume: bool = True, threads: int | None = 1) -> list[RunRecord]:
    """Run every (strategy, seed) pair of ``plan``; one RunRecord each.

    The base model is trained once per seed and shared by all strategies (it does
    not depend on the strategy).  Reads go through an :class:`AccessLog`, stored
    on the returned list's owner as ``plan.access_log`` for inspection.
    """
    previous_threads = torch.get_num_threads()
    if threads:
        torch.set_num_threads(threads)
    logged = store if isinstance(store, AccessLog) else AccessLog(store)
    plan.access_log = logged
    records = []
    try:
        for seed in plan.seeds:
            logged.begin(("base", seed, 0))
            base = train_base(plan, logged, seed, resume)
            for cfg in plan.strategies:
                records.append(run_one(plan, cfg, seed, logged, base, resume))
    finally:
        torch.set_num_threads(previous_threads)
    return records


# --------------------------------------------------------------------------- tables


def _mean_reports(reports: Sequence[MetricReport]) -> MetricReport:
    return MetricReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in MetricReport.FIELDS})


def table_rows(records: Sequence[RunRecord]) -> list[tuple[str, list[float]]]:
    """(strategy, 10 seed-averaged values) in F, E_F, D_F, P, FD order; failed runs are skipped."""
    rows = []
    for variant in VARIANTS:
        done = [r for r in records if r.strategy == variant and r.error is None]
        if not done:
            continue
        old = _mean_reports([r.reports["old"] for r in done])
        new = _mean_reports([r.reports["new"] for r in done])
        rows.append((variant, [getattr(old, k) for k in MetricReport.FIELDS]
                     + [getattr(new, k) for k in MetricReport.FIELDS]))
    return rows


def emit_table(records: Sequence[RunRecord], out_dir, old_label: str = "old", new_label: str = "new") -> Path:
    """Write ``table.tsv`` and an aligned ``table.txt``; returns the TSV path."""
    if not records:
        raise ValueError("no run records to tabulate")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = table_rows(records)
    header = ["strategy"] + [f"{old_label}:{m}" for m in METRIC_HEADERS] + [f"{new_label}:{m}" for m in METRIC_HEADERS]
    cells = [[name] + [f"{v:.1f}" for v in values] for name, values in rows]
    tsv = out / "table.tsv"
    tsv.write_text("\n".join("\t".join(r) for r in [header] + cells) + "\n", encoding="utf-8")

    widths = [max(len(r[i]) for r in [header] + cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header] + cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    (out / "table.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return tsv


# --------------------------------------------------------------------------- plan files


def load_plan(path) -> tuple[ScenarioPlan, ImageStore]:
    """Read a JSON plan file and prepare its data.

    Keys: ``mode``, ``base_classes``, ``additions`` (class names or ids),
    ``strategies``, optional ``beta``, ``lambda``, ``epochs``, ``base_epochs``,
    ``learning_rate``, ``batch_size``, ``patience``, ``early_stop``,
    ``base_early_stop``, ``fd_reinit_decoder``, ``seeds``, ``output_dir``,
    ``base_dir``, ``min_count``, ``max_len``, ``model`` (ModelConfig fields) and ``data``:
    either ``{"synthetic": {"n_per_class", "seed", "image_size"}}`` or
    ``{"annotations": [paths], "pools": [...], "image_dir": dir, "resize_to": n}``.
    Relative paths are resolved against the plan file's directory.
    """
    path = Path(path)
    conf = json.loads(path.read_text(encoding="utf-8"))
    return plan_from_dict(conf, root=path.parent)


def _resolve(path, root: Path) -> Path | None:
    if path is None:
        return None
    path = Path(path)
    return path if path.is_absolute() else root / path


def plan_from_dict(conf: Mapping, root=".") -> tuple[ScenarioPlan, ImageStore]:
    root = Path(root)
    mode = conf.get("mode", "add_one")
    base_names = list(conf["base_classes"])
    add_names = list(conf["additions"])
    data = conf.get("data", {"synthetic": {}})
    model_cfg = ModelConfig.from_dict(conf.get("model", {}))

    if "synthetic" in data:
        syn = data["synthetic"]
        ann, store = generate_synthetic(base_names + add_names, syn.get("n_per_class", 90),
                                        int(syn.get("seed", 0)), int(syn.get("image_size", model_cfg.image_size)))
        resize = model_cfg.image_size
    else:
        paths = [root / p for p in data["annotations"]]
        pools = data.get("pools", ["train"] * len(paths))
        ann = merge_annotations(*(load_annotations(p, pool) for p, pool in zip(paths, pools)))
        resize = int(data.get("resize_to", model_cfg.image_size))
        store = ImageStore(captions=ann.captions_by_image(),
                           loader=file_loader(ann, root / data["image_dir"], (resize, resize)))
    base_ids = [ann.category_id(c) for c in base_names]
    add_ids = [ann.category_id(c) for c in add_names]
    universe = set(data.get("universe", ann.categories or base_ids + add_ids))
    clear = filter_clear_images(ann, universe)
    tasks = {next(iter(t.class_set)): t for t in build_split(clear, base_ids + add_ids, resize)}
    missing = [c for c in base_ids + add_ids if c not in tasks]
    if missing:
        raise ConfigurationError(f"classes without images: {missing}")
    base_task = merge_tasks([tasks[c] for c in base_ids], task_id=0)
    additions = [replace(tasks[c], task_id=k) for k, c in enumerate(add_ids, start=1)]

    common = dict(beta=float(conf.get("beta", 1.0)), lam=float(conf.get("lambda", 1.0)),
                  epochs=int(conf.get("epochs", 20)), learning_rate=float(conf.get("learning_rate", 1e-3)),
                  batch_size=int(conf.get("batch_size", 8)), patience=int(conf.get("patience", 5)),
                  early_stop=bool(conf.get("early_stop", True)),
                  fd_reinit_decoder=bool(conf.get("fd_reinit_decoder", True)))
    strategies = [StrategyConfig(variant=v, **common) for v in conf.get("strategies", list(VARIANTS))]
    base_cfg = replace(StrategyConfig(**common), epochs=int(conf.get("base_epochs", common["epochs"])),
                       early_stop=bool(conf.get("base_early_stop", common["early_stop"])))
    out = _resolve(conf.get("output_dir", "results"), root)
    plan = ScenarioPlan(
        base_task=base_task,
        additions=additions,
        mode=mode,
        strategies=strategies,
        seeds=seeds_from_env(conf.get("seeds", [0, 1, 2])),
        output_dir=out,
        name=conf.get("name", mode),
        base_config=base_cfg,
        model_config=model_cfg,
        min_count=int(conf.get("min_count", 1)),
        max_len=int(conf.get("max_len", 20)),
        class_names={cid: ann.categories.get(cid, str(cid)) for cid in base_ids + add_ids},
        base_dir=_resolve(conf.get("base_dir"), root),
    )
    return plan, store


BASE_SHAPES = ["square", "circle", "triangle", "diamond", "cross", "ring"]
NEW_SHAPES = ["star", "oval", "heart", "crescent", "hexagon"]


def default_plan(mode: str, output_dir, **overrides) -> dict:
    """The synthetic scenario used for trend checks: 6 base shapes, then 1 or 5 new ones.

    In ``add_one`` the added class is five times larger than the others, as a
    dominant new class.  The multi-class modes use equal class sizes so each
    sequential stage is the same size and forgetting can compound across stages.
    """
    counts = {"default": 90, NEW_SHAPES[0]: 450} if mode == "add_one" else 90
    conf = {
        "name": mode,
        "mode": mode,
        "base_classes": BASE_SHAPES,
        "additions": NEW_SHAPES[:1] if mode == "add_one" else NEW_SHAPES,
        "strategies": list(VARIANTS),
        "seeds": [0, 1, 2],
        "epochs": 20,
        "base_epochs": 40,
        "base_early_stop": False,
        "output_dir": str(output_dir),
        "data": {"synthetic": {"n_per_class": counts, "seed": 0}},
    }
    conf.update(overrides)
    return conf
