import json
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from inccap import harness as H
from inccap import metrics as M
from inccap import model as Mod
from inccap.cli import main as cli_main
from inccap.dataio import generate_synthetic, merge_tasks, build_split
from inccap.errors import CheckpointError, ConfigurationError
from inccap.metrics import MetricReport
from inccap.vocab import Vocabulary, accumulate, tokenize

TINY_MODEL = {"image_size": 8, "conv_channels": [2, 3], "feature_dim": 4, "embed_dim": 4, "hidden_dim": 8}
ADDED = ["star", "oval", "heart", "crescent", "hexagon"]


def tiny_spec(out, mode="add_one", strategies=("F",), seeds=(0,), **extra):
    spec = {
        "mode": mode,
        "base_classes": ["square", "circle"],
        "additions": ADDED[:1] if mode == "add_one" else ADDED,
        "strategies": list(strategies),
        "seeds": list(seeds),
        "epochs": 1,
        "base_epochs": 2,
        "model": TINY_MODEL,
        "data": {"synthetic": {"n_per_class": 6, "seed": 3, "image_size": 8}},
        "output_dir": str(out),
    }
    spec.update(extra)
    return spec


def run(spec, resume=True):
    plan, store = H.plan_from_dict(spec)
    return plan, store, H.run_scenario(plan, store, resume=resume)


@pytest.fixture(scope="module")
def sequential(tmp_path_factory):
    out = tmp_path_factory.mktemp("seq")
    return run(tiny_spec(out, "add_sequential", strategies=H.VARIANTS))


@pytest.fixture(scope="module")
def multi(tmp_path_factory):
    out = tmp_path_factory.mktemp("multi")
    return run(tiny_spec(out, "add_multi_once", strategies=("F", "FD")))


def test_add_one_single_strategy(tmp_path):
    _, _, records = run(tiny_spec(tmp_path))
    assert len(records) == 1
    (rec,) = records
    assert rec.error is None and set(rec.reports) == {"old", "new"}
    assert len(rec.checkpoints) == 2 and all((tmp_path / c).exists() for c in rec.checkpoints)


def test_sequential_persists_every_stage(sequential):
    plan, _, records = sequential
    assert [r.strategy for r in records] == list(H.VARIANTS)
    for rec in records:
        assert rec.error is None
        assert [Path(c).name for c in rec.checkpoints] == [f"stage{k}.npz" for k in range(6)]
        assert all((plan.output_dir / c).exists() for c in rec.checkpoints)
        assert [s["stage"] for s in rec.stages] == [1, 2, 3, 4, 5]


def test_vocabulary_version_steps_by_one(sequential):
    plan, _, records = sequential
    for rec in records:
        base = Vocabulary.load((plan.output_dir / rec.checkpoints[0]).with_suffix(".vocab"))
        versions = [base.version] + [s["vocab_version"] for s in rec.stages]
        sizes = [len(base)] + [s["vocab_size"] for s in rec.stages]
        assert np.all(np.diff(versions) == 1)
        assert np.all(np.diff(sizes) >= 0)


def test_no_old_training_data_is_read(sequential, multi):
    for plan, _, _ in (sequential, multi):
        assert plan.access_log.reads
        assert plan.access_log.violations == []


def test_access_log_flags_retired_reads():
    _, store = generate_synthetic(["square"], 3, 0, 8)
    log = H.AccessLog(store)
    log.begin("s", retired=[1])
    log.image(2)
    log.captions(1)
    assert log.violations == [("s", 1)] and len(log.reads) == 2


def test_multi_and_sequential_end_with_same_vocabulary(sequential, multi):
    finals = []
    for plan, _, records in (sequential, multi):
        rec = next(r for r in records if r.strategy == "F")
        finals.append(Vocabulary.load((plan.output_dir / rec.checkpoints[-1]).with_suffix(".vocab")).words())
    assert finals[0] == finals[1]


def test_multi_once_trains_a_single_stage(multi):
    _, _, records = multi
    for rec in records:
        assert len(rec.checkpoints) == 2 and len(rec.stages) == 1
        assert set(rec.per_class) == set(ADDED)


def test_checkpoint_round_trip_reproduces_reports(sequential):
    plan, store, records = sequential
    for rec in records:
        state, vocab = H._load_stage(plan.output_dir / rec.checkpoints[-1])
        again = M.evaluate(state, plan.base_task, vocab, store, max_len=plan.max_len)
        assert again == rec.reports["old"]
        assert MetricReport.from_dict(rec.stages[-1]["test"]) == M.evaluate(
            state, plan.stages()[-1], vocab, store, max_len=plan.max_len)


def test_resume_after_interruption_matches(tmp_path, sequential):
    plan, _, records = sequential
    out = tmp_path / "resumed"
    shutil.copytree(plan.output_dir, out)
    for variant in ("F", "P", "FD"):
        run_dir = out / "runs" / f"{variant}_seed0"
        # pretend the run died after stage 2
        for k in (3, 4, 5):
            (run_dir / f"stage{k}.npz").unlink()
            (run_dir / f"stage{k}.vocab").unlink()
        (run_dir / "record.json").unlink()
    spec = tiny_spec(out, "add_sequential", strategies=("F", "P", "FD"))
    _, _, resumed = run(spec)
    before = {r.strategy: r for r in records}
    for rec in resumed:
        assert rec.reports == before[rec.strategy].reports
        assert rec.stages == before[rec.strategy].stages


def test_fresh_run_is_deterministic(tmp_path, sequential):
    plan, _, records = sequential
    _, _, again = run(tiny_spec(tmp_path, "add_sequential", strategies=("D_F", "P")), resume=False)
    before = {r.strategy: r for r in records}
    for rec in again:
        assert rec.to_json() | {"wall_clock": 0} == before[rec.strategy].to_json() | {"wall_clock": 0}


def test_forgetting_delta():
    r = MetricReport(70.0, 30.0, 25.0, 50.0, 47.3)
    assert set(H.forgetting_delta(r, r).values()) == {0.0}
    after = replace(r, cider=9.4)
    assert H.forgetting_delta(r, after)["cider"] == pytest.approx(-37.9)


def test_deltas_recompute_from_stored_records(sequential):
    plan, _, records = sequential
    stored = H.load_records(plan.output_dir)

    def deltas(recs):
        return json.dumps({r.strategy: H.forgetting_delta(r.base_report, r.reports["old"]) for r in recs},
                          sort_keys=True)

    assert deltas(stored) == deltas(records)


def _record(strategy, seed, value):
    rep = MetricReport(value, value, value, value, value)
    return H.RunRecord(strategy, seed, {"old": rep, "new": rep})


def test_table_single_record(tmp_path):
    tsv = H.emit_table([_record("P", 0, 12.34)], tmp_path)
    header, row = tsv.read_text().splitlines()
    cells = row.split("\t")
    assert len(header.split("\t")) == 11 and cells[0] == "P"
    assert cells[1:] == ["12.3"] * 10
    assert (tmp_path / "table.txt").exists()


def test_table_means_and_order(tmp_path):
    recs = [_record("FD", 0, 1.0), _record("F", 0, 10.0), _record("F", 1, 20.0),
            _record("E_F", 0, 5.0), replace(_record("D_F", 0, 3.0), error="disk full")]
    lines = H.emit_table(recs, tmp_path).read_text().splitlines()[1:]
    assert [line.split("\t")[0] for line in lines] == ["F", "E_F", "FD"]
    assert lines[0].split("\t")[1] == "15.0"


def test_table_errors_without_records(tmp_path):
    with pytest.raises(ValueError):
        H.emit_table([], tmp_path)


def test_table_regenerates_byte_identical(tmp_path, sequential):
    plan, _, records = sequential
    first = H.emit_table(records, tmp_path / "a").read_bytes()
    second = H.emit_table(H.load_records(plan.output_dir), tmp_path / "b").read_bytes()
    assert first == second
    assert (tmp_path / "a" / "table.txt").read_bytes() == (tmp_path / "b" / "table.txt").read_bytes()


def test_checkpoint_write_failure_is_isolated(tmp_path, monkeypatch):
    real = H.save_checkpoint

    def flaky(state, path, rng_state=None):
        if "E_F_seed" in str(path) and "stage1" in str(path):
            raise CheckpointError(f"cannot write {path}")
        return real(state, path, rng_state)

    monkeypatch.setattr(H, "save_checkpoint", flaky)
    _, _, records = run(tiny_spec(tmp_path, strategies=("F", "E_F", "P")))
    status = {r.strategy: r.error for r in records}
    assert status["E_F"] and "cannot write" in status["E_F"]
    assert status["F"] is None and status["P"] is None
    rows = H.table_rows(records)
    assert [name for name, _ in rows] == ["F", "P"]


def test_plan_validation(tmp_path):
    plan, _ = H.plan_from_dict(tiny_spec(tmp_path))
    with pytest.raises(ConfigurationError):
        replace(plan, mode="add_some")
    with pytest.raises(ConfigurationError):
        replace(plan, additions=plan.additions * 2)
    with pytest.raises(ConfigurationError):
        replace(plan, additions=[replace(plan.base_task, task_id=1)])
    with pytest.raises(ConfigurationError):
        replace(plan, strategies=[])
    with pytest.raises(ConfigurationError):
        H.plan_from_dict(tiny_spec(tmp_path, strategies=("XYZ",)))
    with pytest.raises(ConfigurationError):
        H.plan_from_dict(tiny_spec(tmp_path, additions=["sqiggle"]))


def test_stages_follow_mode(tmp_path):
    plan, _ = H.plan_from_dict(tiny_spec(tmp_path, "add_sequential"))
    assert [t.task_id for t in plan.stages()] == [1, 2, 3, 4, 5]
    multi = replace(plan, mode="add_multi_once")
    (stage,) = multi.stages()
    assert stage.train == merge_tasks(plan.additions, 1).train


def test_seed_override_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(H.SEED_ENV, "7")
    plan, _ = H.plan_from_dict(tiny_spec(tmp_path, seeds=(0, 1, 2)))
    assert plan.seeds == [7]


def test_default_plan_shape(tmp_path):
    one = H.default_plan("add_one", tmp_path)
    seq = H.default_plan("add_sequential", tmp_path, seeds=[4])
    assert len(one["base_classes"]) == 6 and len(one["additions"]) == 1
    assert len(seq["additions"]) == 5 and seq["seeds"] == [4]
    assert set(one["base_classes"]).isdisjoint(seq["additions"])


# ----------------------------------------------------------------- evaluation pipeline


@pytest.fixture(scope="module")
def twenty_images():
    ann, store = generate_synthetic(["square", "star"], 30, 11, 8)
    task = merge_tasks(build_split(ann, sorted(ann.categories), 8), 0)
    # evaluate twenty images: use part of the training pool as the test split
    task = replace(task, train=tuple(sorted(task.train)[20:]), test=tuple(sorted(task.train)[:20]))
    words = {w for i in task.test for c in store.captions(i) for w in tokenize(c)}
    vocab = accumulate(Vocabulary(), words)
    state = Mod.init_state(Mod.ModelConfig(**{**TINY_MODEL, "conv_channels": (2, 3)}), vocab, 0)
    return store, task, vocab, state


def test_evaluate_matches_manual_scoring(twenty_images):
    store, task, vocab, state = twenty_images
    report = M.evaluate(state, task, vocab, store)
    seqs = Mod.caption_images(state, store.images(task.test))
    pairs = [(vocab.decode(s, strip_specials=True), [tokenize(c) for c in store.captions(i)])
             for s, i in zip(seqs, task.test)]
    assert report == M.score_pairs(pairs)
    assert M.evaluate(state, task, vocab, store) == report


def test_evaluate_echoing_model_scores_full_bleu1(twenty_images, monkeypatch):
    store, task, vocab, state = twenty_images
    by_pixels = {store.image(i).tobytes(): i for i in task.test}

    def echo(state, images, max_len=20, batch_size=64):
        return [vocab.encode(tokenize(store.captions(by_pixels[img.tobytes()])[0])) for img in images]

    monkeypatch.setattr(Mod, "caption_images", echo)
    assert M.evaluate(state, task, vocab, store).bleu1 == pytest.approx(100.0)


def test_evaluate_rejects_empty_test_split(twenty_images):
    store, task, vocab, state = twenty_images
    with pytest.raises(ValueError):
        M.evaluate(state, replace(task, test=()), vocab, store)


# ----------------------------------------------------------------- command line


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli_main(["synth", "--classes", "square,star", "--n", "6", "--seed", "1", "--out", str(data)]) == 0
    assert (data / "annotations.json").exists() and (data / "images.npz").exists()

    assert cli_main(["split", "--annotations", str(data / "annotations.json"),
                     "--classes", "star,square", "--out", str(tmp_path / "tasks")]) == 0
    assert sorted(p.name for p in (tmp_path / "tasks").iterdir()) == ["task_000.json", "task_001.json"]

    cands = tmp_path / "cands.json"
    refs = tmp_path / "refs.json"
    cands.write_text(json.dumps({"1": "a red square", "2": "a dog"}))
    refs.write_text(json.dumps({"1": ["a red square"], "2": ["a cat", "the dog"]}))
    capsys.readouterr()
    assert cli_main(["score", "--candidates", str(cands), "--references", str(refs)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) == set(MetricReport.FIELDS)
    assert cli_main(["score", "--candidates", str(cands), "--references", str(data / "annotations.json")]) == 0
    capsys.readouterr()

    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps(tiny_spec("out", strategies=("F", "E_F"))))
    assert cli_main(["run", "--plan", str(plan)]) == 0
    table = capsys.readouterr().out
    assert table.splitlines()[0].startswith("strategy") and "E_F" in table
    assert cli_main(["report", "--dir", str(tmp_path / "out")]) == 0
    assert capsys.readouterr().out == table
    assert cli_main(["report", "--dir", str(tmp_path / "nothing")]) == 1


@pytest.mark.parametrize("failing, code", [("stage1", 1), ("stage0", 2)])
def test_cli_run_exit_code_reflects_failures(tmp_path, monkeypatch, failing, code):
    real = H.save_checkpoint

    def broken(state, path, rng_state=None):
        if Path(path).stem == failing:
            raise CheckpointError("read-only file system")
        return real(state, path, rng_state)

    monkeypatch.setattr(H, "save_checkpoint", broken)
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps(tiny_spec("out")))
    # a failed run gives 1; an unsaveable base model stops the whole command
    assert cli_main(["run", "--plan", str(plan)]) == code


def test_cli_reports_bad_input(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert cli_main(["run", "--plan", str(missing)]) == 2
    assert "error" in capsys.readouterr().err


@pytest.mark.parametrize("mode", H.MODES)
def test_shipped_plans_match_defaults(mode):
    path = Path(__file__).parent.parent / "plans" / f"{mode}.json"
    shipped = json.loads(path.read_text())
    assert shipped == H.default_plan(mode, f"../results/{mode}", base_dir="../results/base")
    plan, _ = H.load_plan(path)
    assert plan.base_dir == path.parent / "../results/base" and len(plan.stages()) == (1 if mode != "add_sequential" else 5)
