from __future__ import annotations

import json

import pytest

from dialoscope.backend import CachedBackend, ReplayBackend, ResponseCache, write_fixture
from dialoscope.exceptions import CapabilityError, ConfigError, DataError
from dialoscope.harness import (
    ExperimentConfig,
    RunArtifact,
    aggregate_random_runs,
    build_backend,
    config_snapshot,
    emit_report,
    load_artifact,
    run_all_seeds,
    run_experiment,
    scored_from_record,
)
from dialoscope.corpus import split_dataset
from dialoscope.metrics import (
    build_report,
    flatten_report,
    report_from_dict,
    report_to_dict,
)

from helpers import (
    GoldEchoBackend,
    make_dataset,
    pairwise_generation_fixture,
    write_dataset,
    zero_shot_logits_fixture,
)

MODEL = "planted-judge"


def _base_config(dataset_path, fixture_path, **overrides):
    raw = {
        "dataset_path": str(dataset_path),
        "template_kind": "logits",
        "backend": {"type": "replay", "fixture_path": str(fixture_path), "model": MODEL},
        "test_fraction": 0.2,
        "split_seed": 11,
        "parallelism": 2,
    }
    raw.update(overrides)
    return ExperimentConfig.from_dict(raw)


@pytest.fixture()
def planted_run(tmp_path):
    """30 rated dialogues, zero-shot logits replay fixture answering golds."""
    dialogues = make_dataset(30, seed=6)
    dataset_path = write_dataset(tmp_path / "ds.jsonl", dialogues)
    fixture_path = tmp_path / "fixture.jsonl"
    write_fixture(
        fixture_path, zero_shot_logits_fixture(dialogues, 0.2, 11, MODEL, top_k=5)
    )
    return dialogues, dataset_path, fixture_path


def test_config_validation_catches_inconsistencies(tmp_path):
    good = {
        "dataset_path": "x.jsonl",
        "template_kind": "logits",
        "backend": {"type": "replay", "fixture_path": "f.jsonl", "model": "m"},
    }
    ExperimentConfig.from_dict(good)
    for broken in (
        {**good, "selector": "bm25"},  # shots=0 with a selector
        {**good, "shots": 2},  # selector none with shots
        {**good, "selector": "embedding", "shots": 1},  # no embeddings_path
        {**good, "selector": "random", "shots": 1, "random_seeds": []},
        {**good, "template_kind": "freeform"},
        {**good, "test_fraction": 1.5},
        {**good, "K": 9},
        {**good, "binarize_threshold": 0},
        {**good, "parallelism": 0},
        {**good, "typo_key": 1},
        {**good, "backend": {"type": "replay", "model": "m"}},  # no fixture_path
        {**good, "backend": {"type": "http", "model": "m"}},  # no base_url
        {**good, "backend": {"type": "replay", "fixture_path": "f", "model": ""}},
        {**good, "backend": {"type": "replay", "fixture_path": "f", "model": "m", "nope": 1}},
    ):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(broken)


def test_config_defaults_mirror_protocol():
    config = ExperimentConfig.from_dict(
        {
            "dataset_path": "x.jsonl",
            "template_kind": "rating_first",
            "backend": {"type": "replay", "fixture_path": "f.jsonl", "model": "m"},
        }
    )
    assert config.test_fraction == 0.10
    assert config.random_seeds == (1, 2, 3)
    assert config.K == 5
    assert config.binarize_threshold == 3
    assert config.effective_temperature == 0.7
    assert config.effective_max_new_tokens == 512
    assert ExperimentConfig.from_dict(
        {
            "dataset_path": "x.jsonl",
            "template_kind": "logits",
            "backend": {"type": "replay", "fixture_path": "f.jsonl", "model": "m"},
        }
    ).effective_max_new_tokens == 4


def test_snapshot_excludes_execution_knobs(planted_run, tmp_path):
    _, dataset_path, fixture_path = planted_run
    config = _base_config(dataset_path, fixture_path, parallelism=7)
    config.backend["cache_path"] = str(tmp_path / "cache.jsonl")
    config.backend["max_retries"] = 9
    snapshot = config_snapshot(config, None)
    flat = json.dumps(snapshot)
    assert "parallelism" not in flat
    assert "cache_path" not in flat
    assert "max_retries" not in flat
    assert snapshot["backend"]["temperature"] == 0.7
    assert snapshot["max_new_tokens"] == 4


def test_planted_replay_run_recovers_all_golds(planted_run, tmp_path):
    dialogues, dataset_path, fixture_path = planted_run
    config = _base_config(dataset_path, fixture_path)
    artifact = run_experiment(config, artifact_dir=tmp_path / "run")
    report = artifact.report
    assert report.n_scored == 6
    assert report.n_parse_failed == 0
    assert report.defect.precision == report.defect.recall == 1.0
    assert report.non_defect.f1 == 1.0
    assert report.f1_micro == 1.0
    assert report.spearman == pytest.approx(1.0, abs=1e-12)
    assert (tmp_path / "run" / "config.json").exists()
    assert (tmp_path / "run" / "records.jsonl").exists()
    assert (tmp_path / "run" / "report.json").exists()
    split = split_dataset(dialogues, 0.2, 11)
    assert [r["dialogue_id"] for r in artifact.records] == [d.id for d in split.test]
    for record in artifact.records:
        assert record["method"] == "logits"
        assert record["example_ids"] == []
        assert record["parse_ok"] is True
        assert len(record["prompt_sha256"]) == 64
        assert len(record["response_key"]) == 64


def test_repeated_runs_are_byte_identical_across_parallelism(planted_run, tmp_path):
    _, dataset_path, fixture_path = planted_run
    for parallelism, out in ((1, "run1"), (8, "run8")):
        config = _base_config(dataset_path, fixture_path, parallelism=parallelism)
        run_experiment(config, artifact_dir=tmp_path / out)
    for name in ("config.json", "records.jsonl", "report.json"):
        first = (tmp_path / "run1" / name).read_bytes()
        second = (tmp_path / "run8" / name).read_bytes()
        assert first == second, name


def test_artifact_round_trip_and_recomputability(planted_run, tmp_path):
    dialogues, dataset_path, fixture_path = planted_run
    config = _base_config(dataset_path, fixture_path)
    artifact = run_experiment(config, artifact_dir=tmp_path / "run")
    loaded = load_artifact(tmp_path / "run")
    assert loaded.config == artifact.config
    assert loaded.records == artifact.records
    assert loaded.report == artifact.report
    golds = {d.id: d.gold for d in split_dataset(dialogues, 0.2, 11).test}
    recomputed = build_report(
        [scored_from_record(r) for r in loaded.records], golds, threshold=3
    )
    assert recomputed == artifact.report


def test_rerun_with_same_config_skips_completed_dialogues(planted_run, tmp_path):
    dialogues, dataset_path, _ = planted_run
    config = _base_config(dataset_path, "unused.jsonl")
    backend = GoldEchoBackend(dialogues, mode="logits")
    first = run_experiment(config, artifact_dir=tmp_path / "run", backend=backend)
    n_requests = len(backend.requests)
    assert n_requests == 6
    second = run_experiment(config, artifact_dir=tmp_path / "run", backend=backend)
    assert len(backend.requests) == n_requests  # nothing re-asked
    assert second.records == first.records
    assert second.report == first.report


def test_rerun_with_changed_config_is_rejected(planted_run, tmp_path):
    dialogues, dataset_path, fixture_path = planted_run
    run_experiment(
        _base_config(dataset_path, fixture_path), artifact_dir=tmp_path / "run"
    )
    changed = _base_config(dataset_path, fixture_path, split_seed=12)
    with pytest.raises(ConfigError, match="different config"):
        run_experiment(changed, artifact_dir=tmp_path / "run")


def test_backend_failure_leaves_partial_artifact(planted_run, tmp_path):
    dialogues, dataset_path, _ = planted_run
    config = _base_config(dataset_path, "unused.jsonl", parallelism=1)
    split = split_dataset(dialogues, 0.2, 11)
    victim = split.test[3].id
    backend = GoldEchoBackend(dialogues, mode="logits", fail_for=victim)
    with pytest.raises(CapabilityError):
        run_experiment(config, artifact_dir=tmp_path / "run", backend=backend)
    lines = (tmp_path / "run" / "records.jsonl").read_text().splitlines()
    assert [json.loads(line)["dialogue_id"] for line in lines] == [
        d.id for d in split.test[:3]
    ]
    assert not (tmp_path / "run" / "report.json").exists()
    # resuming after the failure completes the run without re-asking the prefix
    backend.fail_for = None
    artifact = run_experiment(config, artifact_dir=tmp_path / "run", backend=backend)
    assert [r["dialogue_id"] for r in artifact.records] == [d.id for d in split.test]


def test_bm25_four_shot_records_four_train_examples(tmp_path):
    dialogues = make_dataset(40, seed=8)
    dataset_path = write_dataset(tmp_path / "ds.jsonl", dialogues)
    config = _base_config(
        dataset_path, "unused.jsonl", selector="bm25", shots=4,
        template_kind="rating_first",
    )
    backend = GoldEchoBackend(dialogues, mode="generation")
    artifact = run_experiment(config, artifact_dir=tmp_path / "run", backend=backend)
    split = split_dataset(dialogues, 0.2, 11)
    train_ids = {d.id for d in split.train}
    test_ids = {d.id for d in split.test}
    assert len(artifact.records) == len(split.test)
    for record in artifact.records:
        assert len(record["example_ids"]) == 4
        assert set(record["example_ids"]) <= train_ids
        assert not set(record["example_ids"]) & test_ids
        assert record["dialogue_id"] not in record["example_ids"]
    assert artifact.report.f1_micro == 1.0  # echo answers the gold


def test_embedding_selector_runs_end_to_end(tmp_path):
    dialogues = make_dataset(25, seed=4)
    dataset_path = write_dataset(tmp_path / "ds.jsonl", dialogues)
    embeddings_path = tmp_path / "emb.jsonl"
    with embeddings_path.open("w", encoding="utf-8") as handle:
        for i, dialogue in enumerate(dialogues):
            vector = [1.0, float(i % 5), float(i % 3)]
            handle.write(json.dumps({"id": dialogue.id, "vector": vector}) + "\n")
    config = _base_config(
        dataset_path, "unused.jsonl", selector="embedding", shots=2,
        embeddings_path=str(embeddings_path),
    )
    backend = GoldEchoBackend(dialogues, mode="logits")
    artifact = run_experiment(config, artifact_dir=tmp_path / "run", backend=backend)
    split = split_dataset(dialogues, 0.2, 11)
    train_ids = {d.id for d in split.train}
    for record in artifact.records:
        assert len(record["example_ids"]) == 2
        assert set(record["example_ids"]) <= train_ids


def test_embedding_selector_requires_vectors_for_every_dialogue(tmp_path):
    dialogues = make_dataset(12, seed=4)
    dataset_path = write_dataset(tmp_path / "ds.jsonl", dialogues)
    embeddings_path = tmp_path / "emb.jsonl"
    with embeddings_path.open("w", encoding="utf-8") as handle:
        for dialogue in dialogues[:4]:
            handle.write(json.dumps({"id": dialogue.id, "vector": [1.0, 2.0]}) + "\n")
    config = _base_config(
        dataset_path, "unused.jsonl", selector="embedding", shots=1,
        embeddings_path=str(embeddings_path),
    )
    with pytest.raises(DataError, match="embeddings missing"):
        run_experiment(config, backend=GoldEchoBackend(dialogues))


def test_prompt_budget_truncates_examples_not_target(tmp_path):
    dialogues = make_dataset(30, seed=2)
    dataset_path = write_dataset(tmp_path / "ds.jsonl", dialogues)
    backend = GoldEchoBackend(dialogues, mode="generation")
    free = run_experiment(
        _base_config(
            dataset_path, "unused.jsonl", selector="bm25", shots=4,
            template_kind="rating_first",
        ),
        backend=backend,
    )
    budget = max(len(r.prompt) for r in backend.requests) - 1
    backend_tight = GoldEchoBackend(dialogues, mode="generation")
    tight = run_experiment(
        _base_config(
            dataset_path, "unused.jsonl", selector="bm25", shots=4,
            template_kind="rating_first", max_prompt_chars=budget,
        ),
        backend=backend_tight,
    )
    assert any(record["truncated"] for record in tight.records)
    truncated = [r for r in tight.records if r["truncated"]]
    assert all(len(r["example_ids"]) < 4 for r in truncated)
    assert all(len(p.prompt) <= budget for p in backend_tight.requests)
    assert tight.report.n_scored == free.report.n_scored


def test_cache_transparency_with_warm_cache(planted_run, tmp_path):
    _, dataset_path, fixture_path = planted_run
    cache_path = tmp_path / "cache.jsonl"

    def config_with_cache():
        config = _base_config(dataset_path, fixture_path)
        config.backend["cache_path"] = str(cache_path)
        return config

    run_experiment(config_with_cache(), artifact_dir=tmp_path / "cold")

    class ExplodingBackend:
        backend_id = "replay"  # same identity so cache keys match

        def complete(self, request):
            raise AssertionError("warm run must be served from the cache")

    warm_backend = CachedBackend(ExplodingBackend(), ResponseCache(cache_path))
    run_experiment(config_with_cache(), artifact_dir=tmp_path / "warm", backend=warm_backend)
    for name in ("config.json", "records.jsonl", "report.json"):
        assert (tmp_path / "cold" / name).read_bytes() == (tmp_path / "warm" / name).read_bytes()


def test_build_backend_wires_replay_and_cache(planted_run, tmp_path):
    _, dataset_path, fixture_path = planted_run
    config = _base_config(dataset_path, fixture_path)
    assert isinstance(build_backend(config), ReplayBackend)
    config.backend["cache_path"] = str(tmp_path / "cache.jsonl")
    assert isinstance(build_backend(config), CachedBackend)


def _artifact_with(f1_values, seed, config=None):
    report = report_from_dict(
        {
            "defect_rate": 0.5,
            "defect": {"precision": f1_values, "recall": f1_values, "f1": f1_values},
            "non_defect": {"precision": f1_values, "recall": f1_values, "f1": f1_values},
            "weighted_avg": {"precision": f1_values, "recall": f1_values, "f1": f1_values},
            "macro_avg": {"precision": f1_values, "recall": f1_values, "f1": f1_values},
            "f1_micro": f1_values,
            "spearman": f1_values,
            "pearson": f1_values,
            "n_scored": 10,
            "n_parse_failed": 0,
        }
    )
    snapshot = dict(config or {"selector": "random", "shots": 1})
    snapshot["selection_seed"] = seed
    return RunArtifact(config=snapshot, records=[], report=report, duration_seconds=0.0)


def test_aggregate_means_each_field():
    artifacts = [_artifact_with(v, seed) for seed, v in ((1, 0.4), (2, 0.5), (3, 0.6))]
    aggregate = aggregate_random_runs(artifacts)
    assert aggregate.seeds == (1, 2, 3)
    assert aggregate.mean["macro_f1"] == pytest.approx(0.5, abs=1e-12)
    assert aggregate.mean["f1_micro"] == pytest.approx(0.5, abs=1e-12)
    flats = [flatten_report(a.report) for a in artifacts]
    for key, value in aggregate.mean.items():
        assert value == pytest.approx(sum(f[key] for f in flats) / 3, abs=1e-12)


def test_aggregate_single_artifact_is_identity():
    artifact = _artifact_with(0.7, seed=1)
    aggregate = aggregate_random_runs([artifact])
    assert aggregate.mean == flatten_report(artifact.report)


def test_aggregate_rejects_mismatched_configs():
    one = _artifact_with(0.4, seed=1, config={"selector": "random", "shots": 1})
    other = _artifact_with(0.5, seed=2, config={"selector": "random", "shots": 4})
    with pytest.raises(ConfigError, match="differ"):
        aggregate_random_runs([one, other])
    with pytest.raises(ConfigError):
        aggregate_random_runs([])


def test_run_all_seeds_aggregates_three_random_runs(tmp_path):
    dialogues = make_dataset(30, seed=5)
    dataset_path = write_dataset(tmp_path / "ds.jsonl", dialogues)
    fixture_path = tmp_path / "fixture.jsonl"

    def plant(target, example):
        # example-dependent rating so seeds genuinely disagree
        flip = int(example.id[1:]) % 2 == 1
        return 6 - target.gold if flip else target.gold

    write_fixture(
        fixture_path,
        pairwise_generation_fixture(dialogues, 0.2, 11, "rating_first", MODEL, plant),
    )
    config = _base_config(
        dataset_path, fixture_path, selector="random", shots=1,
        template_kind="rating_first", random_seeds=[1, 2, 3],
    )
    artifacts, aggregate = run_all_seeds(config, tmp_path / "out")
    assert [a.path.name for a in artifacts] == ["seed-1", "seed-2", "seed-3"]
    assert aggregate is not None
    flats = [flatten_report(a.report) for a in artifacts]
    assert len({json.dumps(f, sort_keys=True) for f in flats}) > 1  # real variance
    for key, value in aggregate.mean.items():
        assert value == pytest.approx(sum(f[key] for f in flats) / 3, abs=1e-12)
    saved = json.loads((tmp_path / "out" / "aggregate.json").read_text())
    assert saved["seeds"] == [1, 2, 3]
    assert saved["mean"]["macro_f1"] == pytest.approx(aggregate.mean["macro_f1"])


def test_run_all_seeds_single_seed_writes_one_artifact(planted_run, tmp_path):
    _, dataset_path, fixture_path = planted_run
    config = _base_config(dataset_path, fixture_path)
    artifacts, aggregate = run_all_seeds(config, tmp_path / "solo")
    assert aggregate is None
    assert len(artifacts) == 1
    assert artifacts[0].path == tmp_path / "solo"


def test_emit_report_round_trips(planted_run, tmp_path):
    _, dataset_path, fixture_path = planted_run
    artifact = run_experiment(_base_config(dataset_path, fixture_path))
    json_payload = emit_report(artifact.report, "json", tmp_path / "report.json")
    assert report_from_dict(json.loads(json_payload)) == artifact.report
    assert (tmp_path / "report.json").read_text(encoding="utf-8") == json_payload
    markdown = emit_report(artifact.report, "markdown")
    assert markdown.splitlines()[0].startswith("| Defect Rate |")
    assert emit_report(artifact.report, "md") == markdown
    csv_payload = emit_report(artifact.report, "csv")
    assert csv_payload.splitlines()[0].startswith("defect_rate,")
    with pytest.raises(ConfigError):
        emit_report(artifact.report, "yaml")
    assert emit_report(artifact.report, "json", tmp_path / "report.json") == json_payload