"""Configuration-driven experiment orchestration.

One run walks the test split in dataset order: select in-context examples,
render the prompt, fit it to the character budget, complete through the
(cache-aware) backend, score, and finally assemble the metrics report.
Requests may run in parallel; artifacts are collated in dataset order so
identical configs and fixtures yield byte-identical config.json,
records.jsonl, and report.json regardless of parallelism. Wall-clock
diagnostics go to run_meta.json, which carries no determinism guarantee.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .backend import (
    CachedBackend,
    CacheKey,
    CompletionBackend,
    CompletionRequest,
    HttpBackend,
    ReplayBackend,
    ResponseCache,
)
from .corpus import Dialogue, load_dataset, serialize_dialogue, split_dataset
from .exceptions import ConfigError, DataError
from .metrics import (
    MetricsReport,
    build_report,
    flatten_report,
    render_csv,
    render_markdown,
    report_from_dict,
    report_to_dict,
)
from .prompting import (
    KIND_LOGITS,
    TEMPLATE_KINDS,
    AssembledPrompt,
    InContextExample,
    fit_to_budget,
    render_few_shot,
    render_zero_shot,
)
from .retrieval import (
    build_bm25_index,
    load_embeddings,
    select_bm25,
    select_embedding,
    select_random,
)
from .scoring import ScoredDialogue, score_generation, score_logits

SELECTORS = ("none", "random", "bm25", "embedding")
DEFAULT_RANDOM_SEEDS = (1, 2, 3)
DEFAULT_MAX_NEW_TOKENS = {"logits": 4, "rating_first": 512, "analysis_first": 512}

_BACKEND_TYPES = ("http", "replay")
_BACKEND_KEYS = {
    "type",
    "model",
    "base_url",
    "fixture_path",
    "temperature",
    "cache_path",
    "timeout",
    "max_retries",
    "backoff_seconds",
}
# backend settings that shape responses, as opposed to transport tuning
_BACKEND_IDENTITY_KEYS = ("type", "model", "base_url", "fixture_path")


@dataclass
class ExperimentConfig:
    dataset_path: str
    template_kind: str
    backend: dict
    test_fraction: float = 0.10
    split_seed: int = 13
    selector: str = "none"
    shots: int = 0
    random_seeds: tuple[int, ...] = DEFAULT_RANDOM_SEEDS
    K: int = 5
    binarize_threshold: int = 3
    max_prompt_chars: int | None = None
    parallelism: int = 4
    embeddings_path: str | None = None
    max_new_tokens: int | None = None

    def __post_init__(self) -> None:
        self.random_seeds = tuple(self.random_seeds)

    def validate(self) -> None:
        if not self.dataset_path:
            raise ConfigError("dataset_path is required")
        if self.template_kind not in TEMPLATE_KINDS:
            raise ConfigError(
                f"template_kind must be one of {TEMPLATE_KINDS}, got {self.template_kind!r}"
            )
        if self.selector not in SELECTORS:
            raise ConfigError(f"selector must be one of {SELECTORS}, got {self.selector!r}")
        if (self.selector == "none") != (self.shots == 0):
            raise ConfigError("selector 'none' requires shots=0 and vice versa")
        if self.shots < 0:
            raise ConfigError(f"shots must be >= 0, got {self.shots}")
        if self.selector == "embedding" and not self.embeddings_path:
            raise ConfigError("selector 'embedding' requires embeddings_path")
        if self.selector == "random" and not self.random_seeds:
            raise ConfigError("selector 'random' requires at least one random seed")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if not 1 <= self.K <= 5:
            raise ConfigError(f"K must be in 1..5, got {self.K}")
        if self.binarize_threshold not in (1, 2, 3, 4):
            raise ConfigError(f"binarize_threshold must be in 1..4, got {self.binarize_threshold}")
        if self.parallelism < 1:
            raise ConfigError(f"parallelism must be >= 1, got {self.parallelism}")
        if self.max_prompt_chars is not None and self.max_prompt_chars < 1:
            raise ConfigError(f"max_prompt_chars must be >= 1, got {self.max_prompt_chars}")
        if self.max_new_tokens is not None and self.max_new_tokens < 1:
            raise ConfigError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        self._validate_backend()

    def _validate_backend(self) -> None:
        if not isinstance(self.backend, dict):
            raise ConfigError("backend must be an object")
        unknown = set(self.backend) - _BACKEND_KEYS
        if unknown:
            raise ConfigError(f"unknown backend keys: {sorted(unknown)}")
        backend_type = self.backend.get("type")
        if backend_type not in _BACKEND_TYPES:
            raise ConfigError(f"backend.type must be one of {_BACKEND_TYPES}, got {backend_type!r}")
        model = self.backend.get("model")
        if not isinstance(model, str) or not model:
            raise ConfigError("backend.model must be a non-empty string")
        if backend_type == "http" and not self.backend.get("base_url"):
            raise ConfigError("backend.base_url is required for the http backend")
        if backend_type == "replay" and not self.backend.get("fixture_path"):
            raise ConfigError("backend.fixture_path is required for the replay backend")
        temperature = self.backend.get("temperature", 0.7)
        if not isinstance(temperature, (int, float)) or temperature < 0:
            raise ConfigError(f"backend.temperature must be >= 0, got {temperature!r}")

    @property
    def effective_temperature(self) -> float:
        return float(self.backend.get("temperature", 0.7))

    @property
    def effective_max_new_tokens(self) -> int:
        if self.max_new_tokens is not None:
            return self.max_new_tokens
        return DEFAULT_MAX_NEW_TOKENS[self.template_kind]

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ExperimentConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"dataset_path", "template_kind", "backend"} - set(raw)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        config = cls(**dict(raw))
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(raw)


def config_snapshot(config: ExperimentConfig, selection_seed: int | None) -> dict:
    """The experiment-identity dict persisted as config.json.

    Execution knobs (parallelism, cache path, transport tuning) are
    excluded so reruns with different plumbing stay byte-identical.
    """
    backend = {
        key: config.backend[key]
        for key in _BACKEND_IDENTITY_KEYS
        if key in config.backend
    }
    backend["temperature"] = config.effective_temperature
    return {
        "dataset_path": config.dataset_path,
        "test_fraction": config.test_fraction,
        "split_seed": config.split_seed,
        "template_kind": config.template_kind,
        "selector": config.selector,
        "shots": config.shots,
        "random_seeds": list(config.random_seeds),
        "selection_seed": selection_seed,
        "K": config.K,
        "binarize_threshold": config.binarize_threshold,
        "max_prompt_chars": config.max_prompt_chars,
        "embeddings_path": config.embeddings_path,
        "max_new_tokens": config.effective_max_new_tokens,
        "backend": backend,
    }


def build_backend(config: ExperimentConfig) -> CompletionBackend:
    """Construct the configured backend, cache-wrapped when cache_path is set."""
    settings = config.backend
    backend_type = settings["type"]
    backend: CompletionBackend
    if backend_type == "replay":
        backend = ReplayBackend(settings["fixture_path"])
    else:
        backend = HttpBackend(
            base_url=settings["base_url"],
            timeout=settings.get("timeout", 60.0),
            max_retries=settings.get("max_retries", 3),
            backoff_seconds=settings.get("backoff_seconds", 0.5),
        )
    cache_path = settings.get("cache_path")
    if cache_path:
        backend = CachedBackend(backend, ResponseCache(cache_path))
    return backend


@dataclass
class RunArtifact:
    """Everything one experiment run produced."""

    config: dict
    records: list[dict]
    report: MetricsReport
    duration_seconds: float
    path: Path | None = None


@dataclass
class AggregateReport:
    """Per-seed reports plus their field-wise arithmetic mean."""

    seeds: tuple[int | None, ...]
    reports: tuple[MetricsReport, ...]
    mean: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "reports": [report_to_dict(report) for report in self.reports],
            "mean": dict(self.mean),
        }


def scored_from_record(record: Mapping) -> ScoredDialogue:
    return ScoredDialogue(
        dialogue_id=record["dialogue_id"],
        method=record["method"],
        continuous_rating=record["continuous_rating"],
        likert=record["likert"],
        analysis_text=record["analysis_text"],
        parse_ok=record["parse_ok"],
    )


def _record_dict(
    scored: ScoredDialogue, prompt: AssembledPrompt, response_key: str
) -> dict:
    return {
        "dialogue_id": scored.dialogue_id,
        "method": scored.method,
        "example_ids": list(prompt.example_ids),
        "truncated": prompt.truncated,
        "prompt_sha256": hashlib.sha256(prompt.text.encode("utf-8")).hexdigest(),
        "response_key": response_key,
        "continuous_rating": scored.continuous_rating,
        "likert": scored.likert,
        "analysis_text": scored.analysis_text,
        "parse_ok": scored.parse_ok,
    }


def _derived_seed(run_seed: int, dialogue_id: str) -> int:
    digest = hashlib.sha256(f"{run_seed}:{dialogue_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


class _ExampleSelector:
    """Per-target example selection over the rated training pool."""

    def __init__(self, config: ExperimentConfig, pool: Sequence[Dialogue], seed: int | None):
        self._config = config
        self._pool_by_id = {d.id: d for d in pool}
        self._seed = seed
        if config.selector == "bm25":
            self._index = build_bm25_index((d.id, serialize_dialogue(d)) for d in pool)
        elif config.selector == "embedding":
            embeddings = load_embeddings(config.embeddings_path)
            missing = [d.id for d in pool if d.id not in embeddings]
            if missing:
                raise DataError(f"embeddings missing for train dialogues: {missing[:5]}")
            self._embeddings = embeddings
            self._pool_embeddings = {d.id: embeddings[d.id] for d in pool}
        elif config.selector == "random":
            self._pool_ids = [d.id for d in pool]

    def select(self, target: Dialogue) -> list[InContextExample]:
        config = self._config
        if config.selector == "none":
            return []
        if config.selector == "bm25":
            result = select_bm25(self._index, serialize_dialogue(target), config.shots)
        elif config.selector == "embedding":
            if target.id not in self._embeddings:
                raise DataError(f"embeddings missing for test dialogue {target.id!r}")
            result = select_embedding(
                self._pool_embeddings, self._embeddings[target.id], config.shots
            )
        else:
            result = select_random(
                self._pool_ids, config.shots, _derived_seed(self._seed, target.id)
            )
        chosen = result.ids
        leaked = [doc_id for doc_id in chosen if doc_id not in self._pool_by_id]
        if leaked or target.id in chosen:
            raise DataError(f"selector leaked non-train ids for target {target.id!r}")
        return [InContextExample.from_dialogue(self._pool_by_id[doc_id]) for doc_id in chosen]


def _dumps(payload: object) -> str:
    return json.dumps(payload, ensure_ascii=False, sort_keys=True)


def run_experiment(
    config: ExperimentConfig,
    *,
    artifact_dir: str | Path | None = None,
    selection_seed: int | None = None,
    backend: CompletionBackend | None = None,
) -> RunArtifact:
    """Run one experiment and, when artifact_dir is given, persist it.

    A rerun against an existing artifact directory with an unchanged config
    skips dialogues already present in records.jsonl. Backend failures
    propagate after flushing the records completed so far.
    """
    config.validate()
    started = time.monotonic()
    if config.selector == "random":
        seed = selection_seed if selection_seed is not None else config.random_seeds[0]
    else:
        if selection_seed is not None:
            raise ConfigError("selection_seed only applies to the random selector")
        seed = None

    dialogues = load_dataset(config.dataset_path)
    split = split_dataset(dialogues, config.test_fraction, config.split_seed)
    unrated = [d.id for d in split.test if d.gold is None]
    if unrated:
        raise DataError(f"test dialogues without gold ratings cannot be evaluated: {unrated[:5]}")
    golds = {d.id: d.gold for d in split.test}
    pool = [d for d in split.train if d.gold is not None]
    selector = _ExampleSelector(config, pool, seed)
    if backend is None:
        backend = build_backend(config)
    snapshot = config_snapshot(config, seed)

    existing: dict[str, dict] = {}
    records_path: Path | None = None
    if artifact_dir is not None:
        artifact_dir = Path(artifact_dir)
        artifact_dir.mkdir(parents=True, exist_ok=True)
        config_path = artifact_dir / "config.json"
        if config_path.exists():
            prior = json.loads(config_path.read_text(encoding="utf-8"))
            if prior != snapshot:
                raise ConfigError(
                    f"artifact directory {artifact_dir} holds a different config; "
                    "use a fresh directory"
                )
        else:
            config_path.write_text(
                json.dumps(snapshot, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
                encoding="utf-8",
            )
        records_path = artifact_dir / "records.jsonl"
        if records_path.exists():
            with records_path.open(encoding="utf-8") as handle:
                for line_no, line in enumerate(handle, start=1):
                    if not line.strip():
                        continue
                    try:
                        record = json.loads(line)
                        dialogue_id = record["dialogue_id"]
                    except (json.JSONDecodeError, KeyError, TypeError) as exc:
                        raise DataError(f"{records_path}:{line_no}: malformed record ({exc})") from exc
                    if dialogue_id not in golds:
                        raise DataError(
                            f"{records_path}:{line_no}: record for unknown dialogue {dialogue_id!r}"
                        )
                    existing[dialogue_id] = record

    model = config.backend["model"]
    temperature = config.effective_temperature
    max_new_tokens = config.effective_max_new_tokens
    top_logprobs = config.K if config.template_kind == KIND_LOGITS else 0

    def evaluate(target: Dialogue) -> dict:
        examples = selector.select(target)
        if examples:
            prompt = render_few_shot(config.template_kind, target, examples)
        else:
            prompt = render_zero_shot(config.template_kind, target)
        if config.max_prompt_chars is not None:
            prompt = fit_to_budget(prompt, config.max_prompt_chars)
        request = CompletionRequest(
            prompt=prompt.text,
            model=model,
            max_new_tokens=max_new_tokens,
            temperature=temperature,
            top_logprobs=top_logprobs,
        )
        response = backend.complete(request)
        if config.template_kind == KIND_LOGITS:
            scored = score_logits(target.id, response.token_candidates[0], top_k=config.K)
        else:
            scored = score_generation(target.id, response.text, config.template_kind)
        response_key = CacheKey.from_request(backend.backend_id, request).digest
        return _record_dict(scored, prompt, response_key)

    pending = [d for d in split.test if d.id not in existing]
    records: list[dict] = []
    n_new = 0
    with ThreadPoolExecutor(max_workers=config.parallelism) as executor:
        futures = {d.id: executor.submit(evaluate, d) for d in pending}
        writer = records_path.open("a", encoding="utf-8", newline="\n") if records_path else None
        try:
            for target in split.test:
                if target.id in existing:
                    records.append(existing[target.id])
                    continue
                record = futures[target.id].result()
                if writer is not None:
                    writer.write(_dumps(record) + "\n")
                    writer.flush()
                records.append(record)
                n_new += 1
        finally:
            if writer is not None:
                writer.close()

    scored = [scored_from_record(record) for record in records]
    report = build_report(scored, golds, config.binarize_threshold)
    duration = time.monotonic() - started
    if artifact_dir is not None:
        (artifact_dir / "report.json").write_text(
            json.dumps(report_to_dict(report), ensure_ascii=False, sort_keys=True, indent=2)
            + "\n",
            encoding="utf-8",
        )
        (artifact_dir / "run_meta.json").write_text(
            json.dumps(
                {
                    "duration_seconds": duration,
                    "parallelism": config.parallelism,
                    "n_test": len(split.test),
                    "n_new_requests": n_new,
                },
                sort_keys=True,
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )
    return RunArtifact(
        config=snapshot,
        records=records,
        report=report,
        duration_seconds=duration,
        path=Path(artifact_dir) if artifact_dir is not None else None,
    )


def load_artifact(path: str | Path) -> RunArtifact:
    path = Path(path)
    config_path = path / "config.json"
    report_path = path / "report.json"
    records_path = path / "records.jsonl"
    for required in (config_path, report_path, records_path):
        if not required.exists():
            raise DataError(f"not a run artifact: missing {required}")
    config = json.loads(config_path.read_text(encoding="utf-8"))
    report = report_from_dict(json.loads(report_path.read_text(encoding="utf-8")))
    records = []
    with records_path.open(encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                records.append(json.loads(line))
    duration = 0.0
    meta_path = path / "run_meta.json"
    if meta_path.exists():
        duration = json.loads(meta_path.read_text(encoding="utf-8")).get("duration_seconds", 0.0)
    return RunArtifact(
        config=config, records=records, report=report, duration_seconds=duration, path=path
    )


def aggregate_random_runs(artifacts: Sequence[RunArtifact]) -> AggregateReport:
    """Field-wise arithmetic mean across runs differing only in seed."""
    if not artifacts:
        raise ConfigError("need at least one artifact to aggregate")
    reference = {k: v for k, v in artifacts[0].config.items() if k != "selection_seed"}
    for artifact in artifacts[1:]:
        other = {k: v for k, v in artifact.config.items() if k != "selection_seed"}
        if other != reference:
            raise ConfigError("artifacts differ in more than the selection seed")
    flats = [flatten_report(artifact.report) for artifact in artifacts]
    mean = {
        key: sum(flat[key] for flat in flats) / len(flats) for key in flats[0]
    }
    return AggregateReport(
        seeds=tuple(artifact.config.get("selection_seed") for artifact in artifacts),
        reports=tuple(artifact.report for artifact in artifacts),
        mean=mean,
    )


def run_all_seeds(
    config: ExperimentConfig, out_dir: str | Path
) -> tuple[list[RunArtifact], AggregateReport | None]:
    """Run the experiment; for multi-seed random selection, one run per seed
    into seed-<n>/ subdirectories plus an aggregate.json."""
    out_dir = Path(out_dir)
    if config.selector == "random" and len(config.random_seeds) > 1:
        artifacts = [
            run_experiment(config, artifact_dir=out_dir / f"seed-{seed}", selection_seed=seed)
            for seed in config.random_seeds
        ]
        aggregate = aggregate_random_runs(artifacts)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "aggregate.json").write_text(
            json.dumps(aggregate.to_dict(), ensure_ascii=False, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
        return artifacts, aggregate
    return [run_experiment(config, artifact_dir=out_dir)], None


def emit_report(
    report: MetricsReport, format: str, destination: str | Path | None = None
) -> str:
    """Render a report as json, csv, or markdown; optionally write it out."""
    if format == "json":
        payload = json.dumps(report_to_dict(report), ensure_ascii=False, sort_keys=True, indent=2) + "\n"
    elif format == "csv":
        payload = render_csv(report)
    elif format in ("markdown", "md"):
        payload = render_markdown(report) + "\n"
    else:
        raise ConfigError(f"unknown report format {format!r} (expected json, csv, or markdown)")
    if destination is not None:
        Path(destination).write_text(payload, encoding="utf-8")
    return payload
