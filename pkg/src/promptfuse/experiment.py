"""End-to-end experiment orchestration.

One experiment = for each (seed, repeat): draw a few-shot split, warm the
demonstration-embedding cache, render one assembled prompt per template
for every test instance, score the mask position, fuse the per-template
distributions, and evaluate accuracy and weighted F1 against gold.  All
intermediate artifacts (splits, prompts, demonstration selections, raw
distributions, predictions) are persisted per run so fusion variants can
be recomputed offline.

Backends that expose fine-tuning the wire protocol of ``INTERFACE.md``
can be fine-tuned per run before scoring (``[finetune]`` in the config);
with the stub backend runs are pure functions of the config.
"""

from __future__ import annotations

import contextlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

from . import fusion as fusion_mod
from .backend import Backend, HttpBackend, StubBackend, resolve_backend, score_batch
from .data import COARSE, FINE, Instance, load_manifest, write_manifest
from .errors import BackendError, ConfigError, DataError, PromptfuseError
from .metrics import AggregateReport, RunResult, accuracy, aggregate, report_to_json, weighted_f1
from .retrieval import EmbeddingCache, select_demonstrations
from .sampling import LARGEST_REMAINDER, PINNED, draw_split, plan_for_manifest
from .templates import (
    AssembledPrompt,
    PromptTemplate,
    assemble,
    builtin_templates,
    render_demonstration,
    render_query,
    truncate_assembled,
)

log = logging.getLogger(__name__)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_SEEDS = (13, 21, 42, 87, 100)


@dataclass(frozen=True)
class FinetuneSettings:
    enabled: bool = False
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 5e-6
    poll_interval: float = 0.5
    timeout: float = 900.0


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs; loadable from a TOML file."""

    train_manifest: str
    test_manifest: str
    out_dir: str
    name: str = "experiment"
    label_space: Optional[str] = None
    fraction: float = 0.01
    policy: str = LARGEST_REMAINDER
    pinned_counts: Optional[Mapping[str, int]] = None
    joint: bool = False
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    repeats: int = 3
    templates: tuple[str, ...] = ("c3", "c4")
    n_image_slots: int = 1
    n_prompt_tokens: int = 2
    prior: str = "empirical"
    pinned_prior: Optional[Mapping[str, float]] = None
    backend: str = "stub:0"
    fusion: str = "probabilistic"
    batch_size: int = 8
    max_prompt_tokens: Optional[int] = None
    checkpoints: Optional[Mapping[str, str]] = None
    finetune: FinetuneSettings = field(default_factory=FinetuneSettings)

    def __post_init__(self):
        if not self.templates:
            raise ConfigError("at least one template id is required")
        if self.n_image_slots < 1:
            raise ConfigError("n_image_slots must be >= 1")
        if not (0.0 < self.fraction <= 1.0):
            raise ConfigError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if self.policy not in (LARGEST_REMAINDER, PINNED):
            raise ConfigError(f"unknown sampling policy {self.policy!r}")
        if self.policy == PINNED and not self.pinned_counts:
            raise ConfigError("pinned policy requires [pinned_counts]")
        if self.fusion not in ("probabilistic", "average"):
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if self.prior not in ("empirical", "uniform", "pinned"):
            raise ConfigError(f"unknown prior mode {self.prior!r}")
        if self.prior == "pinned" and not self.pinned_prior:
            raise ConfigError("pinned prior requires [pinned_prior]")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "templates", tuple(self.templates))

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ExperimentConfig":
        data = dict(raw)
        ft_raw = data.pop("finetune", None)
        if ft_raw is not None:
            data["finetune"] = FinetuneSettings(**ft_raw)
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"bad experiment config: {exc}") from exc

    def echo(self) -> dict:
        out = {
            "name": self.name,
            "train_manifest": self.train_manifest,
            "test_manifest": self.test_manifest,
            "fraction": self.fraction,
            "policy": self.policy,
            "joint": self.joint,
            "seeds": list(self.seeds),
            "repeats": self.repeats,
            "templates": list(self.templates),
            "n_image_slots": self.n_image_slots,
            "n_prompt_tokens": self.n_prompt_tokens,
            "prior": self.prior,
            "backend": self.backend,
            "fusion": self.fusion,
            "batch_size": self.batch_size,
            "finetune_enabled": self.finetune.enabled,
        }
        return out


def load_config_file(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


@contextlib.contextmanager
def _stage(name: str):
    """Tag propagated errors with the pipeline stage that raised them."""
    try:
        yield
    except PromptfuseError as exc:
        if not str(exc).startswith("["):
            exc.args = (f"[{name}] {exc}",) + exc.args[1:]
        raise


def _resolve_templates(config: ExperimentConfig, kind: str) -> dict[str, PromptTemplate]:
    known = builtin_templates(
        n_image_slots=config.n_image_slots, n_prompt_tokens=config.n_prompt_tokens
    )
    out = {}
    for tid in config.templates:
        if tid not in known:
            raise ConfigError(f"unknown template id {tid!r}; built-ins: {sorted(known)}")
        tpl = known[tid]
        if tpl.grain != kind:
            raise ConfigError(
                f"template {tid!r} is {tpl.grain}-grained but the dataset is {kind}-grained"
            )
        out[tid] = tpl
    return out


def _image_slots_for(inst: Instance, n_slots: int):
    if inst.image_features is None:
        return None
    if len(inst.image_features) != n_slots:
        raise DataError(
            f"instance {inst.id!r} has {len(inst.image_features)} image feature "
            f"vectors but the experiment uses {n_slots} image slots"
        )
    return inst.image_features


def _write_jsonl(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def build_assembled_prompts(
    queries: Sequence[Instance],
    support: Sequence[Instance],
    template: PromptTemplate,
    label_space,
    backend: Backend,
    cache: Optional[EmbeddingCache] = None,
    demo_choices: Optional[Mapping[str, Mapping[str, str]]] = None,
    max_tokens: Optional[int] = None,
) -> tuple[dict[str, AssembledPrompt], dict[str, dict[str, str]]]:
    """Assembled prompt per query id, plus the demo id choices made."""
    cache = cache if cache is not None else EmbeddingCache(backend)
    support_by_id = {inst.id: inst for inst in support}
    prompts: dict[str, AssembledPrompt] = {}
    choices: dict[str, dict[str, str]] = {}
    for query in queries:
        if demo_choices is not None and query.id in demo_choices:
            demo_map = {
                label: support_by_id[sid] for label, sid in demo_choices[query.id].items()
            }
        else:
            demo_map = select_demonstrations(
                query, support, backend, label_space, cache=cache
            )
        rendered = render_query(query, template)
        demos = [
            render_demonstration(inst, template, label, label_space)
            for label, inst in demo_map.items()
        ]
        assembled = assemble(rendered, demos, label_space)
        if max_tokens is not None:
            assembled = truncate_assembled(assembled, max_tokens)
        prompts[query.id] = assembled
        choices[query.id] = {label: inst.id for label, inst in demo_map.items()}
    return prompts, choices


def _score_template(
    backend: Backend,
    prompts: Mapping[str, AssembledPrompt],
    queries: Sequence[Instance],
    label_space,
    n_slots: int,
    checkpoint: Optional[str],
) -> dict[str, fusion_mod.LabelDistribution]:
    items = [(q.id, prompts[q.id], list(label_space.words)) for q in queries]
    slots = {}
    for q in queries:
        feats = _image_slots_for(q, n_slots)
        if feats is not None:
            slots[q.id] = feats
    results = score_batch(backend, items, image_slots=slots, checkpoint=checkpoint)
    failed = [r.key for r in results if not r.ok]
    if failed:
        raise BackendError(f"scoring failed for instances {failed[:5]} (of {len(failed)})")
    return {
        r.key: fusion_mod.distribution_from_scores(r.logits, label_space) for r in results
    }


def _make_prior(config: ExperimentConfig, train_insts: Sequence[Instance], label_space):
    if config.prior == "uniform":
        return fusion_mod.uniform_prior(label_space)
    if config.prior == "pinned":
        return fusion_mod.pinned_prior(config.pinned_prior, label_space)
    counts: dict[str, int] = {}
    for inst in train_insts:
        counts[inst.label] = counts.get(inst.label, 0) + 1
    return fusion_mod.empirical_prior(counts, label_space)


def _run_finetune(
    backend: Backend,
    config: ExperimentConfig,
    seed_dir: Path,
    seed: int,
    repeat: int,
    label_space,
) -> dict[str, str]:
    """Submit one fine-tune job per run and wait for its checkpoints."""
    if not isinstance(backend, HttpBackend):
        raise ConfigError("fine-tuning requires an http(s) backend")
    ft = config.finetune
    payload = {
        "train_path": str(seed_dir / "train.jsonl"),
        "dev_path": str(seed_dir / "dev.jsonl"),
        "template_ids": list(config.templates),
        "steps": ft.steps,
        "batch_size": ft.batch_size,
        "learning_rate": ft.learning_rate,
        "seed": seed * 1000 + repeat,
        "n_image_slots": config.n_image_slots,
        "n_prompt_tokens": config.n_prompt_tokens,
        "label_space": {
            "name": label_space.name,
            "kind": label_space.kind,
            "labels": list(label_space.labels),
            "verbalizer": dict(label_space.verbalizer),
        },
    }
    job_id = backend.finetune(payload)
    deadline = time.monotonic() + ft.timeout
    while True:
        status = backend.job_status(job_id)
        state = status.get("status")
        if state == "done":
            checkpoints = status.get("checkpoints") or {}
            missing = [t for t in config.templates if t not in checkpoints]
            if missing:
                raise BackendError(f"fine-tune job {job_id} returned no checkpoint for {missing}")
            return {t: checkpoints[t] for t in config.templates}
        if state == "failed":
            raise BackendError(f"fine-tune job {job_id} failed: {status.get('error')}")
        if time.monotonic() > deadline:
            raise BackendError(f"fine-tune job {job_id} timed out after {ft.timeout}s")
        time.sleep(ft.poll_interval)


def run_experiment(config: ExperimentConfig) -> AggregateReport:
    """Run the full pipeline over every (seed, repeat) and aggregate."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with _stage("backend"):
        backend = resolve_backend(config.backend)
        if config.finetune.enabled and isinstance(backend, StubBackend):
            raise ConfigError("fine-tuning is not available on the stub backend")

    with _stage("data"):
        train_manifest = load_manifest(config.train_manifest, label_space=config.label_space)
        test_manifest = load_manifest(
            config.test_manifest, label_space=train_manifest.label_space
        )
        gold = {inst.id: inst.label for inst in test_manifest.instances}
        label_space = train_manifest.label_space

    with _stage("config"):
        templates = _resolve_templates(
            config, FINE if label_space.kind == FINE else COARSE
        )

    with _stage("sample"):
        plan = plan_for_manifest(
            train_manifest,
            config.fraction,
            policy=config.policy,
            pinned=config.pinned_counts,
            joint=config.joint,
        )

    runs: list[RunResult] = []
    for seed in config.seeds:
        seed_dir = out_dir / f"seed-{seed}"
        with _stage("sample"):
            split = draw_split(train_manifest, plan, seed)
            train_insts = [train_manifest.by_id(i) for i in split.train]
            dev_insts = [train_manifest.by_id(i) for i in split.dev]
            write_manifest(train_insts, seed_dir / "train.jsonl")
            write_manifest(dev_insts, seed_dir / "dev.jsonl")

        with _stage("retrieve"):
            prior = _make_prior(config, train_insts, label_space)
            cache = EmbeddingCache(backend)
            cache.warm(train_insts)
            cache.warm(test_manifest.instances)

        with _stage("compile"):
            assembled: dict[str, dict[str, AssembledPrompt]] = {}
            demo_choices = None
            for tid, template in templates.items():
                prompts, choices = build_assembled_prompts(
                    test_manifest.instances,
                    train_insts,
                    template,
                    label_space,
                    backend,
                    cache=cache,
                    demo_choices=demo_choices,
                    max_tokens=config.max_prompt_tokens,
                )
                # Demo selection is template-independent; reuse the choices.
                demo_choices = choices
                assembled[tid] = prompts
                _write_jsonl(
                    seed_dir / f"prompts-{tid}.jsonl",
                    (prompts[q.id].to_record() for q in test_manifest.instances),
                )
            _write_jsonl(
                seed_dir / "demos.jsonl",
                (
                    {"query_id": qid, "demonstrations": choices}
                    for qid, choices in (demo_choices or {}).items()
                ),
            )

        for repeat in range(config.repeats):
            run_dir = seed_dir / f"repeat-{repeat}"
            checkpoints = dict(config.checkpoints or {})
            if config.finetune.enabled:
                with _stage("finetune"):
                    checkpoints = _run_finetune(
                        backend, config, seed_dir, seed, repeat, label_space
                    )

            with _stage("classify"):
                per_template: dict[str, dict[str, fusion_mod.LabelDistribution]] = {}
                for tid in templates:
                    dists = _score_template(
                        backend,
                        assembled[tid],
                        test_manifest.instances,
                        label_space,
                        config.n_image_slots,
                        checkpoints.get(tid),
                    )
                    per_template[tid] = dists
                    _write_jsonl(
                        run_dir / f"distributions-{tid}.jsonl",
                        (
                            {"id": qid, "probs": dist.as_dict()}
                            for qid, dist in dists.items()
                        ),
                    )

                predictions: dict[str, str] = {}
                fused_records = []
                for inst in test_manifest.instances:
                    dists = [per_template[tid][inst.id] for tid in templates]
                    if config.fusion == "average":
                        fused = fusion_mod.average_fuse(dists)
                    else:
                        fused = fusion_mod.fuse(dists, prior)
                    predictions[inst.id] = fusion_mod.predict(fused)
                    fused_records.append(
                        {
                            "id": inst.id,
                            "prediction": predictions[inst.id],
                            "probs": fused.as_dict(),
                        }
                    )
                _write_jsonl(run_dir / "predictions.jsonl", fused_records)

            with _stage("evaluate"):
                result = RunResult(
                    seed=seed,
                    repeat_index=repeat,
                    accuracy=accuracy(predictions, gold),
                    weighted_f1=weighted_f1(predictions, gold, label_space),
                    predictions=predictions,
                )
                (run_dir / "metrics.json").write_text(
                    json.dumps(
                        {"accuracy": result.accuracy, "weighted_f1": result.weighted_f1},
                        indent=2,
                        sort_keys=True,
                    )
                )
            runs.append(result)
            log.info(
                "seed %s repeat %s: acc %.4f w-f1 %.4f",
                seed, repeat, result.accuracy, result.weighted_f1,
            )

    report = aggregate(runs)
    (out_dir / "report.json").write_text(report_to_json(report, config_echo=config.echo()))
    return report
