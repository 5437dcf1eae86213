"""Command-line interface.

Subcommands mirror the pipeline stages: ``sample`` draws few-shot splits,
``compile`` renders prompts, ``retrieve`` picks demonstrations,
``classify`` scores and fuses, ``evaluate`` computes metrics, and ``run``
executes the whole experiment from a TOML config.

Exit codes: 0 success, 2 configuration error, 3 backend error, 4 data
error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import fusion as fusion_mod
from .backend import resolve_backend, score_batch
from .data import (
    BUILTIN_LABEL_SPACES,
    LabelSpace,
    load_manifest,
    write_manifest,
)
from .errors import ConfigError, DataError, PromptfuseError
from .experiment import (
    ExperimentConfig,
    build_assembled_prompts,
    load_config_file,
    run_experiment,
)
from .metrics import accuracy, format_report, weighted_f1
from .retrieval import EmbeddingCache, select_demonstrations
from .sampling import LARGEST_REMAINDER, PINNED, draw_split, plan_for_manifest
from .templates import builtin_templates, render_query


def _read_jsonl(path: Path):
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield lineno, json.loads(line)


def _write_jsonl(path: Path, records):
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def _load_pin_file(path: str, joint: bool):
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not joint:
        return {str(k): int(v) for k, v in raw.items()}
    pinned = {}
    for aspect, per_label in raw.items():
        for label, count in per_label.items():
            pinned[(str(aspect), str(label))] = int(count)
    return pinned


def cmd_sample(args) -> int:
    manifest = load_manifest(args.manifest, label_space=args.label_space)
    pinned = _load_pin_file(args.pin_file, args.joint) if args.pin_file else None
    if args.policy == PINNED and pinned is None:
        raise ConfigError("--policy pinned requires --pin-file")
    plan = plan_for_manifest(
        manifest, args.fraction, policy=args.policy, pinned=pinned, joint=args.joint
    )
    split = draw_split(manifest, plan, args.seed)
    out = Path(args.out)
    write_manifest((manifest.by_id(i) for i in split.train), out / "train.jsonl")
    write_manifest((manifest.by_id(i) for i in split.dev), out / "dev.jsonl")
    counts = json.dumps(
        {str(k): v for k, v in plan.per_class.items()}, sort_keys=True
    )
    print(f"sampled {len(split.train)} train + {len(split.dev)} dev -> {out}  counts {counts}")
    return 0


def cmd_compile(args) -> int:
    manifest = load_manifest(args.manifest, label_space=args.label_space)
    templates = builtin_templates(
        n_image_slots=args.image_slots, n_prompt_tokens=args.prompt_tokens
    )
    if args.template not in templates:
        raise ConfigError(f"unknown template {args.template!r}; built-ins: {sorted(templates)}")
    template = templates[args.template]

    if args.support is None:
        records = (render_query(inst, template).to_record() for inst in manifest.instances)
        _write_jsonl(args.out, records)
        print(f"compiled {len(manifest.instances)} query prompts -> {args.out}")
        return 0

    support_manifest = load_manifest(args.support, label_space=manifest.label_space)
    demo_choices = None
    if args.demos:
        demo_choices = {
            rec["query_id"]: rec["demonstrations"] for _, rec in _read_jsonl(args.demos)
        }
    backend = resolve_backend(args.backend)
    prompts, _ = build_assembled_prompts(
        manifest.instances,
        list(support_manifest.instances),
        template,
        manifest.label_space,
        backend,
        demo_choices=demo_choices,
        max_tokens=args.max_tokens,
    )
    space = manifest.label_space
    records = []
    for inst in manifest.instances:
        rec = prompts[inst.id].to_record()
        rec["label_space"] = {
            "name": space.name,
            "kind": space.kind,
            "labels": list(space.labels),
            "verbalizer": dict(space.verbalizer),
        }
        if inst.image_features is not None:
            rec["image_features"] = [list(v) for v in inst.image_features]
        records.append(rec)
    _write_jsonl(args.out, records)
    print(f"compiled {len(records)} assembled prompts -> {args.out}")
    return 0


def cmd_retrieve(args) -> int:
    support_manifest = load_manifest(args.train, label_space=args.label_space)
    queries = load_manifest(args.queries, label_space=support_manifest.label_space)
    backend = resolve_backend(args.backend)
    cache = EmbeddingCache(backend)
    cache.warm(support_manifest.instances)
    records = []
    for query in queries.instances:
        demos = select_demonstrations(
            query,
            list(support_manifest.instances),
            backend,
            support_manifest.label_space,
            cache=cache,
        )
        records.append(
            {
                "query_id": query.id,
                "demonstrations": {label: inst.id for label, inst in demos.items()},
            }
        )
    _write_jsonl(args.out, records)
    print(f"selected demonstrations for {len(records)} queries -> {args.out}")
    return 0


def _label_space_from_record(rec: dict) -> LabelSpace:
    info = rec.get("label_space")
    if not info:
        raise DataError(
            "prompt record carries no label_space; compile prompts with --support"
        )
    return LabelSpace(
        name=info.get("name", "from-prompts"),
        kind=info["kind"],
        labels=tuple(info["labels"]),
        verbalizer=dict(info["verbalizer"]),
    )


def cmd_classify(args) -> int:
    backend = resolve_backend(args.backend)
    checkpoints = args.checkpoint or []
    if checkpoints and len(checkpoints) != len(args.prompts):
        raise ConfigError("--checkpoint must be given once per prompt file")

    files = []
    label_space: LabelSpace | None = None
    for path in args.prompts:
        records = {}
        for lineno, rec in _read_jsonl(path):
            if label_space is None:
                label_space = _label_space_from_record(rec)
            records[rec["id"]] = rec
        files.append(records)
    ids = list(files[0])
    for path, records in zip(args.prompts, files):
        if set(records) != set(ids):
            raise DataError(f"prompt files disagree on instance ids (first mismatch: {path})")

    if args.prior == "empirical":
        if not args.train:
            raise ConfigError("--prior empirical requires --train (the few-shot split)")
        train = load_manifest(args.train, label_space=label_space)
        counts: dict[str, int] = {}
        for inst in train.instances:
            counts[inst.label] = counts.get(inst.label, 0) + 1
        prior = fusion_mod.empirical_prior(counts, label_space)
    elif args.prior == "pinned":
        if not args.pinned_prior:
            raise ConfigError("--prior pinned requires --pinned-prior FILE")
        raw = json.loads(Path(args.pinned_prior).read_text(encoding="utf-8"))
        prior = fusion_mod.pinned_prior(raw, label_space)
    else:
        prior = fusion_mod.uniform_prior(label_space)

    words = list(label_space.words)
    per_file: list[dict[str, fusion_mod.LabelDistribution]] = []
    errors: dict[str, str] = {}
    for idx, records in enumerate(files):
        items = [(qid, records[qid]["full_text"], words) for qid in ids]
        slots = {
            qid: records[qid]["image_features"]
            for qid in ids
            if records[qid].get("image_features")
        }
        tag = checkpoints[idx] if checkpoints else None
        results = score_batch(backend, items, image_slots=slots, checkpoint=tag)
        dists = {}
        for res in results:
            if res.ok:
                dists[res.key] = fusion_mod.distribution_from_scores(res.logits, label_space)
            else:
                errors.setdefault(res.key, res.error)
        per_file.append(dists)

    out_records = []
    n_ok = 0
    for qid in ids:
        if qid in errors:
            out_records.append({"id": qid, "error": errors[qid]})
            continue
        dists = [dists_for_file[qid] for dists_for_file in per_file]
        fused = (
            fusion_mod.average_fuse(dists)
            if args.fusion == "average"
            else fusion_mod.fuse(dists, prior)
        )
        out_records.append(
            {
                "id": qid,
                "prediction": fusion_mod.predict(fused),
                "probs": fused.as_dict(),
                "per_prompt": [d.as_dict() for d in dists],
            }
        )
        n_ok += 1
    _write_jsonl(args.out, out_records)
    print(f"classified {n_ok}/{len(ids)} instances -> {args.out}"
          + (f" ({len(errors)} failed)" if errors else ""))
    return 0


def cmd_evaluate(args) -> int:
    gold_manifest = load_manifest(args.gold, label_space=args.label_space)
    gold = {inst.id: inst.label for inst in gold_manifest.instances}
    preds = {}
    for lineno, rec in _read_jsonl(args.preds):
        if "error" in rec:
            raise DataError(f"prediction for {rec.get('id')!r} failed: {rec['error']}")
        preds[rec["id"]] = rec["prediction"]
    acc = accuracy(preds, gold)
    f1 = weighted_f1(preds, gold, gold_manifest.label_space)
    payload = {"accuracy": acc, "weighted_f1": f1, "n": len(gold)}
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(f"accuracy {acc:.4f}  weighted-f1 {f1:.4f}  n {len(gold)}")
    return 0


def cmd_run(args) -> int:
    config = load_config_file(args.config)
    if args.out:
        config = ExperimentConfig.from_dict({**_config_as_dict(config), "out_dir": args.out})
    report = run_experiment(config)
    print(format_report(report))
    print(f"artifacts in {config.out_dir}")
    return 0


def _config_as_dict(config: ExperimentConfig) -> dict:
    from dataclasses import asdict

    raw = asdict(config)
    raw["seeds"] = list(raw["seeds"])
    raw["templates"] = list(raw["templates"])
    return raw


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptfuse",
        description="Few-shot multimodal prompt orchestration and fusion",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    space_names = sorted(BUILTIN_LABEL_SPACES)

    p = sub.add_parser("sample", help="draw a distribution-consistent few-shot split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fraction", type=float, default=0.01)
    p.add_argument("--policy", choices=[LARGEST_REMAINDER, PINNED], default=LARGEST_REMAINDER)
    p.add_argument("--pin-file", help="JSON per-class counts for --policy pinned")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--joint", action="store_true", help="stratify over (aspect, label) cells")
    p.add_argument("--label-space", choices=space_names)
    p.add_argument("--out", required=True, help="directory for train.jsonl/dev.jsonl")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("compile", help="render prompts (optionally with demonstrations)")
    p.add_argument("--template", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--label-space", choices=space_names)
    p.add_argument("--image-slots", type=int, default=1)
    p.add_argument("--prompt-tokens", type=int, default=2)
    p.add_argument("--support", help="few-shot train split; enables assembled prompts")
    p.add_argument("--demos", help="precomputed demo selections (from `retrieve`)")
    p.add_argument("--backend", default="stub:0", help="embedder for demo selection")
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("retrieve", help="select per-label demonstrations by similarity")
    p.add_argument("--train", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--backend", default="stub:0")
    p.add_argument("--label-space", choices=space_names)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("classify", help="score prompt files and fuse their posteriors")
    p.add_argument("--prompts", nargs="+", required=True)
    p.add_argument("--backend", default="stub:0")
    p.add_argument("--prior", choices=["empirical", "uniform", "pinned"], default="uniform")
    p.add_argument("--train", help="few-shot split for the empirical prior")
    p.add_argument("--pinned-prior", help="JSON label->probability file")
    p.add_argument("--fusion", choices=["probabilistic", "average"], default="probabilistic")
    p.add_argument("--checkpoint", action="append", help="one per prompt file, in order")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="accuracy and weighted F1 of predictions")
    p.add_argument("--preds", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--label-space", choices=space_names)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="full multi-seed experiment from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the config's out_dir")
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except PromptfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
