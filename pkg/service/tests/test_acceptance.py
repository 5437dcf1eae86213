"""Acceptance suite for the inference service.

Covers the three release criteria: contract conformance identical to the
in-process stub, a fine-tune smoke job whose loss decreases, and the full
orchestration pipeline run end-to-end against this service beating the
majority-class baseline on a linearly separable task.  Each test prints
one `[acceptance] <criterion>: PASS/FAIL` line (visible with -s).
"""

import contextlib
import json
from collections import Counter
from pathlib import Path

import requests

from conftest import SEPARABLE_SPACE, wait_for_job, write_separable_split


@contextlib.contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"[acceptance] {name}: FAIL")
        raise
    print(f"[acceptance] {name}: PASS")


def test_contract_conformance(live_server):
    with criterion("Contract conformance (identical suite as the stub backend)"):
        from promptfuse.backend import HttpBackend, StubBackend, check_backend_conformance

        # The same checks the stub passes, run against the live service
        # through the toolkit's HTTP client.
        check_backend_conformance(StubBackend(seed=0))
        check_backend_conformance(HttpBackend(live_server), slot_counts=(1, 2, 3, 4))


def test_finetune_smoke(live_server, tmp_path):
    with criterion("Fine-tune smoke (50 steps, done, loss decreased, batch default 8)"):
        train_path = tmp_path / "train.jsonl"
        write_separable_split(train_path, 10)  # 20 instances
        payload = {
            "train_path": str(train_path),
            "template_ids": ["c1"],
            "steps": 50,
            "learning_rate": 5e-3,
            "seed": 7,
            "n_image_slots": 1,
            "n_prompt_tokens": 2,
            "label_space": SEPARABLE_SPACE,
            # batch_size deliberately omitted: must default to 8
        }
        resp = requests.post(f"{live_server}/v1/finetune", json=payload, timeout=10)
        assert resp.status_code == 202, resp.text
        status = wait_for_job(live_server, resp.json()["job_id"])
        assert status["status"] == "done", status.get("error")
        assert status["config"]["batch_size"] == 8
        losses = status["losses"]
        assert len(losses) == 50
        assert losses[-1] < losses[0], f"loss did not decrease: {losses[0]} -> {losses[-1]}"
        assert "c1" in status["checkpoints"]


def test_end_to_end_run_beats_majority_baseline(live_server, tmp_path):
    with criterion("End-to-end run vs majority baseline (real small MLM)"):
        from promptfuse.experiment import ExperimentConfig, FinetuneSettings, run_experiment

        # Train pool: 20/20; test: 18 Positive vs 12 Negative so the
        # majority-class baseline sits at 0.6.
        write_separable_split(tmp_path / "full.jsonl", 20, prefix="tr")
        test_records = write_separable_split(tmp_path / "test-all.jsonl", 18, prefix="te")
        kept = [r for r in test_records if r["label"] == "Positive"][:18]
        kept += [r for r in test_records if r["label"] == "Negative"][:12]
        with (tmp_path / "test.jsonl").open("w", encoding="utf-8") as fh:
            for rec in kept:
                fh.write(json.dumps(rec) + "\n")

        gold = Counter(r["label"] for r in kept)
        majority_baseline = max(gold.values()) / sum(gold.values())
        assert majority_baseline == 0.6

        config = ExperimentConfig(
            train_manifest=str(tmp_path / "full.jsonl"),
            test_manifest=str(tmp_path / "test.jsonl"),
            out_dir=str(tmp_path / "out"),
            fraction=0.5,
            seeds=(13,),
            repeats=1,
            templates=("c1", "c3"),
            n_image_slots=1,
            n_prompt_tokens=2,
            prior="empirical",
            backend=live_server,
            fusion="probabilistic",
            finetune=FinetuneSettings(
                enabled=True, steps=120, batch_size=8, learning_rate=5e-3,
                timeout=600.0,
            ),
        )
        report = run_experiment(config)
        assert len(report.runs) == 1
        accuracy = report.runs[0].accuracy
        print(f"  fused accuracy {accuracy:.3f} vs majority baseline {majority_baseline:.3f}")
        assert accuracy > majority_baseline, (
            f"fused accuracy {accuracy} did not beat the majority baseline {majority_baseline}"
        )
        assert (Path(tmp_path) / "out" / "report.json").exists()
