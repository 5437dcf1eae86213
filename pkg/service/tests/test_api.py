import math

import pytest
from fastapi.testclient import TestClient

from mlmserve.app import ModelService, create_app

from conftest import SEPARABLE_SPACE, write_separable_split


@pytest.fixture()
def client():
    return TestClient(create_app(ModelService(seed=0)))


PROMPT = "<s> <IMG_0> is a dog </s> <s> nice day </s> It was <mask>. </s>"
WORDS = ["terrible", "okay", "great"]


class TestHealthz:
    def test_reports_capabilities(self, client):
        data = client.get("/v1/healthz").json()
        assert data["status"] == "ok"
        assert data["deterministic"] is True
        assert "mlm-scores" in data["capabilities"]
        assert data["embed_dim"] == 64


class TestMlmScores:
    def test_three_words_three_finite_logits(self, client):
        resp = client.post("/v1/mlm-scores", json={"prompt": PROMPT, "words": WORDS})
        assert resp.status_code == 200
        logits = resp.json()["logits"]
        assert set(logits) == set(WORDS)
        assert all(math.isfinite(v) for v in logits.values())

    def test_identical_requests_identical_logits(self, client):
        payload = {"prompt": PROMPT, "words": WORDS}
        a = client.post("/v1/mlm-scores", json=payload).json()
        b = client.post("/v1/mlm-scores", json=payload).json()
        assert a == b

    def test_client_side_softmax_sums_to_one(self, client):
        logits = client.post(
            "/v1/mlm-scores", json={"prompt": PROMPT, "words": WORDS}
        ).json()["logits"]
        mx = max(logits.values())
        exps = {w: math.exp(v - mx) for w, v in logits.items()}
        total = sum(exps.values())
        assert sum(v / total for v in exps.values()) == pytest.approx(1.0, abs=1e-6)

    def test_mask_count_error_is_422(self, client):
        resp = client.post("/v1/mlm-scores", json={"prompt": "<s> no mask </s>", "words": WORDS})
        assert resp.status_code == 422

    def test_empty_words_is_400(self, client):
        resp = client.post("/v1/mlm-scores", json={"prompt": PROMPT, "words": []})
        assert resp.status_code == 400

    def test_oversize_prompt_is_413(self, client):
        prompt = "<s> " + "word " * 400 + "<mask> </s>"
        resp = client.post("/v1/mlm-scores", json={"prompt": prompt, "words": WORDS})
        assert resp.status_code == 413

    def test_bad_slot_dimension_is_400(self, client):
        resp = client.post("/v1/mlm-scores", json={
            "prompt": PROMPT, "words": WORDS, "image_slots": [[0.0] * 3],
        })
        assert resp.status_code == 400

    def test_unknown_checkpoint_is_400(self, client):
        resp = client.post("/v1/mlm-scores", json={
            "prompt": PROMPT, "words": WORDS, "checkpoint": "nope/c1",
        })
        assert resp.status_code == 400


class TestEmbed:
    def test_two_texts_two_vectors(self, client):
        resp = client.post("/v1/embed", json={"texts": ["a", "b"]})
        vectors = resp.json()["vectors"]
        assert len(vectors) == 2
        assert len(vectors[0]) == len(vectors[1])

    def test_duplicates_identical(self, client):
        vectors = client.post("/v1/embed", json={"texts": ["same", "same"]}).json()["vectors"]
        assert vectors[0] == vectors[1]

    def test_unit_norm(self, client):
        vectors = client.post("/v1/embed", json={"texts": ["good day"]}).json()["vectors"]
        assert sum(x * x for x in vectors[0]) == pytest.approx(1.0, abs=1e-6)

    def test_semantic_ordering_regression(self, client):
        # Regression fixture pinned at service-pin time: shared-word pairs
        # dominate unrelated pairs under the current encoder.
        vecs = client.post(
            "/v1/embed", json={"texts": ["good day", "nice day", "stock ticker"]}
        ).json()["vectors"]

        def cos(u, v):
            return sum(a * b for a, b in zip(u, v))

        assert cos(vecs[0], vecs[1]) > cos(vecs[0], vecs[2])

    def test_empty_batch_is_400(self, client):
        assert client.post("/v1/embed", json={"texts": []}).status_code == 400

    def test_oversize_batch_is_413(self, client):
        assert client.post(
            "/v1/embed", json={"texts": ["x"] * 300}
        ).status_code == 413


class TestProject:
    @pytest.mark.parametrize("n_slots", [1, 2, 3, 4])
    def test_shapes(self, client, n_slots):
        resp = client.post("/v1/project", json={"features": [0.1] * 32, "n_slots": n_slots})
        vectors = resp.json()["vectors"]
        assert len(vectors) == n_slots
        assert all(len(v) == 64 for v in vectors)

    def test_dimension_mismatch_is_400(self, client):
        assert client.post(
            "/v1/project", json={"features": [0.1] * 5, "n_slots": 1}
        ).status_code == 400


class TestCaption:
    def test_unplugged_captioner_is_501(self, client):
        assert client.post("/v1/caption", json={"image_ref": "x.jpg"}).status_code == 501

    def test_plugged_captioner(self):
        service = ModelService(seed=0, captioner=lambda ref: f"an image at {ref}")
        app_client = TestClient(create_app(service))
        resp = app_client.post("/v1/caption", json={"image_ref": "a.jpg"})
        assert resp.json() == {"caption": "an image at a.jpg"}


class TestFinetuneValidation:
    def test_missing_split_is_400(self, client, tmp_path):
        resp = client.post("/v1/finetune", json={
            "train_path": str(tmp_path / "missing.jsonl"),
            "template_ids": ["c1"],
            "label_space": SEPARABLE_SPACE,
        })
        assert resp.status_code == 400

    def test_empty_split_is_400(self, client, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        resp = client.post("/v1/finetune", json={
            "train_path": str(empty),
            "template_ids": ["c1"],
            "label_space": SEPARABLE_SPACE,
        })
        assert resp.status_code == 400

    def test_unknown_job_is_404(self, client):
        assert client.get("/v1/jobs/job-999").status_code == 404

    def test_busy_queue_is_409(self, client, tmp_path):
        write_separable_split(tmp_path / "train.jsonl", 10)
        payload = {
            "train_path": str(tmp_path / "train.jsonl"),
            "template_ids": ["c1"],
            "steps": 40,
            "learning_rate": 1e-3,
            "label_space": SEPARABLE_SPACE,
        }
        first = client.post("/v1/finetune", json=payload)
        assert first.status_code == 202
        second = client.post("/v1/finetune", json=payload)
        assert second.status_code == 409
        # Drain the active job so later tests see an idle queue.
        import time

        deadline = time.time() + 120
        while time.time() < deadline:
            status = client.get(f"/v1/jobs/{first.json()['job_id']}").json()
            if status["status"] in ("done", "failed"):
                break
            time.sleep(0.3)
        assert status["status"] == "done"
