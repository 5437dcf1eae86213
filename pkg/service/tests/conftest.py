import json
import socket
import threading
import time

import pytest
import requests
import uvicorn

from mlmserve.app import ModelService, create_app


def free_port() -> int:
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    return port


@pytest.fixture(scope="session")
def live_server():
    """Real uvicorn server in a thread; the toolkit client needs a socket."""
    port = free_port()
    service = ModelService(seed=0)
    app = create_app(service)
    config = uvicorn.Config(app, host="127.0.0.1", port=port, log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{port}"
    deadline = time.time() + 20
    while time.time() < deadline:
        try:
            if requests.get(f"{base}/v1/healthz", timeout=1).status_code == 200:
                break
        except requests.RequestException:
            time.sleep(0.1)
    else:
        raise RuntimeError("service did not come up")
    yield base
    server.should_exit = True
    thread.join(timeout=10)


def wait_for_job(base, job_id, timeout=300.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        status = requests.get(f"{base}/v1/jobs/{job_id}", timeout=10).json()
        if status["status"] in ("done", "failed"):
            return status
        time.sleep(0.3)
    raise TimeoutError(f"job {job_id} did not finish in {timeout}s")


def write_separable_split(path, n_per_class, prefix="s", start=0):
    """Linearly separable two-class data: one cue word decides the label."""
    records = []
    for i in range(start, start + n_per_class):
        records.append({
            "id": f"{prefix}-neg-{i}",
            "text": f"awful gloomy day number {i}",
            "caption": "a sad photo",
            "label": "Negative",
        })
        records.append({
            "id": f"{prefix}-pos-{i}",
            "text": f"wonderful sunny day number {i}",
            "caption": "a happy photo",
            "label": "Positive",
        })
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return records


SEPARABLE_SPACE = {
    "name": "adhoc",
    "kind": "coarse",
    "labels": ["Negative", "Positive"],
    "verbalizer": {"Negative": "negative", "Positive": "positive"},
}
