"""Pluggable scorer/embedder backends.

Every backend satisfies one contract: ``score_mask`` returns exactly one
finite logit per requested verbalizer word, ``embed`` returns unit-norm
vectors of a fixed dimension per session, and ``project_image`` (an
optional capability) maps raw image features to ``n_slots`` vectors of
the embedding dimension.  Backends are chosen by URI scheme:
``stub:SEED`` for the deterministic in-process stub and ``http(s)://``
for a remote inference service speaking the JSON wire format documented
in ``INTERFACE.md``.

The stub's outputs are pure functions of (input bytes, seed); it exists
so the full pipeline and its tests run with no ML stack at all.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import requests

from .errors import BackendError, ConfigError
from .templates import AssembledPrompt, RenderedPrompt

PromptLike = Union[AssembledPrompt, RenderedPrompt, str]


def _prompt_text(prompt: PromptLike) -> str:
    if isinstance(prompt, AssembledPrompt):
        return prompt.full_text
    if isinstance(prompt, RenderedPrompt):
        return prompt.text
    return prompt


class Backend:
    """Base scorer/embedder; concrete backends override the three calls."""

    #: True when identical requests are guaranteed identical responses.
    deterministic: bool = False
    #: True when project_image is available.
    supports_projection: bool = False
    #: Raw image-feature dimension accepted by project_image; None = any.
    feature_dim: Optional[int] = None

    def score_mask(
        self,
        prompt: PromptLike,
        words: Sequence[str],
        image_slots: Optional[Sequence[Sequence[float]]] = None,
        checkpoint: Optional[str] = None,
    ) -> dict[str, float]:
        raise NotImplementedError

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        raise NotImplementedError

    @property
    def embed_dim(self) -> int:
        raise NotImplementedError

    def project_image(self, features: Sequence[float], n_slots: int) -> np.ndarray:
        raise BackendError(f"{type(self).__name__} does not support image projection")


def _hash01(*parts: str) -> float:
    """Stable hash of the parts to a float in [0, 1)."""
    payload = "\x1f".join(parts).encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2**64


class StubBackend(Backend):
    """Deterministic hash-based backend; no model, no network.

    Logits land in [-3, 3]; embeddings are unit-norm vectors accumulated
    from hashed character n-grams, so texts sharing n-grams score a
    higher cosine than unrelated ones.
    """

    deterministic = True
    supports_projection = True

    def __init__(self, seed: int = 0, embed_dim: int = 64):
        if embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        self.seed = int(seed)
        self._dim = int(embed_dim)

    @property
    def embed_dim(self) -> int:
        return self._dim

    def score_mask(self, prompt, words, image_slots=None, checkpoint=None):
        if not words:
            raise BackendError("score_mask needs at least one verbalizer word")
        text = _prompt_text(prompt)
        tag = checkpoint or ""
        return {
            w: -3.0 + 6.0 * _hash01(text, w, str(self.seed), tag) for w in words
        }

    def _embed_one(self, text: str) -> np.ndarray:
        vec = np.zeros(self._dim, dtype=np.float64)
        padded = f"^^{text}$$"
        for n in (2, 3):
            for i in range(len(padded) - n + 1):
                gram = padded[i : i + n]
                idx = int(_hash01(gram, "i", str(self.seed)) * self._dim) % self._dim
                sign = 1.0 if _hash01(gram, "s", str(self.seed)) < 0.5 else -1.0
                vec[idx] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            vec[0] = 1.0
            norm = 1.0
        return vec / norm

    def embed(self, texts):
        return np.stack([self._embed_one(t) for t in texts])

    def project_image(self, features, n_slots):
        feats = np.asarray(features, dtype=np.float64)
        payload = feats.tobytes().hex()
        out = np.empty((n_slots, self._dim), dtype=np.float64)
        for k in range(n_slots):
            row = np.array(
                [
                    _hash01(payload, str(k), str(j), str(self.seed)) - 0.5
                    for j in range(self._dim)
                ]
            )
            norm = np.linalg.norm(row)
            out[k] = row / norm if norm else row
        return out


class HttpBackend(Backend):
    """Client for a remote inference service (see INTERFACE.md).

    Scoring endpoints are stateless and deterministic in eval mode, so
    the client advertises determinism; the service's health endpoint is
    consulted once to pick up capabilities.
    """

    deterministic = True

    def __init__(self, base_url: str, timeout: float = 60.0, session=None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._session = session or requests.Session()
        self._dim: Optional[int] = None
        self._health: Optional[dict] = None
        self.supports_projection = True

    def _post(self, path: str, payload: dict) -> dict:
        url = f"{self.base_url}{path}"
        try:
            resp = self._session.post(url, json=payload, timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendError(f"backend unreachable at {url}: {exc}") from exc
        if not 200 <= resp.status_code < 300:
            detail = resp.text[:500]
            raise BackendError(f"backend error {resp.status_code} from {url}: {detail}")
        try:
            return resp.json()
        except json.JSONDecodeError as exc:
            raise BackendError(f"non-JSON response from {url}") from exc

    def healthz(self) -> dict:
        url = f"{self.base_url}/v1/healthz"
        try:
            resp = self._session.get(url, timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendError(f"backend unreachable at {url}: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"health check failed with {resp.status_code}")
        self._health = resp.json()
        return self._health

    @property
    def feature_dim(self) -> Optional[int]:
        if self._health is None:
            self.healthz()
        return self._health.get("feature_dim")

    def score_mask(self, prompt, words, image_slots=None, checkpoint=None):
        if not words:
            raise BackendError("score_mask needs at least one verbalizer word")
        payload = {"prompt": _prompt_text(prompt), "words": list(words)}
        if image_slots is not None:
            payload["image_slots"] = [list(map(float, v)) for v in image_slots]
        if checkpoint:
            payload["checkpoint"] = checkpoint
        data = self._post("/v1/mlm-scores", payload)
        logits = data.get("logits")
        if not isinstance(logits, dict):
            raise BackendError("mlm-scores response missing 'logits'")
        missing = [w for w in words if w not in logits]
        if missing:
            raise BackendError(f"backend returned no logits for {missing}")
        return {w: float(logits[w]) for w in words}

    def embed(self, texts):
        data = self._post("/v1/embed", {"texts": list(texts)})
        vectors = data.get("vectors")
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise BackendError("embed response has the wrong number of vectors")
        arr = np.asarray(vectors, dtype=np.float64)
        if self._dim is None:
            self._dim = arr.shape[1] if arr.ndim == 2 else len(arr)
        return arr

    @property
    def embed_dim(self) -> int:
        if self._dim is None:
            self.embed(["dimension probe"])
        return self._dim

    def project_image(self, features, n_slots):
        data = self._post(
            "/v1/project", {"features": [float(x) for x in features], "n_slots": int(n_slots)}
        )
        vectors = data.get("vectors")
        if not isinstance(vectors, list) or len(vectors) != n_slots:
            raise BackendError("project response has the wrong number of vectors")
        return np.asarray(vectors, dtype=np.float64)

    def finetune(self, payload: dict) -> str:
        """Submit a fine-tune job; returns the job id."""
        data = self._post("/v1/finetune", payload)
        job_id = data.get("job_id")
        if not job_id:
            raise BackendError("finetune response missing 'job_id'")
        return str(job_id)

    def job_status(self, job_id: str) -> dict:
        url = f"{self.base_url}/v1/jobs/{job_id}"
        try:
            resp = self._session.get(url, timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendError(f"backend unreachable at {url}: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"job status error {resp.status_code}: {resp.text[:300]}")
        return resp.json()


def resolve_backend(uri: str) -> Backend:
    """Backend from a URI: ``stub[:SEED]`` or ``http(s)://host:port``."""
    if uri.startswith("stub"):
        rest = uri[4:]
        if rest in ("", ":"):
            return StubBackend(seed=0)
        if rest.startswith(":"):
            try:
                return StubBackend(seed=int(rest[1:]))
            except ValueError:
                raise ConfigError(f"bad stub seed in backend URI {uri!r}")
        raise ConfigError(f"bad backend URI {uri!r}")
    if uri.startswith("http://") or uri.startswith("https://"):
        return HttpBackend(uri)
    raise ConfigError(f"unsupported backend URI {uri!r}; use stub:SEED or http(s)://...")


@dataclass
class ScoreResult:
    """Per-item result of a batch scoring call: logits or an error."""

    key: str
    logits: Optional[dict[str, float]] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.logits is not None


def score_batch(
    backend: Backend,
    items: Sequence[tuple[str, PromptLike, Sequence[str]]],
    image_slots: Optional[dict[str, Sequence[Sequence[float]]]] = None,
    checkpoint: Optional[str] = None,
) -> list[ScoreResult]:
    """Score many prompts with per-item error isolation.

    One malformed prompt fails that item only; the rest of the batch
    still completes.  Connectivity failures abort the batch, since every
    later item would fail the same way.
    """
    results = []
    for key, prompt, words in items:
        slots = image_slots.get(key) if image_slots else None
        try:
            logits = backend.score_mask(
                prompt, words, image_slots=slots, checkpoint=checkpoint
            )
            results.append(ScoreResult(key=key, logits=logits))
        except BackendError as exc:
            if "unreachable" in str(exc):
                raise
            results.append(ScoreResult(key=key, error=str(exc)))
    return results


def check_backend_conformance(backend: Backend, slot_counts: Sequence[int] = (1, 2, 3, 4)):
    """Run the contract-conformance checks shared by all backends.

    Raises AssertionError on the first violated check.  Covers logit
    completeness and finiteness, embedding dimension stability, unit
    norms, determinism (when advertised), and projection output shapes.
    """
    words = ["terrible", "okay", "great"]
    prompt = "<s> <IMG_0> is a dog </s> <s> conformance probe </s> It was <mask>. </s>"

    logits = backend.score_mask(prompt, words)
    assert set(logits) == set(words), f"logit keys {set(logits)} != requested {set(words)}"
    assert all(np.isfinite(v) for v in logits.values()), f"non-finite logits: {logits}"

    texts = ["a small probe", "another probe text", ""]
    vecs = np.asarray(backend.embed(texts), dtype=np.float64)
    assert vecs.shape[0] == len(texts), "one embedding per text"
    dim = vecs.shape[1]
    assert dim == backend.embed_dim, "embed_dim property matches embedding width"
    again = np.asarray(backend.embed(["yet another"]), dtype=np.float64)
    assert again.shape[1] == dim, "embedding dimension stable within a session"
    norms = np.linalg.norm(vecs, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-6), f"embeddings not unit norm: {norms}"

    if backend.deterministic:
        logits2 = backend.score_mask(prompt, words)
        assert logits == logits2, "deterministic backend returned differing logits"
        vecs2 = np.asarray(backend.embed(texts), dtype=np.float64)
        assert np.allclose(vecs, vecs2, atol=1e-12), "deterministic embeddings differ"

    if backend.supports_projection:
        d_v = backend.feature_dim or 4
        features = [((-1) ** j) * (j + 1) / d_v for j in range(d_v)]
        for n_slots in slot_counts:
            out = np.asarray(backend.project_image(features, n_slots), dtype=np.float64)
            assert out.shape == (n_slots, dim), (
                f"projection shape {out.shape} != ({n_slots}, {dim})"
            )
