"""Similarity-based demonstration selection.

For each query, the support instance with the highest cosine similarity
is picked per label.  Similarity is computed between embeddings of the
composed text ``text [aspect] caption`` (aspect only for fine-grained
instances, empty fields skipped).  Support sets here are small (1%
few-shot splits), so exact search over all candidates is used.
"""

from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np

from .data import Instance, LabelSpace
from .errors import ValidationError

log = logging.getLogger(__name__)


def compose_embedding_input(instance: Instance) -> str:
    """Deterministic embedding input: text, optional aspect, then caption."""
    parts = [instance.text, instance.aspect or "", instance.caption or ""]
    return " ".join(" ".join(p.split()) for p in parts if p.strip())


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    """Cosine similarity clamped to [-1, 1]; zero vectors score 0."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValidationError(f"cosine: dimension mismatch {u.shape} vs {v.shape}")
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        log.warning("cosine of a zero vector; defining similarity as 0")
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


class EmbeddingCache:
    """Instance-id keyed embedding cache backed by a backend's embedder.

    The support set is static per run, so embeddings are fetched in batch
    once and reused for every query.  Population is single-writer; reads
    afterwards are safe from any thread.
    """

    def __init__(self, backend):
        self._backend = backend
        self._vectors: dict[str, np.ndarray] = {}

    def warm(self, instances: Sequence[Instance]) -> None:
        todo = [inst for inst in instances if inst.id not in self._vectors]
        if not todo:
            return
        texts = [compose_embedding_input(inst) for inst in todo]
        vectors = self._backend.embed(texts)
        for inst, vec in zip(todo, vectors):
            self._vectors[inst.id] = np.asarray(vec, dtype=np.float64)

    def get(self, instance: Instance) -> np.ndarray:
        if instance.id not in self._vectors:
            self.warm([instance])
        return self._vectors[instance.id]


def select_demonstrations(
    query: Instance,
    support: Sequence[Instance],
    embedder,
    label_space: LabelSpace,
    cache: Optional[EmbeddingCache] = None,
) -> dict[str, Instance]:
    """Most similar support instance per label.

    Ties break to the lowest support index; the query itself (same id) is
    excluded from candidacy so a gold-labeled demonstration cannot leak
    the query's own label at training time.
    """
    cache = cache if cache is not None else EmbeddingCache(embedder)
    candidates = [inst for inst in support if inst.id != query.id]
    cache.warm(candidates)
    q_vec = cache.get(query)

    best: dict[str, tuple[float, int, Instance]] = {}
    for idx, inst in enumerate(candidates):
        score = cosine(q_vec, cache.get(inst))
        current = best.get(inst.label)
        if current is None or score > current[0]:
            best[inst.label] = (score, idx, inst)
    missing = [l for l in label_space.labels if l not in best]
    if missing:
        raise ValidationError(f"support set has no instances for labels {missing}")
    return {label: best[label][2] for label in label_space.labels}
