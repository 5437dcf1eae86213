"""Prompt-based fine-tuning on a few-shot split.

One checkpoint is trained per template id (independent classifiers).
Each training example is an assembled prompt for a train instance (its
per-label demonstrations retrieved by cosine similarity over the split,
the instance itself excluded) whose mask position is supervised with the
verbalizer word of the gold label.  The encoder, MLM head, prompt-token
rows, and projection heads all receive gradients.
"""

from __future__ import annotations

import copy
import logging
import random
from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import nn

from .data import JobLabelSpace, SplitInstance, load_split
from .model import TinyMaskedLM, WORD_CELL, MASK_ID
from . import templates

log = logging.getLogger(__name__)


@dataclass
class FinetuneRequest:
    train_path: str
    dev_path: Optional[str]
    template_ids: list[str]
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 5e-6
    seed: int = 0
    n_image_slots: int = 1
    n_prompt_tokens: int = 2
    label_space: Optional[dict] = None


@dataclass
class FinetuneOutcome:
    checkpoints: dict[str, TinyMaskedLM] = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)


def _compose_embedding_input(inst: SplitInstance) -> str:
    parts = [inst.text, inst.aspect or "", inst.caption]
    return " ".join(" ".join(p.split()) for p in parts if p.strip())


def _cosine(u, v) -> float:
    num = sum(a * b for a, b in zip(u, v))
    nu = sum(a * a for a in u) ** 0.5
    nv = sum(b * b for b in v) ** 0.5
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return num / (nu * nv)


def select_demos(
    query: SplitInstance,
    support: list[SplitInstance],
    vectors: dict[str, list[float]],
    space: JobLabelSpace,
) -> dict[str, SplitInstance]:
    out: dict[str, SplitInstance] = {}
    for label in space.labels:
        best, best_score = None, None
        for inst in support:
            if inst.label != label or inst.id == query.id:
                continue
            score = _cosine(vectors[query.id], vectors[inst.id])
            if best_score is None or score > best_score:
                best, best_score = inst, score
        if best is None:
            raise ValueError(f"split has no support instance for label {label!r}")
        out[label] = best
    return out


def build_examples(
    split: list[SplitInstance],
    template_id: str,
    space: JobLabelSpace,
    model: TinyMaskedLM,
    n_image_slots: int,
    n_prompt_tokens: int,
):
    """(cells, mask position, target word id, slot vectors) per instance."""
    texts = {inst.id: _compose_embedding_input(inst) for inst in split}
    raw_vectors = model.embed_texts([texts[inst.id] for inst in split])
    vectors = {inst.id: vec for inst, vec in zip(split, raw_vectors)}
    examples = []
    for inst in split:
        demos = select_demos(inst, split, vectors, space)
        text = templates.assemble(
            inst, demos, template_id, space, n_image_slots, n_prompt_tokens
        )
        cells = model.encode(text)
        mask_pos = [i for i, c in enumerate(cells) if c == (WORD_CELL, MASK_ID)]
        if len(mask_pos) != 1:
            raise ValueError(f"assembled training prompt for {inst.id} has {len(mask_pos)} masks")
        target = model.word_id(space.verbalizer[inst.label])
        slots = inst.image_features if inst.image_features else None
        examples.append((cells, mask_pos[0], target, slots))
    return examples


def finetune(model: TinyMaskedLM, request: FinetuneRequest) -> FinetuneOutcome:
    if not request.template_ids:
        raise ValueError("at least one template id is required")
    if request.label_space is None:
        raise ValueError("label_space is required")
    space = JobLabelSpace.from_payload(request.label_space)
    train = load_split(request.train_path)
    if request.dev_path:
        load_split(request.dev_path)  # validated; reserved for future early stopping
    missing = [l for l in space.labels if not any(i.label == l for i in train)]
    if missing:
        raise ValueError(f"train split has no instances for labels {missing}")

    outcome = FinetuneOutcome()
    for template_id in request.template_ids:
        trained = copy.deepcopy(model)
        examples = build_examples(
            train, template_id, space, trained,
            request.n_image_slots, request.n_prompt_tokens,
        )
        losses = _train_one(trained, examples, request)
        outcome.losses.extend(losses)
        trained.eval()
        outcome.checkpoints[template_id] = trained
        log.info(
            "template %s: %d steps, loss %.4f -> %.4f",
            template_id, len(losses), losses[0], losses[-1],
        )
    return outcome


def _train_one(model: TinyMaskedLM, examples, request: FinetuneRequest) -> list[float]:
    torch.manual_seed(request.seed)
    rng = random.Random(request.seed)
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=request.learning_rate)
    loss_fn = nn.CrossEntropyLoss()
    losses: list[float] = []
    order: list[int] = []
    for _ in range(request.steps):
        batch_idx = []
        for _ in range(min(request.batch_size, len(examples))):
            if not order:
                order = list(range(len(examples)))
                rng.shuffle(order)
            batch_idx.append(order.pop())
        cells = [examples[i][0] for i in batch_idx]
        slot_vectors = [examples[i][3] for i in batch_idx]
        targets = torch.tensor([examples[i][2] for i in batch_idx])
        logits = model.forward_cells(cells, slot_vectors)
        mask_logits = torch.stack(
            [logits[row, examples[i][1]] for row, i in enumerate(batch_idx)]
        )
        loss = loss_fn(mask_logits, targets)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
    return losses
