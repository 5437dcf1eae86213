"""Tiny word-level masked language model with multimodal slots.

The model is a small transformer encoder with an MLM head over a
hash-bucketed word vocabulary.  Prompts arrive as canonical sentinel text
(see INTERFACE.md at the repo root): ``<IMG_k>`` positions are filled
with caller-provided slot vectors (or a neutral zero vector), ``<PT_k>``
positions map to dedicated trainable embedding rows, and ``<mask>`` marks
the single cloze position whose head logits are served.

Everything is seeded and dropout-free, so scoring is deterministic for a
fixed checkpoint.
"""

from __future__ import annotations

import hashlib
import math
import re
from typing import Optional, Sequence

import torch
from torch import nn

PAD_ID, BOS_ID, EOS_ID, MASK_ID = 0, 1, 2, 3
N_RESERVED = 4

_IMG_RE = re.compile(r"^<IMG_(\d+)>$")
_PT_RE = re.compile(r"^<PT_(\d+)>$")
# Sentinels are atoms even with attached punctuation (`<mask>.`); plain
# words shed punctuation so `great.` and `great` share one bucket.
_TOKEN_RE = re.compile(r"<mask>|</s>|<s>|<IMG_\d+>|<PT_\d+>|[\w'-]+|[^\w\s]")

WORD_CELL, IMG_CELL, PT_CELL = "w", "img", "pt"


class BadPrompt(ValueError):
    """Malformed request content (wrong dims, bad slot count, ...)."""


class MaskCountError(ValueError):
    """The prompt does not contain exactly one <mask>."""


class PromptTooLong(ValueError):
    """Token count exceeds the model's context length."""


def word_bucket(word: str, vocab_size: int) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return N_RESERVED + int.from_bytes(digest, "big") % (vocab_size - N_RESERVED)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


class TinyMaskedLM(nn.Module):
    """Transformer encoder + MLM head sized for CPU fine-tuning in seconds."""

    def __init__(
        self,
        vocab_size: int = 2048,
        dim: int = 64,
        n_layers: int = 2,
        n_heads: int = 4,
        max_len: int = 256,
        n_prompt_rows: int = 64,
        feature_dim: int = 32,
        seed: int = 0,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.dim = dim
        self.max_len = max_len
        self.n_prompt_rows = n_prompt_rows
        self.feature_dim = feature_dim
        self.seed = seed
        torch.manual_seed(seed)
        self.tok_emb = nn.Embedding(vocab_size, dim, padding_idx=PAD_ID)
        self.pos_emb = nn.Embedding(max_len, dim)
        self.prompt_emb = nn.Embedding(n_prompt_rows, dim)
        layer = nn.TransformerEncoderLayer(
            d_model=dim,
            nhead=n_heads,
            dim_feedforward=4 * dim,
            dropout=0.0,
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            layer, num_layers=n_layers, enable_nested_tensor=False
        )
        self.head = nn.Linear(dim, vocab_size)
        # One projection head per slot count, created lazily but seeded so
        # shapes and weights are reproducible per (seed, n_slots).
        self.projections = nn.ModuleDict()

    # -- encoding ---------------------------------------------------------

    def encode(self, text: str) -> list[tuple[str, int]]:
        """Token cells: plain word ids, image-slot indices, prompt rows."""
        cells: list[tuple[str, int]] = []
        for token in tokenize(text):
            if token == "<s>":
                cells.append((WORD_CELL, BOS_ID))
            elif token == "</s>":
                cells.append((WORD_CELL, EOS_ID))
            elif token == "<mask>":
                cells.append((WORD_CELL, MASK_ID))
            elif m := _IMG_RE.match(token):
                cells.append((IMG_CELL, int(m.group(1))))
            elif m := _PT_RE.match(token):
                row = int(m.group(1))
                if row >= self.n_prompt_rows:
                    raise BadPrompt(
                        f"prompt token index {row} exceeds the trainable rows "
                        f"({self.n_prompt_rows})"
                    )
                cells.append((PT_CELL, row))
            else:
                cells.append((WORD_CELL, word_bucket(token, self.vocab_size)))
        return cells

    def word_id(self, word: str) -> int:
        return word_bucket(word, self.vocab_size)

    # -- forward ----------------------------------------------------------

    def _embed_cells(
        self,
        batch: Sequence[list[tuple[str, int]]],
        slot_vectors: Sequence[Optional[Sequence[Sequence[float]]]],
    ) -> tuple[torch.Tensor, torch.Tensor]:
        max_len = max(len(cells) for cells in batch)
        if max_len > self.max_len:
            raise PromptTooLong(f"{max_len} tokens exceeds context length {self.max_len}")
        emb = torch.zeros(len(batch), max_len, self.dim)
        padding = torch.ones(len(batch), max_len, dtype=torch.bool)
        for b, cells in enumerate(batch):
            slots = slot_vectors[b]
            for pos, (kind, value) in enumerate(cells):
                padding[b, pos] = False
                if kind == WORD_CELL:
                    emb[b, pos] = self.tok_emb.weight[value]
                elif kind == PT_CELL:
                    emb[b, pos] = self.prompt_emb.weight[value]
                else:  # IMG_CELL
                    if slots is not None and value < len(slots):
                        vec = torch.as_tensor(slots[value], dtype=torch.float32)
                        if vec.shape != (self.dim,):
                            raise BadPrompt(
                                f"image slot {value} has dimension {tuple(vec.shape)}, "
                                f"expected ({self.dim},)"
                            )
                        emb[b, pos] = vec
                    # else: neutral zero slot
            emb[b, : len(cells)] += self.pos_emb.weight[: len(cells)]
        return emb, padding

    def forward_cells(self, batch, slot_vectors) -> torch.Tensor:
        emb, padding = self._embed_cells(batch, slot_vectors)
        hidden = self.encoder(emb, src_key_padding_mask=padding)
        return self.head(hidden)

    # -- serving ----------------------------------------------------------

    def score_mask(
        self,
        prompt: str,
        words: Sequence[str],
        image_slots: Optional[Sequence[Sequence[float]]] = None,
    ) -> dict[str, float]:
        if not words:
            raise BadPrompt("at least one verbalizer word is required")
        cells = self.encode(prompt)
        mask_positions = [i for i, (k, v) in enumerate(cells) if (k, v) == (WORD_CELL, MASK_ID)]
        if len(mask_positions) != 1:
            raise MaskCountError(f"prompt contains {len(mask_positions)} <mask> tokens")
        n_img = sum(1 for k, _ in cells if k == IMG_CELL)
        if image_slots is not None and len(image_slots) != n_img:
            raise BadPrompt(
                f"{len(image_slots)} image slot vectors for {n_img} <IMG_k> sentinels"
            )
        self.eval()
        with torch.no_grad():
            logits = self.forward_cells([cells], [image_slots])[0, mask_positions[0]]
        return {w: float(logits[self.word_id(w)]) for w in words}

    def embed_texts(self, texts: Sequence[str]) -> list[list[float]]:
        """Unit-norm mean-pooled token embeddings (checkpoint-independent
        service capability; always served from this model's table)."""
        out = []
        with torch.no_grad():
            for text in texts:
                cells = self.encode(f"<s> {text} </s>")
                rows = [
                    self.tok_emb.weight[v] if k == WORD_CELL else self.prompt_emb.weight[v]
                    for k, v in cells
                    if k != IMG_CELL
                ]
                vec = torch.stack(rows).mean(dim=0)
                norm = float(vec.norm())
                if norm < 1e-12 or not math.isfinite(norm):
                    vec = torch.zeros(self.dim)
                    vec[0] = 1.0
                    norm = 1.0
                out.append((vec / norm).tolist())
        return out

    def project_image(self, features: Sequence[float], n_slots: int) -> list[list[float]]:
        feats = torch.as_tensor(features, dtype=torch.float32)
        if feats.shape != (self.feature_dim,):
            raise BadPrompt(
                f"feature vector has dimension {tuple(feats.shape)}, "
                f"expected ({self.feature_dim},)"
            )
        key = str(n_slots)
        if key not in self.projections:
            torch.manual_seed(self.seed * 1009 + n_slots)
            self.projections[key] = nn.Linear(self.feature_dim, self.dim * n_slots)
        with torch.no_grad():
            flat = self.projections[key](feats)
        return flat.view(n_slots, self.dim).tolist()
