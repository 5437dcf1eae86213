"""Cloze prompt compilation for the unified multimodal templates.

A template has two parts joined by a single space: an image part (image
slot sentinels plus the caption) and a text part (the task wording with
exactly one ``<mask>``).  Rendering is canonical: tokens are separated by
single spaces with no trailing whitespace, substituted values are
whitespace-normalized, and punctuation attached to a placeholder in the
pattern stays attached in the output.  Query prompts keep the literal
``<mask>``; demonstration prompts carry the verbalizer word of a label in
the mask position instead.

Image slots render as ``<IMG_k>`` sentinels and learnable prompt tokens
as ``<PT_k>``; backends substitute vectors for these at scoring time, so
rendering stays backend-independent.

Pattern language (used by the built-ins and user templates alike):

* ``[T]`` raw text, ``[A]`` aspect term, ``[C]`` caption — may carry
  attached literal punctuation, e.g. ``"[T]"`` or ``[A].``;
* ``<mask>`` the single cloze slot (``<mask>.`` keeps the period);
* ``[V]`` expands to ``n_image_slots`` image-slot sentinels;
* ``<PT:g>`` expands to ``n_prompt_tokens`` prompt-token sentinels for
  group ``g`` (global numbering ``g * n_prompt_tokens + j``).
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from .data import COARSE, FINE, Instance, LabelSpace
from .errors import ConfigError, ValidationError

log = logging.getLogger(__name__)

MASK_TOKEN = "<mask>"

# Segment kinds.
LITERAL = "literal"
MASK = "mask"
IMAGE_SLOT = "image_slot"
PROMPT_TOKEN = "prompt_token"
CAPTION = "caption"
RAW_TEXT = "raw_text"
ASPECT = "aspect"

_PLACEHOLDER_RE = re.compile(r"\[T\]|\[A\]|\[C\]|\[V\]|<mask>|<PT:\d+>")

# Canonical pattern strings for the eight built-in template variants.
# The trailing ``</s>`` after the mask is spaced (the compact ``<mask>.</s>``
# form some write-ups use is canonicalized to ``<mask>. </s>``).
TEXT_PATTERNS: dict[str, str] = {
    "c1": '<s> [T] </s> It was <mask>. </s>',
    "c2": '<s> The sentence "[T]" has <mask> sentiment. </s>',
    "c3": '<s> Text: [T]. Sentiment of text: <mask>. </s>',
    "c4": '<s> <mask> <PT:0> [T] <PT:1> </s>',
    "f1": '<s> [T] [A] </s> It was <mask>. </s>',
    "f2": '<s> The aspect "[A]" in sentence "[T]" has <mask> sentiment. </s>',
    "f3": '<s> Text: [T]. Aspect: [A]. Sentiment of aspect: <mask>. </s>',
    "f4": '<s> <mask> <PT:0> [T] <PT:1> [A] <PT:2> </s>',
}
IMAGE_PATTERNS: dict[str, str] = {
    "c1": '<s> [V] is [C] </s>',
    "c2": '<s> [V] is [C] </s>',
    "c3": '<s> [V] is [C] </s>',
    "c4": '<s> [V] [C] <PT:2> </s>',
    "f1": '<s> [V] is [C] </s>',
    "f2": '<s> [V] is [C] </s>',
    "f3": '<s> [V] is [C] </s>',
    "f4": '<s> [V] [C] <PT:3> </s>',
}
BUILTIN_TEMPLATE_IDS = tuple(TEXT_PATTERNS)


def _normalize_ws(value: str) -> str:
    return " ".join(value.split())


def _parse_token(token: str):
    """Split one pattern token into (literal prefix, placeholder, suffix)."""
    matches = list(_PLACEHOLDER_RE.finditer(token))
    if not matches:
        return token, None, ""
    if len(matches) > 1:
        raise ConfigError(f"pattern token {token!r} holds more than one placeholder")
    m = matches[0]
    prefix, ph, suffix = token[: m.start()], m.group(0), token[m.end() :]
    if ph == "[V]" or ph.startswith("<PT:"):
        if prefix or suffix:
            raise ConfigError(f"{ph} must be a bare token, got {token!r}")
    return prefix, ph, suffix


@dataclass(frozen=True)
class PromptTemplate:
    """One template variant: grain, pattern parts, and slot counts."""

    id: str
    grain: str  # COARSE or FINE
    text_part: str
    image_part: str
    n_image_slots: int = 1
    n_prompt_tokens: int = 0

    def __post_init__(self):
        if self.grain not in (COARSE, FINE):
            raise ConfigError(f"template grain must be coarse|fine, got {self.grain!r}")
        if self.n_image_slots < 1:
            raise ConfigError("n_image_slots must be >= 1")
        if self.n_prompt_tokens < 0:
            raise ConfigError("n_prompt_tokens must be >= 0")
        if self.text_part.count(MASK_TOKEN) != 1:
            raise ConfigError(f"template {self.id!r}: text part needs exactly one {MASK_TOKEN}")
        if MASK_TOKEN in self.image_part:
            raise ConfigError(f"template {self.id!r}: image part must not contain {MASK_TOKEN}")
        has_aspect = "[A]" in self.text_part
        if (self.grain == FINE) != has_aspect:
            raise ConfigError(
                f"template {self.id!r}: grain {self.grain} inconsistent with [A] presence"
            )
        if self.n_prompt_tokens > 0 and "<PT:" not in (self.text_part + self.image_part):
            raise ConfigError(
                f"template {self.id!r}: n_prompt_tokens set but pattern has no <PT:g> group"
            )
        for token in (self.image_part + " " + self.text_part).split():
            _parse_token(token)  # validates placement

    @property
    def pattern_tokens(self) -> list[str]:
        tokens = self.image_part.split() + self.text_part.split()
        return tokens


def builtin_templates(
    n_image_slots: int = 1, n_prompt_tokens: int = 2
) -> dict[str, PromptTemplate]:
    """The eight built-in variants; only c4/f4 use learnable prompt tokens."""
    out = {}
    for tid in BUILTIN_TEMPLATE_IDS:
        out[tid] = PromptTemplate(
            id=tid,
            grain=FINE if tid.startswith("f") else COARSE,
            text_part=TEXT_PATTERNS[tid],
            image_part=IMAGE_PATTERNS[tid],
            n_image_slots=n_image_slots,
            n_prompt_tokens=n_prompt_tokens if tid in ("c4", "f4") else 0,
        )
    return out


@dataclass(frozen=True)
class Segment:
    """Half-open span [start, end) of one kind within a rendered prompt."""

    kind: str
    start: int
    end: int

    def of(self, text: str) -> str:
        return text[self.start : self.end]


@dataclass(frozen=True)
class RenderedPrompt:
    """A rendered template: canonical text plus its segment map."""

    text: str
    segments: tuple[Segment, ...]
    is_demonstration: bool
    template_id: str
    instance_id: str
    demo_label: Optional[str] = None
    # Render provenance; lets truncation re-render with shortened text.
    source_instance: Optional[Instance] = field(
        default=None, repr=False, compare=False
    )
    source_template: Optional[PromptTemplate] = field(
        default=None, repr=False, compare=False
    )
    mask_word: Optional[str] = field(default=None, repr=False, compare=False)

    def count(self, kind: str) -> int:
        return sum(1 for seg in self.segments if seg.kind == kind)

    def to_record(self) -> dict:
        return {
            "id": self.instance_id,
            "template": self.template_id,
            "text": self.text,
            "is_demonstration": self.is_demonstration,
            "demo_label": self.demo_label,
            "segments": [[s.kind, s.start, s.end] for s in self.segments],
        }


def _expand(ph: str, instance: Instance, template: PromptTemplate, mask_word: Optional[str]):
    """Expansion pieces (kind, text) for one placeholder."""
    if ph == "[T]":
        return [(RAW_TEXT, _normalize_ws(instance.text))]
    if ph == "[A]":
        return [(ASPECT, _normalize_ws(instance.aspect or ""))]
    if ph == "[C]":
        caption = _normalize_ws(instance.caption or "")
        if not caption:
            log.warning(
                "instance %s has no caption; template %s renders an empty image prompt",
                instance.id, template.id,
            )
        return [(CAPTION, caption)]
    if ph == "[V]":
        return [(IMAGE_SLOT, f"<IMG_{k}>") for k in range(template.n_image_slots)]
    if ph == MASK_TOKEN:
        if mask_word is None:
            return [(MASK, MASK_TOKEN)]
        return [(LITERAL, mask_word)]
    if ph.startswith("<PT:"):
        group = int(ph[4:-1])
        base = group * template.n_prompt_tokens
        return [(PROMPT_TOKEN, f"<PT_{base + j}>") for j in range(template.n_prompt_tokens)]
    raise ConfigError(f"unknown placeholder {ph!r}")


def _render(
    instance: Instance, template: PromptTemplate, mask_word: Optional[str]
) -> RenderedPrompt:
    token_pieces: list[list[tuple[str, str]]] = []
    for token in template.pattern_tokens:
        prefix, ph, suffix = _parse_token(token)
        if ph is None:
            pieces: list[tuple[str, str]] = [(LITERAL, token)]
        else:
            body = [p for p in _expand(ph, instance, template, mask_word) if p[1]]
            if ph == "[V]" or ph.startswith("<PT:"):
                # Multi-sentinel expansions are space-separated internally.
                body = [p for j, piece in enumerate(body)
                        for p in ([(LITERAL, " "), piece] if j else [piece])]
            pieces = []
            if prefix:
                pieces.append((LITERAL, prefix))
            pieces.extend(body)
            if suffix:
                pieces.append((LITERAL, suffix))
        pieces = [(kind, text) for kind, text in pieces if text]
        if pieces:
            token_pieces.append(pieces)

    # Flatten with single-space separators between tokens.
    flat: list[tuple[str, str]] = []
    for i, pieces in enumerate(token_pieces):
        if i > 0:
            flat.append((LITERAL, " "))
        flat.extend(pieces)

    # Merge separator spaces into neighbouring literals so segments tile.
    merged: list[tuple[str, str]] = []
    for kind, text in flat:
        if merged and merged[-1][0] == LITERAL and kind == LITERAL:
            merged[-1] = (LITERAL, merged[-1][1] + text)
        else:
            merged.append((kind, text))

    segments: list[Segment] = []
    cursor = 0
    out: list[str] = []
    for kind, text in merged:
        segments.append(Segment(kind=kind, start=cursor, end=cursor + len(text)))
        out.append(text)
        cursor += len(text)
    return RenderedPrompt(
        text="".join(out),
        segments=tuple(segments),
        is_demonstration=mask_word is not None,
        template_id=template.id,
        instance_id=instance.id,
        demo_label=None,
        source_instance=instance,
        source_template=template,
        mask_word=mask_word,
    )


def _check_grain(instance: Instance, template: PromptTemplate) -> None:
    if template.grain == FINE and instance.aspect is None:
        raise ValidationError(
            f"fine-grained template {template.id!r} needs an aspect; "
            f"instance {instance.id!r} has none"
        )
    if template.grain == COARSE and instance.aspect is not None:
        raise ValidationError(
            f"coarse template {template.id!r} used with aspect-bearing instance {instance.id!r}"
        )


def render_query(instance: Instance, template: PromptTemplate) -> RenderedPrompt:
    """Render the cloze query prompt: exactly one mask segment."""
    _check_grain(instance, template)
    return _render(instance, template, mask_word=None)


def render_demonstration(
    instance: Instance, template: PromptTemplate, label: str, label_space: LabelSpace
) -> RenderedPrompt:
    """Render a demonstration: the mask position carries the label's word."""
    _check_grain(instance, template)
    if label not in label_space.labels:
        raise ValidationError(f"label {label!r} not in label space {label_space.name!r}")
    prompt = _render(instance, template, mask_word=label_space.verbalizer[label])
    return replace(prompt, demo_label=label)


@dataclass(frozen=True)
class AssembledPrompt:
    """Query prompt followed by one demonstration per label, in label order."""

    query: RenderedPrompt
    demonstrations: tuple[RenderedPrompt, ...]

    @property
    def full_text(self) -> str:
        return " ".join([self.query.text] + [d.text for d in self.demonstrations])

    @property
    def segments(self) -> tuple[Segment, ...]:
        merged: list[Segment] = []
        offset = 0
        for part in (self.query, *self.demonstrations):
            if offset:
                merged.append(Segment(LITERAL, offset - 1, offset))  # joining space
            merged.extend(
                Segment(s.kind, s.start + offset, s.end + offset) for s in part.segments
            )
            offset += len(part.text) + 1
        return tuple(merged)

    def count(self, kind: str) -> int:
        return sum(1 for seg in self.segments if seg.kind == kind)

    @property
    def n_tokens(self) -> int:
        return len(self.full_text.split())

    def to_record(self) -> dict:
        return {
            "id": self.query.instance_id,
            "template": self.query.template_id,
            "full_text": self.full_text,
            "segments": [[s.kind, s.start, s.end] for s in self.segments],
            "query": self.query.to_record(),
            "demonstrations": [d.to_record() for d in self.demonstrations],
        }


def assemble(
    query: RenderedPrompt,
    demos: Iterable[RenderedPrompt],
    label_space: LabelSpace,
) -> AssembledPrompt:
    """Concatenate the query with one demonstration per label.

    Demonstrations are reordered to label-space order; missing or
    duplicate labels and mixed template families are rejected.
    """
    by_label: dict[str, RenderedPrompt] = {}
    for demo in demos:
        if not demo.is_demonstration or demo.demo_label is None:
            raise ValidationError("assemble got a non-demonstration prompt as a demo")
        if demo.demo_label in by_label:
            raise ValidationError(f"duplicate demonstration for label {demo.demo_label!r}")
        if demo.template_id != query.template_id:
            raise ValidationError(
                f"demonstration template {demo.template_id!r} does not match "
                f"query template {query.template_id!r}"
            )
        by_label[demo.demo_label] = demo
    missing = [l for l in label_space.labels if l not in by_label]
    if missing:
        raise ValidationError(f"missing demonstrations for labels {missing}")
    extra = set(by_label) - set(label_space.labels)
    if extra:
        raise ValidationError(f"demonstrations for unknown labels {sorted(extra)}")
    ordered = tuple(by_label[l] for l in label_space.labels)
    return AssembledPrompt(query=query, demonstrations=ordered)


def _shorten(prompt: RenderedPrompt) -> Optional[RenderedPrompt]:
    """Re-render with the raw text shortened by one trailing word."""
    inst, tpl = prompt.source_instance, prompt.source_template
    if inst is None or tpl is None:
        return None
    words = _normalize_ws(inst.text).split()
    if not words:
        return None
    shorter = replace(inst, text=" ".join(words[:-1]))
    out = _render(shorter, tpl, prompt.mask_word)
    return replace(out, demo_label=prompt.demo_label)


def truncate_assembled(assembled: AssembledPrompt, max_tokens: int) -> AssembledPrompt:
    """Best-effort fit within a token budget.

    Demonstration raw text is trimmed first (longest demonstration first),
    the query's raw text last, and the mask never.  If the template
    scaffolding alone exceeds the budget the prompt is returned as short
    as it gets, with a warning.
    """
    current = assembled
    while current.n_tokens > max_tokens:
        demos = list(current.demonstrations)
        candidates = sorted(
            range(len(demos)),
            key=lambda i: -len(_normalize_ws(demos[i].source_instance.text).split())
            if demos[i].source_instance
            else 0,
        )
        progressed = False
        for i in candidates:
            shorter = _shorten(demos[i])
            if shorter is not None:
                demos[i] = shorter
                current = AssembledPrompt(query=current.query, demonstrations=tuple(demos))
                progressed = True
                break
        if not progressed:
            shorter = _shorten(current.query)
            if shorter is None:
                log.warning(
                    "prompt for %s cannot be truncated below %d tokens (budget %d)",
                    current.query.instance_id, current.n_tokens, max_tokens,
                )
                break
            current = AssembledPrompt(query=shorter, demonstrations=current.demonstrations)
    return current
