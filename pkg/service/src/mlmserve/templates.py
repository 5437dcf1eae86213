"""Training-side prompt rendering.

Fine-tune jobs reference templates by id; the canonical rendered forms
are pinned in INTERFACE.md at the repo root and must stay byte-compatible
with whatever client compiles the prompts this service scores at eval
time.  Only what training needs is implemented: query/demonstration
rendering and assembly in label order.
"""

from __future__ import annotations

from typing import Optional

from .data import JobLabelSpace, SplitInstance

TEXT_PATTERNS = {
    "c1": '<s> [T] </s> It was <mask>. </s>',
    "c2": '<s> The sentence "[T]" has <mask> sentiment. </s>',
    "c3": '<s> Text: [T]. Sentiment of text: <mask>. </s>',
    "c4": '<s> <mask> <PT:0> [T] <PT:1> </s>',
    "f1": '<s> [T] [A] </s> It was <mask>. </s>',
    "f2": '<s> The aspect "[A]" in sentence "[T]" has <mask> sentiment. </s>',
    "f3": '<s> Text: [T]. Aspect: [A]. Sentiment of aspect: <mask>. </s>',
    "f4": '<s> <mask> <PT:0> [T] <PT:1> [A] <PT:2> </s>',
}
IMAGE_PATTERNS = {
    "c4": '<s> [V] [C] <PT:2> </s>',
    "f4": '<s> [V] [C] <PT:3> </s>',
}
DEFAULT_IMAGE_PATTERN = '<s> [V] is [C] </s>'

TEMPLATE_IDS = tuple(TEXT_PATTERNS)


def _ws(value: str) -> str:
    return " ".join(value.split())


def render(
    instance: SplitInstance,
    template_id: str,
    n_image_slots: int,
    n_prompt_tokens: int,
    mask_word: Optional[str] = None,
) -> str:
    """Canonical prompt text; the mask is verbalized for demonstrations."""
    if template_id not in TEXT_PATTERNS:
        raise ValueError(f"unknown template id {template_id!r}")
    image = IMAGE_PATTERNS.get(template_id, DEFAULT_IMAGE_PATTERN)
    pattern = image + " " + TEXT_PATTERNS[template_id]
    out_tokens: list[str] = []
    for token in pattern.split():
        if token == "[V]":
            out_tokens.extend(f"<IMG_{k}>" for k in range(n_image_slots))
        elif token.startswith("<PT:"):
            group = int(token[4:-1])
            base = group * n_prompt_tokens
            out_tokens.extend(f"<PT_{base + j}>" for j in range(n_prompt_tokens))
        else:
            rendered = token
            if mask_word is not None:
                # Verbalize before text substitution so a literal <mask>
                # inside user text is never rewritten.
                rendered = rendered.replace("<mask>", mask_word)
            rendered = (
                rendered.replace("[T]", _ws(instance.text))
                .replace("[A]", _ws(instance.aspect or ""))
                .replace("[C]", _ws(instance.caption))
            )
            if rendered:
                out_tokens.append(rendered)
    return " ".join(" ".join(out_tokens).split())


def assemble(
    query: SplitInstance,
    demos: dict[str, SplitInstance],
    template_id: str,
    space: JobLabelSpace,
    n_image_slots: int,
    n_prompt_tokens: int,
    query_mask_word: Optional[str] = None,
) -> str:
    """Query followed by one verbalized demonstration per label."""
    parts = [render(query, template_id, n_image_slots, n_prompt_tokens, query_mask_word)]
    for label in space.labels:
        parts.append(
            render(
                demos[label], template_id, n_image_slots, n_prompt_tokens,
                mask_word=space.verbalizer[label],
            )
        )
    return " ".join(parts)
