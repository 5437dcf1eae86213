"""Split loading for fine-tune jobs.

Splits arrive as the JSON-lines manifest format pinned in INTERFACE.md;
the service only needs a handful of fields, so loading stays deliberately
minimal and tolerant of extra keys.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional


@dataclass(frozen=True)
class SplitInstance:
    id: str
    text: str
    label: str
    caption: str = ""
    aspect: Optional[str] = None
    image_features: Optional[list[list[float]]] = None


@dataclass(frozen=True)
class JobLabelSpace:
    kind: str
    labels: tuple[str, ...]
    verbalizer: dict[str, str]

    @classmethod
    def from_payload(cls, raw: dict) -> "JobLabelSpace":
        labels = tuple(raw["labels"])
        verbalizer = dict(raw["verbalizer"])
        missing = [l for l in labels if l not in verbalizer]
        if missing:
            raise ValueError(f"verbalizer missing words for {missing}")
        return cls(kind=raw.get("kind", "coarse"), labels=labels, verbalizer=verbalizer)


def load_split(path: str) -> list[SplitInstance]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"split not found: {path}")
    out = []
    with p.open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                SplitInstance(
                    id=str(rec["id"]),
                    text=str(rec.get("text", "")),
                    label=str(rec["label"]),
                    caption=str(rec.get("caption") or ""),
                    aspect=rec.get("aspect"),
                    image_features=rec.get("image_features"),
                )
            )
    if not out:
        raise ValueError(f"split is empty: {path}")
    return out
