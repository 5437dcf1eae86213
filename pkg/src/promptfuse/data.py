"""Dataset manifests, instances, and label spaces.

A manifest is a JSON-lines file, one instance per line:

    {"id": "...", "text": "...", "image_ref": "...", "caption": "...",
     "aspect": "...", "label": "...", "image_features": [[...], ...]}

``aspect`` is present exactly when the dataset is fine-grained (aspect
level sentiment); ``image_ref``, ``caption``, and ``image_features`` are
optional.  Captions are produced offline by whatever captioner the
deployment uses; this package never touches image bytes.  A missing
caption renders as the empty string (with a warning at prompt time).

All types are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from .errors import ParseError, ValidationError

log = logging.getLogger(__name__)

COARSE = "coarse"
FINE = "fine"


@dataclass(frozen=True)
class LabelSpace:
    """Ordered label set with a verbalizer mapping each label to one word.

    The label order is significant: it fixes tie-breaking in sampling,
    prediction, and the order of demonstrations in assembled prompts.
    """

    name: str
    kind: str  # COARSE or FINE
    labels: tuple[str, ...]
    verbalizer: Mapping[str, str]

    def __post_init__(self):
        if self.kind not in (COARSE, FINE):
            raise ValidationError(f"label space kind must be coarse|fine, got {self.kind!r}")
        if len(set(self.labels)) != len(self.labels):
            raise ValidationError(f"duplicate labels in label space {self.name!r}")
        missing = [l for l in self.labels if l not in self.verbalizer]
        if missing:
            raise ValidationError(f"verbalizer missing words for labels {missing}")
        words = [self.verbalizer[l] for l in self.labels]
        if len(set(words)) != len(words):
            raise ValidationError(f"verbalizer is not injective in label space {self.name!r}")
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "verbalizer", dict(self.verbalizer))

    @property
    def words(self) -> tuple[str, ...]:
        """Verbalizer words in label order."""
        return tuple(self.verbalizer[l] for l in self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)


def _identity_verbalizer(labels: Sequence[str]) -> dict[str, str]:
    return {l: l.lower() for l in labels}


# Built-in spaces used by the six public sentiment datasets.
BUILTIN_LABEL_SPACES: dict[str, LabelSpace] = {
    "sentiment3-coarse": LabelSpace(
        name="sentiment3-coarse",
        kind=COARSE,
        labels=("Negative", "Neutral", "Positive"),
        verbalizer={"Negative": "terrible", "Neutral": "okay", "Positive": "great"},
    ),
    "sentiment3-fine": LabelSpace(
        name="sentiment3-fine",
        kind=FINE,
        labels=("Negative", "Neutral", "Positive"),
        verbalizer={"Negative": "terrible", "Neutral": "okay", "Positive": "great"},
    ),
    "sentiment2-fine": LabelSpace(
        name="sentiment2-fine",
        kind=FINE,
        labels=("Negative", "Positive"),
        verbalizer={"Negative": "terrible", "Positive": "great"},
    ),
    "emotion7-coarse": LabelSpace(
        name="emotion7-coarse",
        kind=COARSE,
        labels=("Angry", "Bored", "Calm", "Fear", "Happy", "Love", "Sad"),
        verbalizer=_identity_verbalizer(
            ("Angry", "Bored", "Calm", "Fear", "Happy", "Love", "Sad")
        ),
    ),
}


@dataclass(frozen=True)
class Instance:
    """One labeled example: text, optional image artifacts, and a label."""

    id: str
    text: str
    label: str
    image_ref: Optional[str] = None
    caption: Optional[str] = None
    aspect: Optional[str] = None
    image_features: Optional[tuple[tuple[float, ...], ...]] = None

    def __post_init__(self):
        if self.image_features is not None:
            feats = tuple(tuple(float(x) for x in vec) for vec in self.image_features)
            if any(len(v) == 0 for v in feats):
                raise ValidationError(f"instance {self.id!r}: empty image feature vector")
            dims = {len(v) for v in feats}
            if len(dims) > 1:
                raise ValidationError(
                    f"instance {self.id!r}: inconsistent image feature dimensions {sorted(dims)}"
                )
            object.__setattr__(self, "image_features", feats)

    def to_record(self) -> dict:
        rec = {"id": self.id, "text": self.text, "label": self.label}
        if self.image_ref is not None:
            rec["image_ref"] = self.image_ref
        if self.caption is not None:
            rec["caption"] = self.caption
        if self.aspect is not None:
            rec["aspect"] = self.aspect
        if self.image_features is not None:
            rec["image_features"] = [list(v) for v in self.image_features]
        return rec

    @classmethod
    def from_record(cls, rec: Mapping, lineno: Optional[int] = None) -> "Instance":
        where = f" (line {lineno})" if lineno is not None else ""
        if not isinstance(rec, Mapping):
            raise ParseError(f"manifest record is not a JSON object{where}")
        for key in ("id", "text", "label"):
            if key not in rec:
                raise ValidationError(f"manifest record missing {key!r}{where}")
        feats = rec.get("image_features")
        return cls(
            id=str(rec["id"]),
            text=str(rec["text"]),
            label=str(rec["label"]),
            image_ref=rec.get("image_ref"),
            caption=rec.get("caption"),
            aspect=rec.get("aspect"),
            image_features=tuple(tuple(v) for v in feats) if feats is not None else None,
        )


@dataclass(frozen=True)
class DatasetManifest:
    """A named, validated collection of instances over one label space."""

    name: str
    label_space: LabelSpace
    instances: tuple[Instance, ...]
    aspect_categories: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        index: dict[str, Instance] = {}
        for inst in self.instances:
            if inst.id in index:
                raise ValidationError(f"duplicate instance id {inst.id!r} in {self.name!r}")
            index[inst.id] = inst
            if inst.label not in self.label_space.labels:
                raise ValidationError(
                    f"instance {inst.id!r}: unknown label {inst.label!r} "
                    f"(label space {self.label_space.name!r})"
                )
            if self.label_space.kind == FINE and inst.aspect is None:
                raise ValidationError(f"instance {inst.id!r}: fine-grained record missing aspect")
            if self.label_space.kind == COARSE and inst.aspect is not None:
                raise ValidationError(
                    f"instance {inst.id!r}: coarse-grained record carries an aspect"
                )
        if self.aspect_categories is None and self.label_space.kind == FINE:
            cats = sorted({inst.aspect for inst in self.instances})
            object.__setattr__(self, "aspect_categories", tuple(cats))
        elif self.aspect_categories is not None:
            object.__setattr__(self, "aspect_categories", tuple(self.aspect_categories))
        object.__setattr__(self, "_index", index)

    def by_id(self, instance_id: str) -> Instance:
        return self._index[instance_id]

    def subset(self, ids: Iterable[str], name: Optional[str] = None) -> "DatasetManifest":
        """Manifest restricted to ``ids``, preserving original instance order."""
        wanted = set(ids)
        kept = tuple(inst for inst in self.instances if inst.id in wanted)
        if len(kept) != len(wanted):
            missing = wanted - {inst.id for inst in kept}
            raise ValidationError(f"unknown instance ids: {sorted(missing)[:5]}")
        return DatasetManifest(
            name=name or self.name,
            label_space=self.label_space,
            instances=kept,
            aspect_categories=self.aspect_categories,
        )


def resolve_label_space(spec: Union[LabelSpace, str, None], records=None) -> Optional[LabelSpace]:
    """Turn a label-space argument (object, builtin name, or None) into an object."""
    if spec is None or isinstance(spec, LabelSpace):
        return spec
    if spec in BUILTIN_LABEL_SPACES:
        return BUILTIN_LABEL_SPACES[spec]
    raise ValidationError(
        f"unknown label space {spec!r}; built-ins: {sorted(BUILTIN_LABEL_SPACES)}"
    )


def _infer_label_space(instances: Sequence[Instance]) -> LabelSpace:
    """Best-effort label space from record contents.

    Grain is inferred from aspect presence; the label set must match a
    built-in exactly, otherwise an ad-hoc space with a lowercased identity
    verbalizer is constructed (labels ordered by first appearance).
    """
    kind = FINE if any(inst.aspect is not None for inst in instances) else COARSE
    observed = set(inst.label for inst in instances)
    for space in BUILTIN_LABEL_SPACES.values():
        if space.kind == kind and set(space.labels) == observed:
            return space
    order: list[str] = []
    for inst in instances:
        if inst.label not in order:
            order.append(inst.label)
    log.warning(
        "no built-in label space matches labels %s (%s); using identity verbalizer",
        sorted(observed), kind,
    )
    return LabelSpace(
        name="adhoc", kind=kind, labels=tuple(order), verbalizer=_identity_verbalizer(order)
    )


def load_manifest(
    path: Union[str, Path],
    label_space: Union[LabelSpace, str, None] = None,
    name: Optional[str] = None,
    aspect_categories: Optional[Sequence[str]] = None,
) -> DatasetManifest:
    """Load and validate a JSON-lines manifest.

    Raises :class:`ParseError` for malformed lines (with line number) and
    :class:`ValidationError` for invariant violations (unknown label,
    missing aspect on a fine-grained record, duplicate id).
    """
    path = Path(path)
    instances: list[Instance] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from exc
            instances.append(Instance.from_record(rec, lineno=lineno))
    space = resolve_label_space(label_space)
    if space is None:
        space = _infer_label_space(instances)
    return DatasetManifest(
        name=name or path.stem,
        label_space=space,
        instances=tuple(instances),
        aspect_categories=tuple(aspect_categories) if aspect_categories else None,
    )


def write_manifest(instances: Iterable[Instance], path: Union[str, Path]) -> None:
    """Write instances as a JSON-lines manifest (the same format we load)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_record(), ensure_ascii=False) + "\n")


def class_histogram(manifest: DatasetManifest) -> dict[str, int]:
    """Per-label instance counts, zero-filled over the full label space."""
    counts = {label: 0 for label in manifest.label_space.labels}
    for inst in manifest.instances:
        counts[inst.label] += 1
    return counts


def joint_histogram(manifest: DatasetManifest) -> dict[tuple[str, str], int]:
    """Per-(aspect, label) counts over aspect_categories x labels.

    Cells with no instances are present with count zero so that joint
    allocation sees the full grid.
    """
    if manifest.label_space.kind != FINE:
        raise ValidationError("joint histogram requires a fine-grained manifest")
    cats = manifest.aspect_categories or ()
    counts = {(a, l): 0 for a in cats for l in manifest.label_space.labels}
    for inst in manifest.instances:
        key = (inst.aspect, inst.label)
        if key not in counts:
            raise ValidationError(
                f"instance {inst.id!r}: aspect {inst.aspect!r} not in aspect_categories"
            )
        counts[key] += 1
    return counts
