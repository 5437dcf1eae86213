import random

import pytest

from promptfuse.data import BUILTIN_LABEL_SPACES, DatasetManifest, Instance


def make_coarse_manifest(counts, name="synthetic", space_name="sentiment3-coarse",
                         with_captions=True, prefix="i", rng=None):
    """Synthetic manifest with exact per-label counts, varied texts."""
    rng = rng or random.Random(0)
    space = BUILTIN_LABEL_SPACES[space_name]
    words = ["rain", "dog", "city", "game", "food", "music", "beach", "code"]
    instances = []
    i = 0
    for label, n in counts.items():
        for _ in range(n):
            text = f"{rng.choice(words)} {rng.choice(words)} post {i} feels {label.lower()}"
            instances.append(
                Instance(
                    id=f"{prefix}{i}",
                    text=text,
                    label=label,
                    caption=f"a photo of {rng.choice(words)}" if with_captions else None,
                )
            )
            i += 1
    return DatasetManifest(name=name, label_space=space, instances=tuple(instances))


@pytest.fixture
def sentiment3():
    return BUILTIN_LABEL_SPACES["sentiment3-coarse"]


@pytest.fixture
def sentiment3_fine():
    return BUILTIN_LABEL_SPACES["sentiment3-fine"]
