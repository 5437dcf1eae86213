"""Masked-LM inference microservice.

Serves mask scoring over verbalizer words, unit-norm sentence embeddings,
image-feature projection, and prompt-based fine-tuning jobs behind the
JSON/HTTP contract pinned in the repo-root INTERFACE.md.
"""

from .app import ModelService, create_app
from .model import TinyMaskedLM

__version__ = "0.1.0"
