"""Test doubles shared across test modules."""

import numpy as np

from semcache.embedding import EmbeddingProviderDescriptor


class TableProvider:
    """Provider that looks vectors up in a fixed text -> vector table."""

    def __init__(self, table: dict[str, np.ndarray]):
        dims = {len(v) for v in table.values()}
        assert len(dims) == 1
        self.table = table
        self.descriptor = EmbeddingProviderDescriptor("table", dims.pop(), True)

    def embed_text(self, text: str) -> np.ndarray:
        return np.asarray(self.table[text], dtype=np.float64)
