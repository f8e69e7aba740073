"""Plain-text embedding matrix export.

Format: a header line ``"<N> <d>"`` then one line per row,
``id<TAB>v1 v2 ... vd`` with shortest round-trip float reprs, so re-exporting
an imported file gives identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class EmbeddingFileError(ValueError):
    pass


@dataclass
class EmbeddingMatrix:
    ids: list
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise EmbeddingFileError("ids and vector rows must align")
        if len(set(self.ids)) != len(self.ids):
            raise EmbeddingFileError("embedding ids must be unique")
        if not np.all(np.isfinite(self.vectors)):
            raise EmbeddingFileError("embeddings must be finite")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def to_text(self) -> str:
        lines = [f"{len(self.ids)} {self.dim}"]
        for i, row in zip(self.ids, self.vectors):
            lines.append(f"{i}\t" + " ".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EmbeddingMatrix":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise EmbeddingFileError(f"{path}: missing header")
        try:
            n, d = (int(x) for x in lines[0].split())
        except ValueError:
            raise EmbeddingFileError(f"{path}:1: header must be '<N> <d>'") from None
        if len(lines) - 1 != n:
            raise EmbeddingFileError(f"{path}: header announces {n} rows, found {len(lines) - 1}")
        ids, rows = [], []
        for lineno, line in enumerate(lines[1:], start=2):
            rid, sep, rest = line.partition("\t")
            vals = rest.split()
            if not sep or len(vals) != d:
                raise EmbeddingFileError(f"{path}:{lineno}: expected id<TAB> and {d} values")
            ids.append(rid)
            rows.append([float(v) for v in vals])
        return cls(ids, np.array(rows, dtype=np.float64).reshape(n, d))


class LookupEmbedder:
    """Serves cached vectors for known texts (text -> row via an id map)."""

    def __init__(self, matrix: EmbeddingMatrix, texts_by_id: dict):
        self.dim = matrix.dim
        self._by_text = {}
        for i, row in zip(matrix.ids, matrix.vectors):
            if i in texts_by_id:
                self._by_text[texts_by_id[i]] = row

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        missing = [t for t in texts if t not in self._by_text]
        if missing:
            raise EmbeddingFileError(f"no cached embedding for {len(missing)} texts, e.g. {missing[0]!r}")
        return np.array([self._by_text[t] for t in texts]).reshape(len(texts), self.dim)
