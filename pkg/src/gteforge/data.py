"""JSONL sources, exact-match dedup, size-tempered source sampling and train groups."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("pair", "triple")
STAGES = ("pretrain", "finetune")


class DataError(ValueError):
    """Unreadable or malformed dataset input."""


@dataclass(frozen=True)
class PairRecord:
    query: str
    doc: str
    id: Optional[str] = None

    def __post_init__(self):
        if not self.query.strip() or not self.doc.strip():
            raise DataError("pair record needs non-empty query and doc")

    def to_json(self) -> dict:
        d = {"query": self.query, "doc": self.doc}
        if self.id is not None:
            d["id"] = self.id
        return d

    def dedup_key(self) -> tuple:
        return (self.query.strip(), self.doc.strip())


@dataclass(frozen=True)
class TripleRecord:
    query: str
    pos: str
    negs: tuple = ()

    def __post_init__(self):
        if not self.query.strip() or not self.pos.strip():
            raise DataError("triple record needs non-empty query and pos")
        object.__setattr__(self, "negs", tuple(self.negs))

    def to_json(self) -> dict:
        return {"query": self.query, "pos": self.pos, "negs": list(self.negs)}

    def dedup_key(self) -> tuple:
        return (self.query.strip(), self.pos.strip())


Record = Union[PairRecord, TripleRecord]


def _parse(obj, kind: str) -> Record:
    if not isinstance(obj, dict):
        raise DataError("record must be a JSON object")
    if kind == "pair":
        for key in ("query", "doc"):
            if not isinstance(obj.get(key), str):
                raise DataError(f'missing or non-string "{key}" field')
        rid = obj.get("id")
        return PairRecord(obj["query"], obj["doc"], None if rid is None else str(rid))
    for key in ("query", "pos"):
        if not isinstance(obj.get(key), str):
            raise DataError(f'missing or non-string "{key}" field')
    negs = obj.get("negs", [])
    if not isinstance(negs, list) or not all(isinstance(n, str) for n in negs):
        raise DataError('"negs" must be a list of strings')
    return TripleRecord(obj["query"], obj["pos"], tuple(negs))


def load_source(path, kind: str) -> list[Record]:
    """Parse a JSON Lines file of pair or triple records, failing on the first bad line."""
    if kind not in KINDS:
        raise DataError(f"unknown source kind {kind!r}; expected one of {KINDS}")
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(_parse(json.loads(line), kind))
            except (json.JSONDecodeError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return records


def write_source(path, records: Iterable[Record]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def dedup_exact(records: Sequence[Record]) -> list[Record]:
    """Drop records whose whitespace-trimmed (query, doc) was already seen."""
    seen = set()
    out = []
    for r in records:
        key = r.dedup_key()
        if key not in seen:
            seen.add(key)
            out.append(r)
    return out


def sampling_probs(sizes: Sequence[float], alpha: float) -> np.ndarray:
    """``p_i = n_i^alpha / sum_j n_j^alpha``."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0:
        raise DataError("need at least one source size")
    if np.any(sizes <= 0):
        raise DataError("source sizes must be positive")
    if not 0.0 <= alpha <= 1.0:
        raise DataError("alpha must lie in [0, 1]")
    w = sizes ** alpha
    return w / w.sum()


@dataclass
class Source:
    name: str
    kind: str
    records: list
    task_family: str = ""
    path: Optional[str] = None

    @property
    def size(self) -> int:
        return len(self.records)


class SourceRegistry:
    """Named, deduplicated record stores."""

    def __init__(self, sources: Sequence[Source] = ()):
        self.sources: list[Source] = []
        for s in sources:
            self.add(s)

    def add(self, source: Source) -> None:
        if any(s.name == source.name for s in self.sources):
            raise DataError(f"duplicate source name {source.name!r}")
        if source.kind not in KINDS:
            raise DataError(f"source {source.name!r}: unknown kind {source.kind!r}")
        if not source.records:
            raise DataError(f"source {source.name!r} is empty")
        self.sources.append(source)

    @classmethod
    def from_entries(cls, entries: Sequence[dict], base_dir=None) -> "SourceRegistry":
        """Load every ``{name, path, kind, task_family}`` entry and dedup it."""
        reg = cls()
        for e in entries:
            path = Path(e["path"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            raw = load_source(path, e["kind"])
            recs = dedup_exact(raw)
            if len(recs) < len(raw):
                log.info("source %s: dropped %d exact duplicates", e["name"], len(raw) - len(recs))
            reg.add(Source(e["name"], e["kind"], recs, e.get("task_family", ""), str(e["path"])))
        return reg

    def of_kind(self, kind: str) -> "SourceRegistry":
        return SourceRegistry([s for s in self.sources if s.kind == kind])

    def __len__(self) -> int:
        return len(self.sources)

    def __iter__(self):
        return iter(self.sources)

    def sizes(self) -> list[int]:
        return [s.size for s in self.sources]

    def total_records(self) -> int:
        return sum(self.sizes())


@dataclass
class Batch:
    source: str
    records: list
    stage: str = "pretrain"


def _stream_perm(seed: int, source_idx: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, source_idx, epoch]).permutation(n)


@dataclass
class SamplerState:
    """Everything needed to resume the batch stream exactly."""

    alpha: float
    probs: list
    seed: int
    draws: int = 0
    rng_state: dict = field(default_factory=dict)
    # per source: [epoch, position within that epoch's permutation]
    cursors: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "probs": [float(p) for p in self.probs],
            "seed": self.seed,
            "draws": self.draws,
            "rng_state": self.rng_state,
            "cursors": [list(c) for c in self.cursors],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerState":
        return cls(d["alpha"], list(d["probs"]), d["seed"], d["draws"], d["rng_state"],
                   [list(c) for c in d["cursors"]])


class Sampler:
    """Task-homogeneous batch stream.

    Each batch picks one source from the categorical distribution over
    ``n_i^alpha`` and takes consecutive records from that source's shuffled
    order, starting a freshly seeded permutation whenever a source runs out.
    """

    def __init__(self, registry: SourceRegistry, alpha: float = 0.5, seed: int = 0,
                 stage: str = "pretrain", state: Optional[SamplerState] = None):
        if len(registry) == 0:
            raise DataError("cannot sample from an empty registry")
        self.registry = registry
        self.stage = stage
        if state is None:
            probs = sampling_probs(registry.sizes(), alpha)
            rng = np.random.default_rng(seed)
            state = SamplerState(alpha, list(probs), seed, 0, rng.bit_generator.state,
                                 [[0, 0] for _ in registry])
        if len(state.cursors) != len(registry):
            raise DataError("sampler state does not match the registry")
        self.state = state
        self._rng = np.random.default_rng()
        self._rng.bit_generator.state = state.rng_state
        self._cdf = np.cumsum(np.asarray(state.probs))
        self._perms: dict = {}

    def _perm(self, idx: int, epoch: int) -> np.ndarray:
        key = (idx, epoch)
        if key not in self._perms:
            self._perms = {k: v for k, v in self._perms.items() if k[0] != idx}
            self._perms[key] = _stream_perm(self.state.seed, idx, epoch, self.registry.sources[idx].size)
        return self._perms[key]

    def draw_source(self) -> int:
        u = self._rng.random()
        idx = int(np.searchsorted(self._cdf, u, side="right"))
        return min(idx, len(self._cdf) - 1)

    def next_batch(self, batch_size: int) -> Batch:
        if batch_size < 1:
            raise DataError("batch_size must be >= 1")
        idx = self.draw_source()
        src = self.registry.sources[idx]
        epoch, pos = self.state.cursors[idx]
        out = []
        while len(out) < batch_size:
            if pos >= src.size:
                epoch, pos = epoch + 1, 0
            perm = self._perm(idx, epoch)
            take = min(batch_size - len(out), src.size - pos)
            out.extend(src.records[i] for i in perm[pos:pos + take])
            pos += take
        self.state.cursors[idx] = [epoch, pos]
        self.state.draws += 1
        self.state.rng_state = self._rng.bit_generator.state
        return Batch(src.name, out, self.stage)


def next_batch(sampler: Sampler, batch_size: int) -> Batch:
    return sampler.next_batch(batch_size)


def build_finetune_group(record: TripleRecord, corpus: Sequence[str], group_size: int = 16,
                         rng: Optional[np.random.Generator] = None) -> list[str]:
    """``[pos, hard negatives..., random fill...]`` of exactly ``group_size`` texts.

    Hard negatives beyond capacity are cut in file order.  The fill is drawn
    without replacement from corpus texts that differ from the positive.
    """
    if group_size < 1:
        raise DataError("group_size must be >= 1")
    group = [record.pos] + list(record.negs[: group_size - 1])
    need = group_size - len(group)
    if need:
        pool = [t for t in corpus if t != record.pos]
        if len(pool) < need:
            raise DataError(
                f"corpus has {len(pool)} usable texts but {need} random negatives are required"
            )
        rng = rng if rng is not None else np.random.default_rng(0)
        picks = rng.choice(len(pool), size=need, replace=False)
        group.extend(pool[i] for i in picks)
    return group
