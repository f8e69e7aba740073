"""Synthetic paraphrase world for toy-scale training and evaluation.

Texts are bags of *concepts*.  Every concept has two surface words
(synonyms) and belongs to one topic.  A paraphrase keeps most concepts of a
text but re-picks synonyms and word order, so matching paraphrases needs the
model to learn which surface words are interchangeable.  Texts drawn from the
same topic make natural hard negatives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .data import PairRecord, TripleRecord

_CONS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
FILLERS = ("the", "a", "of", "and", "to", "in", "is", "for")


def _pseudo_words(count: int, rng: np.random.Generator) -> list[str]:
    words, seen = [], set()
    while len(words) < count:
        w = "".join(rng.choice(list(_CONS)) + rng.choice(list(_VOWELS)) for _ in range(3))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


@dataclass
class ParaphraseWorld:
    num_topics: int = 20
    concepts_per_topic: int = 12
    text_concepts: int = 5
    seed: int = 0

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 101])
        n = self.num_topics * self.concepts_per_topic
        words = _pseudo_words(2 * n, rng)
        self.synonyms = [(words[2 * i], words[2 * i + 1]) for i in range(n)]
        self.topic_of = [i // self.concepts_per_topic for i in range(n)]

    def concepts_of_topic(self, topic: int) -> list[int]:
        k = self.concepts_per_topic
        return list(range(topic * k, (topic + 1) * k))

    def sample_concepts(self, rng: np.random.Generator, topic: int | None = None) -> list[int]:
        if topic is None:
            topic = int(rng.integers(self.num_topics))
        pool = self.concepts_of_topic(topic)
        return [int(c) for c in rng.choice(pool, size=self.text_concepts, replace=False)]

    def render(self, concepts, rng: np.random.Generator, drop: int = 0) -> str:
        keep = list(concepts)
        if drop:
            for i in sorted(rng.choice(len(keep), size=drop, replace=False), reverse=True):
                keep.pop(int(i))
        words = [self.synonyms[c][int(rng.integers(2))] for c in keep]
        words.append(FILLERS[int(rng.integers(len(FILLERS)))])
        order = rng.permutation(len(words))
        return " ".join(words[i] for i in order)

    def pairs(self, count: int, seed: int) -> list[PairRecord]:
        rng = np.random.default_rng([self.seed, seed, 1])
        out = []
        for _ in range(count):
            c = self.sample_concepts(rng)
            out.append(PairRecord(self.render(c, rng, drop=1), self.render(c, rng)))
        return out

    def copy_pairs(self, count: int, seed: int) -> list[PairRecord]:
        rng = np.random.default_rng([self.seed, seed, 2])
        out = []
        for _ in range(count):
            t = self.render(self.sample_concepts(rng), rng)
            out.append(PairRecord(t, t))
        return out

    def triples(self, count: int, seed: int, hard_negatives: int = 7,
                noise_negatives: bool = False) -> list[TripleRecord]:
        """Fine-tuning triples; negatives share the topic unless ``noise_negatives``."""
        rng = np.random.default_rng([self.seed, seed, 3])
        out = []
        for _ in range(count):
            topic = int(rng.integers(self.num_topics))
            c = self.sample_concepts(rng, topic)
            negs = []
            for _ in range(hard_negatives):
                nt = None if noise_negatives else topic
                negs.append(self.render(self.sample_concepts(rng, nt), rng))
            out.append(TripleRecord(self.render(c, rng, drop=1), self.render(c, rng), tuple(negs)))
        return out

    def retrieval_fixture(self, num_queries: int, seed: int, distractors_per_query: int = 1):
        """``(corpus, queries, qrels)``; query ``qN`` is judged relevant only to ``dN``."""
        rng = np.random.default_rng([self.seed, seed, 4])
        corpus, queries, qrels = {}, {}, {}
        for i in range(num_queries):
            topic = int(rng.integers(self.num_topics))
            c = self.sample_concepts(rng, topic)
            queries[f"q{i:04d}"] = self.render(c, rng, drop=1)
            corpus[f"d{i:04d}"] = self.render(c, rng)
            qrels[f"q{i:04d}"] = {f"d{i:04d}": 1}
            for j in range(distractors_per_query):
                corpus[f"x{i:04d}_{j}"] = self.render(self.sample_concepts(rng, topic), rng)
        return corpus, queries, qrels

    def labeled_texts(self, count: int, seed: int) -> list[tuple[str, str]]:
        """``(text, topic label)`` rows for classification and clustering."""
        rng = np.random.default_rng([self.seed, seed, 5])
        out = []
        for _ in range(count):
            topic = int(rng.integers(self.num_topics))
            out.append((self.render(self.sample_concepts(rng, topic), rng), f"topic{topic}"))
        return out

    def all_texts(self) -> list[str]:
        return [w for pair in self.synonyms for w in pair] + list(FILLERS)


def _jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")


def write_toy_suite(out_dir, seed: int = 0, pretrain_steps: int = 200, finetune_steps: int = 100) -> Path:
    """Write training sources, one file set per eval task type and ``config.yaml``."""
    out = Path(out_dir)
    (out / "data").mkdir(parents=True, exist_ok=True)
    (out / "eval").mkdir(parents=True, exist_ok=True)
    w = ParaphraseWorld(seed=seed)
    rng = np.random.default_rng([seed, 99])

    _jsonl(out / "data/para.jsonl", [r.to_json() for r in w.pairs(400, seed=1)])
    _jsonl(out / "data/copy.jsonl", [r.to_json() for r in w.copy_pairs(100, seed=2)])
    _jsonl(out / "data/triples.jsonl", [r.to_json() for r in w.triples(200, seed=3)])
    _jsonl(out / "data/lexicon.jsonl", [{"text": t} for t in w.all_texts()])

    corpus, queries, qrels = w.retrieval_fixture(100, seed=10)
    _jsonl(out / "eval/corpus.jsonl", [{"id": k, "text": v} for k, v in corpus.items()])
    _jsonl(out / "eval/queries.jsonl", [{"id": k, "text": v} for k, v in queries.items()])
    with open(out / "eval/qrels.tsv", "w", encoding="utf-8") as fh:
        for q, docs in qrels.items():
            for d, r in docs.items():
                fh.write(f"{q}\t{d}\t{r}\n")

    few = [f"topic{t}" for t in range(4)]
    lab = [(t, y) for t, y in w.labeled_texts(600, seed=11) if y in few]
    _jsonl(out / "eval/cls_train.jsonl", [{"text": t, "label": y} for t, y in lab[: len(lab) // 2]])
    _jsonl(out / "eval/cls_test.jsonl", [{"text": t, "label": y} for t, y in lab[len(lab) // 2:]])
    _jsonl(out / "eval/clustering.jsonl", [{"text": t, "label": y} for t, y in lab[:80]])

    rerank = []
    for _ in range(30):
        topic = int(rng.integers(w.num_topics))
        c = w.sample_concepts(rng, topic)
        rerank.append({"query": w.render(c, rng, drop=1), "positive": [w.render(c, rng)],
                       "negative": [w.render(w.sample_concepts(rng, topic), rng) for _ in range(4)]})
    _jsonl(out / "eval/reranking.jsonl", rerank)

    pairs, sts, summ = [], [], []
    for i in range(60):
        topic = int(rng.integers(w.num_topics))
        c = w.sample_concepts(rng, topic)
        other = w.sample_concepts(rng, topic)
        pairs.append({"s1": w.render(c, rng), "s2": w.render(c if i % 2 else other, rng), "label": i % 2})
        keep = int(rng.integers(0, w.text_concepts + 1))
        mixed = c[:keep] + [x for x in other if x not in c][: w.text_concepts - keep]
        overlap = len(set(c) & set(mixed)) / w.text_concepts
        sts.append({"s1": w.render(c, rng), "s2": w.render(mixed, rng), "score": round(1 + 4 * overlap, 3)})
        summ.append({"summary": w.render(mixed, rng),
                     "references": [w.render(c, rng, drop=1) for _ in range(3)],
                     "score": round(1 + 4 * overlap, 3)})
    _jsonl(out / "eval/pairs.jsonl", pairs)
    _jsonl(out / "eval/sts.jsonl", sts)
    _jsonl(out / "eval/summarization.jsonl", summ)

    zs = [(t, y) for t, y in w.labeled_texts(400, seed=12) if y in ("topic0", "topic1")]
    _jsonl(out / "eval/zeroshot.jsonl", [{"text": t, "label": y} for t, y in zs])
    verbalizers = {
        y: "this is an example of " + " ".join(w.synonyms[c][0] for c in w.concepts_of_topic(int(y[5:])))
        for y in ("topic0", "topic1")
    }

    config = {
        "seed": seed,
        "output_dir": "run",
        "encoder": {"vocab_size": len(set(w.all_texts())) + 3, "embed_dim": 32, "num_layers": 2, "num_heads": 2,
                    "ffn_dim": 64, "max_seq_len": 64},
        "vocab": {"corpus": ["data/lexicon.jsonl", "data/para.jsonl", "data/copy.jsonl", "data/triples.jsonl"]},
        "data": {"sources": [
            {"name": "para", "path": "data/para.jsonl", "kind": "pair", "task_family": "paraphrase"},
            {"name": "copy", "path": "data/copy.jsonl", "kind": "pair", "task_family": "copy"},
            {"name": "triples", "path": "data/triples.jsonl", "kind": "triple", "task_family": "retrieval"},
        ]},
        "pretrain": {"total_steps": pretrain_steps, "batch_size": 32, "peak_lr": 1e-3, "max_seq_len": 32},
        "finetune": {"total_steps": finetune_steps, "batch_size": 8, "group_size": 8, "max_seq_len": 64},
        "eval": {"tasks": [
            {"type": "retrieval", "name": "toy-retrieval", "corpus": "eval/corpus.jsonl",
             "queries": "eval/queries.jsonl", "qrels": "eval/qrels.tsv"},
            {"type": "classification", "name": "toy-topics", "train": "eval/cls_train.jsonl",
             "test": "eval/cls_test.jsonl"},
            {"type": "clustering", "name": "toy-topics", "data": "eval/clustering.jsonl"},
            {"type": "reranking", "name": "toy-rerank", "data": "eval/reranking.jsonl"},
            {"type": "pair_classification", "name": "toy-paraphrase", "data": "eval/pairs.jsonl"},
            {"type": "sts", "name": "toy-sts", "data": "eval/sts.jsonl"},
            {"type": "summarization", "name": "toy-summ", "data": "eval/summarization.jsonl"},
            {"type": "zero_shot", "name": "toy-zeroshot", "data": "eval/zeroshot.jsonl",
             "verbalizers": verbalizers},
        ]},
    }
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False), encoding="utf-8")
    return out / "config.yaml"


if __name__ == "__main__":
    import sys

    target = sys.argv[1] if len(sys.argv) > 1 else "toy"
    print(write_toy_suite(target))
