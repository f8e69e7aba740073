"""Task specs, file readers and the JSON evaluation report."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from . import tasks as E

REPORT_FORMAT = "gteforge-eval-report/1"

# headline metric per task type
MAIN_METRIC = {
    "retrieval": "ndcg@10",
    "classification": "accuracy",
    "clustering": "v_measure",
    "reranking": "map",
    "pair_classification": "ap",
    "sts": "spearman",
    "summarization": "spearman",
    "zero_shot": "accuracy",
}
TASK_TYPES = tuple(MAIN_METRIC)

# files each task type reads, relative to the config file
TASK_FILES = {
    "retrieval": ("corpus", "queries", "qrels"),
    "classification": ("train", "test"),
    "clustering": ("data",),
    "reranking": ("data",),
    "pair_classification": ("data",),
    "sts": ("data",),
    "summarization": ("data",),
    "zero_shot": ("data",),
}
TASK_OPTIONS = {"zero_shot": ("verbalizers", "raw_inner_product"), "clustering": ("seed",)}

CONVENTIONS = {
    "similarity": "cosine",
    "ranking_tie_break": "ascending document id",
    "ndcg_gain": "2^rel - 1",
    "ndcg_discount": "log2(rank + 1)",
    "classifier": "L2 logistic regression, C=1, Nesterov, 100 iterations",
    "clustering": "mini-batch k-means, batch 32, k-means++ seeding, 100 iterations",
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format", "config_fingerprint", "timestamp", "conventions", "tasks", "average"],
    "additionalProperties": False,
    "properties": {
        "format": {"const": REPORT_FORMAT},
        "config_fingerprint": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "timestamp": {"type": "string"},
        "conventions": {"type": "object", "additionalProperties": {"type": "string"}},
        "tasks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["task", "dataset", "metric", "value", "details"],
                "additionalProperties": False,
                "properties": {
                    "task": {"enum": list(TASK_TYPES)},
                    "dataset": {"type": "string"},
                    "metric": {"type": "string"},
                    "value": {"type": "number"},
                    "details": {"type": "object"},
                },
            },
        },
        "average": {"type": ["number", "null"]},
    },
}

_RANGES = {"spearman": (-1.0, 1.0)}


class TaskSpecError(ValueError):
    pass


def read_jsonl(path) -> list[dict]:
    rows = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise E.TaskInputError(f"{path}:{lineno}: {exc.msg}") from None
    return rows


def _fields(path, rows, *names):
    for lineno, row in enumerate(rows, start=1):
        for n in names:
            if n not in row:
                raise E.TaskInputError(f'{path}: record {lineno} lacks "{n}"')
    return rows


def read_qrels(path) -> dict:
    """``query_id<TAB>doc_id<TAB>relevance`` lines into ``{qid: {did: rel}}``."""
    qrels: dict = {}
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not row:
                continue
            if len(row) != 3:
                raise E.TaskInputError(f"{path}:{lineno}: expected 3 tab-separated fields")
            try:
                rel = int(row[2])
            except ValueError:
                raise E.TaskInputError(f"{path}:{lineno}: relevance must be an integer") from None
            if rel < 0:
                raise E.TaskInputError(f"{path}:{lineno}: relevance must be >= 0")
            qrels.setdefault(row[0], {})[row[1]] = rel
    return qrels


def write_qrels(path, qrels: dict) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for q, docs in qrels.items():
            for d, r in docs.items():
                fh.write(f"{q}\t{d}\t{r}\n")


def validate_task_spec(spec: dict, where: str = "eval.tasks") -> None:
    ttype = spec.get("type")
    if ttype not in TASK_TYPES:
        raise TaskSpecError(
            f"{where}: unsupported task type {ttype!r}; supported: {', '.join(TASK_TYPES)}"
        )
    allowed = {"type", "name"} | set(TASK_FILES[ttype]) | set(TASK_OPTIONS.get(ttype, ()))
    unknown = set(spec) - allowed
    if unknown:
        raise TaskSpecError(f"{where}: unknown keys {sorted(unknown)} for task type {ttype}")
    for key in ("name",) + TASK_FILES[ttype]:
        if key not in spec:
            raise TaskSpecError(f"{where}.{key}: required for task type {ttype}")
    if ttype == "zero_shot" and not isinstance(spec.get("verbalizers"), dict):
        raise TaskSpecError(f"{where}.verbalizers: mapping of label -> verbalizer text required")


def task_texts(spec: dict, base_dir=".") -> list[str]:
    """Every text a task will embed (for cached-embedding evaluation)."""
    p = {k: Path(base_dir) / spec[k] for k in TASK_FILES[spec["type"]]}
    t = spec["type"]
    if t == "retrieval":
        return [r["text"] for r in read_jsonl(p["corpus"]) + read_jsonl(p["queries"])]
    if t == "classification":
        return [r["text"] for r in read_jsonl(p["train"]) + read_jsonl(p["test"])]
    rows = read_jsonl(p["data"])
    if t in ("clustering",):
        return [r["text"] for r in rows]
    if t == "zero_shot":
        return [r["text"] for r in rows] + list(spec["verbalizers"].values())
    if t == "reranking":
        return [x for r in rows for x in [r["query"], *r["positive"], *r["negative"]]]
    if t in ("pair_classification", "sts"):
        return [x for r in rows for x in (r["s1"], r["s2"])]
    return [x for r in rows for x in [r["summary"], *r["references"]]]


def run_task(spec: dict, embed: E.Embed, base_dir=".") -> dict:
    """Evaluate one task spec; returns a report entry."""
    validate_task_spec(spec)
    t = spec["type"]
    p = {k: Path(base_dir) / spec[k] for k in TASK_FILES[t]}
    if t == "retrieval":
        corpus = {str(r["id"]): r["text"] for r in _fields(p["corpus"], read_jsonl(p["corpus"]), "id", "text")}
        queries = {str(r["id"]): r["text"] for r in _fields(p["queries"], read_jsonl(p["queries"]), "id", "text")}
        details = E.eval_retrieval(embed, corpus, queries, read_qrels(p["qrels"]))
    elif t == "classification":
        tr = _fields(p["train"], read_jsonl(p["train"]), "text", "label")
        te = _fields(p["test"], read_jsonl(p["test"]), "text", "label")
        details = E.eval_classification(embed, [r["text"] for r in tr], [r["label"] for r in tr],
                                        [r["text"] for r in te], [r["label"] for r in te])
    else:
        rows = read_jsonl(p["data"])
        if t == "clustering":
            _fields(p["data"], rows, "text", "label")
            details = E.eval_clustering(embed, [r["text"] for r in rows], [r["label"] for r in rows],
                                        seed=int(spec.get("seed", 0)))
        elif t == "reranking":
            details = E.eval_reranking(embed, _fields(p["data"], rows, "query", "positive", "negative"))
        elif t == "pair_classification":
            _fields(p["data"], rows, "s1", "s2", "label")
            details = E.eval_pair_classification(embed, [(r["s1"], r["s2"]) for r in rows],
                                                 [r["label"] for r in rows])
        elif t == "sts":
            _fields(p["data"], rows, "s1", "s2", "score")
            details = E.eval_sts(embed, [(r["s1"], r["s2"]) for r in rows], [float(r["score"]) for r in rows])
        elif t == "summarization":
            _fields(p["data"], rows, "summary", "references", "score")
            details = E.eval_summarization(embed, [r["summary"] for r in rows], [r["references"] for r in rows],
                                           [float(r["score"]) for r in rows])
            details.pop("quality")
        else:
            _fields(p["data"], rows, "text", "label")
            labels = list(spec["verbalizers"])
            details = E.zero_shot_classify(embed, [r["text"] for r in rows], labels,
                                           [spec["verbalizers"][k] for k in labels],
                                           gold=[r["label"] for r in rows],
                                           normalize=not spec.get("raw_inner_product", False))
            details.pop("predictions")
    metric = MAIN_METRIC[t]
    value = float(details[metric])
    lo, hi = _RANGES.get(metric.split("@")[0], (0.0, 1.0))
    if not lo - 1e-12 <= value <= hi + 1e-12:
        raise AssertionError(f"{metric}={value} outside [{lo}, {hi}]")
    return {"task": t, "dataset": str(spec["name"]), "metric": metric, "value": value, "details": details}


def config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def report_timestamp() -> str:
    """UTC time, or ``SOURCE_DATE_EPOCH`` when set for reproducible output."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class EvalReport:
    config_fingerprint: str
    tasks: list = field(default_factory=list)
    timestamp: Optional[str] = None

    @property
    def average(self) -> Optional[float]:
        if not self.tasks:
            return None
        return sum(t["value"] for t in self.tasks) / len(self.tasks)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "config_fingerprint": self.config_fingerprint,
            "timestamp": self.timestamp or report_timestamp(),
            "conventions": dict(CONVENTIONS),
            "tasks": self.tasks,
            "average": self.average,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("format") != REPORT_FORMAT:
            raise ValueError(f"not an evaluation report (format {d.get('format')!r})")
        return cls(d["config_fingerprint"], list(d["tasks"]), d["timestamp"])


def render_table(report: EvalReport) -> str:
    rows = [(t["task"], t["dataset"], t["metric"], f"{t['value']:.4f}") for t in report.tasks]
    avg = report.average
    rows.append(("Avg", "", "", "" if avg is None else f"{avg:.4f}"))
    head = ("task", "dataset", "metric", "value")
    widths = [max(len(r[i]) for r in rows + [head]) for i in range(4)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*r) for r in rows]
    return "\n".join(lines)
