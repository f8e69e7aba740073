"""Command-line entry point: ``gteforge <command> ...``.

Exit codes: 0 success, 2 configuration or validation error, 3 runtime or data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig, load_config
from .data import DataError, SourceRegistry
from .encoder import Embedder, InputError, Vocabulary, build_vocab
from .evaluation.embeddings import EmbeddingFileError, EmbeddingMatrix, LookupEmbedder
from .evaluation.report import EvalReport, config_fingerprint, render_table, run_task, task_texts
from .evaluation.tasks import TaskInputError
from .tensor import ContractError, DimensionError, DomainError
from .trainer import (
    TrainingError,
    finetune,
    initial_checkpoint,
    model_from_checkpoint,
    pretrain,
    vocab_from_checkpoint,
)

log = logging.getLogger("gteforge")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

_RUNTIME_ERRORS = (DataError, TrainingError, CheckpointError, InputError, TaskInputError,
                   EmbeddingFileError, DimensionError, DomainError, ContractError, OSError)


def _strings(obj):
    if isinstance(obj, str):
        yield obj
    elif isinstance(obj, list):
        for v in obj:
            yield from _strings(v)
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from _strings(v)


def corpus_texts(cfg: RunConfig):
    """Every string field of every JSONL record in ``vocab.corpus``, in file order."""
    if not cfg.vocab_corpus:
        raise ConfigError("vocab.corpus: required (list of JSONL files)")
    paths = []
    for i, p in enumerate(cfg.vocab_corpus):
        path = cfg.resolve(p)
        if not path.is_file():
            raise ConfigError(f"vocab.corpus[{i}]: file not found: {path}")
        paths.append(path)
    for path in paths:
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    yield from _strings(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: {exc.msg}") from None


def cmd_build_vocab(cfg: RunConfig) -> Path:
    vocab = build_vocab(corpus_texts(cfg), cfg.encoder.vocab_size)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    vocab.save(cfg.vocab_path)
    log.info("wrote %d tokens to %s", len(vocab), cfg.vocab_path)
    return cfg.vocab_path


def _registry(cfg: RunConfig) -> SourceRegistry:
    entries = [dict(s, path=str(cfg.resolve(s["path"]))) for s in cfg.sources]
    return SourceRegistry.from_entries(entries)


def write_loss_log(path: Path, rows) -> None:
    lines = ["step,loss,lr"] + [f"{s},{loss!r},{lr!r}" for s, loss, lr in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _progress(stage: str, total: int):
    every = max(1, total // 10)

    def cb(step, loss, lr):
        if step % every == 0 or step == total - 1:
            log.info("%s step %d/%d loss %.4f lr %.3g", stage, step + 1, total, loss, lr)

    return cb


def cmd_train(cfg: RunConfig, stage: str, checkpoint=None, from_scratch: bool = False) -> Path:
    if not cfg.vocab_path.is_file():
        raise ConfigError(f"output_dir: vocabulary {cfg.vocab_path} missing; run build-vocab first")
    vocab = Vocabulary.load(cfg.vocab_path)
    if len(vocab) > cfg.encoder.vocab_size:
        raise ConfigError(f"encoder.vocab_size: {cfg.encoder.vocab_size} is smaller than the vocabulary")
    if stage == "pretrain":
        start = initial_checkpoint(cfg.encoder, vocab, cfg.seed)
        result = pretrain(cfg.pretrain, _registry(cfg), start,
                          _progress(stage, cfg.pretrain.total_steps))
    else:
        if checkpoint is None and not from_scratch:
            raise ConfigError("finetune: --checkpoint is required (or --from-scratch)")
        if checkpoint is not None and from_scratch:
            raise ConfigError("finetune: --checkpoint and --from-scratch are exclusive")
        start = initial_checkpoint(cfg.encoder, vocab, cfg.seed) if from_scratch else Checkpoint.load(checkpoint)
        result = finetune(cfg.finetune, start, _registry(cfg), _progress(stage, cfg.finetune.total_steps))
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.output_dir / f"{stage}.ckpt"
    result.save(out)
    write_loss_log(cfg.output_dir / f"{stage}_log.csv", result.loss_log)
    log.info("wrote %s", out)
    return out


def read_texts(path) -> tuple[list, list]:
    ids, texts, seen = [], [], set()
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc.msg}") from None
            if not isinstance(row, dict) or "id" not in row or not isinstance(row.get("text"), str):
                raise DataError(f'{path}:{lineno}: expected {{"id": ..., "text": string}}')
            rid = str(row["id"])
            if rid in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            ids.append(rid)
            texts.append(row["text"])
    return ids, texts


def cmd_embed(checkpoint, input_path, output_path) -> Path:
    ckpt = Checkpoint.load(checkpoint)
    embed = Embedder(model_from_checkpoint(ckpt), vocab_from_checkpoint(ckpt))
    ids, texts = read_texts(input_path)
    vecs = embed(texts) if texts else np.zeros((0, embed.dim))
    EmbeddingMatrix(ids, vecs).save(output_path)
    return Path(output_path)


def cmd_evaluate(cfg: RunConfig, checkpoint=None, embeddings=None, texts=None, output=None) -> EvalReport:
    if not cfg.eval_tasks:
        raise ConfigError("eval.tasks: at least one task is required")
    if (checkpoint is None) == (embeddings is None):
        raise ConfigError("evaluate: give exactly one of --checkpoint or --embeddings")
    if checkpoint is not None:
        ckpt = Checkpoint.load(checkpoint)
        embed = Embedder(model_from_checkpoint(ckpt), vocab_from_checkpoint(ckpt))
    else:
        if texts is None:
            raise ConfigError("evaluate: --embeddings needs --texts to map ids to texts")
        ids, tx = read_texts(texts)
        embed = LookupEmbedder(EmbeddingMatrix.load(embeddings), dict(zip(ids, tx)))
    report = EvalReport(config_fingerprint(cfg.fingerprint_dict()))
    for spec in cfg.eval_tasks:
        report.tasks.append(run_task(spec, embed, cfg.base_dir))
    out = Path(output) if output else cfg.output_dir / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(), encoding="utf-8")
    print(render_table(report))
    return report


def cmd_report(paths) -> None:
    for p in paths:
        try:
            report = EvalReport.from_dict(json.loads(Path(p).read_text(encoding="utf-8")))
        except (ValueError, KeyError) as exc:
            raise DataError(f"{p}: {exc}") from None
        if len(paths) > 1:
            print(f"== {p}")
        print(render_table(report))


def cmd_export_texts(cfg: RunConfig, output) -> Path:
    """Write every text the configured eval tasks embed as ``{"id","text"}`` JSONL."""
    seen = list(dict.fromkeys(t for spec in cfg.eval_tasks for t in task_texts(spec, cfg.base_dir)))
    with Path(output).open("w", encoding="utf-8") as fh:
        for i, t in enumerate(seen):
            fh.write(json.dumps({"id": f"t{i}", "text": t}, ensure_ascii=False) + "\n")
    return Path(output)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gteforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="YAML or JSON run config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        return p

    with_config(sub.add_parser("build-vocab", help="build the vocabulary file"))
    with_config(sub.add_parser("pretrain", help="contrastive pre-training on pair sources"))
    ft = with_config(sub.add_parser("finetune", help="fine-tuning on triple sources"))
    ft.add_argument("--checkpoint", help="checkpoint to start from")
    ft.add_argument("--from-scratch", action="store_true", help="start from random initialization")

    em = sub.add_parser("embed", help="export embeddings for a JSONL file of {id, text}")
    em.add_argument("--checkpoint", required=True)
    em.add_argument("--input", required=True)
    em.add_argument("--output", required=True)

    ev = with_config(sub.add_parser("evaluate", help="run the configured evaluation tasks"))
    ev.add_argument("--checkpoint")
    ev.add_argument("--embeddings", help="embedding file from 'embed'")
    ev.add_argument("--texts", help="the {id, text} JSONL the embedding file was made from")
    ev.add_argument("--output", help="report path (default: <output_dir>/report.json)")

    tx = with_config(sub.add_parser("export-texts", help="list every text the eval tasks need"))
    tx.add_argument("--output", required=True)

    rp = sub.add_parser("report", help="print the summary table of report files")
    rp.add_argument("reports", nargs="+")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides) if hasattr(args, "config") else None
        if args.command == "build-vocab":
            cmd_build_vocab(cfg)
        elif args.command in ("pretrain", "finetune"):
            cmd_train(cfg, args.command, getattr(args, "checkpoint", None), getattr(args, "from_scratch", False))
        elif args.command == "embed":
            cmd_embed(args.checkpoint, args.input, args.output)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint, args.embeddings, args.texts, args.output)
        elif args.command == "export-texts":
            cmd_export_texts(cfg, args.output)
        else:
            cmd_report(args.reports)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
