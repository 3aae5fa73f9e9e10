"""``uasparse`` command line: preprocess, train, evaluate, parse, score, aggregate."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys

from . import embeddings as emb_mod
from . import pipeline, synthetic
from .model import CheckpointFormatError, ModelConfig, ParserModel, TaskKind
from .preprocess import tokenize
from .vulnscore import nvd, scoring
from .vulnscore.cpe import AliasTable, EmptyTuple, ParsedUas

log = logging.getLogger("uasparse")

EXIT_OK, EXIT_IO, EXIT_USAGE = 0, 1, 2
PARSE_CHUNK = 200
CHECKPOINT_SUFFIX = ".ckpt"


class UsageError(Exception):
    pass


def load_config_file(path):
    """Read ``key = value`` lines; ``#`` starts a comment, ``[section]`` headers are ignored."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line or (line.startswith("[") and line.endswith("]")):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value.strip("\"'")
    return values


def _setting(args, key, default, cast=str):
    value = getattr(args, key, None)
    if value is None:
        value = args.file_config.get(key)
    if value is None:
        return default
    try:
        return cast(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for {key}: {value!r}") from exc


def _int_list(value):
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    return tuple(int(v) for v in str(value).replace(",", " ").split())


def _open_out(path):
    if path in (None, "-"):
        return contextlib.nullcontext(sys.stdout)
    return open(path, "w", encoding="utf-8")


def _write_jsonl(fh, records):
    for rec in records:
        fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def _read_records(path):
    """JSONL records from a file; returns (records, skipped)."""
    records, skipped = [], 0
    with open(path, encoding="utf-8") as fh:
        for rec in pipeline.iter_jsonl(fh):
            if isinstance(rec, dict):
                records.append(rec)
            else:
                skipped += 1
    return records, skipped


def cmd_preprocess(args):
    result = pipeline.ingest(args.input)
    truncated = 0
    with _open_out(args.output) as out:
        for ex in result.examples:
            tok = tokenize(ex.raw)
            truncated += tok.truncated
            rec = ex.to_record()
            rec.update(tokens=list(tok.tokens), original_token_count=tok.original_token_count,
                       truncated=tok.truncated)
            out.write(json.dumps(rec, ensure_ascii=False) + "\n")
    print(json.dumps({"records": len(result.examples), "skipped_count": result.skipped_count,
                      "truncated": truncated}), file=sys.stderr)
    return EXIT_OK


def cmd_train_embeddings(args):
    result = pipeline.ingest(args.input)
    config = emb_mod.EmbeddingConfig(
        dim=_setting(args, "dim", 40, int),
        ngram_min=_setting(args, "ngram_min", 3, int),
        ngram_max=_setting(args, "ngram_max", 6, int),
        window=_setting(args, "window", 5, int),
        epochs=_setting(args, "epochs", 5, int),
        learning_rate=_setting(args, "lr", 0.05, float),
        negative_samples=_setting(args, "negative", 5, int),
        bucket_count=_setting(args, "buckets", 2**20, int),
        min_word_count=_setting(args, "min_count", 2, int),
        seed=args.seed,
    )
    model = emb_mod.train_embeddings([tokenize(ex.raw) for ex in result.examples], config)
    model.save(args.output)
    print(json.dumps({"vocab": len(model.vocab), "dim": config.dim,
                      "skipped_count": result.skipped_count}), file=sys.stderr)
    return EXIT_OK


def cmd_train(args):
    try:
        task = TaskKind(args.task)
    except ValueError:
        raise UsageError(f"unknown task {args.task!r}") from None
    emb = emb_mod.EmbeddingModel.load(args.embeddings)
    data = pipeline.ingest(args.data)
    tconfig = pipeline.TrainConfig(
        task,
        batch_size=_setting(args, "batch_size", pipeline.BATCH_SIZE, int),
        learning_rate=_setting(args, "lr", None, float),
        weight_decay=_setting(args, "weight_decay", pipeline.WEIGHT_DECAY, float),
        epochs=_setting(args, "epochs", 10, int),
        split_fraction=_setting(args, "split", 0.7, float),
        per_class_quota=_setting(args, "quota", None, int),
        seed=args.seed,
        loss=_setting(args, "loss", None),
    )
    mconfig = ModelConfig.for_task(
        task,
        d_model=emb.dim,
        ff_dim=_setting(args, "ff_dim", 128, int),
        head_widths=_setting(args, "head_widths", (512, 256, 128), _int_list),
        dropout_p=_setting(args, "dropout", 0.1, float),
        seed=args.seed,
    )
    train_set, valid_set = pipeline.balance_and_split(data.examples, pipeline.ClassSpec.for_task(task), tconfig)
    result = pipeline.train(task, train_set, emb, mconfig, tconfig)
    result.model.save(args.output)
    result.write_loss_csv(args.loss_csv or args.output + ".loss.csv")
    if args.valid_out:
        with open(args.valid_out, "w", encoding="utf-8") as fh:
            _write_jsonl(fh, (ex.to_record() for ex in valid_set))
    summary = {"task": task.value, "train": len(train_set), "validation": len(valid_set),
               "final_loss": result.loss_log[-1][1]}
    if valid_set:
        summary["validation_accuracy"] = pipeline.evaluate(result.model, emb, valid_set).overall_accuracy
    print(json.dumps(summary), file=sys.stderr)
    return EXIT_OK


def cmd_eval(args):
    model = ParserModel.load(args.checkpoint)
    emb = emb_mod.EmbeddingModel.load(args.embeddings)
    data = pipeline.ingest(args.data)
    report = pipeline.evaluate(model, emb, data.examples)
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    print(report.table())
    return EXIT_OK


def load_checkpoints(directory):
    models = {}
    for name in sorted(os.listdir(directory)):
        if not name.endswith(CHECKPOINT_SUFFIX):
            continue
        model = ParserModel.load(os.path.join(directory, name))
        models[model.task] = model
    missing = [t.value for t in TaskKind if t not in models]
    if missing:
        raise UsageError(f"{directory}: no checkpoint for {', '.join(missing)}")
    return models


def parse_records(records, models, emb):
    """Run all four models over raw records (dicts with at least 'ua')."""
    tokenized = [tokenize(r["ua"]) for r in records]
    seq_len = models[TaskKind.OS_NAME].config.seq_len
    values, mask = emb.embed_batch(tokenized, seq_len)
    token_lists = [t.tokens for t in tokenized]
    preds = {task: m.predict_batch(values, mask, token_lists) for task, m in models.items()}
    out = []
    for i, rec in enumerate(records):
        row = {"ua": rec["ua"],
               "os_name": preds[TaskKind.OS_NAME][i].class_label,
               "software_name": preds[TaskKind.SOFTWARE_NAME][i].class_label}
        os_version = preds[TaskKind.OS_VERSION][i].version
        sw_version = preds[TaskKind.SOFTWARE_VERSION][i].version
        if os_version is not None:
            row["os_version"] = os_version
        if sw_version is not None:
            row["software_version"] = sw_version
        if rec.get("source_cidr"):
            row["source_cidr"] = rec["source_cidr"]
        out.append(row)
    return out


def _parse_input_lines(fh):
    for line in fh:
        line = line.rstrip("\n")
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            rec = {"ua": line}
        if isinstance(rec, str):
            rec = {"ua": rec}
        if not isinstance(rec, dict) or not isinstance(rec.get("ua"), str):
            log.warning("skipping line without a 'ua' string")
            continue
        yield rec


def cmd_parse(args):
    models = load_checkpoints(args.checkpoints)
    emb = emb_mod.EmbeddingModel.load(args.embeddings)
    source = sys.stdin if args.input == "-" else open(args.input, encoding="utf-8")
    count = 0
    with source, _open_out(args.output) as out:
        chunk = []
        for rec in _parse_input_lines(source):
            chunk.append(rec)
            if len(chunk) >= PARSE_CHUNK or args.input == "-":
                _write_jsonl(out, parse_records(chunk, models, emb))
                out.flush()
                count += len(chunk)
                chunk = []
        if chunk:
            _write_jsonl(out, parse_records(chunk, models, emb))
            count += len(chunk)
    print(json.dumps({"parsed": count}), file=sys.stderr)
    return EXIT_OK


def cmd_score(args):
    if bool(args.fixture) == bool(args.live):
        raise UsageError("choose exactly one of --fixture or --live")
    aliases = AliasTable.load(args.aliases)
    config = nvd.NvdClientConfig.from_env(cache_path=args.cache, offline_fixture=args.fixture)
    if args.live and not config.api_key:
        log.warning("NVD_API_KEY not set; using the keyless limit of %d requests per 30s",
                    config.max_requests_per_30s)
    client = nvd.NvdClient(config)
    records, skipped = _read_records(args.input)
    scored = unscorable = 0
    with _open_out(args.output) as out:
        for rec in records:
            parsed = ParsedUas.from_record(rec)
            try:
                vuln = scoring.score_uas(parsed, client, aliases)
            except EmptyTuple:
                vuln = scoring.UasVulnerability(0)
            scored += vuln.scored
            unscorable += not vuln.scored
            row = dict(rec)
            row.update(vuln.to_record())
            out.write(json.dumps(row, ensure_ascii=False) + "\n")
    print(json.dumps({"records": len(records), "scored": scored, "unscored": unscorable,
                      "skipped_count": skipped}), file=sys.stderr)
    return EXIT_OK


def cmd_aggregate(args):
    if args.format == "geojson" and not args.geo:
        raise UsageError("--format geojson needs --geo")
    records, skipped = _read_records(args.input)
    pairs = [(ParsedUas.from_record(r), scoring.UasVulnerability.from_record(r)) for r in records]
    aggregates = scoring.aggregate_cidr(pairs)
    geo = scoring.load_geo_table(args.geo) if args.geo else None
    missing = scoring.emit_report(aggregates, args.format, args.output, geo)
    print(json.dumps({"cidrs": len(aggregates), "geo_skipped": missing,
                      "skipped_count": skipped}), file=sys.stderr)
    return EXIT_OK


def cmd_synth(args):
    records = synthetic.generate(args.n_per_class, args.balance, seed=args.seed)
    with _open_out(args.output) as out:
        _write_jsonl(out, records)
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS so a subcommand's defaults never overwrite options given before it
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="key = value file; flags take precedence")
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="uasparse", parents=[common],
                                     description="Attention-based UA string parsing and CIDR vulnerability scoring.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="normalize and tokenize UA records")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train-embeddings", parents=[common], help="train subword CBOW embeddings")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    for flag, typ in (("--dim", int), ("--epochs", int), ("--ngram-min", int), ("--ngram-max", int),
                      ("--window", int), ("--negative", int), ("--buckets", int),
                      ("--min-count", int), ("--lr", float)):
        p.add_argument(flag, type=typ)
    p.set_defaults(func=cmd_train_embeddings)

    p = sub.add_parser("train", parents=[common], help="train one task model")
    p.add_argument("--task", required=True, help="|".join(t.value for t in TaskKind))
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--loss-csv")
    p.add_argument("--valid-out", help="write the held-out validation records here")
    for flag, typ in (("--epochs", int), ("--lr", float), ("--batch-size", int), ("--quota", int),
                      ("--weight-decay", float), ("--split", float), ("--ff-dim", int),
                      ("--dropout", float), ("--head-widths", str)):
        p.add_argument(flag, type=typ)
    p.add_argument("--loss", choices=("bce", "ce"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("parse", parents=[common], help="parse UA strings with the four models")
    p.add_argument("--checkpoints", required=True, help=f"directory of *{CHECKPOINT_SUFFIX} files")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--input", required=True, help="JSONL file or - for stdin")
    p.add_argument("--output", default="-")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("score", parents=[common], help="per-UAS CVSS averages")
    p.add_argument("--input", required=True)
    p.add_argument("--output", default="-")
    p.add_argument("--aliases")
    p.add_argument("--fixture")
    p.add_argument("--live", action="store_true")
    p.add_argument("--cache")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("aggregate", parents=[common], help="per-CIDR aggregation and report")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("csv", "geojson"), default="csv")
    p.add_argument("--geo")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic labelled corpus")
    p.add_argument("--n-per-class", type=int, default=750)
    p.add_argument("--balance", choices=("software", "os"), default="software")
    p.add_argument("--output", default="-")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config_path = getattr(args, "config", None)
        args.file_config = load_config_file(config_path) if config_path else {}
        if not hasattr(args, "seed"):
            args.seed = _setting(args, "seed", 0, int)
        return args.func(args)
    except (UsageError, pipeline.FormatError, pipeline.MissingClass, pipeline.EmptyEvaluationSet,
            scoring.MissingGeoTable, scoring.NoScorableEntries, emb_mod.EmptyCorpus,
            emb_mod.EmbeddingFormatError, CheckpointFormatError, nvd.MalformedResponse,
            ValueError) as exc:
        print(f"uasparse {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, nvd.NetworkError, nvd.RateLimited) as exc:
        print(f"uasparse {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
