"""Command-line entry point: ingest, train, encode, eval, validate, sweep.

Configuration comes from flags, optionally backed by a key=value config file
(flags win). All randomness funnels through --seed. Exit codes: 0 success,
1 usage error, 2 data/format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .errors import (
    ConfigError,
    ConsistencyError,
    EvaluationError,
    FormatError,
    ManifestError,
    NumericError,
)

BETA_GRID = tuple(round(0.1 * i, 1) for i in range(0, 11))  # 0.0 baseline + 0.1..1.0
BATCH_GRID = (8, 16, 32, 64, 128, 256)

_THREAD_ENV = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 on usage errors instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _apply_thread_cap(argv: list[str]) -> None:
    # Must happen before numpy/numba load, hence the raw argv scan.
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif arg.startswith("--threads="):
            value = arg.split("=", 1)[1]
        else:
            continue
        if value.isdigit() and int(value) >= 1:
            for key in _THREAD_ENV:
                os.environ[key] = value
        return


def _configure_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("DHIM_LOG", "").lower(), logging.WARNING
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("dhim").setLevel(level)


def _read_config_file(path) -> dict[str, str]:
    data: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValueError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        data[key.strip().replace("-", "_")] = value.strip()
    return data


_FLAG_TO_FIELD = {
    "bits": "code_bits",
    "filters": "num_filters",
    "hidden": "hidden",
    "windows": "windows",
    "lr": "learning_rate",
    "beta": "beta",
    "batch_size": "batch_size",
    "epochs": "max_epochs",
    "patience": "patience",
    "seed": "seed",
    "mode": "mode",
}


def _build_train_config(args):
    from .trainer import TrainConfig

    file_values = _read_config_file(args.config) if args.config else {}
    mapping: dict[str, str] = {}
    for flag, fieldname in _FLAG_TO_FIELD.items():
        if flag in file_values:
            mapping[fieldname] = file_values[flag]
        cli_value = getattr(args, flag, None)
        if cli_value is not None:
            mapping[fieldname] = cli_value
    cfg = TrainConfig.from_mapping(mapping)
    no_reg = args.no_reg if args.no_reg is not None else file_values.get("no_reg") == "true"
    if no_reg:
        cfg = TrainConfig.from_mapping({**mapping, "regularizer_on": "false"})
    return cfg.validate()


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="corpus manifest")
    p.add_argument("--config", help="key=value config file; flags take precedence")
    p.add_argument("--bits", type=int, help="code length in bits")
    p.add_argument("--filters", type=int, help="convolution filters per window")
    p.add_argument("--hidden", type=int, help="fusion MLP hidden width")
    p.add_argument("--windows", help="comma-separated odd window sizes, e.g. 1,3,5")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--beta", type=float, help="CLS regularizer weight")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int, help="maximum training epochs")
    p.add_argument("--patience", type=int, help="epochs without improvement before stopping")
    p.add_argument("--seed", type=int, help="master seed for all randomness")
    p.add_argument("--mode", choices=["stochastic", "relaxed"])
    p.add_argument("--no-reg", action="store_true", default=None, dest="no_reg",
                   help="disable the CLS regularizer")
    p.add_argument("--threads", type=int, help="cap worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dhim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest-random", help="featurize a token-id corpus with a random table")
    p.add_argument("--input", required=True, help="TSV: id, label, split, space-separated token ids")
    p.add_argument("--vocab-size", type=int, required=True, dest="vocab_size")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_ingest_random)

    p = sub.add_parser("train", help="train and save the best-validation checkpoint")
    _add_train_flags(p)
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="emit deterministic codes for one split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--codes", required=True, help="output codes path")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--median-binarize", action="store_true", dest="median_binarize",
                   help="threshold at per-bit medians instead of zero")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("eval", help="precision@k of query codes against pool codes")
    p.add_argument("--query", required=True, help="query codes file")
    p.add_argument("--pool", required=True, help="pool codes file")
    p.add_argument("--manifest", required=True, help="corpus manifest providing labels")
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--report", help="write the report to this file as key=value lines")
    p.add_argument("--per-query", dest="per_query", help="write per-query precision rows as TSV")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("validate", help="check any file the toolkit writes")
    p.add_argument("path", help="DHEM, DHCK, DHCB, or manifest file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("sweep", help="train across a hyperparameter grid")
    _add_train_flags(p)
    p.add_argument("--param", choices=["beta", "batch-size"], required=True)
    p.add_argument("--report", help="write (value, precision) rows to this file")
    p.set_defaults(func=cmd_sweep)
    return parser


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ingest_random(args) -> int:
    from .corpus import ingest_random_corpus

    manifest = ingest_random_corpus(args.input, args.vocab_size, args.dim, args.seed, args.out)
    print(f"manifest={manifest}")
    return 0


def cmd_train(args) -> int:
    from .corpus import load_corpus
    from .trainer import train

    cfg = _build_train_config(args)
    corpus = load_corpus(args.manifest)
    checkpoint = train(corpus, cfg)
    checkpoint.save(args.checkpoint)
    print(f"checkpoint={args.checkpoint}")
    print(f"val_precision={checkpoint.val_precision:.4f}")
    print(f"epoch={checkpoint.epoch}")
    return 0


def cmd_encode(args) -> int:
    from .corpus import load_corpus
    from .trainer import ModelCheckpoint, encode_split

    corpus = load_corpus(args.manifest)
    checkpoint = ModelCheckpoint.load(args.checkpoint)
    out = encode_split(
        checkpoint, corpus, args.split, args.codes, median_threshold=args.median_binarize
    )
    print(f"codes={out}")
    return 0


def _corpus_labels(manifest_path) -> dict[int, int]:
    from .corpus import parse_manifest, read_labels

    labels: dict[int, int] = {}
    for path in parse_manifest(manifest_path).values():
        labels.update(read_labels(path))
    return labels


def cmd_eval(args) -> int:
    from .retrieval import CodeIndex, evaluate

    labels = _corpus_labels(args.manifest)
    queries = CodeIndex.from_file(args.query, labels)
    pool = CodeIndex.from_file(args.pool, labels)
    report = evaluate(queries, pool, k=args.k)
    text = str(report)
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    if args.per_query:
        Path(args.per_query).write_text("\n".join(report.query_rows()) + "\n", encoding="utf-8")
    return 0


def cmd_validate(args) -> int:
    from .binarize import read_codes
    from .corpus import load_corpus, read_embedding_file
    from .trainer import ModelCheckpoint

    path = Path(args.path)
    if not path.exists():
        raise FormatError(f"{path}: no such file")
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"DHEM":
        dim, records = read_embedding_file(path)
        print(f"ok: embeddings dim={dim} docs={len(records)}")
    elif magic == b"DHCK":
        ck = ModelCheckpoint.load(path)
        print(f"ok: checkpoint bits={ck.encoder.code_bits} dim={ck.encoder.dim} epoch={ck.epoch}")
    elif magic == b"DHCB":
        code_bits, ids, _ = read_codes(path)
        print(f"ok: codes bits={code_bits} docs={len(ids)}")
    else:
        corpus = load_corpus(path)  # manifest, or a ManifestError explaining why not
        print(
            "ok: corpus "
            f"train={len(corpus.train)} val={len(corpus.val)} test={len(corpus.test)} "
            f"classes={corpus.num_classes} dim={corpus.dim}"
        )
    return 0


def _precision_for_config(corpus, cfg) -> float:
    import numpy as np

    from .binarize import pack_bits, threshold_bits
    from .retrieval import CodeIndex, evaluate
    from .trainer import global_logits_for, train

    checkpoint = train(corpus, cfg)

    def index(docs):
        logits = global_logits_for(checkpoint.encoder, corpus, docs)
        return CodeIndex(
            code_bits=cfg.code_bits,
            words=pack_bits(threshold_bits(logits)),
            ids=np.array([d.id for d in docs], dtype=np.int64),
            labels=np.array([d.label for d in docs], dtype=np.int64),
        )

    pool = index(corpus.train)
    queries = index(corpus.test)
    return evaluate(queries, pool, k=min(100, len(pool))).precision


def cmd_sweep(args) -> int:
    from dataclasses import replace

    from .corpus import load_corpus

    base = _build_train_config(args)
    corpus = load_corpus(args.manifest)
    rows = []
    if args.param == "beta":
        grid = [replace(base, beta=b, regularizer_on=b > 0) for b in BETA_GRID]
        values = BETA_GRID
    else:
        grid = [replace(base, batch_size=b) for b in BATCH_GRID]
        values = BATCH_GRID
    for value, cfg in zip(values, grid):
        precision = _precision_for_config(corpus, cfg.validate())
        row = f"{args.param.replace('-', '_')}={value}\tprecision@100={precision:.4f}"
        rows.append(row)
        print(row, flush=True)
    if args.report:
        Path(args.report).write_text("\n".join(rows) + "\n", encoding="utf-8")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_thread_cap(argv)
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (FormatError, ManifestError, ConsistencyError, ConfigError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
