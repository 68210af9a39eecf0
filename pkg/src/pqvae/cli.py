"""Command-line entry point: ``pqvae <command> [options]``.

Failures print one JSON object on stderr, e.g.
``{"error": "missing_file", "exit": 3, "message": "..."}``, and exit with
the code listed in ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings

import numpy as np

from . import __version__
from .config import RunConfig, config_to_text, load_config, load_splits
from .containers import (
    Index,
    Model,
    atomic_write,
    codes_from_text,
    codes_to_text,
    read_index,
    read_model,
    write_index,
    write_model,
)
from .errors import (
    ConfigurationError,
    DimensionError,
    ParseError,
    PQVAEError,
    StampMismatchError,
    TrainingError,
)
from .product import encode, rate_bits
from .retrieval import EncodingDatabase, check_codes, mean_average_precision, query_topk
from .trainer import diagnostics_to_jsonl, latents_csv, sweep_lambda, sweep_to_csv, train

EXIT_CODES = {
    "error": 1,
    "usage": 2,
    "missing_file": 3,
    "bad_format": 4,
    "stamp_mismatch": 5,
    "invalid_config": 6,
    "training_failed": 7,
    "dimension_mismatch": 8,
}


def _fail(kind: str, message: str) -> int:
    code = EXIT_CODES[kind]
    print(json.dumps({"error": kind, "exit": code, "message": message}), file=sys.stderr)
    return code


def _config(args) -> RunConfig:
    return load_config(args.config, args.set or ())


def _split(cfg: RunConfig, name: str):
    db, q = load_splits(cfg)
    return db if name == "database" else q


def cmd_train(args) -> int:
    cfg = _config(args)
    db, _ = load_splits(cfg)
    res = train(cfg.train, db.features)
    write_model(args.out, Model(res.encoder, res.decoder, res.codebook, res.N))
    atomic_write(args.log or args.out + ".jsonl", diagnostics_to_jsonl(res.diagnostics))
    last = res.diagnostics[-1] if res.diagnostics else None
    summary = {"model": args.out, "iterations": cfg.train.iterations, "items": len(db)}
    if last is not None:
        summary.update(recon_error=last.recon_error, quant_error=last.quant_error,
                       distance_ratio=last.distance_ratio)
    print(json.dumps(summary))
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if "codebook_update_mode" not in cfg.provided:
        # lambda weights the codeword loss term directly in this mode
        cfg.train.codebook_update_mode = "loss_gradient"
    db, _ = load_splits(cfg)
    text = sweep_to_csv(sweep_lambda(cfg.train, db.features, cfg.lambda_grid))
    if args.out:
        atomic_write(args.out, text)
    sys.stdout.write(text)
    return 0


def cmd_encode(args) -> int:
    cfg = _config(args)
    model = read_model(args.model)
    ds = _split(cfg, args.split)
    if ds.dim != model.encoder.input_dim:
        raise DimensionError(f"data dimension {ds.dim} != encoder input {model.encoder.input_dim}")
    codes = encode(model.codebook, model.encoder, ds.features, model.N)
    M, N, K = model.stamp
    db = EncodingDatabase(np.arange(len(ds)), codes, M, N, K, ds.labels)
    atomic_write(args.out, codes_to_text(db))
    return 0


def _read_codes(path) -> EncodingDatabase:
    with open(path) as f:
        return codes_from_text(f.read(), str(path))


def cmd_build_index(args) -> int:
    model = read_model(args.model)
    db = _read_codes(args.codes)
    if db.stamp != model.stamp:
        raise StampMismatchError(f"codes stamp {db.stamp} != model stamp {model.stamp}")
    write_index(args.out, Index.build(model.codebook, db))
    return 0


def cmd_query(args) -> int:
    index = read_index(args.index)
    M, N, K = index.db.stamp
    if args.code is not None:
        q = np.array([int(c) for c in args.code.replace(",", " ").split()], dtype=np.int64)
    else:
        if args.codes is None or args.item is None:
            raise ConfigurationError("query needs --code, or --codes with --item")
        qdb = _read_codes(args.codes)
        if qdb.stamp != index.db.stamp:
            raise StampMismatchError(f"query codes stamp {qdb.stamp} != index stamp {index.db.stamp}")
        hit = np.flatnonzero(qdb.item_ids == args.item)
        if not len(hit):
            raise ConfigurationError(f"item {args.item} not found in {args.codes}")
        q = qdb.codes[hit[0]]
    check_codes(q, M, N, K)
    for item, dist in query_topk(index.db, index.tables, q, args.k):
        print(f"{item}\t{dist!r}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    index = read_index(args.index)
    queries = _read_codes(args.queries)
    if queries.stamp != index.db.stamp:
        raise StampMismatchError(f"query codes stamp {queries.stamp} != index stamp {index.db.stamp}")
    if queries.labels is None:
        raise ConfigurationError("query codes carry no labels")
    R = args.R or cfg.R
    value = mean_average_precision(index.db, index.tables, queries.codes, queries.labels, R)
    record = {"metric": f"mAP@{R}", "value": value, "queries": len(queries), "database": len(index.db)}
    print(f"mAP@{R} = {value:.6f} over {len(queries)} queries, {len(index.db)} database items")
    print(json.dumps(record))
    if args.json:
        atomic_write(args.json, json.dumps(record) + "\n")
    return 0


def cmd_export_latents(args) -> int:
    cfg = _config(args)
    model = read_model(args.model)
    ds = _split(cfg, args.split)
    atomic_write(args.out, latents_csv(model.encoder, model.codebook, ds.features, ds.labels, model.N))
    return 0


def cmd_rate(args) -> int:
    cfg = _config(args)
    N = args.N if args.N is not None else cfg.train.N
    M = args.M if args.M is not None else cfg.train.M
    K = args.K if args.K is not None else cfg.train.K
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        bits = rate_bits(N, M, K)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(json.dumps({"N": N, "M": M, "K": K, "bits": bits}))
    return 0


def cmd_show_config(args) -> int:
    sys.stdout.write(config_to_text(_config(args)))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(_fail("usage", message))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pqvae", description="PQ-VAE training and lookup-table retrieval")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.set_defaults(func=func)
        return sp

    sp = command("train", cmd_train, "train a model")
    sp.add_argument("--out", required=True, help="model file (PQVAE001)")
    sp.add_argument("--log", help="diagnostics log (default: <out>.jsonl)")

    sp = command("sweep-lambda", cmd_sweep, "train once per lambda and report distance ratios")
    sp.add_argument("--out", help="CSV output file")

    for name, func, help_ in (
        ("encode", cmd_encode, "encode a dataset split to discrete codes"),
        ("export-latents", cmd_export_latents, "write 2-D latents as CSV"),
    ):
        sp = command(name, func, help_)
        sp.add_argument("--model", required=True)
        sp.add_argument("--split", choices=("database", "query"), default="database")
        sp.add_argument("--out", required=True)

    sp = command("build-index", cmd_build_index, "build a PQIDX001 index from codes")
    sp.add_argument("--model", required=True)
    sp.add_argument("--codes", required=True)
    sp.add_argument("--out", required=True)

    sp = command("query", cmd_query, "rank database items for one query code")
    sp.add_argument("--index", required=True)
    sp.add_argument("--code", help="query code, comma or space separated")
    sp.add_argument("--codes", help="codes file holding the query")
    sp.add_argument("--item", type=int, help="item id within --codes")
    sp.add_argument("-k", type=int, default=10)

    sp = command("evaluate", cmd_evaluate, "mAP@R of query codes against an index")
    sp.add_argument("--index", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--R", type=int)
    sp.add_argument("--json", help="also write the JSON record to this file")

    sp = command("rate", cmd_rate, "code length in bits")
    for flag in ("--N", "--M", "--K"):
        sp.add_argument(flag, type=int)

    command("show-config", cmd_show_config, "print the effective configuration")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        return _fail("missing_file", f"{exc.filename}: no such file")
    except ParseError as exc:
        return _fail("bad_format", str(exc))
    except StampMismatchError as exc:
        return _fail("stamp_mismatch", str(exc))
    except ConfigurationError as exc:
        return _fail("invalid_config", str(exc))
    except TrainingError as exc:
        return _fail("training_failed", f"{exc} {json.dumps(exc.payload)}")
    except DimensionError as exc:
        return _fail("dimension_mismatch", str(exc))
    except PQVAEError as exc:
        return _fail("error", str(exc))


if __name__ == "__main__":
    sys.exit(main())
