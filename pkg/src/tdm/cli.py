"""``tdm`` command line: build, query, decompose, pipeline and export.

Exit codes: 0 success, 1 schema error, 2 adapter or input failure, 3 build
error, 4 query syntax error, 5 query semantic error, 6 numeric failure and
64 for command-line usage errors.  Every command stages its files in a
temporary directory and moves them into ``--out`` only on success.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Iterator

import numpy as np

from . import errors as E
from .analysis import PipelineConfig, run_pipeline
from .decomp import cp_als, fit, hosvd, reconstruct_tucker, write_cp, write_tucker
from .dimension import Dimension, KeyType
from .polystore import TensorSchema, load_schema
from .query import compile_query, parse_query, select
from .tensor import TypedTensor, ValueType, read_coo, write_coo

logger = logging.getLogger("tdm")

EXIT_OK = 0
EXIT_SCHEMA = 1
EXIT_ADAPTER = 2
EXIT_BUILD = 3
EXIT_PARSE = 4
EXIT_SEMANTIC = 5
EXIT_NUMERIC = 6
EXIT_USAGE = 64


class CliFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# staging ---------------------------------------------------------------------------


@contextlib.contextmanager
def staged_output(out_dir: Path) -> Iterator[Path]:
    """Yield a scratch directory whose files are moved into ``out_dir`` on success."""
    out_dir = Path(out_dir)
    parent = out_dir.parent if not out_dir.exists() else out_dir
    parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".tdm-stage-", dir=parent))
    try:
        yield stage
        out_dir.mkdir(parents=True, exist_ok=True)
        for p in sorted(stage.iterdir()):
            p.replace(out_dir / p.name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


# manifests -------------------------------------------------------------------------


def write_tensor_bundle(t: TypedTensor, out_dir: Path) -> list[Path]:
    """``<name>.coo``, ``<name>.<dim>.csv`` per mode and a ``<name>.json`` manifest."""
    coo = out_dir / f"{t.name}.coo"
    write_coo(t, coo)
    dims = []
    paths = [coo]
    for d in t.dims:
        p = out_dir / f"{t.name}.{d.name}.csv"
        d.to_csv(p)
        paths.append(p)
        dims.append(
            {
                "name": d.name,
                "key_type": d.key_type.value,
                "granularity": d.granularity,
                "alias": d.alias,
                "size": d.size,
                "file": p.name,
            }
        )
    manifest = {
        "name": t.name,
        "value_type": t.value_type.value,
        "default": t.default,
        "nnz": t.nnz,
        "coo": coo.name,
        "dimensions": dims,
    }
    mpath = out_dir / f"{t.name}.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths + [mpath]


def load_tensor(path: str | Path) -> TypedTensor:
    """Load a manifest (``.json``) or a bare ``.coo`` file.

    A ``.coo`` file with a sibling manifest picks up its keyed dimensions.
    """
    path = Path(path)
    if path.suffix == ".coo" and path.with_suffix(".json").exists():
        path = path.with_suffix(".json")
    try:
        if path.suffix != ".json":
            return read_coo(path)
        manifest = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent
        dims = [
            Dimension.from_csv(
                base / d["file"], d["name"], KeyType(d["key_type"]),
                granularity=d.get("granularity"), alias=d.get("alias"),
            )
            for d in manifest["dimensions"]
        ]
        return read_coo(base / manifest["coo"], dims)
    except OSError as exc:
        raise CliFailure(EXIT_ADAPTER, f"cannot read tensor {path}: {exc}") from exc
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliFailure(EXIT_ADAPTER, f"malformed tensor input {path}: {exc}") from exc


def _schema(args) -> TensorSchema:
    if not args.schema:
        raise CliFailure(EXIT_USAGE, "this command needs --schema")
    return load_schema(args.schema)


def _build(schema: TensorSchema, name: str) -> TypedTensor:
    if name not in schema.entries:
        raise CliFailure(EXIT_SCHEMA, f"schema declares no tensor {name!r}")
    store = schema.polystore()
    try:
        return store.build_tensor(schema.entries[name])
    except (E.AdapterFailure, E.ArityMismatch, E.ConfigInvalid):
        raise
    except E.TDMError as exc:
        raise CliFailure(EXIT_BUILD, f"building {name!r} failed: {exc}") from exc


# commands --------------------------------------------------------------------------


def cmd_build(args) -> int:
    schema = _schema(args)
    names = args.tensors or list(schema.entries)
    with staged_output(args.out) as stage:
        for name in names:
            t = _build(schema, name)
            write_tensor_bundle(t, stage)
            print(f"{name}\torder {t.order}\tshape {'x'.join(map(str, t.shape))}\tnnz {t.nnz}")
    return EXIT_OK


def cmd_query(args) -> int:
    t = load_tensor(args.tensor)
    try:
        parsed = parse_query(args.query)
    except E.QuerySyntaxError as exc:
        raise CliFailure(EXIT_PARSE, f"query syntax error: {exc}") from exc
    try:
        dim_conds, val_cond = compile_query(parsed, t)
        result = select(t, dim_conds, val_cond)
    except (E.UnknownDimension, E.DuplicateCondition, E.KeyNotFound, E.TypeMismatch,
            E.SchemaError, ValueError) as exc:
        raise CliFailure(EXIT_SEMANTIC, f"query error: {exc}") from exc
    if args.output:
        out = Path(args.output)
        with staged_output(out.parent) as stage:
            write_coo(result, stage / out.name)
    else:
        write_coo(result, sys.stdout)
    return EXIT_OK


def cmd_decompose(args) -> int:
    t = load_tensor(args.tensor)
    prefix = args.prefix or f"{t.name}.{args.method}"
    try:
        if args.method == "cp":
            if args.rank is None:
                raise CliFailure(EXIT_USAGE, "cp needs --rank")
            r = cp_als(t, args.rank, max_iters=args.max_iters, tol=args.tol, seed=args.seed)
            value = r.final_fit
            writer = write_cp
        else:
            ranks = None if args.ranks is None else [int(x) for x in args.ranks.split(",")]
            r = hosvd(t, ranks)
            value = fit(t, reconstruct_tucker(r))
            writer = write_tucker
    except (E.NonNumericValueType, E.RankOutOfRange, E.ShapeMismatch, np.linalg.LinAlgError) as exc:
        raise CliFailure(EXIT_NUMERIC, f"decomposition failed: {exc}") from exc
    if not math.isfinite(value):
        raise CliFailure(EXIT_NUMERIC, f"decomposition produced a non-finite fit ({value})")
    with staged_output(args.out) as stage:
        writer(r, stage, prefix)
    print(f"fit {value:.12f}")
    return EXIT_OK


def _read_truth(path: Path) -> dict:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CliFailure(EXIT_ADAPTER, f"cannot read truth labels {path}: {exc}") from exc
    return {r[0]: r[1] for r in rows[1:] if r}


def cmd_pipeline(args) -> int:
    schema = _schema(args)
    if args.name not in schema.pipelines:
        raise CliFailure(EXIT_SCHEMA, f"schema declares no pipeline {args.name!r}")
    config = PipelineConfig.from_dict(schema.pipelines[args.name])
    t = _build(schema, config.tensor)
    truth = None
    if config.truth:
        truth_path = Path(config.truth)
        if not truth_path.is_absolute() and schema.base_dir is not None:
            truth_path = schema.base_dir / truth_path
        truth = _read_truth(truth_path)
    seed = config.seed if args.seed is None else args.seed
    try:
        report = run_pipeline(t, config, truth=truth, seed=seed)
    except (E.NonNumericValueType, E.RankOutOfRange, np.linalg.LinAlgError) as exc:
        raise CliFailure(EXIT_NUMERIC, f"pipeline failed: {exc}") from exc
    summary = report.summary()
    summary.update({"pipeline": config.name, "tensor": config.tensor, "seed": seed})
    cl = report.clustering
    users = t.dims[t.mode_of(config.user_mode)]
    with staged_output(args.out) as stage:
        with open(stage / f"{config.name}.clusters.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user", "cluster"])
            for key, c in zip(cl.labels, cl.assignments):
                w.writerow([users.render_key(key), int(c)])
        (stage / f"{config.name}.summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_export(args) -> int:
    t = load_tensor(args.tensor)
    out = Path(args.output) if args.output else Path(args.out) / f"{t.name}.csv"
    with staged_output(out.parent) as stage:
        with open(stage / out.name, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*t.dim_names, "value"])
            for idx, v in t.entries():
                keys = [d.render_key(d.key_of(i)) for d, i in zip(t.dims, idx)]
                if t.value_type is ValueType.REAL:
                    v = repr(float(v))
                elif t.value_type is ValueType.BOOLEAN:
                    v = int(v)
                w.writerow([*keys, v])
    return EXIT_OK


# entry point -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tdm", description="Typed tensors over named dimensions.")
    p.add_argument("--schema", help="JSON schema file")
    p.add_argument("--out", default=".", type=Path, help="output directory (default: .)")
    p.add_argument("--seed", type=int, default=None, help="seed for randomized commands")
    p.add_argument("--log-level", choices=("quiet", "info", "debug"), default="quiet")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("build", help="build tensors declared in the schema")
    b.add_argument("tensors", nargs="*", help="tensor names (default: all)")
    b.set_defaults(func=cmd_build)

    q = sub.add_parser("query", help="run a select query on a built tensor")
    q.add_argument("tensor", help="tensor manifest (.json) or COO file")
    q.add_argument("query", help="e.g. \"select [U='u1'] [=1] publish\"")
    q.add_argument("--output", help="write the result COO here instead of stdout")
    q.set_defaults(func=cmd_query)

    d = sub.add_parser("decompose", help="CP or HOSVD decomposition")
    d.add_argument("tensor")
    d.add_argument("--method", choices=("cp", "hosvd"), default="cp")
    d.add_argument("--rank", type=int)
    d.add_argument("--ranks", help="comma-separated HOSVD ranks (default: full)")
    d.add_argument("--max-iters", type=int, default=500)
    d.add_argument("--tol", type=float, default=1e-8)
    d.add_argument("--prefix")
    d.set_defaults(func=cmd_decompose)

    pl = sub.add_parser("pipeline", help="run a clustering pipeline declared in the schema")
    pl.add_argument("name")
    pl.set_defaults(func=cmd_pipeline)

    e = sub.add_parser("export", help="write a tensor as long-format CSV with keys")
    e.add_argument("tensor")
    e.add_argument("--output")
    e.set_defaults(func=cmd_export)
    return p


_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, CliFailure):
        return exc.code
    if isinstance(exc, (E.SchemaError, E.ConfigInvalid, E.DuplicateAdapterId)):
        return EXIT_SCHEMA
    if isinstance(exc, (E.AdapterFailure, E.ArityMismatch)):
        return EXIT_ADAPTER
    if isinstance(exc, E.QuerySyntaxError):
        return EXIT_PARSE
    if isinstance(exc, (E.NonNumericValueType, E.RankOutOfRange, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    return EXIT_BUILD


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=_LEVELS[args.log_level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)
    if args.seed is None and args.command == "decompose":
        args.seed = 0
    try:
        return args.func(args)
    except (CliFailure, E.TDMError, np.linalg.LinAlgError) as exc:
        print(f"tdm: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
