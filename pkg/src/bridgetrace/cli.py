"""Command-line interface.

Batch jobs (simulate, train, calibrate-delta, eval) run in-process. Query
commands (trace, flag, export-graph) are thin clients of the HTTP service: they
talk to ``--server`` when given, otherwise to an in-process instance of the app.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import pipeline
from .bridgesim import ConfigError, LabeledDataset, WorldConfig, default_config, generate, load_config
from .errors import DataError, ModelError
from .ledger import LedgerError
from .locate import GoldLabeler, LocatorModel, DeltaTable, calibrate_delta, parse_grid

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3
EXIT_BY_KIND = {"usage": EXIT_USAGE, "data": EXIT_DATA, "model": EXIT_MODEL}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_dataset(path: str) -> LabeledDataset:
    p = Path(path)
    if not (p / "chains").is_dir():
        raise DataError(f"{p}: not a dataset directory (no chains/)")
    return LabeledDataset.load(p)


def _write_json(path: str | None, obj) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


# ---------------------------------------------------------------------------
# batch jobs
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_config(Path(args.config)) if args.config else default_config()
    if args.seed is not None:
        cfg = WorldConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    ds = generate(cfg)
    ds.save(Path(args.out))
    print(f"wrote {len(ds.store)} transactions, {len(ds.pairs)} pairs to {args.out}")
    return EXIT_OK


def _train_config(args) -> pipeline.TrainConfig:
    bridges = [b for b in args.bridges.split(",") if b] if args.bridges else None
    return pipeline.TrainConfig(seed=args.seed, grid=args.grid, bridges=bridges)


def cmd_train(args) -> int:
    ds = _load_dataset(args.data)
    cfg = _train_config(args)
    out = Path(args.out)
    if args.task == "all":
        pipeline.train_all(ds, cfg).save(out)
    elif args.task == "identify":
        out.parent.mkdir(parents=True, exist_ok=True)
        pipeline.train_identify_stage(ds, cfg).save(out)
    elif args.task == "locate":
        out.parent.mkdir(parents=True, exist_ok=True)
        labeler, deltas = pipeline.train_locate_stage(ds, cfg)
        labeler.save(out)
        deltas.save(out.parent / pipeline.MODEL_FILES["deltas"])
    else:
        if not args.models:
            raise UsageError("train --task associate needs --models <dir> with a labeler and deltas.json")
        models = Path(args.models)
        for name in ("locate", "deltas"):
            if not (models / pipeline.MODEL_FILES[name]).is_file():
                raise ModelError(f"{models}: missing {pipeline.MODEL_FILES[name]}")
        labeler = LocatorModel.load(models / pipeline.MODEL_FILES["locate"])
        deltas = DeltaTable.load(models / pipeline.MODEL_FILES["deltas"])
        out.parent.mkdir(parents=True, exist_ok=True)
        pipeline.train_associate_stage(ds, labeler, deltas, cfg).save(out)
    print(f"trained {args.task} -> {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    ds = _load_dataset(args.data)
    try:
        grid = parse_grid(args.grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        ds.bridge(args.bridge)
    except KeyError as exc:
        raise DataError(f"unknown bridge {args.bridge!r}") from exc
    if args.models:
        labeler = LocatorModel.load(Path(args.models) / pipeline.MODEL_FILES["locate"])
    else:
        labeler = GoldLabeler.from_dataset(ds, {args.bridge})
    pairs = [p for p in ds.pairs_in(args.split, {args.bridge}) if not p.is_attack]
    report = calibrate_delta(pairs, grid, ds.store, labeler, ds.abis)
    _write_json(args.out, {"bridge": args.bridge, **report.to_json()})
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _load_dataset(args.data)
    models = pipeline.Models.load(Path(args.models))
    metrics = pipeline.evaluate(ds, models, args.direction)
    _write_json(args.out, metrics.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# service clients
# ---------------------------------------------------------------------------


class ServiceFailure(Exception):
    def __init__(self, kind: str, detail: str):
        super().__init__(detail)
        self.kind = kind


def _client(args):
    if args.server:
        import httpx

        return httpx.Client(base_url=args.server, timeout=600)
    if not args.store:
        raise UsageError("--store is required without --server")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service import create_app

    models = getattr(args, "models", None)
    return TestClient(create_app(Path(args.store), None if models is None else Path(models)))


def _post(args, path: str, body: dict) -> dict:
    with _client(args) as client:
        resp = client.post(path, json=body)
    payload = resp.json()
    if resp.status_code != 200:
        raise ServiceFailure(payload.get("kind", "data"), payload.get("detail", resp.text))
    return payload


def _pair_bodies(path: str) -> list[dict]:
    return [{"deposit": d.to_json(), "withdrawal": w.to_json()} for d, w in pipeline.read_pairs(Path(path))]


def cmd_trace(args) -> int:
    if not args.server and not args.models:
        raise UsageError("--models is required without --server")
    body = {"tx_hash": args.tx, "chain": args.chain, "direction": args.direction}
    payload = _post(args, "/trace", body)
    if args.format == "json":
        sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    else:
        sys.stdout.write(pipeline.TraceResult.from_json(payload).to_text() + "\n")
    return EXIT_OK


def cmd_flag(args) -> int:
    payload = _post(args, "/flag", {"pairs": _pair_bodies(args.pairs)})
    for r in payload["reports"]:
        sys.stdout.write(json.dumps(r, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_export_graph(args) -> int:
    payload = _post(args, "/export-graph", {"pairs": _pair_bodies(args.pairs), "format": args.format})
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(payload["content"])
    else:
        sys.stdout.write(payload["content"])
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(Path(args.store), Path(args.models) if args.models else None),
                host=args.host, port=args.port)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="bridgetrace", description="Cross-chain transaction tracing")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a labeled multi-chain dataset")
    p.add_argument("--config", help="YAML file with WorldConfig fields (defaults when omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train one stage or all of them")
    p.add_argument("--task", choices=["identify", "locate", "associate", "all"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint file, or models directory for --task all")
    p.add_argument("--models", help="directory holding the labeler and deltas.json (associate)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", default=pipeline.DEFAULT_GRID, help="window grid lo:hi:step in seconds")
    p.add_argument("--bridges", help="comma-separated bridges to train the labeler and associator on")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate-delta", help="recall and candidate-set size per window size")
    p.add_argument("--bridge", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True, help="lo:hi:step in seconds")
    p.add_argument("--out")
    p.add_argument("--models", help="use the trained labeler from this directory (default: labeled roles)")
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_calibrate)

    def client_args(p, models: bool):
        p.add_argument("--store", help="dataset directory")
        if models:
            p.add_argument("--models", help="models directory")
        p.add_argument("--server", help="base URL of a running service")

    p = sub.add_parser("trace", help="trace one transaction to its counterpart")
    p.add_argument("--tx", required=True)
    p.add_argument("--chain", type=int, required=True)
    p.add_argument("--direction", choices=["forward", "backward", "auto"], default="auto")
    p.add_argument("--format", choices=["json", "text"], default="json")
    client_args(p, models=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("eval", help="precision, recall, accuracy and F1 on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--direction", choices=["forward", "backward", "both"], default="both")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flag", help="amount-rule anomaly flags for pairs")
    p.add_argument("--pairs", required=True, help="JSONL of labeled pairs or trace results")
    client_args(p, models=False)
    p.set_defaults(func=cmd_flag)

    p = sub.add_parser("export-graph", help="money-flow graph over matched pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--format", choices=["dot", "json"], default="dot")
    p.add_argument("--out")
    client_args(p, models=False)
    p.set_defaults(func=cmd_export_graph)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--store", required=True)
    p.add_argument("--models")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return ap


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ServiceFailure as exc:
        print(f"{exc.kind} error: {exc}", file=sys.stderr)
        return EXIT_BY_KIND.get(exc.kind, EXIT_DATA)
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (DataError, LedgerError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
