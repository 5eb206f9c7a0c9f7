"""Command-line entry point.

Subcommands: generate-data, train, eval, grad-check, sinkhorn, import-embeddings.
Config values can be overridden with dotted flags, e.g. ``--train.tau=0.05``.
Exit codes: 0 ok, 2 config/validation error, 3 numerical failure, 4 IO error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiment, formats, sinkhorn, trainer
from .errors import (
    BadLambda,
    BadMagic,
    ConfigInvalid,
    DegenerateRow,
    KTooLarge,
    NonFinite,
    NonFiniteLoss,
    ParseError,
    SpecInvalid,
    ZeroKernelRow,
    ZeroRow,
)
from .synthdata import load_dataset, save_dataset

log = logging.getLogger("sclip")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _setup_logging() -> None:
    level = os.environ.get("SCLIP_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def load_config(path: str | None, overrides: list[str]) -> experiment.ExperimentConfig:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(str(path), f"invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigInvalid(str(path), "top level must be a JSON object")
    raw = experiment.apply_overrides(raw, overrides)
    cfg = experiment.ExperimentConfig.from_dict(raw)
    cfg.validate()
    return cfg


def _split_overrides(extra: list[str]) -> list[str]:
    out = []
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            raise ConfigInvalid(item, "unrecognised argument (overrides look like --section.key=value)")
        out.append(item[2:])
    return out


def _dataset(cfg: experiment.ExperimentConfig, path: str | None):
    if path:
        return load_dataset(path)
    return experiment.build_dataset(cfg)


# --- subcommands --------------------------------------------------------------------


def cmd_generate_data(args, overrides) -> int:
    cfg = load_config(args.config, overrides)
    ds = experiment.build_dataset(cfg)
    path, sidecar = save_dataset(ds, args.out)
    print(f"wrote {path} and {sidecar}: labeled={len(ds.labeled)} unlabeled={len(ds.unlabeled)} "
          f"test={len(ds.test)} seed={cfg.world.seed}")
    return EXIT_OK


def _summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    keys = sorted({k for r in rows for k in r if k.startswith("r_at_")})
    fields = ["method", "epoch", "zero_shot_top1", *keys, "combined"]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "combined": experiment.combined_score(r)})
    return buf.getvalue()


def cmd_train(args, overrides) -> int:
    cfg = load_config(args.config, overrides)
    ds = _dataset(cfg, args.dataset)
    out = Path(args.output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    formats.atomic_write(out / "config.json", (json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n").encode())

    methods = cfg.methods()
    lines: list[str] = []
    finals: list[dict] = []
    for method in methods:
        tcfg = dataclasses.replace(cfg.train, method=method)
        log.info("training %s for %d epochs", method, tcfg.epochs)
        for record in experiment.iter_training(ds, tcfg, cfg.eval):
            params = record.pop("params", None)
            opt = record.pop("opt", None)
            lines.append(json.dumps(record, sort_keys=True))
            formats.atomic_write(out / "metrics.jsonl", ("\n".join(lines) + "\n").encode())
            if params is not None:
                finals.append(record)
                ckpt = out / (f"{method}.sckp" if len(methods) > 1 else "checkpoint.sckp")
                total = (len(ds.labeled) // tcfg.n_paired_per_batch) * tcfg.epochs
                trainer.save_checkpoint(ckpt, params, opt, dataclasses.replace(tcfg, total_steps=total))
        last = finals[-1]
        print(f"{method}: zero_shot_top1={last['zero_shot_top1']:.2f} "
              f"r_at_1_i2t={last.get('r_at_1_i2t', float('nan')):.2f} "
              f"r_at_1_t2i={last.get('r_at_1_t2i', float('nan')):.2f}")
    if cfg.summarize:
        formats.atomic_write(out / "summary.csv", _summary_csv(finals).encode())
    return EXIT_OK


def cmd_eval(args, overrides) -> int:
    cfg = load_config(args.config, overrides)
    ds = _dataset(cfg, args.dataset)
    params, _, _ = trainer.load_checkpoint(args.checkpoint)
    report = experiment.evaluate_params(params, ds, cfg.eval.retrieval_ks)
    print(json.dumps(report.flat(), sort_keys=True))
    return EXIT_OK


def cmd_grad_check(args, overrides) -> int:
    cfg = load_config(args.config, overrides)
    ds = _dataset(cfg, args.dataset)
    tcfg = cfg.train
    rng = np.random.default_rng([tcfg.seed, 606])
    n = tcfg.n_paired_per_batch
    m = tcfg.m_unpaired_per_batch if tcfg.method != "supervised" else 0
    idx = rng.choice(len(ds.labeled), size=n, replace=False)
    params = trainer.init_params(ds.labeled.images.shape[1], ds.keyword_raw.shape[1], tcfg)
    batch = trainer.Batch(
        images=ds.labeled.images[idx],
        texts=ds.labeled.texts[idx, 0, :],
        caption_keywords=[ds.labeled.caption_keywords[i][0] for i in idx],
        unpaired=ds.unlabeled.images[rng.choice(len(ds.unlabeled), size=m, replace=False)] if m
        else np.zeros((0, ds.labeled.images.shape[1])),
        keyword_raw=ds.keyword_raw,
    )
    if tcfg.keyword_source_embeddings == "fixed":
        batch.fixed_keywords = trainer.encode(params, ds.keyword_raw, "text")
    report = trainer.grad_check(params, batch, tcfg, epsilon=args.epsilon, max_entries=args.max_entries)
    for name, err in sorted(report.per_param.items()):
        print(f"{name}: max_rel_error={err:.3e}")
    for name in report.absent:
        print(f"{name}: absent (frozen)")
    ok = report.max_rel_error < args.tolerance
    print(f"max_rel_error={report.max_rel_error:.3e} entries={report.entries_checked} "
          f"{'PASS' if ok else 'FAIL'} (tolerance {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_sinkhorn(args, overrides) -> int:
    if overrides:
        raise ConfigInvalid(overrides[0], "sinkhorn takes no config overrides")
    cost = formats.read_matrix(args.cost)
    plan = sinkhorn.solve(cost, lam=args.lam, iterations=args.iterations)
    row, col = sinkhorn.marginal_residual(plan)
    out = Path(args.out)
    if out.suffix == "" and Path(args.cost).suffix.lower() == ".csv":
        out = out.with_suffix(".csv")   # no suffix given: mirror the input format
    formats.write_matrix(out, plan.values)
    print(f"row_residual={row:.6e} col_residual={col:.6e} iterations={plan.iterations_run} -> {out}")
    return EXIT_OK


def cmd_import_embeddings(args, overrides) -> int:
    if overrides:
        raise ConfigInvalid(overrides[0], "import-embeddings takes no config overrides")
    emb = formats.read_embeddings(args.path)
    print(f"rows={emb.shape[0]} dim={emb.shape[1]}")
    if args.out:
        formats.write_embeddings(args.out, emb)
        print(f"wrote {args.out}")
    return EXIT_OK


# --- plumbing -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sclip", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic SCDS1 dataset and JSON sidecar")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train one or more methods, writing metrics.jsonl and checkpoints")
    t.add_argument("--config")
    t.add_argument("--dataset", help="SCDS1 file; generated from the config when omitted")
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--config")
    e.add_argument("--dataset")
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("grad-check", help="finite-difference check of parameter gradients")
    c.add_argument("--config")
    c.add_argument("--dataset")
    c.add_argument("--epsilon", type=float, default=1e-5)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--max-entries", type=int, default=2000)
    c.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("sinkhorn", help="solve entropic OT for a cost matrix file")
    s.add_argument("cost")
    s.add_argument("--lambda", dest="lam", type=float, default=0.07)
    s.add_argument("--iterations", type=int, default=sinkhorn.DEFAULT_ITERATIONS)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sinkhorn)

    i = sub.add_parser("import-embeddings", help="load SCLB1 or CSV embeddings and re-normalize rows")
    i.add_argument("path")
    i.add_argument("--out")
    i.set_defaults(func=cmd_import_embeddings)
    return p


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return args.func(args, _split_overrides(extra))
    except (ConfigInvalid, SpecInvalid, BadLambda, KTooLarge) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, ZeroKernelRow, DegenerateRow, ZeroRow, NonFinite) as exc:
        print(f"numerical error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, BadMagic, OSError) as exc:
        print(f"io error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
