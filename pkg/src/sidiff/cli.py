"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from sidiff import synth
from sidiff.combinatorics import count_signals
from sidiff.config import ABLATIONS, RunConfig, parse_pairs
from sidiff.dataset import load_embeddings, load_log
from sidiff.errors import ConfigError, DataError
from sidiff.fileio import atomic_write_text
from sidiff.network import load_checkpoint, save_checkpoint
from sidiff.tokenizer import load_sid_map, report, save_codebooks, save_sid_map
from sidiff.training import decode_instances, evaluate, fit_tokenizer, prepare, train

log = logging.getLogger("sidiff")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _load_config(args) -> RunConfig:
    overrides = parse_pairs(args.set or [])
    if args.config:
        if not Path(args.config).exists():
            raise ConfigError(f"config file not found: {args.config}")
        return RunConfig.load(args.config, overrides)
    return RunConfig().with_overrides(overrides)


def _out(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out_dir) / name


def _provenance(cfg: RunConfig) -> dict[str, str]:
    return {f"config.{k}": v for k, v in parse_pairs(cfg.to_text().splitlines()).items()}


def _load_data(cfg: RunConfig):
    sid_path = _out(cfg, "sids.tsv")
    if not sid_path.exists():
        raise DataError(f"{sid_path} not found; run `sidiff tokenize` first")
    return prepare(load_log(cfg.log_path, cfg.log_format), load_sid_map(sid_path), cfg.L_input)


def cmd_synth(args) -> int:
    data = synth.generate(args.users, args.items, seed=args.seed)
    paths = synth.write(data, args.out)
    for kind, path in paths.items():
        print(f"{kind}\t{path}")
    return EXIT_OK


def cmd_tokenize(args) -> int:
    cfg = _load_config(args)
    table = load_embeddings(cfg.embeddings_path)
    sids, cbs = fit_tokenizer(table, cfg)
    if cbs is not None:
        save_codebooks(_out(cfg, "codebooks.bin"), cbs)
    save_sid_map(_out(cfg, "sids.tsv"), sids)
    rep = report(table, sids, cfg.M, cbs)
    atomic_write_text(_out(cfg, "tokenizer_report.txt"), rep.to_text())
    atomic_write_text(_out(cfg, "config.txt"), cfg.to_text())
    print(rep.to_text(), end="")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data = _load_data(cfg)
    atomic_write_text(_out(cfg, "split_summary.txt"), data.split.summary())
    model, trace = train(cfg, data, progress=args.verbose)
    save_checkpoint(_out(cfg, "model.ckpt"), model, _provenance(cfg))
    atomic_write_text(_out(cfg, "trace.txt"), trace.to_text())
    print(f"best_epoch={trace.best_epoch} esp={trace.esp} best_score={max(trace.scores):.6f}")
    return EXIT_OK


def _model_for(cfg: RunConfig):
    ckpt = _out(cfg, "model.ckpt")
    if not ckpt.exists():
        raise DataError(f"{ckpt} not found; run `sidiff train` first")
    model, _ = load_checkpoint(ckpt)
    if model.cfg != cfg.model_config():
        raise ConfigError(f"checkpoint model config {model.cfg} does not match run config")
    return model


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    data = _load_data(cfg)
    model = _model_for(cfg)
    instances = data.valid if args.split == "valid" else data.test
    catalog = data.catalog if cfg.catalog_filter else None
    outcome = evaluate(model, instances, cfg, catalog, Ks=sorted({5, 10, cfg.K}))
    text = outcome.to_text({"split": args.split, **_provenance(cfg)})
    atomic_write_text(_out(cfg, f"eval_{args.split}.txt"), text)
    print(text, end="")
    return EXIT_OK


def cmd_decode(args) -> int:
    cfg = _load_config(args)
    data = _load_data(cfg)
    model = _model_for(cfg)
    pool = {inst.user: inst for inst in (data.test if args.split == "test" else data.valid)}
    if args.user not in pool:
        raise DataError(f"unknown or dropped user {args.user!r}")
    catalog = data.catalog if cfg.catalog_filter else None
    (result,) = decode_instances(model, [pool[args.user]], cfg, catalog)
    print(result.to_tsv(data.items_by_sid()), end="")
    return EXIT_OK


def cmd_count_signals(args) -> int:
    print(count_signals(args.n).to_text())
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _load_config(args)
    overrides = {k: str(v) for k, v in ABLATIONS[args.variant].items()}
    overrides["out_dir"] = str(Path(base.out_dir) / f"ablate-{args.variant}")
    cfg = base.with_overrides(overrides)
    table = load_embeddings(cfg.embeddings_path)
    sids, cbs = fit_tokenizer(table, cfg)
    save_sid_map(_out(cfg, "sids.tsv"), sids)
    if cbs is not None:
        save_codebooks(_out(cfg, "codebooks.bin"), cbs)
    data = prepare(load_log(cfg.log_path, cfg.log_format), sids, cfg.L_input)
    model, trace = train(cfg, data, progress=args.verbose)
    save_checkpoint(_out(cfg, "model.ckpt"), model, _provenance(cfg))
    atomic_write_text(_out(cfg, "trace.txt"), trace.to_text())
    catalog = data.catalog if cfg.catalog_filter else None
    outcome = evaluate(model, data.test, cfg, catalog)
    text = outcome.to_text({"variant": args.variant, "split": "test", **_provenance(cfg)})
    atomic_write_text(_out(cfg, "eval_test.txt"), text)
    print(f"variant={args.variant} esp={trace.esp}")
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sidiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key=value run configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        return p

    p = sub.add_parser("synth", help="generate a synthetic catalog and interaction log")
    p.add_argument("--users", type=int, default=50)
    p.add_argument("--items", type=int, default=40)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    with_config(sub.add_parser("tokenize", help="fit the tokenizer and write semantic IDs")).set_defaults(
        func=cmd_tokenize
    )
    with_config(sub.add_parser("train", help="train the model")).set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="Recall/NDCG on the validation or test split"))
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("decode", help="print Top-K SIDs for one user"))
    p.add_argument("--user", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("count-signals", help="supervision-signal census for n digits")
    p.add_argument("n", type=int)
    p.set_defaults(func=cmd_count_signals)

    p = with_config(sub.add_parser("ablate", help="run one ablation variant end to end"))
    p.add_argument("--variant", choices=sorted(ABLATIONS), required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
