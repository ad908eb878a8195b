"""Command-line entry point.

Subcommands: train, evaluate, dyneval, tune-temperature, gradcheck.
Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(a gradient check above tolerance, or training diverging beyond the restart
budget)."""

from __future__ import annotations

import argparse
import csv
import os
import sys

from . import checkpoint as ckpt_mod
from . import config as config_mod
from . import data as data_mod
from . import evaluation, gradcheck, numerics, training
from .config import ConfigError, RunConfig
from .ptree import unflatten_into

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2

GRADCHECK_TOLERANCE = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="rnnlab", description="recurrent language model laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_config in (
        ("train", True),
        ("evaluate", True),
        ("dyneval", True),
        ("tune-temperature", True),
        ("gradcheck", False),
    ):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=needs_config, help="key = value config file")
        cmd.add_argument("--checkpoint", help="checkpoint path (overrides config)")
        cmd.add_argument("--seed", type=int, help="seed override")
        cmd.add_argument("--csv-out", help="also export results as CSV")
    return parser


def _load_run_config(args) -> RunConfig:
    cfg = config_mod.load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.checkpoint is not None:
        cfg.checkpoint_path = args.checkpoint
    numerics.set_fast_gemm(cfg.fast_gemm)
    return cfg


def _require_paths(cfg: RunConfig, names):
    for name in names:
        path = getattr(cfg, name)
        if not path:
            raise ConfigError(f"{name} is required for this command")
        if not os.path.exists(path):
            raise ConfigError(f"{name} does not exist: {path}")


def _vocab_file(cfg: RunConfig) -> str:
    return cfg.vocab_path or cfg.checkpoint_path + ".vocab"


def _header_lines(cfg: RunConfig, vocab_size: int):
    lines = [f"# config {key}={value!r}" for key, value in config_mod.resolved_items(cfg)]
    lines.append(f"# vocab_size={vocab_size}")
    return lines


def _split_path(cfg: RunConfig, split: str) -> str:
    try:
        return {"train": cfg.train_path, "valid": cfg.valid_path, "test": cfg.test_path}[split]
    except KeyError:
        raise ConfigError(f"eval_split must be train, valid, or test, got '{split}'") from None


def _load_vocab_for_eval(cfg: RunConfig, expected_size: int):
    path = _vocab_file(cfg)
    if os.path.exists(path):
        vocab = data_mod.Vocab.load(path, cfg.mode)
    elif cfg.train_path and os.path.exists(cfg.train_path):
        vocab = data_mod.build_vocab(data_mod.load_text(cfg.train_path), cfg.mode)
    else:
        raise ConfigError(f"no vocabulary: neither {path} nor train_path is readable")
    if vocab.size != expected_size:
        raise ConfigError(
            f"vocabulary has {vocab.size} symbols but the checkpoint expects {expected_size}"
        )
    return vocab


def _append_metrics(cfg: RunConfig, line: str):
    if cfg.metrics_path:
        with open(cfg.metrics_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


def _eval_temperature(cfg: RunConfig) -> float:
    path = cfg.temperature_file or cfg.checkpoint_path + ".temperature"
    if os.path.exists(path):
        with open(path, encoding="ascii") as fh:
            return float(fh.read().strip())
    return cfg.temperature


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    _require_paths(cfg, ("train_path", "valid_path", "test_path"))
    vocab, streams = data_mod.load_splits(
        cfg.train_path, cfg.valid_path, cfg.test_path, cfg.mode
    )
    model_config = config_mod.to_model_config(cfg, vocab.size)
    opts = config_mod.to_train_options(cfg)
    rng = numerics.Rng(cfg.seed)

    log = open(cfg.metrics_path, "w", encoding="utf-8") if cfg.metrics_path else None
    try:
        if log is not None:
            for line in _header_lines(cfg, vocab.size):
                log.write(line + "\n")
            log.flush()

        def sink(line):
            if log is not None:
                log.write(line + "\n")
                log.flush()

        result = training.train(
            model_config, opts, streams["train"], streams["valid"], rng, metrics_sink=sink
        )
    finally:
        if log is not None:
            log.close()

    vocab.save(_vocab_file(cfg))
    best = ckpt_mod.checkpoint_from_snapshot(
        model_config, result.best, cfg.beta1, cfg.beta2, cfg.eps
    )
    ckpt_mod.save_checkpoint(cfg.checkpoint_path, best)
    tta_ckpt = ckpt_mod.checkpoint_from_snapshot(
        model_config, result.best, cfg.beta1, cfg.beta2, cfg.eps
    )
    unflatten_into(tta_ckpt.params, result.tta_average)
    tta_ckpt.best_val_nats = result.tta_val_nats
    ckpt_mod.save_checkpoint(cfg.tta_checkpoint_path or cfg.checkpoint_path + ".tta", tta_ckpt)

    ppl, bpc = evaluation.convert_metrics(result.best_val_nats)
    print(
        f"steps={result.steps} restarts={result.restarts} stop={result.stop_reason} "
        f"best_val_nats={result.best_val_nats!r} val_ppl={ppl!r} val_bpc={bpc!r} "
        f"tta_val_nats={result.tta_val_nats!r}"
    )
    if args.csv_out:
        _write_train_csv(args.csv_out, result.metrics_lines)
    return EXIT_OK


def _write_train_csv(path, metrics_lines):
    fields = ["step", "epoch", "train_nats", "val_nats", "tta_nats", "lr", "restarts"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for line in metrics_lines:
            pairs = dict(item.split("=", 1) for item in line.split(" ") if "=" in item)
            if pairs.get("event") != "val":
                continue
            writer.writerow([pairs.get(f, "") for f in fields])


def _report_csv(path, report: evaluation.EvalReport):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["nats_per_token", "perplexity", "bpc", "tokens", "temperature"])
        writer.writerow(
            [report.nats_per_token, report.perplexity, report.bpc,
             report.token_count, report.temperature]
        )


def _load_eval_setup(args):
    cfg = _load_run_config(args)
    ckpt = ckpt_mod.load_checkpoint(cfg.checkpoint_path)
    vocab = _load_vocab_for_eval(cfg, ckpt.config.vocab_size)
    split = cfg.eval_split
    path = _split_path(cfg, split)
    if not path or not os.path.exists(path):
        raise ConfigError(f"{split}_path does not exist: {path!r}")
    stream = data_mod.encode(vocab, data_mod.load_text(path))
    return cfg, ckpt, vocab, split, stream


def cmd_evaluate(args) -> int:
    cfg, ckpt, _, split, stream = _load_eval_setup(args)
    temperature = _eval_temperature(cfg)
    report = evaluation.evaluate_static(
        ckpt.params, ckpt.config, stream, temperature, cfg.eval_batch_size, cfg.eval_window
    )
    line = f"event=eval split={split} " + evaluation.format_report(report)
    print(line)
    _append_metrics(cfg, line)
    if args.csv_out:
        _report_csv(args.csv_out, report)
    return EXIT_OK


def cmd_dyneval(args) -> int:
    cfg, ckpt, vocab, split, stream = _load_eval_setup(args)
    temperature = _eval_temperature(cfg)
    if cfg.dyn_tune:
        tune_stream = data_mod.encode(vocab, data_mod.load_text(_split_path(cfg, "valid")))
        grid = evaluation.default_dyneval_grid(cfg.dyn_segment)
        dcfg, _ = evaluation.tune_dyneval(ckpt.params, ckpt.config, tune_stream, grid, temperature)
    else:
        dcfg = config_mod.to_dyneval_config(cfg)
    report = evaluation.evaluate_dynamic(ckpt.params, ckpt.config, stream, dcfg, temperature)
    line = f"event=dyneval split={split} " + evaluation.format_report(report)
    print(line)
    _append_metrics(cfg, line)
    if args.csv_out:
        _report_csv(args.csv_out, report)
    return EXIT_OK


def cmd_tune_temperature(args) -> int:
    cfg, ckpt, vocab, _, _ = _load_eval_setup(args)
    valid_stream = data_mod.encode(vocab, data_mod.load_text(_split_path(cfg, "valid")))
    grid = config_mod.temperature_grid(cfg)
    best = evaluation.tune_temperature(
        ckpt.params, ckpt.config, valid_stream, grid, cfg.eval_batch_size, cfg.eval_window
    )
    path = cfg.temperature_file or cfg.checkpoint_path + ".temperature"
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{best!r}\n")
    line = f"event=tune_temperature temperature={best!r} file={path}"
    print(line)
    _append_metrics(cfg, line)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.config:
        _load_run_config(args)
    results = gradcheck.gradient_check_suite()
    failed = False
    for name, err in results:
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name} max_rel_err={err:.3e} {status}")
        failed = failed or err >= GRADCHECK_TOLERANCE
    print(f"checked {len(results)} components, tolerance {GRADCHECK_TOLERANCE:g}")
    return EXIT_NUMERIC if failed else EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    handlers = {
        "train": cmd_train,
        "evaluate": cmd_evaluate,
        "dyneval": cmd_dyneval,
        "tune-temperature": cmd_tune_temperature,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ckpt_mod.CheckpointError as err:
        print(f"checkpoint error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as err:
        print(f"missing file: {err}", file=sys.stderr)
        return EXIT_USAGE
    except training.TrainingDiverged as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_NUMERIC


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
