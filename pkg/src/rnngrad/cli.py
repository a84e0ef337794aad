"""Command-line entry point: train, eval, gradcheck, bench.

Configuration is a flat text file of `key = value` lines with `#` comments;
bare `key=value` arguments on the command line override file values, and
the RNN_SEED environment variable overrides the seed last of all.  Exit
codes: 0 success, 1 usage error, 2 data error, 3 failed check, 4 numeric
abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import data as data_mod
from . import gradcheck as gradcheck_mod
from . import model as model_mod
from . import optim as optim_mod
from .cells import CellKind
from .feedback import EngineKind

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3
EXIT_NUMERIC = 4

EPOCH_CSV = "metrics_epochs.csv"
STEP_CSV = "metrics_steps.csv"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    """Training-run settings; defaults are the word-level preset."""

    cell_kind: str = "GRU"
    num_layers: int = 3
    hidden_dim: int = 256
    context_length: int = 64
    skip_connections: bool = True
    transformer_like: bool = False
    engine: str = "BPTT"
    vocab_mode: str = "word"
    max_vocab: int = 10000
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-4
    schedule: str = "step"
    milestones: tuple = (10, 20)
    lr_factor: float = 0.1
    grad_clip: float = 0.0
    shuffle: bool = True
    seed: int = 0
    train_path: str = "corpora/train.txt"
    valid_path: str = "corpora/valid.txt"
    out_dir: str = "runs/default"


_TRUE_WORDS = {"true", "1", "yes", "on"}
_FALSE_WORDS = {"false", "0", "no", "off"}


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in _TRUE_WORDS:
                return True
            if lowered in _FALSE_WORDS:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            if not raw:
                return ()
            return tuple(int(part) for part in raw.split(","))
        return raw
    except ValueError as exc:
        raise UsageError(f"bad value for {name}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    items = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key = value, "
                             f"got {raw.strip()!r}")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items


def build_run_config(config_path: str | None, overrides: list[str]) -> RunConfig:
    field_types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    # dataclass field annotations are strings under future-import semantics
    resolved = {"str": str, "int": int, "float": float, "bool": bool,
                "tuple": tuple}
    items = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise DataError(f"config file not found: {config_path}")
        items.update(parse_config_text(path.read_text(), source=config_path))
    for arg in overrides:
        if "=" not in arg:
            raise UsageError(f"override must look like key=value, got {arg!r}")
        key, value = arg.split("=", 1)
        items[key.strip()] = value.strip()

    config = RunConfig()
    for key, raw in items.items():
        if key not in field_types:
            raise UsageError(f"unknown config key: {key}")
        kind = resolved.get(field_types[key], str) \
            if isinstance(field_types[key], str) else field_types[key]
        setattr(config, key, _coerce(key, kind, raw))

    env_seed = os.environ.get("RNN_SEED")
    if env_seed is not None:
        config.seed = _coerce("RNN_SEED", int, env_seed)
    return config


def _model_config(run: RunConfig, vocab_size: int) -> model_mod.ModelConfig:
    try:
        kind = CellKind.parse(run.cell_kind)
        engine = EngineKind.parse(run.engine)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return model_mod.ModelConfig(
        cell_kind=kind,
        num_layers=run.num_layers,
        hidden_dim=run.hidden_dim,
        vocab_size=vocab_size,
        context_length=run.context_length,
        skip_connections=run.skip_connections,
        transformer_like=run.transformer_like,
        engine=engine,
        seed=run.seed,
    )


def _schedule(run: RunConfig) -> optim_mod.ScheduleConfig:
    try:
        return optim_mod.ScheduleConfig(kind=run.schedule, base_lr=run.lr,
                                        milestones=tuple(run.milestones),
                                        factor=run.lr_factor,
                                        total_steps=run.epochs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _read_corpus(path: str) -> str:
    p = Path(path)
    if not p.exists():
        raise DataError(f"corpus file not found: {path}")
    return p.read_text(encoding="utf-8")


def evaluate_stream(params: model_mod.ModelParams, stream: np.ndarray,
                    batch: int, steps: int) -> tuple[float, int]:
    """Mean NLL over non-overlapping windows, same shaping as training."""
    total = 0.0
    count = 0
    for x, y in data_mod.batchify(stream, batch=batch, steps=steps):
        logits, _ = model_mod.forward(params, x)
        loss, _ = model_mod.loss_and_errors(logits, y)
        total += loss
        count += 1
    if count == 0:
        raise DataError("evaluation stream yields no windows")
    return total / count, count * batch * steps


def cmd_train(config_path: str | None, overrides: list[str]) -> int:
    run = build_run_config(config_path, overrides)
    text = _read_corpus(run.train_path)
    valid_text = _read_corpus(run.valid_path)
    try:
        vocab = data_mod.build_vocab(text, mode=run.vocab_mode,
                                     max_size=run.max_vocab)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    train_stream = data_mod.encode(text, vocab)
    valid_stream = data_mod.encode(valid_text, vocab)

    config = _model_config(run, vocab.size)
    schedule = _schedule(run)
    params = model_mod.init_params(config)
    adam = optim_mod.init_adam(params)

    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    extra = {
        "vocab_tokens": vocab.id_to_token,
        "vocab_mode": vocab.mode,
        "batch_size": run.batch_size,
        "train_path": run.train_path,
        "valid_path": run.valid_path,
    }

    step = 0
    best_ppl = np.inf
    with open(out_dir / EPOCH_CSV, "w", newline="") as epoch_fh, \
            open(out_dir / STEP_CSV, "w", newline="") as step_fh:
        epoch_csv = csv.writer(epoch_fh)
        step_csv = csv.writer(step_fh)
        epoch_csv.writerow(["epoch", "train_ppl", "valid_ppl", "lr", "wall_s"])
        step_csv.writerow(["step", "loss", "lr"])

        for epoch_index in range(run.epochs):
            lr = optim_mod.lr_at(schedule, epoch_index)
            started = time.perf_counter()
            losses = []
            shuffle_seed = (run.seed * 100003 + epoch_index) if run.shuffle \
                else None
            for x, y in data_mod.batchify(train_stream, batch=run.batch_size,
                                          steps=run.context_length,
                                          shuffle_seed=shuffle_seed):
                logits, trace = model_mod.forward(params, x)
                loss, dlogits = model_mod.loss_and_errors(logits, y)
                if not np.isfinite(loss):
                    print(f"abort: non-finite loss {loss} at step {step + 1}",
                          file=sys.stderr)
                    return EXIT_NUMERIC
                grads = model_mod.backward(params, trace, dlogits,
                                           config.engine)
                if run.grad_clip > 0.0:
                    optim_mod.clip_grad_norm(grads, run.grad_clip)
                optim_mod.adam_step(params, grads, adam, lr=lr,
                                    weight_decay=run.weight_decay)
                step += 1
                losses.append(loss)
                step_csv.writerow([step, f"{loss:.17g}", f"{lr:.17g}"])

            train_ppl = float(np.exp(np.mean(losses)))
            valid_nll, _ = evaluate_stream(params, valid_stream,
                                           run.batch_size,
                                           run.context_length)
            valid_ppl = float(np.exp(valid_nll))
            wall = time.perf_counter() - started
            epoch_csv.writerow([epoch_index + 1, f"{train_ppl:.17g}",
                                f"{valid_ppl:.17g}", f"{lr:.17g}",
                                f"{wall:.3f}"])
            epoch_fh.flush()
            step_fh.flush()
            print(f"epoch {epoch_index + 1}/{run.epochs} "
                  f"train_ppl={train_ppl:.3f} valid_ppl={valid_ppl:.3f} "
                  f"lr={lr:g} wall_s={wall:.1f}")
            if valid_ppl < best_ppl:
                best_ppl = valid_ppl
                model_mod.save_checkpoint(out_dir / "best.ckpt", params,
                                          adam_state=adam, extra=extra)

    model_mod.save_checkpoint(out_dir / "final.ckpt", params,
                              adam_state=adam, extra=extra)
    return EXIT_OK


def cmd_eval(checkpoint_path: str, data_path: str) -> int:
    try:
        params, _, extra = model_mod.load_checkpoint(checkpoint_path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {checkpoint_path}") from None
    except ValueError as exc:
        raise DataError(f"bad checkpoint {checkpoint_path}: {exc}") from None
    if "vocab_tokens" not in extra or "vocab_mode" not in extra:
        raise DataError("checkpoint carries no vocabulary; cannot tokenize")
    try:
        vocab = data_mod.vocab_from_tokens(extra["vocab_tokens"],
                                           extra["vocab_mode"])
    except ValueError as exc:
        raise DataError(f"checkpoint vocabulary invalid: {exc}") from None
    if vocab.size != params.config.vocab_size:
        raise DataError(f"checkpoint vocabulary size {vocab.size} does not "
                        f"match model vocabulary {params.config.vocab_size}")

    stream = data_mod.encode(_read_corpus(data_path), vocab)
    batch = int(extra.get("batch_size", 128))
    nll, tokens = evaluate_stream(params, stream, batch,
                                  params.config.context_length)
    ppl = float(np.exp(nll))
    if not np.isfinite(ppl):
        print(f"abort: non-finite perplexity {ppl}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"valid_ppl={ppl:.17g} loss={nll:.17g} tokens={tokens}")
    return EXIT_OK


def _gradcheck_reports(scope: str, seed: int) -> list:
    reports = []
    if scope in ("cells", "model"):
        layers, d, steps, batch = (1, 4, 6, 2) if scope == "cells" \
            else (2, 6, 10, 2)
        rng = np.random.default_rng(seed)
        for kind in CellKind:
            cfg = model_mod.ModelConfig(cell_kind=kind, num_layers=layers,
                                        hidden_dim=d, vocab_size=11,
                                        context_length=steps, seed=seed)
            params = model_mod.init_params(cfg)
            tokens = rng.integers(0, 11, size=(batch, steps))
            targets = rng.integers(0, 11, size=(batch, steps))
            report = gradcheck_mod.check_model_grads(params, tokens, targets)
            report.details["cell_kind"] = kind.value
            reports.append(report)
            if scope == "model" and kind is CellKind.GRU:
                conv = gradcheck_mod.check_fd_convergence(params, tokens,
                                                          targets)
                conv.details["cell_kind"] = kind.value
                reports.append(conv)
    elif scope == "engines":
        reports.append(gradcheck_mod.check_engine_consistency(
            dims=[1, 2, 4, 8, 16, 32, 64],
            lengths=[1, 2, 3, 8, 16, 37, 64, 128, 256, 512],
            trials=100, seed=seed))
        reports.append(gradcheck_mod.check_dsf_exactness(d=8, steps=32,
                                                         seed=seed))
    else:
        raise UsageError(f"unknown gradcheck scope: {scope}")
    return reports


def cmd_gradcheck(scope: str, negative_control: bool, seed: int) -> int:
    reports = _gradcheck_reports(scope, seed)
    if negative_control:
        # deliberately perturbed feedback diagonal; this one must fail
        reports.append(gradcheck_mod.check_dsf_exactness(
            d=8, steps=32, seed=seed, perturb=True))
    ok = True
    for report in reports:
        print(report.describe())
        print(report.summary())
        ok = ok and report.passed
    return EXIT_OK if ok else EXIT_CHECK


def cmd_bench(axis: str, engine_names: str, reps: int, batch: int | None,
              out_path: str | None) -> int:
    try:
        engines = [EngineKind.parse(name.strip())
                   for name in engine_names.split(",") if name.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not engines:
        raise UsageError("no engines given")
    if axis not in ("d", "T"):
        raise UsageError(f"sweep axis must be d or T, got {axis!r}")

    results = []
    ok = True
    for engine in engines:
        sweep_results = bench_mod.sweep(engine, axis, reps=reps, batch=batch)
        results.extend(sweep_results)
        slope = bench_mod.fit_scaling_exponent(sweep_results, axis)
        try:
            lo, hi = bench_mod.expected_band(engine, axis)
            in_band = lo <= slope <= hi
            ok = ok and in_band
            verdict = f"band=[{lo},{hi}] pass={str(in_band).lower()}"
        except ValueError:
            verdict = "band=none pass=na"
        print(f"exponent engine={engine.value} axis={axis} "
              f"slope={slope:.4f} {verdict}")

    path = out_path if out_path is not None else f"bench_{axis}.csv"
    bench_mod.write_csv(results, path)
    print(f"wrote {path} ({len(results)} rows)")
    return EXIT_OK if ok else EXIT_CHECK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="rnngrad",
                     description="recurrent-network training with "
                                 "swappable temporal-gradient engines")
    sub = parser.add_subparsers(dest="command")

    train = sub.add_parser("train", help="train a model")
    train.add_argument("--config", default=None, help="flat key = value file")
    train.add_argument("overrides", nargs="*", metavar="key=value")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("data")

    gc = sub.add_parser("gradcheck", help="run gradient oracles")
    gc.add_argument("scope", choices=["cells", "engines", "model"])
    gc.add_argument("--negative-control", action="store_true",
                    help="add a deliberately broken check that must fail")
    gc.add_argument("--seed", type=int, default=0)

    be = sub.add_parser("bench", help="time the gradient engines")
    be.add_argument("--sweep", required=True, choices=["d", "T"])
    be.add_argument("--engines", default="BPTT,DSF_Sequential,FTBPTT")
    be.add_argument("--reps", type=int, default=bench_mod.DEFAULT_REPS)
    be.add_argument("--batch", type=int, default=None)
    be.add_argument("--out", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        if args.command == "train":
            return cmd_train(args.config, args.overrides)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.data)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.scope, args.negative_control, args.seed)
        return cmd_bench(args.sweep, args.engines, args.reps, args.batch,
                         args.out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except optim_mod.NonFiniteGradient as exc:
        print(f"abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main_entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    main_entry()
