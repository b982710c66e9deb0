"""Command-line front end: ``sparsecast {synth,train,eval,bench,report}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
Configuration precedence is flags > ``--config`` file > defaults; the
config file holds one ``key=value`` per line with ``#`` comments.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_csv, split_ett, synth_generate, write_csv
from .models import ModelConfig
from .report import emit_report
from .training import TrainConfig, bench_reuse, evaluate, train

log = logging.getLogger("sparsecast")

RUN_ROOT_ENV = "SPARSECAST_RUN_ROOT"

_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
# seed is shared: one seed drives init, shuffling and key sampling
CONFIG_KEYS = sorted(set(_MODEL_FIELDS) | set(_TRAIN_FIELDS))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _field_type(name: str):
    f = _MODEL_FIELDS.get(name) or _TRAIN_FIELDS[name]
    default = f.default
    return type(default)


def _coerce(name: str, raw: Any) -> Any:
    kind = _field_type(name)
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{name}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise UsageError(f"{name}: expected {kind.__name__}, got {text!r}") from None


def read_config_file(path: str | Path) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(file_values: dict[str, Any], flag_values: dict[str, Any]) -> tuple[dict, dict]:
    """Merge defaults, file and flags into ModelConfig / TrainConfig kwargs."""
    merged = {**file_values, **{k: _coerce(k, v) for k, v in flag_values.items()}}
    model_kw = {k: v for k, v in merged.items() if k in _MODEL_FIELDS}
    train_kw = {k: v for k, v in merged.items() if k in _TRAIN_FIELDS}
    return model_kw, train_kw


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for name in CONFIG_KEYS:
        opts = [f"--{name}"]
        if "_" in name:
            opts.append(f"--{name.replace('_', '-')}")
        p.add_argument(*opts, dest=f"cfg_{name}", default=argparse.SUPPRESS, metavar="VALUE")


def build_parser() -> _Parser:
    p = _Parser(prog="sparsecast", description=__doc__.splitlines()[0], allow_abbrev=False)
    p.add_argument("--version", action="version", version=f"sparsecast {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic series as CSV", allow_abbrev=False)
    s.add_argument("--kind", choices=["sine_mix", "trend_season", "random_walk"], default="sine_mix")
    s.add_argument("--T", type=int, required=True)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--step-scale", type=float, default=1.0)
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model and write a run directory", allow_abbrev=False)
    t.add_argument("--data", required=True, help="CSV file")
    t.add_argument("--config", help="key=value override file")
    t.add_argument("--run-dir", help="explicit run directory (default: <root>/<timestamp>-seed<seed>)")
    t.add_argument("--run-root", help=f"parent of run directories (env {RUN_ROOT_ENV}, default ./runs)")
    t.add_argument("--fill", choices=["reject", "ffill"], default="reject")
    _add_config_flags(t)

    for name, helptext in (("eval", "evaluate a checkpoint"), ("bench", "compare index recompute vs reuse")):
        e = sub.add_parser(name, help=helptext, allow_abbrev=False)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", help="CSV file (default: the training data recorded in the checkpoint)")
        e.add_argument("--split", choices=["train", "val", "test"], default="test")
        e.add_argument("--batch-size", type=int, default=32)
        if name == "bench":
            e.add_argument("--max-windows", type=int)
        e.add_argument("--out", help="where to write the JSON result (default: next to the checkpoint)")

    r = sub.add_parser("report", help="render summary.txt and epochs.csv for a run", allow_abbrev=False)
    r.add_argument("--run-dir", required=True)
    return p


class _RunLock:
    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"run directory {self.path.parent} is locked by another process") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _cmd_synth(a) -> int:
    frame = synth_generate(a.kind, a.T, a.n, seed=a.seed, noise=a.noise, step_scale=a.step_scale)
    write_csv(frame, a.out)
    print(f"wrote {a.out}: T={frame.T} n={frame.n}")
    return 0


def _cmd_train(a) -> int:
    file_values = read_config_file(a.config) if a.config else {}
    flags = {k[4:]: v for k, v in vars(a).items() if k.startswith("cfg_")}
    model_kw, train_kw = resolve_config(file_values, flags)

    frame = load_csv(a.data, fill=a.fill)
    model_kw.setdefault("n_channels", frame.n)
    if "seed" in train_kw:
        model_kw["seed"] = train_kw["seed"]
    try:
        mcfg = ModelConfig(**model_kw)
        tcfg = TrainConfig(**train_kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    if a.run_dir:
        run_dir = Path(a.run_dir)
    else:
        root = Path(a.run_root or os.environ.get(RUN_ROOT_ENV, "runs"))
        stamp = dt.datetime.now(dt.timezone.utc).strftime("%Y%m%dT%H%M%S")
        run_dir = root / f"{stamp}-seed{tcfg.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    with _RunLock(run_dir):
        splits = split_ett(frame, tcfg.freq)
        if splits.proportional:
            log.warning("frame has %d rows, fewer than 20 months; split 12:4:4 proportionally", frame.T)
        ckpt, report = train(mcfg, tcfg, splits)
        ckpt.data["path"] = str(Path(a.data).resolve())
        report.data["path"] = ckpt.data["path"]
        save_checkpoint(ckpt, run_dir / "ckpt")
        report.save(run_dir)
        emit_report(run_dir)
    print(f"run directory: {run_dir}")
    print(json.dumps({"test": report.test, "baseline_repeat_last": report.baseline}, sort_keys=True))
    return 0


def _split_for(ckpt, a):
    path = a.data or ckpt.data.get("path")
    if not path:
        raise UsageError("no --data given and the checkpoint records no data path")
    frame = load_csv(path)
    splits = split_ett(frame, ckpt.data.get("freq", "h"))
    return {"train": splits.train, "val": splits.val, "test": splits.test}[a.split]


def _write_result(name: str, a, payload: dict) -> None:
    out = Path(a.out) if a.out else Path(a.checkpoint).resolve().parent / f"{name}.json"
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(json.dumps(payload, indent=2, sort_keys=True))


def _cmd_eval(a) -> int:
    ckpt = load_checkpoint(a.checkpoint)
    result = evaluate(ckpt, _split_for(ckpt, a), a.batch_size)
    _write_result("eval", a, {"split": a.split, "model": ckpt.model_config.model, **result})
    return 0


def _cmd_bench(a) -> int:
    ckpt = load_checkpoint(a.checkpoint)
    result = bench_reuse(ckpt, _split_for(ckpt, a), a.batch_size, a.max_windows)
    _write_result("bench", a, {"split": a.split, **result})
    return 0


def _cmd_report(a) -> int:
    summary, _ = emit_report(a.run_dir)
    sys.stdout.write(summary.read_text())
    return 0


COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "eval": _cmd_eval, "bench": _cmd_bench,
            "report": _cmd_report}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        if a.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[a.command](a)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: report and exit 2
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
