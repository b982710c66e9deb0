"""Run reports: structured JSON record plus human/CSV renderings."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__

__all__ = ["RunReport", "emit_report", "load_report", "REPORT_FILE"]

REPORT_FILE = "report.json"


@dataclass
class RunReport:
    """Everything a run measured.

    Wall-clock values live only under ``timings`` so that the rest of the
    document is reproducible byte-for-byte under a fixed seed.
    """

    model: str
    config: dict
    epochs: list[dict] = field(default_factory=list)  # epoch, lr, train_loss, val_loss
    best_epoch: int = -1
    stopped_early: bool = False
    test: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    stability: list[dict] = field(default_factory=list)
    data: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    version: str = f"v{__version__}"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, run_dir: str | Path) -> Path:
        p = Path(run_dir) / REPORT_FILE
        p.write_text(self.to_json())
        return p

    def metrics_finite(self) -> bool:
        vals = [v for v in self.test.values() if isinstance(v, float)]
        vals += [e[k] for e in self.epochs for k in ("train_loss", "val_loss")]
        return all(math.isfinite(v) for v in vals)


def load_report(run_dir: str | Path) -> RunReport:
    return RunReport(**json.loads((Path(run_dir) / REPORT_FILE).read_text()))


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def emit_report(run_dir: str | Path) -> tuple[Path, Path]:
    """Write ``summary.txt`` and ``epochs.csv`` next to ``report.json``.

    Output depends only on ``report.json``, so re-running is idempotent.
    """
    run_dir = Path(run_dir)
    rep = load_report(run_dir)
    lines = [f"sparsecast run report ({rep.version})", f"model: {rep.model}", "", "config:"]
    lines += [f"  {k} = {_fmt(rep.config[k])}" for k in sorted(rep.config)]
    lines += ["", f"epochs trained: {len(rep.epochs)}", f"best epoch: {rep.best_epoch}",
              f"stopped early: {rep.stopped_early}", "", "test metrics:"]
    lines += [f"  {k} = {_fmt(rep.test[k])}" for k in sorted(rep.test)]
    if rep.baseline:
        lines += ["", "repeat-last baseline:"]
        lines += [f"  {k} = {_fmt(rep.baseline[k])}" for k in sorted(rep.baseline)]
    if rep.counters:
        lines += ["", "attention multiply counters:"]
        for phase in sorted(rep.counters):
            vals = ", ".join(f"{k}={v}" for k, v in sorted(rep.counters[phase].items()))
            lines.append(f"  {phase}: {vals}")
    if rep.stability:
        lines += ["", "top-u index stability (Jaccard, consecutive epochs):"]
        for row in rep.stability:
            lines.append(
                f"  layer {row['layer_id']} head {row['head_id']} "
                f"epochs {row['epoch_a']}->{row['epoch_b']}: {row['jaccard']:.4f}"
            )
    summary = run_dir / "summary.txt"
    summary.write_text("\n".join(lines) + "\n")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "lr", "train_loss", "val_loss"])
    for e in rep.epochs:
        w.writerow([e["epoch"], repr(e["lr"]), repr(e["train_loss"]), repr(e["val_loss"])])
    curves = run_dir / "epochs.csv"
    curves.write_text(buf.getvalue())
    return summary, curves
