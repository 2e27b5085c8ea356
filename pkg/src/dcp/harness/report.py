"""Plain-text run reports.

A report is a key-value header, the fully resolved config, one block per
run (per-epoch losses, then per-seed accuracies), a comparison table and a
final ``SUMMARY {json}`` line.  Nothing time-dependent goes in the report,
so reruns are byte-identical; wall-clock times go to a sidecar
``<report>.timing.json``.

Field names::

    header   command, method, package_version, n_seeds, seeds
    config   config.<key> = <value>          (every resolved setting)
    run      run <label> shots=<s> method=<m> n_params=<n>
             epoch seed=<k> ... rows of mean train loss, 6 decimals
             acc   <seed> <accuracy|nan> <ok|diverged>
    table    label shots n_params mean_acc std_acc acc[seed...]
    SUMMARY  {"command":..., "rows":[{label, shots, n_params, mean_acc, std_acc}], ...}
"""
from __future__ import annotations

import json
import math
import os
from pathlib import Path

from .. import __version__
from .config import RunConfig, flatten
from .runner import RunResult, ShiftResult


def _num(x, nd=4):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{x:.{nd}f}"


def _json_num(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return None
    return round(float(x), 6)


def header_lines(command: str, cfg: RunConfig) -> list[str]:
    lines = [f"# dcp report: {command}", f"command: {command}", f"method: {cfg.method}",
             f"package_version: {__version__}", f"n_seeds: {len(cfg.seeds)}",
             f"seeds: {','.join(map(str, cfg.seeds))}", "", "## config"]
    lines += [f"config.{k} = {v}" for k, v in flatten(cfg).items()]
    return lines


def _run_block(r: RunResult) -> list[str]:
    lines = ["", f"## run {r.label} shots={r.shots} method={r.method} n_params={r.n_params}"]
    n_epochs = max((len(s.epoch_losses) for s in r.seeds), default=0)
    if n_epochs:
        lines.append("epoch " + " ".join(f"seed={s.seed}" for s in r.seeds))
        for e in range(n_epochs):
            cells = [_num(s.epoch_losses[e], 6) if e < len(s.epoch_losses) else "-" for s in r.seeds]
            lines.append(f"{e + 1} " + " ".join(cells))
    for s in r.seeds:
        lines.append(f"acc {s.seed} {_num(s.accuracy)} {s.status}")
    return lines


def _table(results: list[RunResult]) -> list[str]:
    seeds = [s.seed for s in results[0].seeds] if results else []
    lines = ["", "## table", "label shots n_params mean_acc std_acc " + " ".join(f"acc_seed{s}" for s in seeds)]
    for r in results:
        accs = " ".join(_num(s.accuracy) for s in r.seeds)
        lines.append(f"{r.label} {r.shots} {r.n_params} {_num(r.mean)} {_num(r.std)} {accs}")
    return lines


def summary_rows(results: list[RunResult]) -> list[dict]:
    return [{"label": r.label, "shots": r.shots, "n_params": r.n_params, "mean_acc": _json_num(r.mean),
             "std_acc": _json_num(r.std), "acc": [_json_num(s.accuracy) for s in r.seeds]} for r in results]


def format_runs(command: str, cfg: RunConfig, results: list[RunResult]) -> str:
    lines = header_lines(command, cfg)
    for r in results:
        lines += _run_block(r)
    lines += _table(results)
    summary = {"command": command, "rows": summary_rows(results)}
    lines += ["", "SUMMARY " + json.dumps(summary, sort_keys=True, separators=(",", ":"))]
    return "\n".join(lines) + "\n"


def format_shift(cfg: RunConfig, res: ShiftResult) -> str:
    lines = header_lines("shift-eval", cfg)
    lines += _run_block(res.source)
    seeds = [s.seed for s in res.source.seeds]
    lines += ["", "## shift", "angle_deg noise_mult mean_acc " + " ".join(f"acc_seed{s}" for s in seeds)]
    lines.append(f"source - {_num(res.source.mean)} " + " ".join(_num(s.accuracy) for s in res.source.seeds))
    rows = []
    for angle, mult, accs in res.levels:
        mean = sum(accs) / len(accs)
        lines.append(f"{angle:g} {mult:g} {_num(mean)} " + " ".join(_num(a) for a in accs))
        rows.append({"angle_deg": angle, "noise_mult": mult, "mean_acc": _json_num(mean),
                     "acc": [_json_num(a) for a in accs]})
    lines.append(f"ood_average - {_num(res.ood_average)}")
    summary = {"command": "shift-eval", "source_acc": _json_num(res.source.mean),
               "source_acc_seeds": [_json_num(s.accuracy) for s in res.source.seeds],
               "shifts": rows, "ood_average": _json_num(res.ood_average), "n_params": res.source.n_params}
    lines += ["", "SUMMARY " + json.dumps(summary, sort_keys=True, separators=(",", ":"))]
    return "\n".join(lines) + "\n"


def format_evaluate(cfg: RunConfig, bank_path: str | None, accuracy: float) -> str:
    lines = header_lines("evaluate", cfg)
    lines += ["", f"bank: {bank_path or '-'}", f"accuracy: {accuracy:.4f}", "",
              "SUMMARY " + json.dumps({"command": "evaluate", "accuracy": _json_num(accuracy)}, sort_keys=True,
                                      separators=(",", ":"))]
    return "\n".join(lines) + "\n"


def parse_summary(text: str) -> dict:
    for line in reversed(text.splitlines()):
        if line.startswith("SUMMARY "):
            return json.loads(line[len("SUMMARY "):])
    raise ValueError("no SUMMARY line in report")


def write_atomic(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
    return path


def write_report(path, text: str, timings: dict | None = None) -> Path:
    path = write_atomic(path, text)
    if timings is not None:
        write_atomic(path.with_name(path.name + ".timing.json"), json.dumps(timings, indent=1, sort_keys=True) + "\n")
    return path
