"""Command line: ``dcp <subcommand> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 gradient-audit failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..container import load_bank
from ..prompts import ConfigError, init_bank
from ..synthdata import generate
from . import report
from .config import load_config, resolve
from .gradcheck import format_audit, gradcheck
from .runner import (ablate_fusion, ablate_param_sharing, dataset_for, domain_shift_eval, evaluate, get_encoders,
                     save_banks, sweep, train)

EXIT_OK, EXIT_CONFIG, EXIT_AUDIT = 0, 2, 3


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"bad --seed-list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcp", description="Cross-modal deep prompt tuning on synthetic tasks")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed-list", help="comma-separated seeds (same as --set seeds=...)")
        p.add_argument("--out-dir", default="runs", help="directory for reports (default: runs)")
        p.add_argument("--cache-dir", help="pretrained-encoder cache (default: $DCP_CACHE_DIR or ~/.cache/dcp)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("generate", help="write the synthetic dataset to <out-dir>/data"))
    p = common(sub.add_parser("train", help="train one method at one or more shot counts"))
    p.add_argument("--sweep", action="store_true", help="run every shot count in shot_list")
    p.add_argument("--save-banks", action="store_true", help="also write trained prompt banks")
    p = common(sub.add_parser("evaluate", help="score a saved prompt bank (or zero-shot) on the test split"))
    p.add_argument("--bank", help="DCPW prompt-bank file; omit for zero-shot")
    common(sub.add_parser("ablate-fusion", help="avg / max / first fusion across shot_list"))
    common(sub.add_parser("ablate-ps", help="with / without CMPA parameter sharing across shot_list"))
    common(sub.add_parser("shift-eval", help="train on the source task, test on a ladder of shifted tasks"))
    p = common(sub.add_parser("gradcheck", help="finite-difference audit of all gradients"))
    p.add_argument("--trials", type=int, default=10)
    return parser


def _config(args):
    overrides = list(args.overrides)
    if args.seed_list:
        overrides.append("seeds=" + ",".join(map(str, _parse_seeds(args.seed_list))))
    return resolve(load_config(args.config, overrides))


def _timings(results) -> dict:
    return {f"{r.label}/shots{r.shots}": round(r.wall_clock, 3) for r in results}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    out = Path(args.out_dir)
    try:
        cfg = _config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    cmd = args.command
    if cmd == "gradcheck":
        ok, entries, elapsed = gradcheck(trials=args.trials)
        text = format_audit(entries)
        report.write_report(out / "gradcheck.txt", text, {"elapsed_s": round(elapsed, 3)})
        print(format_audit(entries, elapsed), end="")
        return EXIT_OK if ok else EXIT_AUDIT

    if cmd == "generate":
        ds = generate(cfg.data, cfg.data_seed, out / "data")
        print(f"wrote {out / 'data' / cfg.data.name} (least-squares train accuracy {ds.lsq_train_accuracy:.4f})")
        return EXIT_OK

    encoders = get_encoders(cfg, args.cache_dir)
    ds = dataset_for(cfg)

    if cmd == "train":
        results = sweep(cfg, encoders, ds) if args.sweep else [train(cfg, encoders, ds)]
        path = report.write_report(out / f"train-{cfg.method}.txt", report.format_runs("train", cfg, results),
                                   _timings(results))
        if args.save_banks:
            save_banks(results, out)
    elif cmd == "evaluate":
        if args.bank:
            bank = load_bank(args.bank)
            cfg = replace(cfg, method=bank.method, prompt=bank.config)
        else:
            bank = init_bank("zero_shot", cfg.prompt, encoders, 0)
            cfg = replace(cfg, method="zero_shot")
        acc = evaluate(bank, encoders, ds.test_patches, ds.test_labels, ds.class_tokens, cfg.tau)
        text = report.format_evaluate(cfg, args.bank, acc)
        path = report.write_report(out / "evaluate.txt", text)
    elif cmd == "ablate-fusion":
        results = ablate_fusion(cfg, encoders, ds)
        path = report.write_report(out / "ablate-fusion.txt", report.format_runs("ablate-fusion", cfg, results),
                                   _timings(results))
    elif cmd == "ablate-ps":
        results = ablate_param_sharing(cfg, encoders, ds)
        path = report.write_report(out / "ablate-ps.txt", report.format_runs("ablate-ps", cfg, results),
                                   _timings(results))
    elif cmd == "shift-eval":
        res = domain_shift_eval(cfg, encoders, ds)
        path = report.write_report(out / "shift-eval.txt", report.format_shift(cfg, res),
                                   {"source": round(res.source.wall_clock, 3)})
    else:  # pragma: no cover - argparse rejects unknown commands
        raise AssertionError(cmd)
    print(path)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
