"""Fusion-mode and parameter-sharing ablations across the shot list.

    python scripts/ablations.py                 # both ablations, default task
    python scripts/ablations.py --which ps --set epochs=5

The fusion modes (avg / max / first) collapse copies of the prompts that are
identical by construction, so their rows should agree to the last digit;
the sharing ablation trades CMPA parameters (one block vs N-1 blocks).
"""
import argparse
import logging

from dcp.harness.config import load_config, resolve
from dcp.harness.report import format_runs
from dcp.harness.runner import ablate_fusion, ablate_param_sharing, dataset_for, get_encoders


def table(results):
    shots = sorted({r.shots for r in results})
    labels = list(dict.fromkeys(r.label for r in results))
    print(f"{'variant':<8} {'params':>8} " + " ".join(f"{s:>8}" for s in shots))
    for lab in labels:
        mine = {r.shots: r for r in results if r.label == lab}
        print(f"{lab:<8} {mine[shots[0]].n_params:>8} " + " ".join(f"{mine[s].mean:>8.4f}" for s in shots))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--which", choices=("fusion", "ps", "both"), default="both")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--report", help="also write the full report for the last ablation here")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = resolve(load_config(None, args.overrides))
    enc, ds = get_encoders(cfg), dataset_for(cfg)
    for name, fn in (("fusion", ablate_fusion), ("ps", ablate_param_sharing)):
        if args.which in (name, "both"):
            results = fn(cfg, enc, ds)
            print(f"\n## {name}")
            table(results)
            if args.report:
                with open(args.report, "w") as fh:
                    fh.write(format_runs(f"ablate-{name}", cfg, results))


if __name__ == "__main__":
    main()
