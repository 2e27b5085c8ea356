"""Source-trained prompts scored on a ladder of rotated / noisier domains.

    python scripts/shift_ladder.py
    python scripts/shift_ladder.py --methods dcp,dual_independent,zero_shot

For each method, trains on the source task (shift.epochs epochs, shift.M
prompts) and reports accuracy at every (angle, noise multiplier) level plus
the average over the non-identity levels.
"""
import argparse
import logging
from dataclasses import replace

from dcp.harness.config import load_config, resolve
from dcp.harness.runner import dataset_for, domain_shift_eval, get_encoders


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--methods", default="zero_shot,coop_text_only,dual_independent,dcp")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = resolve(load_config(None, args.overrides))
    enc, ds = get_encoders(cfg), dataset_for(cfg)
    results = {m: domain_shift_eval(replace(cfg, method=m), enc, ds) for m in args.methods.split(",")}
    levels = [(a, n) for a, n, _ in next(iter(results.values())).levels]
    print(f"{'method':<22} {'source':>7} " + " ".join(f"{f'{a:g}/x{n:g}':>9}" for a, n in levels) + "  ood_avg")
    for m, res in results.items():
        cells = " ".join(f"{sum(acc) / len(acc):>9.4f}" for _, _, acc in res.levels)
        print(f"{m:<22} {res.source.mean:>7.4f} {cells}  {res.ood_average:.4f}")


if __name__ == "__main__":
    main()
