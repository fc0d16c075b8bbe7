"""Generate the planted-topic dataset and run the full variant x seed grid.

    python scripts/run_synthetic_ablation.py /tmp/planted [--seeds 0,1,2,3,4]
"""
import argparse
import sys
from pathlib import Path

from cikg import cli
from cikg import pipeline as P


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--variants", default=",".join(P.VARIANTS))
    args = ap.parse_args()
    out = Path(args.out)
    code = cli.main(["synth", "--out", str(out)])
    if code:
        return code
    code = cli.main(["ablate", "--config", str(out / "config.json"), "--variants", args.variants,
                     "--seeds", args.seeds])
    if code:
        return code
    for (variant, metric), (mean, std) in P.read_ablation(out / "run" / "ablation.tsv").items():
        if metric == "recall@50":
            print(f"{variant:10s} recall@50 {mean:.4f} +- {std:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
