"""Plot-free look at the linear and exponential mask-rate curves.

    python scripts/schedule_preview.py --alpha 0.02 --omega 0.95 --cap 150 --every 15
"""
import argparse

from cikg.objectives import MaskSchedule

ap = argparse.ArgumentParser()
ap.add_argument("--alpha", type=float, default=0.1)
ap.add_argument("--omega", type=float, default=0.95)
ap.add_argument("--cap", type=int, default=160)
ap.add_argument("--every", type=int, default=10)
args = ap.parse_args()

lin = MaskSchedule(args.alpha, args.omega, args.cap, "linear")
exp = MaskSchedule(args.alpha, args.omega, args.cap, "exponential")
print(f"{'epoch':>6} {'linear':>10} {'exponential':>12}  gap")
for q in sorted(set(range(0, args.cap + 1, args.every)) | {args.cap}):
    gap = lin.rate(q) - exp.rate(q)
    print(f"{q:6d} {lin.rate(q):10.6f} {exp.rate(q):12.6f}  {'#' * int(round(gap * 100))}")
