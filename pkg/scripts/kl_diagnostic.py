"""Year-over-year drift of a target column, measured as KL divergence of histograms.

Large values mean a model fitted on one year's labels sees a shifted distribution the next year.

    python scripts/kl_diagnostic.py --data data          # panel written by `ecogrow synth`
    python scripts/kl_diagnostic.py                      # fresh synthetic panel
"""

import argparse

import numpy as np

from ecogrow.datamodel import load_panel
from ecogrow.downstream import kl_yearly
from ecogrow.synth import SyntheticSpec, generate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", help="panel directory; omit for a synthetic panel")
    ap.add_argument("--column", default="new_companies")
    ap.add_argument("--bins", type=int, default=20)
    args = ap.parse_args()

    panel = load_panel(args.data) if args.data else generate(SyntheticSpec())
    for a, b in zip(panel.years[:-1], panel.years[1:]):
        xa, xb = panel.feature(args.column, a), panel.feature(args.column, b)
        xa, xb = xa[np.isfinite(xa)], xb[np.isfinite(xb)]
        if xa.size == 0 or xb.size == 0:
            print(f"{a}->{b}: no data")
            continue
        print(f"{a}->{b}: KL {kl_yearly(xa, xb, args.bins):.5f}")


if __name__ == "__main__":
    main()
