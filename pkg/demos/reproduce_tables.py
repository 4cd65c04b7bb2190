"""
Reproducing the reference device results
========================================

Runs the full extraction on every bundled device and prints the result next
to the reference value. Resolved channels print as ``value ± sigma``, the
rest as ``<= bound``.
"""

import argparse

from resolveq import CHANNELS, ExtractionConfig, builtin_fixtures, monte_carlo_extract

# display units per channel
SCALE = {"r_s": (1e6, "uOhm"), "tan_delta": (1.0, ""), "r_seam": (1e6, "uOhm.m")}


def fmt(status, value, sigma, bound, channel):
    k, _ = SCALE[channel]
    if status == "resolved":
        return f"{value * k:.3g} ± {sigma * k:.2g}"
    return f"<= {bound * k:.2g}"


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument("--mc-samples", type=int, default=5000)
    parser.add_argument("--seed", type=int, default=20231)
    args = parser.parse_args(argv)
    config = ExtractionConfig(mc_samples=args.mc_samples, seed=args.seed)

    header = f"{'device':8s}" + "".join(f"{c + ' ' + SCALE[c][1]:>40s}" for c in CHANNELS)
    print(header)
    for record in builtin_fixtures():
        result = monte_carlo_extract(record.participation, record.modes, config)
        cells = []
        for channel, c in zip(CHANNELS, result.classification):
            ours = fmt(c.status, c.value, c.sigma, c.bound, channel)
            rep = record.reported.get(channel)
            if rep is None:
                theirs = "-"
            elif rep.upper_bound:
                theirs = fmt("bound", None, None, rep.value, channel)
            else:
                theirs = fmt("resolved", rep.value, rep.sigma, None, channel)
            cells.append(f"{ours:>18s} ({theirs:>17s})")
        print(f"{record.device_id:8s}" + "".join(f"{cell:>40s}" for cell in cells))


if __name__ == "__main__":
    main()
