"""
Sensitivity maps of the two resonator geometries
================================================

Computes the minimum resolvable value of each loss channel for the canonical
three-mode participation matrices and writes the 50x50 maps (grid plus
boundary polyline) as CSV for external plotting.
"""

import argparse
from pathlib import Path

from resolveq import CHANNELS, SensitivityGridSpec, builtin_participation, minimum_resolvable
from resolveq import sensitivity_grid

parser = argparse.ArgumentParser(description="sigma_x/x maps and minimum resolvable losses")
parser.add_argument("--out", default=None, help="directory for the CSV maps")
parser.add_argument("--eps-y", type=float, default=0.05)
parser.add_argument("--points", type=int, default=50)
args = parser.parse_args()

for name in ("P_FWGMR", "P_ellip"):
    p = builtin_participation(name)
    print(name)
    for channel in CHANNELS:
        value = minimum_resolvable(p, args.eps_y, channel)
        print(f"  minimum resolvable {channel:9s} {value:.3g}")
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            spec = SensitivityGridSpec.for_channel(channel, points=args.points, eps_y=args.eps_y)
            grid = sensitivity_grid(p, spec)
            grid.write_csv(out / f"{name}_{channel}_grid.csv")
            grid.write_boundary_csv(out / f"{name}_{channel}_boundary.csv")

# the tan-delta boundary of the FWGMR flattens once R_s is small enough
p = builtin_participation("P_FWGMR")
print("FWGMR tan_delta boundary against R_s (r_seam = 1e-4 ohm m):")
for r_s in (1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5):
    value = minimum_resolvable(p, args.eps_y, "tan_delta", {"r_s": r_s, "r_seam": 1e-4})
    print(f"  R_s = {r_s:7.0e} ohm -> tan_delta_min = {value:.3g}")
