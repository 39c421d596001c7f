#!/usr/bin/env python3
"""Twist a two-bone cylinder and compare how far its middle ring stays from the axis."""

import argparse
import sys

from qrbs.experiments import candy_wrapper


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--twist", type=float, default=180.0, help="degrees")
    ap.add_argument("--radius", type=float, default=1.0)
    args = ap.parse_args(argv)

    for blend in ("lbs", "dq"):
        r = candy_wrapper(blend, radius=args.radius, twist_deg=args.twist)
        print(f"{blend:4s} mid-ring radius  min {r.min():.6f}  max {r.max():.6f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
