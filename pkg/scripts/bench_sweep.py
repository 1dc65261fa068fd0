"""Analytic FLOP counts and measured forward times of full-grid vs two-level attention."""

from __future__ import annotations

import argparse

from tempee.cli import BENCH_COLUMNS, format_value, bench_rows


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--c", default="3,8,32")
    ap.add_argument("--hw", default="16,32,64,360")
    ap.add_argument("--gprime", default="2,4")
    ap.add_argument("--analytic-only", action="store_true")
    args = ap.parse_args()
    cs = [int(v) for v in args.c.split(",")]
    hws = [int(v) for v in args.hw.split(",")]
    gps = [int(v) for v in args.gprime.split(",")]
    print(",".join(BENCH_COLUMNS))
    for hw in hws:
        for row in bench_rows(cs, [hw], [hw], [g for g in gps if hw % g == 0], wallclock=not args.analytic_only):
            print(",".join(format_value(row[k]) for k in BENCH_COLUMNS))


if __name__ == "__main__":
    main()
