"""Boundary fixed points, rates and exponent windows for every demo field."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from shadowgrow import (
    HyperbolicityError,
    admissible_exponents,
    boundary_fixed_points,
    compactified_field,
    parse_field,
    spectral_profile,
)

FIELDS = Path(__file__).resolve().parent / "fields"


def main():
    for path in sorted(FIELDS.glob("*.ode")):
        F = parse_field(path.read_text())
        if F.dimension > 3:
            continue
        cf = compactified_field(F)
        pts = boundary_fixed_points(cf)
        print(f"{path.stem}: degree {F.degree}, {len(pts)} boundary fixed point(s)")
        for p in pts[:4]:
            shown = np.round(p, 4) + 0.0
            try:
                prof = spectral_profile(cf, p)
                win = admissible_exponents(prof)
            except HyperbolicityError as exc:
                print(f"  {shown}  {exc}")
                continue
            rel = ">" if win.bound_kind == "lower" else "<"
            print(f"  {shown}  transversal {prof.mu2:+.4f}  case {prof.case}  m {rel} {win.m_bound:.4f}")
        if len(pts) > 4:
            print(f"  ... {len(pts) - 4} more")


if __name__ == "__main__":
    main()
