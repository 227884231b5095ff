"""Weighted shadowing: a contracting linear map and the flow x' = -x in R."""
from __future__ import annotations

import numpy as np

from shadowgrow import (
    ErrorLaw,
    FieldFlow,
    LinearMap,
    PseudoTrajectory,
    compactified_field,
    gen_pseudo,
    parse_field,
    weighted_shadow_solve,
)


def half_map_orbit(d, C=4.0, K=30, q0=0.5):
    e = d * (1 - q0) * q0 ** np.arange(K) / C ** np.arange(K)
    X = np.empty((K + 1, 1))
    X[0] = 1.0
    for k in range(K):
        X[k + 1] = 0.5 * X[k] + e[k]
    return PseudoTrajectory(np.arange(K + 1.0), X, ErrorLaw("weighted", d, C=C, tail_ratio=q0))


def main():
    f = LinearMap(np.array([[0.5]]))
    for d in (1e-2, 1e-3, 1e-4):
        r = weighted_shadow_solve(f, half_map_orbit(d), 4.0)
        print(f"map  d={d:.0e}  q={r.q[0]:.12f}  L={r.envelope['L']:.6f}")

    F = parse_field("dim 1\nx0' = -x0")
    flow = FieldFlow(F)
    law = ErrorLaw("noncompact_weighted", 1e-3, C=1.5, T=1.0)
    pt = gen_pseudo(flow, np.array([2.0]), 97, law, seed=3, time_kind="flow", dt=1 / 16)
    r = weighted_shadow_solve(flow, pt, 1.5, cf=compactified_field(F))
    env = r.envelope
    print(f"flow valid={r.valid}  q={r.q[0]:.10f}  L={env['L']:.5f}  ball weight={env['ball_weight']:.4f}")


if __name__ == "__main__":
    main()
