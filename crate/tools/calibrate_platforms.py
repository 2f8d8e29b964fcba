"""Fit platform energy/throughput coefficients to target speedup and energy reduction.

Given the dense and clustered workload totals (from `vitclust perf --workload deit-base
--profile`), a chosen bandwidth, flop energy, lookup energy and static power, this picks
the compute rate that yields the target speedup (dense memory-bound, clustered
compute-bound) and solves the linear energy model for the DRAM energy per byte.
"""
import argparse

TARGETS = {
    # name: (bandwidth B/s, e_flop J, e_lut J, p_static W, speedup, energy reduction)
    "conf-1": (40e9, 0.5e-12, 0.1e-12, 2.0, 1.30, 0.39),
    "conf-2": (59.7e9, 1.0e-12, 0.1e-12, 1.0, 1.08, 0.22),
    "conf-3": (136.5e9, 1.0e-12, 0.1e-12, 2.0, 1.22, 0.22),
}


def fit(flops, dense_bytes, clustered_bytes, lut, bw, e_flop, e_lut, p_static, s, r):
    t_dense = dense_bytes / bw
    rate = flops * s / t_dense
    t_clustered = flops / rate
    assert t_clustered >= clustered_bytes / bw, "clustered run must be compute-bound"
    x_dense = e_flop * flops + p_static * t_dense
    x_clustered = e_flop * flops + e_lut * lut + p_static * t_clustered
    e_dram = (x_clustered - (1 - r) * x_dense) / ((1 - r) * dense_bytes - clustered_bytes)
    assert e_dram > 0
    return rate, e_dram


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--flops", type=float, required=True)
    ap.add_argument("--dense-bytes", type=float, required=True, help="param + activation bytes")
    ap.add_argument("--clustered-bytes", type=float, required=True, help="param + activation bytes")
    ap.add_argument("--lut", type=float, required=True)
    a = ap.parse_args()
    for name, (bw, e_flop, e_lut, p_static, s, r) in TARGETS.items():
        rate, e_dram = fit(a.flops, a.dense_bytes, a.clustered_bytes, a.lut, bw, e_flop, e_lut, p_static, s, r)
        print(f"{name}: flops_per_s = {rate:.6e}  e_dram_j_per_byte = {e_dram:.6e}")


if __name__ == "__main__":
    main()
