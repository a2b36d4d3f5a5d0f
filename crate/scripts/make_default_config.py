#!/usr/bin/env python3
"""Writes configs/default.json, the synthetic reservoir system used by default.

Usage: make_default_config.py [--rating-scale CM] [--out PATH]

The rating scale comes from `cargo run --release --example calibrate_routing`,
which picks it so the flood threshold is exceeded on a target number of days
per year when the reservoir passes its inflow straight through.
"""
import argparse
import json
import math
from pathlib import Path

DAYS = 365
GM3 = 1e9
S_MIN, S_MAX = 3.8 * GM3, 9.9 * GM3
DT = 86400.0

# (base flow m3/s, seasonal log amplitude, pulse log height, base sigma, monsoon sigma)
RIVERS = {
    "da": (1500.0, 0.9, 0.5, 0.35, 0.20),
    "thao": (700.0, 0.8, 0.4, 0.35, 0.15),
    "lo": (900.0, 0.85, 0.45, 0.35, 0.15),
}
SEASON_PEAK_DAY = 200
PULSE_DAY, PULSE_WIDTH = 215, 20.0


def profile(base, amp, pulse, sig0, sig1):
    mu, sigma = [], []
    for d in range(DAYS):
        season = math.cos(2 * math.pi * (d - SEASON_PEAK_DAY) / DAYS)
        bump = math.exp(-0.5 * ((d - PULSE_DAY) / PULSE_WIDTH) ** 2)
        mu.append(round(math.log(base) + amp * season + pulse * bump, 6))
        sigma.append(round(sig0 + sig1 * bump, 6))
    return mu, sigma


def release_table():
    storages = sorted({round(3.0 + 0.25 * k, 2) for k in range(31)} | {3.8, 9.9})
    inflows = [0, 500, 1000, 1500, 2000, 3000, 4000, 5000, 7500, 10000, 15000, 20000, 30000, 50000]
    nodes = []
    for s in (x * GM3 for x in storages):
        spill = 6000.0 * max((s - 3.0 * GM3) / 6.9e9, 0.0) ** 1.5
        env = 200.0 if s >= 4.5 * GM3 else 0.0
        for q in inflows:
            # Never draw below dead storage nor fill above the flood-control top.
            r_max = max(min(q + 2400.0 + spill, (s - S_MIN) / DT + q), 0.0)
            forced = (s + q * DT - S_MAX) / DT
            r_min = min(max(env, forced), r_max)
            nodes.append({"s": s, "q": float(q), "r_min": round(r_min, 3), "r_max": round(r_max, 3)})
    return nodes


def controls():
    fine = [100.0 * k for k in range(25)]
    coarse = [2600, 2800, 3000, 3300, 3600, 4000, 4500, 5000, 5500, 6000, 7000, 8000, 9000,
              10000, 11000, 12000, 13500, 15000, 17500, 20000, 22500, 25000, 30000, 35000, 40000]
    return fine + [float(c) for c in coarse]


def build(rating_scale):
    profiles = [profile(*RIVERS[k]) for k in ("da", "thao", "lo")]
    return {
        "hydrology": {
            "mu": [p[0] for p in profiles],
            "sigma": [p[1] for p in profiles],
            "rho_time": 0.9,
            "R": [[1.0, 0.7, 0.6], [0.7, 1.0, 0.65], [0.6, 0.65, 1.0]],
            "seed": 42,
        },
        "reservoir": {
            "s_min": S_MIN,
            "s_max": S_MAX,
            "release_table": release_table(),
            "level_of_storage": [[0.0, 20.0], [2e9, 60.0], [3.8e9, 80.0], [5e9, 90.0], [6.5e9, 100.0],
                                 [8.2e9, 110.0], [9.9e9, 117.0], [12e9, 125.0]],
            "tailwater_of_release": [[0.0, 10.0], [1000.0, 11.5], [2400.0, 13.0], [5000.0, 15.5],
                                     [10000.0, 19.0], [20000.0, 24.0], [40000.0, 30.0], [100000.0, 40.0]],
            "q_turb_max": 1000.0,
            "eta": 0.88,
            "seconds_per_step": DT,
            "initial_storage": 9.0e9,
        },
        "routing": {"lag": 1, "attenuation": 0.0, "rating_scale": rating_scale, "rating_exponent": 0.5},
        "objectives": {"h_bar": 950.0, "hydropower_cost_scale": 1e-6},
        "dp": {
            "storage_nodes": 100,
            "controls": controls(),
            "scenarios_per_day": 16,
            "tol_relative": 1e-6,
            "max_sweeps": 200,
        },
        "inner_loop": {
            "pid": None,
            "prefilter": {"num": [1.0, -1.0], "den": [1.0]},
            "reference_model": {"num": [0.0, 0.2], "den": [1.0, -0.8]},
            "storage_scale": None,
            "flow_scale": None,
            "anti_windup": True,
        },
        "empc": {
            "horizon": 15,
            "alpha": 0.05,
            "forecast": "oracle",
            "solver": {
                "max_iterations": 300,
                "penalty_schedule": [1e2, 1e4, 1e6],
                "initial_step": 0.05,
                "tolerance": 1e-4,
                "feasibility_tolerance": 1e-6,
                "restarts": True,
                "lattice": None,
                "max_enumeration": 100000,
            },
            "level_margin": None,
        },
        "sweep": {
            "strategies": ["ddp", "sdp", "empc"],
            "alphas": [0.0, 0.05, 0.1, 0.2, 0.4, 0.5, 0.6, 0.8, 0.9, 0.95, 1.0],
            "empc_alphas": [0.05],
            "horizons": [10, 15, 20],
            "period": "train",
            "train_days": 8 * DAYS,
            "validation_days": 2 * DAYS,
            "validation_wet_shift": 0.2,
            "validation_seed_offset": 1000,
            "vrft_alpha": 0.05,
        },
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rating-scale", type=float, default=10.0)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "configs" / "default.json")
    args = ap.parse_args()
    args.out.write_text(json.dumps(build(args.rating_scale), indent=1) + "\n")


if __name__ == "__main__":
    main()
