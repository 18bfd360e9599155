"""Default numeric tolerances, in one place so studies stay comparable.

Every entry can be overridden from an experiment config under
``"tolerances"``; see docs/config.md for the table.
"""

DEFAULTS = {
    # ODE solvers
    "blowup_norm": 1e8,
    "sym_rel": 1e-8,
    "r_min": 1e-12,
    # rate fits
    "riccati_slope_band": (-1.25, -0.75),
    "riccati_r2_min": 0.98,
    "mean_field_slope_band": (-1.3, -0.7),
    "nash_slope_band": (-1.4, -0.6),
    "nash_r2_min": 0.0,
    "exact_gap": 1e-10,
    # identities
    "residual_rel": 1e-8,
    "nash_gap_floor": -1e-8,
    "mc_sigmas": 3.0,
    # simulation / convexity
    "sim_blowup_norm": 1e10,
    "convexity_cap": 600,
    "convexity_rel": 1e-8,
}


def merged(overrides=None):
    out = dict(DEFAULTS)
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise KeyError(f"unknown tolerance {key!r}")
        out[key] = tuple(value) if isinstance(DEFAULTS[key], tuple) else type(DEFAULTS[key])(value)
    return out
