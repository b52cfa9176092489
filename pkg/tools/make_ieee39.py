"""Regenerate ``src/fdia/cases/ieee39.json`` from the New England 39-bus tables.

Line data are the standard series impedances with line charging and
transformer taps dropped.  Generator 31 is dispatched at 646 MW; with bus 39
as the angle reference this places the base phasors of buses 17, 18 and 28
close to the published operating point of the modified case.

Run from the repository root:  python tools/make_ieee39.py
"""
import json
from pathlib import Path

import numpy as np

BASE_MVA = 100.0
REFERENCE = 39

# bus: (Pd MW, Qd MVAr)
LOADS = {
    1: (97.6, 44.2), 3: (322, 2.4), 4: (500, 184), 7: (233.8, 84),
    8: (522, 176.6), 9: (6.5, -66.6), 12: (8.53, 88), 15: (320, 153),
    16: (329, 32.3), 18: (158, 30), 20: (680, 103), 21: (274, 115),
    23: (247.5, 84.6), 24: (308.6, -92.2), 25: (224, 47.2), 26: (139, 17),
    27: (281, 75.5), 28: (206, 27.6), 29: (283.5, 26.9), 31: (9.2, 4.6),
    39: (1104, 250),
}
# bus: (Pg MW, Vset pu)
GENS = {
    30: (250, 1.0499), 31: (646, 0.982), 32: (650, 0.9841), 33: (632, 0.9972),
    34: (508, 1.0123), 35: (650, 1.0494), 36: (560, 1.0636), 37: (540, 1.0275),
    38: (830, 1.0265), 39: (1000, 1.03),
}
# (from, to, r, x)
BRANCHES = [
    (1, 2, 0.0035, 0.0411), (1, 39, 0.001, 0.025), (2, 3, 0.0013, 0.0151),
    (2, 25, 0.007, 0.0086), (2, 30, 0, 0.0181), (3, 4, 0.0013, 0.0213),
    (3, 18, 0.0011, 0.0133), (4, 5, 0.0008, 0.0128), (4, 14, 0.0008, 0.0129),
    (5, 6, 0.0002, 0.0026), (5, 8, 0.0008, 0.0112), (6, 7, 0.0006, 0.0092),
    (6, 11, 0.0007, 0.0082), (6, 31, 0, 0.025), (7, 8, 0.0004, 0.0046),
    (8, 9, 0.0023, 0.0363), (9, 39, 0.001, 0.025), (10, 11, 0.0004, 0.0043),
    (10, 13, 0.0004, 0.0043), (10, 32, 0, 0.02), (12, 11, 0.0016, 0.0435),
    (12, 13, 0.0016, 0.0435), (13, 14, 0.0009, 0.0101), (14, 15, 0.0018, 0.0217),
    (15, 16, 0.0009, 0.0094), (16, 17, 0.0007, 0.0089), (16, 19, 0.0016, 0.0195),
    (16, 21, 0.0008, 0.0135), (16, 24, 0.0003, 0.0059), (17, 18, 0.0007, 0.0082),
    (17, 27, 0.0013, 0.0173), (19, 20, 0.0007, 0.0138), (19, 33, 0.0007, 0.0142),
    (20, 34, 0.0009, 0.018), (21, 22, 0.0008, 0.014), (22, 23, 0.0006, 0.0096),
    (22, 35, 0, 0.0143), (23, 24, 0.0022, 0.035), (23, 36, 0.0005, 0.0272),
    (25, 26, 0.0032, 0.0323), (25, 37, 0.0006, 0.0232), (26, 27, 0.0014, 0.0147),
    (26, 28, 0.0043, 0.0474), (26, 29, 0.0057, 0.0625), (28, 29, 0.0014, 0.0151),
    (29, 38, 0.0008, 0.0156),
]
# time constants (tau_p, tau_q) of the two studied attacking regions
FIXED_TAU = {
    26: (45.83, 60.62), 28: (221.32, 12.81), 29: (204.16, 92.38),
    3: (181.0, 41.0), 16: (20.6, 28.5), 17: (0.1, 0.1), 18: (16.1, 23.7), 27: (28.0, 17.5),
}
ZERO_INJECTION_TAU = 0.1
TAU_RANGE = (0.5, 300.0)
TAU_SEED = 39


def build():
    rng = np.random.default_rng(TAU_SEED)
    buses = []
    for bid in range(1, 40):
        pd, qd = LOADS.get(bid, (0.0, 0.0))
        if bid in GENS:
            pg, vset = GENS[bid]
            buses.append({"id": bid, "kind": "generator",
                          "ps": round((pg - pd) / BASE_MVA, 6), "qs": round(-qd / BASE_MVA, 6),
                          "tau_p": 0.0, "tau_q": 0.0, "sigma_p": 0.0, "sigma_q": 0.0,
                          "gen_inertia": 10.0, "gen_damping": 1.0, "v_set": vset})
            continue
        draw = rng.uniform(*TAU_RANGE, size=2)
        if bid in FIXED_TAU:
            tp, tq = FIXED_TAU[bid]
        elif bid not in LOADS:
            tp = tq = ZERO_INJECTION_TAU
        else:
            tp, tq = (round(float(v), 2) for v in draw)
        buses.append({"id": bid, "kind": "load" if bid in LOADS else "zero_injection",
                      "ps": -pd / BASE_MVA, "qs": -qd / BASE_MVA,
                      "tau_p": tp, "tau_q": tq, "sigma_p": 1.0, "sigma_q": 1.0})
    lines = []
    for f, t, r, x in BRANCHES:
        y = 1.0 / complex(r, x)
        lines.append({"from": f, "to": t, "g": round(y.real, 6), "b": round(y.imag, 6)})
    for b in buses:
        if b["kind"] == "zero_injection":
            b["ps"] = b["qs"] = 0.0
    return {"base_mva": BASE_MVA, "reference_bus": REFERENCE, "buses": buses, "lines": lines}


if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "src" / "fdia" / "cases" / "ieee39.json"
    out.write_text(json.dumps(build(), indent=1) + "\n")
    print(f"wrote {out}")
