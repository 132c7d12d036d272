"""Regenerate the bundled IEEE radial case documents from MATPOWER sources.

Usage: python tools/make_cases.py <matpower data dir>

Line and load data come from MATPOWER's case33bw.m, case69.m and case118zh.m
(in-service branches only).  Generator placement and sizing are synthetic and
fully determined by this script.
"""
import json
import re
import sys
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "gridrl" / "cases"

SYSTEMS = {
    # name: (source file, base kV, fleet (thermal, wind, solar), load rescale target or None)
    "ieee33": ("case33bw.m", 12.66, (2, 5, 5), None),
    "ieee69": ("case69.m", 12.66, (3, 10, 10), (3.800, 2.690)),
    "ieee118": ("case118zh.m", 11.0, (4, 15, 15), (22.710, 17.041)),
}


def _block(text, name):
    m = re.search(r"mpc\.%s\s*=\s*\[(.*?)\];" % name, text, re.S)
    rows = []
    for line in m.group(1).splitlines():
        line = line.split("%")[0].strip().rstrip(";")
        if line:
            rows.append([float(v) for v in line.split()])
    return np.array(rows)


def _placement(n_bus, edges, z, n_t, n_w, n_s):
    adj = {i: [] for i in range(n_bus)}
    for (f, t), zz in zip(edges, z):
        adj[f].append((t, zz))
        adj[t].append((f, zz))
    dist = {0: 0.0}
    order = []
    stack = [0]
    while stack:
        u = stack.pop()
        order.append(u)
        for v, zz in sorted(adj[u], reverse=True):
            if v not in dist:
                dist[v] = dist[u] + zz
                stack.append(v)
    leaves = [i for i in range(1, n_bus) if len(adj[i]) == 1]
    thermal = sorted(leaves, key=lambda i: -dist[i])[:n_t]
    rest = [i for i in order if i != 0 and i not in thermal]
    n_rer = n_w + n_s
    idx = np.linspace(0, len(rest) - 1, n_rer + 2)[1:-1].round().astype(int)
    picks = [rest[i] for i in idx]
    wind = picks[0::2][:n_w]
    solar = [p for p in picks if p not in wind][:n_s]
    return thermal, wind, solar


def build(name, src, base_kv, fleet, rescale):
    text = (Path(sys.argv[1]) / src).read_text()
    bus = _block(text, "bus")
    br = _block(text, "branch")
    br = br[br[:, 10] == 1]
    p_kw, q_kvar = bus[:, 2], bus[:, 3]
    if rescale is not None:
        p_kw = p_kw * (rescale[0] * 1e3 / p_kw.sum())
        q_kvar = q_kvar * (rescale[1] * 1e3 / q_kvar.sum())
    load_p = np.round(p_kw / 1e3, 6)
    load_q = np.round(q_kvar / 1e3, 6)
    if rescale is not None:
        # absorb rounding residue in the largest load so totals hit the target
        load_p[np.argmax(load_p)] += rescale[0] - load_p.sum()
        load_q[np.argmax(load_q)] += rescale[1] - load_q.sum()
    total_p = float(load_p.sum())
    edges = [(int(f) - 1, int(t) - 1) for f, t in br[:, :2]]
    z = list(np.hypot(br[:, 2], br[:, 3]))
    n_t, n_w, n_s = fleet
    thermal, wind, solar = _placement(len(bus), edges, z, n_t, n_w, n_s)

    th_rated = round(0.15 * total_p, 4)
    w_rated = round(0.7 * total_p / n_w, 4)
    s_rated = round(0.6 * total_p / n_s, 4)
    gens = []
    for b in thermal:
        gens.append(dict(kind="thermal", bus=b, p_min=round(0.25 * th_rated, 4), p_max=th_rated,
                         q_min=-th_rated, q_max=th_rated, v_min=0.95, v_max=1.05,
                         rated_p=th_rated, ramp_fraction=0.25,
                         cost=dict(a=0.0175, b=1.75, c=0.0)))
    for kind, buses, rated in (("wind", wind, w_rated), ("solar", solar, s_rated)):
        for b in buses:
            gens.append(dict(kind=kind, bus=b, p_min=0.0, p_max=rated,
                             q_min=round(-0.6 * rated, 4), q_max=round(0.6 * rated, 4),
                             v_min=0.95, v_max=1.05, rated_p=rated, ramp_fraction=1.0,
                             cost=dict(reserve=1.5, penalty=3.0)))
    s_max = round(1.5 * total_p + 1.0, 1)
    doc = dict(
        name=name,
        base_mva=100.0,
        base_kv=base_kv,
        slack_bus=0,
        buses=[dict(id=i, load_p_mw=round(float(p), 6), load_q_mvar=round(float(q), 6),
                    v_min=0.95, v_max=1.05) for i, (p, q) in enumerate(zip(load_p, load_q))],
        branches=[dict(**{"from": f, "to": t}, r_ohm=float(r), x_ohm=float(x), s_max_mva=s_max)
                  for (f, t), r, x in zip(edges, br[:, 2], br[:, 3])],
        generators=gens,
        wind=dict(weibull_k=2.0, weibull_c=9.0, v_cut_in=3.0, v_rated=12.0, v_cut_out=25.0),
        solar=dict(ln_mu=6.0, ln_sigma=0.6, g_std=1000.0),
    )
    (OUT / f"{name}.json").write_text(json.dumps(doc, indent=1) + "\n")
    print(name, len(doc["buses"]), len(doc["branches"]),
          round(sum(b["load_p_mw"] for b in doc["buses"]), 6),
          round(sum(b["load_q_mvar"] for b in doc["buses"]), 6), thermal, wind, solar)


if __name__ == "__main__":
    for name, spec in SYSTEMS.items():
        build(name, *spec)
