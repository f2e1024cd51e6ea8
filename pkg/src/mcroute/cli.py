"""Command-line front end.

Subcommands: gen-nli (simulate link-state snapshots), train (two-level DQN),
extract (greedy tree rollout from a checkpoint), compare (agent vs heuristic
baselines), gradcheck (numeric gradient verification).

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 verification
failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from typing import Sequence

import numpy as np

from .agent import TrainConfig, extract_tree, train
from .linksim import MeasurementError, SimConfig, generate_snapshots, load_snapshots, save_snapshots
from .qnet import (
    CheckpointError,
    NetSpec,
    NumericsError,
    QNetwork,
    PARAM_NAMES,
    controller_specs,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
)
from .steiner import (
    EXACT_TERMINAL_LIMIT,
    TerminalBudgetError,
    adh,
    edge_weights,
    exact_steiner,
    kmb,
    mph,
    tree_cost,
)
from .topology import (
    SnapshotError,
    Topology,
    TopologyError,
    TreeError,
    default_topology,
    format_topology,
    load_topology,
    parse_topology,
    tree_metrics,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3

_DATA_ERRORS = (
    TopologyError, SnapshotError, TreeError, CheckpointError,
    MeasurementError, TerminalBudgetError, ValueError, KeyError, OSError,
)


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; this tool reserves 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_topo_arg(value: str) -> Topology:
    if value == "bundled":
        return default_topology()
    return load_topology(value)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


# ---------------------------------------------------------------------------
# gen-nli


def cmd_gen_nli(args: argparse.Namespace) -> int:
    topo = _load_topo_arg(args.topology)
    sim_kwargs = {}
    if args.volume is not None:
        sim_kwargs["total_volume"] = args.volume
    if args.interval is not None:
        sim_kwargs["interval"] = args.interval
    snaps = generate_snapshots(topo, args.count, args.seed, SimConfig(**sim_kwargs))
    save_snapshots(args.out, topo, snaps)
    print(f"wrote {len(snaps)} snapshots for topology {topo.hash_hex()} to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


_SPEC_KEYS = {"topology", "snapshots", "source", "destinations", "out_dir", "train", "reward", "per"}


def _load_train_spec(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be an object")
    unknown = set(raw) - _SPEC_KEYS
    if unknown:
        raise ValueError(f"{path}: unknown keys: {sorted(unknown)}")
    missing = {"snapshots", "source", "destinations", "out_dir"} - set(raw)
    if missing:
        raise ValueError(f"{path}: missing required keys: {sorted(missing)}")

    for section in ("train", "reward", "per"):
        if section in raw and not isinstance(raw[section], dict):
            raise ValueError(f"{path}: {section!r} must be an object")
    merged = dict(raw.get("train", {}))
    merged["reward"] = raw.get("reward", {})
    merged["per"] = raw.get("per", {})
    try:
        cfg = TrainConfig.from_dict(merged)
    except TypeError as e:
        raise ValueError(f"{path}: bad config value: {e}") from None

    dests = raw["destinations"]
    if not isinstance(dests, list) or not dests:
        raise ValueError(f"{path}: destinations must be a non-empty list")
    return {
        "topology": raw.get("topology", "bundled"),
        "snapshots": raw["snapshots"],
        "source": int(raw["source"]),
        "destinations": [int(d) for d in dests],
        "out_dir": raw["out_dir"],
        "config": cfg,
    }


_REPORT_COLUMNS = (
    "episode", "eps_intr", "eps_meta", "reward_in_sum", "reward_ex_sum",
    "loss_intr_mean", "loss_meta_mean", "intr_learn_steps", "meta_learn_steps",
    "intrinsic_steps", "illegal_subgoals", "completed", "truncated",
)


def report_csv(report, node_count: int) -> str:
    """Render per-episode rows; float cells use repr for exact round-trips."""
    header = list(_REPORT_COLUMNS) + [f"picks_{v}" for v in range(1, node_count + 1)]
    lines = [",".join(header)]
    for r in report.episodes:
        cells = [
            str(r.episode), repr(r.eps_intr), repr(r.eps_meta),
            repr(r.reward_in_sum), repr(r.reward_ex_sum),
            repr(r.loss_intr_mean), repr(r.loss_meta_mean),
            str(r.intr_learn_steps), str(r.meta_learn_steps),
            str(r.intrinsic_steps), str(r.illegal_subgoals),
            str(int(r.completed)), str(int(r.truncated)),
        ]
        cells += [str(p) for p in r.subgoal_picks]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _checkpoint_payload(result, topo: Topology, source: int, dests: list[int],
                        cfg: TrainConfig) -> tuple[dict, dict]:
    arrays = {}
    for name in PARAM_NAMES:
        arrays[f"meta_{name}"] = result.meta_net.params[name]
        arrays[f"intr_{name}"] = result.intr_net.params[name]
    meta = {
        "kind": "controllers",
        "config": cfg.to_dict(),
        "topology": format_topology(topo),
        "source": source,
        "destinations": dests,
        "meta_spec": result.meta_net.spec.to_dict(),
        "intr_spec": result.intr_net.spec.to_dict(),
    }
    return arrays, meta


def cmd_train(args: argparse.Namespace) -> int:
    spec = _load_train_spec(args.config)
    topo = _load_topo_arg(spec["topology"])
    snaps = load_snapshots(spec["snapshots"], topo)
    cfg: TrainConfig = spec["config"]
    out_dir = spec["out_dir"]

    try:
        result = train(topo, snaps, spec["source"], spec["destinations"], cfg)
    except NumericsError as e:
        print(f"error: {e}", file=sys.stderr)
        if e.arrays is not None:
            os.makedirs(out_dir, exist_ok=True)
            fault_path = os.path.join(out_dir, "fault_checkpoint.bin")
            save_checkpoint(fault_path, e.arrays, {"kind": "fault", **e.context})
            print(f"diagnostic checkpoint: {fault_path}", file=sys.stderr)
        return EXIT_DATA

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "train_log.csv")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report_csv(result.report, topo.node_count))
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    arrays, meta = _checkpoint_payload(result, topo, spec["source"], spec["destinations"], cfg)
    save_checkpoint(ckpt_path, arrays, meta)

    last = result.report.episodes[-1]
    print(f"trained {cfg.episodes} episodes over {len(snaps)} snapshots "
          f"in {result.report.wall_clock_s:.1f}s")
    print(f"final eps {last.eps_intr:.4f}, last episode reward_ex {last.reward_ex_sum:.4f}")
    for sid, res in sorted(result.report.final_trees.items()):
        if res.tree is None:
            print(f"snapshot {sid}: greedy extraction failed ({res.reason})")
        else:
            edge_list = ",".join(str(e) for e in sorted(res.tree.edges))
            print(f"snapshot {sid}: greedy tree edges [{edge_list}]")
    print(f"log: {csv_path}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# extract / compare


def _load_controllers(path: str) -> tuple[QNetwork, QNetwork, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "controllers":
        raise ValueError(f"{path}: not a controller checkpoint")
    nets = []
    for prefix, spec_key in (("meta", "meta_spec"), ("intr", "intr_spec")):
        spec = NetSpec.from_dict(meta[spec_key])
        params = {}
        for name in PARAM_NAMES:
            key = f"{prefix}_{name}"
            if key not in arrays:
                raise ValueError(f"{path}: missing array {key}")
            params[name] = arrays[key]
        nets.append(QNetwork(spec, params))
    return nets[0], nets[1], meta


def _select_snapshots(snaps, snapshot_id):
    if snapshot_id is None:
        return snaps
    picked = [s for s in snaps if s.snapshot_id == snapshot_id]
    if not picked:
        raise ValueError(f"snapshot id {snapshot_id} not in file")
    return picked


def cmd_extract(args: argparse.Namespace) -> int:
    meta_net, intr_net, meta = _load_controllers(args.checkpoint)
    topo = parse_topology(meta["topology"].splitlines(), origin="checkpoint")
    source = int(meta["source"])
    dests = [int(d) for d in meta["destinations"]]
    cfg = TrainConfig.from_dict(meta["config"])
    snaps = _select_snapshots(load_snapshots(args.snapshots, topo), args.snapshot_id)

    lines = ["snapshot,status,bw_tree,delay_tree,loss_tree,length,edges"]
    for snap in snaps:
        res = extract_tree(meta_net, intr_net, topo, snap, source, dests,
                           reward_cfg=cfg.reward)
        if res.tree is None:
            lines.append(f"{snap.snapshot_id},failed:{res.reason},,,,,")
            continue
        m = tree_metrics(topo, res.tree, snap)
        edge_list = ";".join(str(e) for e in sorted(res.tree.edges))
        lines.append(
            f"{snap.snapshot_id},ok,{m.bw:.6f},{m.delay:.6f},{m.loss:.6f},{m.length},{edge_list}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        print(f"wrote {len(snaps)} rows to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def svg_line_plot(series: dict[str, list[float | None]], ylabel: str,
                  width: int = 720, height: int = 360) -> str:
    """Small dependency-free multi-series line plot; gaps break the line."""
    left, right, top, bottom = 60, 16, 20, 36
    plot_w, plot_h = width - left - right, height - top - bottom
    finite = [v for vals in series.values() for v in vals if v is not None and math.isfinite(v)]
    count = max(len(vals) for vals in series.values()) if series else 0
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    def sx(i: int) -> float:
        return left + (plot_w * i / max(1, count - 1))

    def sy(v: float) -> float:
        return top + plot_h * (1.0 - (v - lo) / (hi - lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
    ]
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        y = sy(v)
        parts.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">{v:.4g}</text>')
    xstep = max(1, (count - 1) // 10 or 1)
    for i in range(0, count, xstep):
        x = sx(i)
        parts.append(
            f'<line x1="{x:.1f}" y1="{top + plot_h}" x2="{x:.1f}" y2="{top + plot_h + 4}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{top + plot_h + 16}" text-anchor="middle">{i}</text>')
    parts.append(
        f'<text x="{left - 44}" y="{top + plot_h / 2:.1f}" '
        f'transform="rotate(-90 {left - 44} {top + plot_h / 2:.1f})" '
        f'text-anchor="middle">{ylabel}</text>')
    parts.append(
        f'<text x="{left + plot_w / 2:.1f}" y="{height - 4}" text-anchor="middle">snapshot</text>')

    for idx, (name, vals) in enumerate(series.items()):
        color = _PALETTE[idx % len(_PALETTE)]
        segment: list[str] = []
        for i, v in enumerate(vals):
            if v is None or not math.isfinite(v):
                if len(segment) > 1:
                    parts.append(
                        f'<polyline points="{" ".join(segment)}" fill="none" stroke="{color}" stroke-width="1.5"/>')
                segment = []
                continue
            segment.append(f"{sx(i):.1f},{sy(v):.1f}")
        if len(segment) > 1:
            parts.append(
                f'<polyline points="{" ".join(segment)}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        elif len(segment) == 1:
            x, y = segment[0].split(",")
            parts.append(f'<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>')
        ly = top + 14 * idx
        parts.append(f'<line x1="{left + plot_w - 96}" y1="{ly}" x2="{left + plot_w - 78}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + plot_w - 72}" y="{ly + 4}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _baseline_trees(topo, snap, source, dests, betas):
    """Heuristic and exact trees for one snapshot, keyed by algorithm label."""
    out = {
        "kmb_bw": kmb(topo, snap, "bandwidth", source, dests),
        "kmb_delay": kmb(topo, snap, "delay", source, dests),
        "kmb_loss": kmb(topo, snap, "loss", source, dests),
        "mph": mph(topo, snap, "scalarized", source, dests, betas),
        "adh": adh(topo, snap, "scalarized", source, dests, betas),
    }
    if len(set(dests) | {source}) <= EXACT_TERMINAL_LIMIT:
        out["exact"] = exact_steiner(topo, snap, "scalarized", source, dests, betas)
    else:
        out["exact"] = None
    return out


def cmd_compare(args: argparse.Namespace) -> int:
    meta_net, intr_net, meta = _load_controllers(args.checkpoint)
    topo = parse_topology(meta["topology"].splitlines(), origin="checkpoint")
    source = int(meta["source"])
    dests = [int(d) for d in meta["destinations"]]
    cfg = TrainConfig.from_dict(meta["config"])
    betas = (cfg.reward.beta_bw, cfg.reward.beta_delay, cfg.reward.beta_loss)
    snaps = _select_snapshots(load_snapshots(args.snapshots, topo), args.snapshot_id)

    algos = ("agent", "kmb_bw", "kmb_delay", "kmb_loss", "mph", "adh", "exact")
    rows = []
    cost_series: dict[str, list[float | None]] = {a: [] for a in algos}
    metric_sums: dict[str, list[tuple[float, float, float, int]]] = {a: [] for a in algos}

    for snap in snaps:
        trees = _baseline_trees(topo, snap, source, dests, betas)
        res = extract_tree(meta_net, intr_net, topo, snap, source, dests,
                           reward_cfg=cfg.reward)
        trees["agent"] = res.tree
        w_scal = edge_weights(topo, snap, "scalarized", betas)
        for name in algos:
            tree = trees[name]
            if tree is None:
                reason = res.reason if name == "agent" else "terminal budget"
                rows.append(f"{snap.snapshot_id},{name},failed:{reason},,,,")
                cost_series[name].append(None)
                continue
            m = tree_metrics(topo, tree, snap)
            rows.append(
                f"{snap.snapshot_id},{name},ok,{m.bw:.6f},{m.delay:.6f},{m.loss:.6f},{m.length}")
            cost_series[name].append(tree_cost(tree, w_scal))
            metric_sums[name].append((m.bw, m.delay, m.loss, m.length))

    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "compare.csv")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("snapshot,algorithm,status,bw_tree,delay_tree,loss_tree,length\n")
        fh.write("\n".join(rows) + "\n")

    svg_path = os.path.join(args.out_dir, "compare.svg")
    with open(svg_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg_line_plot(cost_series, "tree cost (scalarized)"))

    summary = _compare_summary(metric_sums, algos, len(snaps))
    txt_path = os.path.join(args.out_dir, "summary.txt")
    with open(txt_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(summary)
    sys.stdout.write(summary)
    print(f"csv: {csv_path}\nplot: {svg_path}")
    return EXIT_OK


def _compare_summary(metric_sums, algos, snap_count: int) -> str:
    def means(name):
        vals = metric_sums[name]
        if not vals:
            return None
        arr = np.array(vals)
        return arr.mean(axis=0)

    out = [f"algorithm means over {snap_count} snapshots "
           "(bw Mbit/s, delay ms, loss fraction, edges)"]
    stats = {name: means(name) for name in algos}
    for name in algos:
        m = stats[name]
        if m is None:
            out.append(f"  {name:<10} no completed trees")
        else:
            solved = len(metric_sums[name])
            out.append(f"  {name:<10} bw {m[0]:8.3f}  delay {m[1]:8.3f}  "
                       f"loss {m[2]:.5f}  length {m[3]:.2f}  ({solved}/{snap_count} solved)")

    agent = stats.get("agent")
    if agent is not None:
        out.append("agent relative to each baseline (positive = agent higher)")
        for name in algos:
            if name == "agent" or stats[name] is None:
                continue
            base = stats[name]
            diffs = []
            for label, idx in (("bw", 0), ("delay", 1), ("loss", 2)):
                if abs(base[idx]) < 1e-12:
                    diffs.append(f"{label} n/a")
                else:
                    diffs.append(f"{label} {100.0 * (agent[idx] - base[idx]) / base[idx]:+.1f}%")
            out.append(f"  vs {name:<10} " + "  ".join(diffs))
    else:
        out.append("agent completed no trees; no relative summary")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    meta_spec, intr_spec = controller_specs(args.nodes, args.max_degree)
    failed = False
    for label, spec in (("fork controller", meta_spec), ("edge controller", intr_spec)):
        net = QNetwork.create(spec, rng)
        rep = gradient_check(net, rng, probes_per_array=args.probes,
                             tolerance=args.tolerance)
        verdict = "pass" if rep.passed else "FAIL"
        worst = max(rep.max_rel_err.values())
        total = sum(rep.probes.values())
        print(f"{label}: max rel err {worst:.3e} over {total} probes "
              f"(tolerance {rep.tolerance:.1e}): {verdict}")
        failed = failed or not rep.passed
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcroute", description=__doc__.strip().splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-nli", help="simulate link-state snapshots",
                       description="Generate measurement-derived link-state snapshots.")
    g.add_argument("--topology", default="bundled",
                   help="topology file path, or 'bundled' for the built-in 14-node graph")
    g.add_argument("--count", type=_positive_int, default=10, help="number of snapshots")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--volume", type=float, default=None,
                   help="total offered traffic in Mbit/s (default: 8%% of capacity sum)")
    g.add_argument("--interval", type=float, default=None, help="polling interval in seconds")
    g.add_argument("--out", required=True, help="output snapshot file")
    g.set_defaults(func=cmd_gen_nli)

    t = sub.add_parser("train", help="train the two-level controllers",
                       description="Train from a JSON run spec; writes a CSV log and a checkpoint.")
    t.add_argument("--config", required=True, help="JSON run spec")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="greedy tree extraction from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--snapshots", required=True)
    e.add_argument("--snapshot-id", type=int, default=None)
    e.add_argument("--out", default=None, help="CSV output path (default: stdout)")
    e.set_defaults(func=cmd_extract)

    c = sub.add_parser("compare", help="compare the agent against the tree heuristics")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--snapshots", required=True)
    c.add_argument("--snapshot-id", type=int, default=None)
    c.add_argument("--out-dir", required=True)
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("gradcheck", help="verify analytic gradients numerically")
    v.add_argument("--nodes", type=int, default=14)
    v.add_argument("--max-degree", type=int, default=7)
    v.add_argument("--probes", type=int, default=100, help="probes per parameter array")
    v.add_argument("--tolerance", type=float, default=1e-4)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_gradcheck)

    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except _DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
