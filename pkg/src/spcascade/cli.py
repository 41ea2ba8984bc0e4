"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from pathlib import Path

import numpy as np

from spcascade import data as dio
from spcascade.config import ConfigError, apply_overrides, cascade_config, grid_level_configs, read_config
from spcascade.ensemble import (comb_decompose, ensemble_max_marginals, evaluate_grid_cascade, fixed_potentials,
                                grid_coarse_to_fine, brute_force_joint)
from spcascade.training import MetricsRow, evaluate_cascade, run_cascade, train_cascade

METRICS_HELP = """metrics TSV columns (one row per cascade stage):
  level              1-based stage index
  alpha              chosen threshold parameter (blank for the final predictor)
  filter_loss        mean 1[score(truth) <= tau] over examples whose truth reached the stage
  efficiency_loss    mean fraction of assignments with max-marginal > tau
  density            surviving / full-space assignments after the stage
  token_accuracy     per-position accuracy of MAP decoding with the stage's model
  sequence_accuracy  whole-output accuracy
  wall_ms            elapsed milliseconds (0 unless --timing)"""

GRID_BENCH_HELP = """CSV columns (one row per top-K value, K = 1..states):
  top_k                 number of states kept per node by each ranking
  instances             grids generated
  nodes                 total node count over all grids
  ensemble_miss         fraction of nodes whose exact MAP state is outside the top-K
                        of the summed sub-model max-marginals
  submodel_mean_miss    same for a single sub-model's max-marginals, averaged over sub-models
  submodel_min_miss     best single sub-model
  submodel_max_miss     worst single sub-model
  exact_miss            same for the exact joint max-marginals (always 0)"""

TRACE_HELP = """trace TSV columns: example, stage, survivors (comma-separated count of
distinct surviving states at each position of the lattice entering the stage)"""


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def format_metrics(rows) -> str:
    out = ["\t".join(MetricsRow.FIELDS)]
    for r in rows:
        out.append("\t".join(_fmt(v) for v in r.as_tuple()))
    return "\n".join(out) + "\n"


def _emit(text: str, path):
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _load_cfg(args) -> dict:
    cfg = read_config(args.config) if args.config else {}
    return apply_overrides(cfg, args.set)


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.kind == "hmm":
        ds, _ = dio.synth_hmm(args.order, args.K, args.n, (args.min_length, args.max_length),
                              noise=args.noise, seed=args.seed, task_seed=args.task_seed)
        dio.write_sequence_dataset(ds, args.out)
    elif args.kind == "grid-task":
        ds = dio.synth_grid_task(args.rows, args.cols, args.K, args.n, noise=args.noise, seed=args.seed)
        dio.write_grid_dataset(ds, args.out)
    else:
        dio.save_grid_instance(dio.synth_grid(args.rows, args.cols, args.K, args.seed), args.out)
    return 0


def _stamp(rows, start, timing):
    if timing:
        for r in rows:
            r.wall_ms = (time.perf_counter() - start) * 1e3
    return rows


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    if args.ensemble:
        levels, seed = grid_level_configs(cfg, args.seed)
        train, dev = dio.read_grid_dataset(args.data), dio.read_grid_dataset(args.dev)
        cascade = grid_coarse_to_fine(train.examples, dev.examples, levels, train.K, seed)
        (out / "cascade.ckpt").write_bytes(dio.grid_cascade_to_bytes(cascade))
        rows = [lv.metrics for lv in cascade.levels]
    else:
        config = cascade_config(cfg, args.seed)
        train, dev = dio.read_sequence_dataset(args.data), dio.read_sequence_dataset(args.dev)
        if train.K != dev.K:
            raise ValueError("train and dev alphabets differ")
        cascade = train_cascade(train.examples, dev.examples, config, train.K)
        dio.save_cascade(cascade, out / "cascade.ckpt")
        for i, st in enumerate(cascade.stages, start=1):
            dio.save_model(st.model, out / f"level{i}.model")
        rows = [st.metrics for st in cascade.stages]
    _stamp(rows, start, args.timing)
    (out / "metrics.tsv").write_text(format_metrics(rows), encoding="utf-8")
    return 0


def _trace_lines(cascade, examples) -> str:
    lines = ["example\tstage\tsurvivors"]
    for e, ex in enumerate(examples):
        tr = run_cascade(cascade, ex)
        for s, lat in enumerate(tr.inputs, start=1):
            counts = []
            for j in range(lat.length):
                states = set()
                for i in range(max(0, j - lat.order + 1), min(j, lat.n_anchors - 1) + 1):
                    states.update(((lat.codes[i] // lat.K ** (lat.order - 1 - (j - i))) % lat.K).tolist())
                counts.append(str(len(states)))
            lines.append(f"{e}\t{s}\t{','.join(counts)}")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    start = time.perf_counter()
    blob = Path(args.model).read_bytes()
    if args.ensemble:
        cascade = dio.grid_cascade_from_bytes(blob)
        ds = dio.read_grid_dataset(args.data)
        ev = evaluate_grid_cascade(cascade, ds.examples)
        rows = ev.rows
        if any(ev.breakdowns):
            print(f"cascade breakdowns per level: {ev.breakdowns}", file=sys.stderr)
    else:
        cascade = dio.cascade_from_bytes(blob)
        ds = dio.read_sequence_dataset(args.data)
        rows = evaluate_cascade(cascade, ds.examples)
        if args.trace:
            Path(args.trace).write_text(_trace_lines(cascade, ds.examples), encoding="utf-8")
    _stamp(rows, start, args.timing)
    _emit(format_metrics(rows), args.out)
    return 0


def cmd_filter_stats(args) -> int:
    """Per stage: how many examples reached it with their truth, and how much survived."""
    cascade = dio.cascade_from_bytes(Path(args.model).read_bytes())
    ds = dio.read_sequence_dataset(args.data)
    stats = {}
    for ex in ds.examples:
        tr = run_cascade(cascade, ex)
        lats = tr.inputs
        for s, st in enumerate(cascade.stages):
            lab = st.label_map[ex.labels]
            d = stats.setdefault(s, [0, 0, 0, 0, 0])
            d[0] += 1
            d[1] += int(lats[s].contains_output(lab))
            d[2] += lats[s].n_assignments
            d[3] += lats[s].full_count
            d[4] += lats[s].n_assignments / lats[s].n_anchors
    lines = ["stage\texamples\ttruth_reached\tmean_assignments_per_anchor\tdensity_in"]
    for s in sorted(stats):
        n, reached, kept, full, per = stats[s]
        lines.append(f"{s + 1}\t{n}\t{reached}\t{per / n:.6f}\t{kept / full:.6f}")
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def grid_bench(rows: int, cols: int, K: int, N: int, seed: int) -> str:
    """Top-K recall of the exact MAP state under ensemble, sub-model and exact rankings."""
    subs = comb_decompose(rows, cols)
    keys = ("ensemble", "exact") + tuple(s.name for s in subs)
    miss = {k: np.zeros(K) for k in keys}
    nodes = 0
    ss = np.random.SeedSequence(seed)
    for child in ss.spawn(N):
        inst = dio.synth_grid(rows, cols, K, int(child.generate_state(1)[0]))
        pots = fixed_potentials(inst.model, subs)
        table = ensemble_max_marginals(pots, subs)
        exact, Y, s = brute_force_joint([inst.model])
        y = Y[int(np.argmax(s))]
        nodes += rows * cols
        rank_src = {"ensemble": table.summed, "exact": exact}
        for sub, st in zip(subs, table.subs):
            rank_src[sub.name] = st.values
        for name, vals in rank_src.items():
            # rank of the MAP state: states strictly better, ties broken by index
            own = np.take_along_axis(vals, y[..., None], axis=2)
            better = (vals > own).sum(axis=2) + ((vals == own) & (np.arange(K) < y[..., None])).sum(axis=2)
            for k in range(K):
                miss[name][k] += np.count_nonzero(better >= k + 1)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["top_k", "instances", "nodes", "ensemble_miss", "submodel_mean_miss", "submodel_min_miss",
                "submodel_max_miss", "exact_miss"])
    if N == 0:
        return buf.getvalue()
    for k in range(K):
        sub = np.array([miss[s.name][k] / nodes for s in subs])
        w.writerow([k + 1, N, nodes, f"{miss['ensemble'][k] / nodes:.6f}", f"{sub.mean():.6f}",
                    f"{sub.min():.6f}", f"{sub.max():.6f}", f"{miss['exact'][k] / nodes:.6f}"])
    return buf.getvalue()


def cmd_grid_bench(args) -> int:
    _emit(grid_bench(args.rows, args.cols, args.K, args.N, args.seed), args.out)
    return 0


# -- parser -----------------------------------------------------------------------

def _positive(v: str) -> int:
    i = int(v)
    if i < 1:
        raise argparse.ArgumentTypeError("must be positive")
    return i


def _nonneg(v: str) -> int:
    i = int(v)
    if i < 0:
        raise argparse.ArgumentTypeError("must be nonnegative")
    return i


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spcascade", description="Structured prediction cascades.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset or grid instance")
    s.add_argument("--kind", choices=("hmm", "grid-task", "grid"), default="hmm")
    s.add_argument("--order", type=_positive, default=2)
    s.add_argument("--K", type=_positive, default=4)
    s.add_argument("--n", type=_nonneg, default=100, help="number of examples")
    s.add_argument("--min-length", type=_positive, default=8)
    s.add_argument("--max-length", type=_positive, default=14)
    s.add_argument("--rows", type=_positive, default=3)
    s.add_argument("--cols", type=_positive, default=3)
    s.add_argument("--noise", type=float, default=0.4)
    s.add_argument("--seed", type=int, default=0, help="sampling seed")
    s.add_argument("--task-seed", type=int, default=0,
                   help="seed of the hidden chain (hmm); splits sharing it come from the same task")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a cascade", epilog=METRICS_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--data", required=True, help="training set")
    t.add_argument("--dev", required=True, help="development set for threshold tuning")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, help="overrides the config seed")
    t.add_argument("--ensemble", action="store_true", help="grid mode: comb-tree ensemble cascade")
    t.add_argument("--timing", action="store_true", help="record wall-clock time in metrics")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run a trained cascade on a dataset", epilog=METRICS_HELP + "\n\n" + TRACE_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    e.add_argument("--model", required=True, help="cascade.ckpt from train")
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="metrics TSV path (default stdout)")
    e.add_argument("--trace", help="write per-example survivor counts here")
    e.add_argument("--ensemble", action="store_true")
    e.add_argument("--timing", action="store_true")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("filter-stats", help="truth survival and lattice sizes per stage")
    f.add_argument("--model", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out")
    f.set_defaults(func=cmd_filter_stats)

    g = sub.add_parser("grid-bench", help="top-K filtering recall on random grids", epilog=GRID_BENCH_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    g.add_argument("--rows", type=_positive, default=3)
    g.add_argument("--cols", type=_positive, default=3)
    g.add_argument("--K", type=_positive, default=3)
    g.add_argument("--N", type=_nonneg, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_grid_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"spcascade: config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - surface any module error as exit 1
        print(f"spcascade {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
