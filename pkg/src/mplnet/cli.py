"""Command-line entry point: ``mplnet simulate | fit | benchmark``.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 degenerate fit.
"""

import argparse
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import io
from .engine import (FitConfig, edge_density, fit, resolve_threads, select_lambda_density,
                     select_lambda_icl)
from .errors import (CalibrationError, DegenerateComponentError, InputError, MplnError,
                     ParameterError)
from .evaluation import jaccard_stability, one_hot, score_against_truth, two_step_baseline
from .pln import CountDataset
from .simgen import GRAPH_KINDS, SimConfig, ari, gen_dataset

logger = logging.getLogger("mplnet")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_DEGENERATE = 0, 2, 3, 4


class _Timer:
    def __init__(self):
        self.timings = {}

    def phase(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.timings[name] = time.perf_counter() - self.t0

        return _Ctx()


def _phase_seeds(seed, k):
    """``k`` independent integer seeds derived from one top-level seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]


def _outdir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _add_fit_options(p):
    p.add_argument("--G", type=int, default=None, help="number of mixture components")
    p.add_argument("--zero-edges", help="TSV of feature-name pairs whose edge is fixed at 0")
    p.add_argument("--p-step", choices=["paper", "exact"], default="paper")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $MPLNET_THREADS or 1)")
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--tol-elbo", type=float, default=1e-6)
    p.add_argument("--tol-sign", type=float, default=1e-4)
    p.add_argument("--rho", type=float, default=1.0)


def build_parser():
    parser = argparse.ArgumentParser(prog="mplnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic benchmark bundle")
    sim.add_argument("--graph", choices=GRAPH_KINDS, default="random")
    sim.add_argument("--p", type=int, default=100)
    sim.add_argument("--n", type=int, default=3000)
    sim.add_argument("--G", type=int, default=3)
    sim.add_argument("--dropout", choices=["low", "high"], default="low")
    sim.add_argument("--mixing", choices=["low", "middle", "high"], default="low")
    sim.add_argument("--p-d", type=int, default=None,
                     help="fix the number of discriminative mean coordinates")
    sim.add_argument("--edge-magnitude", type=float, default=0.3)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)

    f = sub.add_parser("fit", help="fit the mixture model to a counts table")
    f.add_argument("--counts", required=True, help="samples x features TSV with header")
    f.add_argument("--scaling", help="one-column TSV of scaling factors")
    pen = f.add_mutually_exclusive_group(required=True)
    pen.add_argument("--lambda", dest="lam", type=float,
                     help="penalty on sum_g ||Theta_g||_1,off in the negative ELBO")
    pen.add_argument("--select", help="'icl' or 'density:<x>'")
    f.add_argument("--out", required=True)
    _add_fit_options(f)

    b = sub.add_parser("benchmark", help="compare VMPLN and the two-step baseline on a bundle")
    b.add_argument("--bundle", required=True, help="directory written by 'simulate'")
    b.add_argument("--density", type=float, default=0.2)
    b.add_argument("--stability", action="store_true")
    b.add_argument("--reps", type=int, default=20)
    b.add_argument("--frac", type=float, default=0.9)
    b.add_argument("--out", required=True)
    _add_fit_options(b)
    return parser


def _fit_config(args, G):
    return FitConfig(components=G, lam=0.0, max_outer=args.max_iter, tol_elbo=args.tol_elbo,
                     tol_sign=args.tol_sign, rho=args.rho, p_step_mode=args.p_step,
                     seed=args.seed, threads=resolve_threads(args.threads))


def _semantic(config_dict):
    d = dict(config_dict)
    d.pop("threads", None)
    return d


# --------------------------------------------------------------------------
# simulate


def run_simulate(args):
    timer = _Timer()
    config = SimConfig(populations=args.G, n=args.n, p=args.p, graph_kind=args.graph,
                       dropout_level=args.dropout, mixing_level=args.mixing,
                       edge_magnitude=args.edge_magnitude, seed=args.seed, p_d=args.p_d)
    with timer.phase("generate"):
        sd = gen_dataset(config)
    out = _outdir(args.out)
    data = sd.dataset
    names = data.feature_names
    with timer.phase("write"):
        io.write_counts(out / "counts.tsv", data)
        io.write_vector(out / "scaling.tsv", data.scaling, "scaling")
        io.write_vector(out / "labels.tsv", np.asarray(data.true_labels, dtype=np.int64), "label")
        io.write_table(out / "means.tsv", sd.means, names,
                       row_names=[f"g{g}" for g in range(config.populations)],
                       index_label="component")
        for g, theta in enumerate(sd.true_precisions):
            io.write_table(out / f"truth_precision_g{g}.tsv", theta, names, row_names=names,
                           index_label="feature")
            io.write_edge_list(out / f"truth_edges_g{g}.tsv", theta, names)
    cfg = {k: getattr(config, k) for k in config.__dataclass_fields__}
    cfg["proportions"] = list(cfg["proportions"])
    manifest = io.RunManifest("simulate", cfg, args.seed, timings=timer.timings)
    io.write_json(out / "summary.json", {"p_d_used": sd.p_d_used,
                                         "achieved_ari": sd.achieved_ari,
                                         "zero_fraction": float(np.mean(data.counts == 0))})
    manifest.write(out / "manifest.json")
    print(f"wrote {data.n} x {data.p} bundle to {out} "
          f"(p_d={sd.p_d_used}, ARI={sd.achieved_ari:.3f})")
    return EXIT_OK


# --------------------------------------------------------------------------
# fit


def _parse_select(text):
    if text == "icl":
        return "icl", None
    if text.startswith("density:"):
        try:
            x = float(text.split(":", 1)[1])
        except ValueError as exc:
            raise InputError(f"bad density target in --select {text!r}") from exc
        if not 0 < x <= 1:
            raise InputError("density target must lie in (0, 1]")
        return "density", x
    raise InputError(f"--select must be 'icl' or 'density:<x>', got {text!r}")


def _write_fit(out, result, names, extra):
    G = result.params.n_components
    for g in range(G):
        theta = result.params.precisions[g]
        io.write_table(out / f"precision_g{g}.tsv", theta, names, row_names=names,
                       index_label="feature")
        io.write_edge_list(out / f"edges_g{g}.tsv", theta, names)
    io.write_table(out / "responsibilities.tsv", result.state.responsibilities,
                   [f"g{g}" for g in range(G)])
    io.write_vector(out / "proportions.tsv", result.params.proportions, "pi")
    io.write_table(out / "means.tsv", result.params.means, names,
                   row_names=[f"g{g}" for g in range(G)], index_label="component")
    io.write_json(out / "trace.json", {"status": result.status, "message": result.message,
                                       "lambda": result.lam, "trace": result.trace, **extra})


def fit_dataset(data, config, select=None, density=None):
    """Fit with a fixed penalty or run a selection; returns (result, extra info)."""
    if select == "icl":
        sel = select_lambda_icl(data, config)
        return sel.fit, {"selection": "icl", "selected_lambda": sel.lam}
    if select == "density":
        sel = select_lambda_density(data, config, density)
        return sel.fit, {"selection": f"density:{density}", "selected_lambda": sel.lam,
                         "densities": sel.densities, "selection_status": sel.status}
    return fit(data, config), {}


def run_fit(args):
    timer = _Timer()
    with timer.phase("read"):
        data = io.read_counts(args.counts, args.scaling)
    G = args.G if args.G is not None else 1
    config = _fit_config(args, G)
    if args.zero_edges:
        config = config.replace(zero_edges=io.read_zero_edges(args.zero_edges,
                                                              data.feature_names))
    select, density = (None, None)
    if args.select:
        select, density = _parse_select(args.select)
    else:
        config = config.replace(lam=args.lam)
    out = _outdir(args.out)
    with timer.phase("fit"):
        result, extra = fit_dataset(data, config, select, density)
    with timer.phase("write"):
        _write_fit(out, result, data.feature_names, extra)
    cfg = _semantic(config.to_dict())
    cfg["select"] = args.select
    cfg["input_sha256"] = io.config_digest({"counts": Path(args.counts).read_text(),
                                            "scaling": (Path(args.scaling).read_text()
                                                        if args.scaling else None)})
    status = "degenerate" if result.status == "degenerate" else "ok"
    io.RunManifest("fit", cfg, args.seed, status=status, timings=timer.timings).write(
        out / "manifest.json")
    if result.status == "degenerate":
        print(f"degenerate fit: {result.message}; partial outputs in {out}", file=sys.stderr)
        return EXIT_DEGENERATE
    print(f"{result.status} after {result.n_iter} iterations; outputs in {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# benchmark


def read_bundle(path):
    """Counts, scaling, true labels and true precisions of a simulate bundle."""
    path = Path(path)
    truth_files = sorted(path.glob("truth_precision_g*.tsv"),
                         key=lambda q: int(q.stem.rsplit("g", 1)[1]))
    if not truth_files or not (path / "labels.tsv").exists():
        raise InputError(f"{path} has no ground truth (truth_precision_g*.tsv, labels.tsv)")
    data = io.read_counts(path / "counts.tsv", path / "scaling.tsv")
    labels = io.read_vector(path / "labels.tsv", dtype=int)
    truths = [io.read_table(q, index_label="feature")[0] for q in truth_files]
    data = CountDataset(data.counts, data.scaling, data.feature_names, labels)
    return data, truths


def run_benchmark(args):
    timer = _Timer()
    data, truths = read_bundle(args.bundle)
    G = args.G if args.G is not None else len(truths)
    config = _fit_config(args, G)
    s_base, s_stab_v, s_stab_b = _phase_seeds(args.seed, 3)
    rows = []

    t0 = time.perf_counter()
    with timer.phase("vmpln"):
        sel = select_lambda_density(data, config, args.density)
    res = sel.fit
    areas, ratios = score_against_truth(list(res.params.precisions), res.state.responsibilities,
                                        truths, data.true_labels)
    rows.append({"method": "VMPLN", "pauprc": float(areas.mean()),
                 "pauprc_ratio": float(ratios.mean()), "per_component": ratios.tolist(),
                 "ari": ari(data.true_labels, res.labels()),
                 "density": float(np.mean(sel.densities)),
                 "runtime": time.perf_counter() - t0})

    t0 = time.perf_counter()
    with timer.phase("two_step"):
        base = two_step_baseline(data, G, density_target=args.density, seed=s_base)
    b_areas, b_ratios = score_against_truth(base.precisions, one_hot(base.labels, G), truths,
                                            data.true_labels)
    rows.append({"method": "two-step", "pauprc": float(b_areas.mean()),
                 "pauprc_ratio": float(b_ratios.mean()), "per_component": b_ratios.tolist(),
                 "ari": ari(data.true_labels, base.labels),
                 "density": float(np.mean([edge_density(t) for t in base.precisions])),
                 "runtime": time.perf_counter() - t0})

    if args.stability:
        fixed = config.replace(lam=sel.lam)
        with timer.phase("stability"):
            rows[0]["stability_jaccard"] = jaccard_stability(
                data, lambda sub: fit(sub, fixed), args.frac, args.reps, args.density, s_stab_v)

            def baseline_proc(sub):
                r = two_step_baseline(sub, G, density_target=args.density, seed=s_base)
                return r.precisions, one_hot(r.labels, G)

            rows[1]["stability_jaccard"] = jaccard_stability(
                data, baseline_proc, args.frac, args.reps, args.density, s_stab_b)

    out = _outdir(args.out)
    cols = ["method", "pauprc", "pauprc_ratio"] + [f"pauprc_ratio_g{g}" for g in range(G)] + \
        ["ari", "density", "runtime"] + (["stability_jaccard"] if args.stability else [])
    lines = ["\t".join(cols)]
    for r in rows:
        cells = [r["method"], io._fmt(r["pauprc"]), io._fmt(r["pauprc_ratio"])]
        cells += [io._fmt(v) for v in r["per_component"]]
        cells += [io._fmt(r["ari"]), io._fmt(r["density"]), io._fmt(r["runtime"])]
        if args.stability:
            cells.append(io._fmt(r["stability_jaccard"]))
        lines.append("\t".join(cells))
    (out / "report.tsv").write_text("\n".join(lines) + "\n")
    io.write_json(out / "report.json", {"rows": rows, "selected_lambda": sel.lam,
                                        "selection_status": sel.status})
    cfg = _semantic(config.to_dict())
    cfg.update({"bundle": str(Path(args.bundle).resolve()), "density": args.density,
                "stability": args.stability, "reps": args.reps, "frac": args.frac})
    io.RunManifest("benchmark", cfg, args.seed, timings=timer.timings).write(
        out / "manifest.json")
    print("\n".join(lines))
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("default")
    handlers = {"simulate": run_simulate, "fit": run_fit, "benchmark": run_benchmark}
    try:
        return handlers[args.command](args)
    except CalibrationError as exc:
        print(f"error: {exc} (closest band: {exc.closest_band})", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, ParameterError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DegenerateComponentError as exc:
        print(f"degenerate fit: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except MplnError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
