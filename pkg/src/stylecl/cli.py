"""Command-line entry point: ``stylecl <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 invariant violation.
"""
import argparse
import json
import logging
import os
import sys

log = logging.getLogger("stylecl")


def _apply_thread_cap():
    """Honour STYLECL_THREADS by capping the BLAS pools before numpy loads."""
    raw = os.environ.get("STYLECL_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        from .errors import ConfigError
        raise ConfigError(f"STYLECL_THREADS: expected a positive integer, got {raw!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    return n


def _load(args):
    from .config import default_config, load_config
    cfg = load_config(args.config) if args.config else default_config()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "variant", None):
        over["variant"] = args.variant
    if getattr(args, "out", None):
        over["output_dir"] = args.out
    return cfg.with_(**over) if over else cfg


def _print_rows(header, rows, fh=None):
    fh = fh or sys.stdout
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    for r in [header] + list(rows):
        print("  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip(), file=fh)


def cmd_generate(args):
    from .continual import ensure_train_split
    from .data import dataset_hash, read_dataset
    from .experiment import ensure_eval_sets, prepare_output
    cfg = _load(args)
    out = cfg.output_dir
    prepare_output(out, args.overwrite)
    data_dir = os.path.join(out, "data")
    sched, doms = cfg.class_schedule(), cfg.domains()
    rows = []
    for t in range(len(sched)):
        path = ensure_train_split(data_dir, sched, doms, t, cfg.n_train, cfg.seed, cfg.h, cfg.w)
        rows.append((f"step{t}/train", doms[t].name, dataset_hash(read_dataset(path))[:16]))
    for name, ds in ensure_eval_sets(cfg, data_dir).items():
        rows.append((f"eval/{name}", name, dataset_hash(ds)[:16]))
    _print_rows(("split", "domain", "hash"), rows)
    return 0


def _final_summary(rep):
    t = rep.steps[-1]
    return {"final_step": t, "delta_bar": [round(rep.delta_bar(s), 2) for s in rep.steps],
            "gamma_gen": round(100 * rep.gamma[t], 2) if t in rep.gamma else None}


def cmd_run(args):
    from .experiment import run_experiment
    cfg = _load(args)
    rep, _ = run_experiment(cfg, cfg.output_dir, overwrite=args.overwrite,
                            cache_views=args.cache_views, figures=not args.no_figures)
    _print_report(rep)
    return 0


def _print_report(rep):
    from .evaluation import REPORT_COLUMNS, report_rows
    _print_rows(REPORT_COLUMNS, report_rows(rep))


def cmd_stylize(args):
    import glob

    import numpy as np

    from .data import read_ppm, write_ppm
    from .errors import ConfigError, ShapeError
    from .style import apply_style, bank_load
    bank = bank_load(args.bank)
    if args.step not in bank.steps:
        raise ConfigError(f"--step: bank holds styles {bank.steps}, not {args.step}")
    token = bank[args.step]
    files = sorted(glob.glob(os.path.join(args.image_dir, "*.ppm")))
    if not files:
        raise FileNotFoundError(f"no .ppm images in {args.image_dir}")
    os.makedirs(args.out, exist_ok=True)
    worst = 0.0
    for f in files:
        dest = os.path.join(args.out, os.path.basename(f))
        if os.path.exists(dest) and not args.overwrite:
            raise FileExistsError(f"{dest} exists (use --overwrite)")
        img = read_ppm(f)
        if img.shape[:2] != (bank.image_h, bank.image_w):
            raise ShapeError(f"{f}: {img.shape[:2]} does not match bank {bank.image_h}x{bank.image_w}")
        out = apply_style(img, token)
        worst = max(worst, float(np.abs(out - img).max()))
        write_ppm(dest, out)
    print(f"stylized {len(files)} images with style {args.step}; max |change| {worst:.4f}")
    return 0


def cmd_eval(args):
    from .data import read_dataset
    from .evaluation import delta, miou, read_report
    from .model import load_checkpoint
    model = load_checkpoint(args.checkpoint)
    classes = [c for c in model.channel_layout if c != 0]
    oracle = read_report(args.oracle_report) if args.oracle_report else None
    rows, result = [], {}
    for d in args.eval_dirs:
        ds = read_dataset(d)
        name = ds.manifest.get("domain", os.path.basename(os.path.normpath(d)))
        m = miou(model, ds, classes)
        o = oracle.oracle.get((model.step, name)) if oracle else None
        dl = delta(m, o) if o else None
        result[name] = {"miou": m, "oracle_miou": o, "delta": dl}
        rows.append((name, f"{100 * m:.2f}", "" if o is None else f"{100 * o:.2f}",
                     "" if dl is None else f"{dl:.2f}"))
    _print_rows(("domain", "miou", "oracle_miou", "delta"), rows)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.json"), "w") as fh:
            json.dump({"checkpoint": args.checkpoint, "step": model.step, "domains": result}, fh,
                      indent=1)
    return 0


def cmd_report(args):
    import glob

    from .continual import read_trace
    from .evaluation import read_report
    from .plotting import plot_run
    rep = read_report(os.path.join(args.run_dir, "report.json"))
    _print_report(rep)
    trace = []
    for f in sorted(glob.glob(os.path.join(args.run_dir, "trace_step*.csv"))):
        trace.extend(read_trace(f))
    for p in plot_run(rep, trace, args.run_dir):
        print(f"wrote {p}")
    return 0


def cmd_ablate(args):
    from .errors import InvariantError
    from .experiment import get_oracle, prepare_output, run_experiment
    from .plotting import plot_comparison
    base = _load(args)
    variants = [v for spec in (args.variants or []) for v in spec.split(",") if v]
    betas = [float(b) for spec in (args.betas or []) for b in spec.split(",") if b]
    if not variants and not betas:
        variants = ["ft", "ft_selfstyle", "ce_n+lws_n", "ce_n+lws_n+ce_o", "full"]
    out = base.output_dir
    prepare_output(out, args.overwrite)
    data_dir = os.path.join(out, "data")
    oracle = get_oracle(base, os.path.join(data_dir, "oracle"))
    arms = [(v, base.with_(variant=v)) for v in variants]
    arms += [(f"beta={b:g}", base.with_(beta=b)) for b in betas]
    rows, finals, hashes = [], {}, {}
    for label, cfg in arms:
        slug = label.replace("/", "_").replace("=", "_")
        log.info("ablation arm %s", label)
        rep, res = run_experiment(cfg, os.path.join(out, slug), overwrite=True,
                                  cache_views=args.cache_views, oracle=oracle, data_dir=data_dir,
                                  figures=not args.no_figures)
        s = _final_summary(rep)
        finals[label] = rep.delta_bar(rep.steps[-1])
        hashes[label] = res.dataset_hashes
        rows.append({"arm": label, "variant": cfg.variant, "beta": cfg.beta, **s,
                     "train_hashes": res.dataset_hashes, "dir": slug})
    if len({tuple(h) for h in hashes.values()}) > 1:
        raise InvariantError(f"ablation arms saw different training data: {hashes}")
    with open(os.path.join(out, "comparison.json"), "w") as fh:
        json.dump({"arms": rows, "shared_train_hashes": next(iter(hashes.values()), [])}, fh,
                  indent=1)
    with open(os.path.join(out, "comparison.csv"), "w") as fh:
        fh.write("arm,variant,beta,final_delta_bar,gamma_gen\n")
        for r in rows:
            fh.write(f"{r['arm']},{r['variant']},{r['beta']},{r['delta_bar'][-1]:.2f},"
                     f"{'' if r['gamma_gen'] is None else r['gamma_gen']}\n")
    if not args.no_figures:
        plot_comparison(finals, os.path.join(out, "comparison.png"), xlabel="arm")
    _print_rows(("arm", "final_delta_bar", "gamma_gen"),
                [(r["arm"], f"{r['delta_bar'][-1]:.2f}", r["gamma_gen"]) for r in rows])
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="stylecl", description="Continual segmentation with Fourier style replay.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, variant=True):
        sp.add_argument("--config", metavar="PATH", help="experiment JSON (default: built-in benchmark)")
        sp.add_argument("--out", metavar="DIR", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, metavar="N", help="override the config seed")
        sp.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        if variant:
            sp.add_argument("--variant", metavar="NAME", help="method variant or loss mask")

    def speed(sp):
        sp.add_argument("--cache-views", action="store_true",
                        help="cache stylized views per sample (faster, same results)")
        sp.add_argument("--no-figures", action="store_true", help="skip PNG figures")

    g = sub.add_parser("generate", help="write the synthetic train/eval splits")
    common(g, variant=False)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="train all steps, evaluate and write the report")
    common(r)
    speed(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("stylize", help="apply a stored style to a directory of PPM images")
    s.add_argument("image_dir")
    s.add_argument("--bank", required=True, metavar="PATH", help="style bank file")
    s.add_argument("--step", type=int, required=True, metavar="K", help="style to apply")
    s.add_argument("--out", required=True, metavar="DIR")
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_stylize)

    e = sub.add_parser("eval", help="mIoU of a checkpoint on dataset directories")
    e.add_argument("checkpoint")
    e.add_argument("eval_dirs", nargs="+")
    e.add_argument("--oracle-report", metavar="PATH", help="report.json holding oracle mIoU")
    e.add_argument("--out", metavar="DIR", help="write eval.json here")
    e.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="print a run's report and redraw its figures")
    rp.add_argument("run_dir")
    rp.set_defaults(func=cmd_report)

    a = sub.add_parser("ablate", help="run several variants or betas on shared data")
    common(a, variant=False)
    speed(a)
    a.add_argument("--variant", dest="variants", action="append", metavar="NAME[,NAME...]",
                   help="variants to compare (repeatable)")
    a.add_argument("--beta", dest="betas", action="append", metavar="B[,B...]",
                   help="beta values to sweep with the config's variant (repeatable)")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .errors import StyleCLError
    kinds = {2: "config error", 3: "I/O error", 4: "invariant violation"}
    try:
        _apply_thread_cap()
        return args.func(args)
    except StyleCLError as exc:
        print(f"{kinds.get(exc.exit_code, 'error')}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
