"""End-to-end runs: protocol, oracle, evaluation and report files."""
import hashlib
import json
import logging
import os
import shutil

from . import data as D
from .continual import exemplar_violations, run_protocol
from .errors import ProtocolError
from .evaluation import evaluate_models, train_oracle, write_report
from .model import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


def oracle_key(cfg):
    blob = json.dumps([cfg.schedule, [d.to_dict() for d in cfg.domains()], cfg.n_train,
                       cfg.epochs, cfg.seed, cfg.lr, cfg.h, cfg.w], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def get_oracle(cfg, cache_dir):
    """Train the joint oracle, or load it from ``cache_dir`` when already trained."""
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"oracle-{oracle_key(cfg)}.segc")
    if os.path.exists(path):
        return load_checkpoint(path)
    model, _ = train_oracle(cfg.class_schedule(), cfg.domains(), cfg.n_train, cfg.epochs,
                            cfg.seed, cfg.lr, cfg.h, cfg.w, beta=cfg.beta)
    save_checkpoint(model, path)
    return load_checkpoint(path)


def ensure_eval_sets(cfg, data_dir):
    """Write (once) and read back the full-label eval split of every domain."""
    sets = {}
    doms = list(enumerate(cfg.domains()))
    ext = cfg.external()
    if ext is not None:
        doms.append((len(doms), ext))
    for k, dom in doms:
        path = os.path.join(data_dir, "eval", dom.name)
        if not os.path.exists(os.path.join(path, "manifest.json")):
            seeds = D.eval_seeds(cfg.seed, k, cfg.n_eval)
            ds = D.Dataset(D.make_split(dom, seeds, None, cfg.h, cfg.w),
                           D.manifest_dict(k, dom.name, list(cfg.class_schedule().all_classes()),
                                           [], seeds, cfg.h, cfg.w))
            D.write_dataset(path, ds)
        sets[dom.name] = D.read_dataset(path)
    return sets


def prepare_output(out_dir, overwrite):
    if os.path.exists(out_dir) and os.listdir(out_dir):
        if not overwrite:
            raise FileExistsError(f"{out_dir} is not empty (use --overwrite)")
        shutil.rmtree(out_dir)
    os.makedirs(out_dir, exist_ok=True)


def run_experiment(cfg, out_dir=None, overwrite=False, cache_views=False, oracle=None,
                   data_dir=None, figures=True):
    """Run the incremental protocol for ``cfg`` and write its report.

    Returns ``(MetricsReport, ProtocolResult)``.
    """
    out_dir = out_dir or cfg.output_dir
    prepare_output(out_dir, overwrite)
    data_dir = data_dir or os.path.join(out_dir, "data")
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
    schedule, domains = cfg.class_schedule(), cfg.domains()
    res = run_protocol(schedule, domains, cfg.train_config(cache_views), out_dir, cfg.n_train,
                       cfg.n_eval, beta=cfg.beta, h=cfg.h, w=cfg.w, data_dir=data_dir)
    bad = exemplar_violations(res.access_log, res.train_dirs)
    with open(os.path.join(out_dir, "access_log.json"), "w") as fh:
        json.dump({"records": res.access_log.records, "violations": bad}, fh, indent=0)
    if bad:
        raise ProtocolError(f"exemplar-free violation: {bad[:3]}")
    if oracle is None:
        oracle = get_oracle(cfg, os.path.join(data_dir, "oracle"))
    evals = ensure_eval_sets(cfg, data_dir)
    ext = cfg.external()
    rep = evaluate_models(res.models, schedule, domains, evals, oracle,
                          evals[ext.name] if ext is not None else None)
    write_report(rep, os.path.join(out_dir, "report"))
    with open(os.path.join(out_dir, "datasets.json"), "w") as fh:
        json.dump({"train_hashes": res.dataset_hashes}, fh, indent=1)
    if figures:
        from .plotting import plot_run
        plot_run(rep, res.traces, out_dir)
    return rep, res
