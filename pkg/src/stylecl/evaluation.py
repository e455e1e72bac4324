"""mIoU, relative gaps to the oracle and report emission."""
import csv
import json
import logging
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .continual import TrainConfig, train_step
from .errors import EmptyDatasetError, FormatError, InvariantError
from .model import init_model, predict, softmax, forward
from .style import StyleBank, bank_add, extract_style

log = logging.getLogger(__name__)


def confusion_matrix(gt, pred, class_ids):
    """Counts over pixels whose ground truth is in ``class_ids``.

    Rows follow ``class_ids``; columns follow ``class_ids`` plus a final
    column for predictions outside the list (unknown or unseen classes).
    """
    class_ids = list(class_ids)
    k = len(class_ids)
    lut = np.full(256, k, dtype=np.int64)
    for i, c in enumerate(class_ids):
        lut[c] = i
    g = lut[np.asarray(gt).ravel()]
    p = lut[np.asarray(pred).ravel()]
    keep = g < k
    return np.bincount(g[keep] * (k + 1) + p[keep], minlength=k * (k + 1)).reshape(k, k + 1)


def miou_from_confusion(cm):
    """Mean IoU, skipping classes with neither ground truth nor predictions."""
    k = cm.shape[0]
    tp = np.diag(cm[:, :k]).astype(np.float64)
    gt = cm.sum(axis=1).astype(np.float64)
    pred = cm[:, :k].sum(axis=0).astype(np.float64)
    union = gt + pred - tp
    present = union > 0
    if not np.any(present):
        return float("nan")
    return float(np.mean(tp[present] / union[present]))


def per_class_iou(cm):
    k = cm.shape[0]
    tp = np.diag(cm[:, :k]).astype(np.float64)
    union = cm.sum(axis=1) + cm[:, :k].sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def predict_set(model, samples, batch=16):
    preds = []
    for i in range(0, len(samples), batch):
        preds.extend(predict(model, np.stack([s.image for s in samples[i:i + batch]])))
    return preds


def miou(model, eval_set, class_set):
    """mIoU of ``model`` on full-label samples over the real classes in ``class_set``."""
    samples = eval_set.samples if isinstance(eval_set, D.Dataset) else list(eval_set)
    if not samples:
        raise EmptyDatasetError("empty evaluation set")
    classes = [c for c in class_set if c not in (D.UNKNOWN, D.IGNORE)]
    cm = np.zeros((len(classes), len(classes) + 1), dtype=np.int64)
    for s, p in zip(samples, predict_set(model, samples)):
        cm += confusion_matrix(s.full_labels, p, classes)
    return miou_from_confusion(cm)


def delta(miou_value, oracle_miou):
    """Relative gap to the oracle in percent; positive means worse than the oracle."""
    if oracle_miou == 0:
        raise ZeroDivisionError("oracle mIoU is zero")
    return 100.0 * (oracle_miou - miou_value) / oracle_miou


def delta_bar(deltas):
    deltas = list(deltas)
    if not deltas:
        raise ValueError("delta_bar of an empty sequence")
    return float(np.mean(deltas))


def gamma_gen(model, external_set, classes_so_far, training_domains=()):
    name = getattr(external_set, "manifest", {}).get("domain") if isinstance(external_set, D.Dataset) else None
    if name is not None and name in set(training_domains):
        warnings.warn(f"external domain {name!r} is part of the training sequence", stacklevel=2)
    return miou(model, external_set, classes_so_far)


def train_oracle(schedule, domains, n_train, epochs_per_step, seed, lr=0.005, h=64, w=64,
                 features=16, beta=0.01):
    """Joint model over all domains and classes, matched in sample updates.

    The pooled training set (one split per domain, full labels) is visited for
    ``sum(epochs) * n_train / len(pool)`` epochs, i.e. the same number of SGD
    updates as the incremental run.
    """
    epochs = list(epochs_per_step) if np.ndim(epochs_per_step) else [epochs_per_step] * len(schedule)
    pool = []
    for t, dom in enumerate(domains):
        pool.extend(D.make_split(dom, D.train_seeds(seed, t, n_train), None, h, w))
    for s in pool:
        s.step_labels = D.mask_labels(s.full_labels, schedule.all_classes())
    total_updates = sum(epochs) * n_train
    n_epochs = max(1, int(round(total_updates / len(pool))))
    everything = D.ClassSchedule((schedule.all_classes(),))
    model = init_model(seed, features, everything.all_classes())
    model.schedule_hash = schedule.digest()
    bank = bank_add(StyleBank(h, w, beta), extract_style([s.image for s in pool], beta, 0))
    cfg = TrainConfig(epochs=n_epochs, lr=lr, losses=frozenset({"ce_n"}), stylize=False, seed=seed)
    model, trace = train_step(0, pool, bank, None, model, cfg, everything)
    return model, trace


@dataclass
class MetricsReport:
    domains: list  # domain name per step
    miou: dict = field(default_factory=dict)  # (t, domain) -> fraction
    oracle: dict = field(default_factory=dict)  # (t, domain) -> oracle mIoU on classes 0..t
    gamma: dict = field(default_factory=dict)  # t -> fraction
    external: str = ""

    def delta(self, t, dom):
        return delta(self.miou[(t, dom)], self.oracle[(t, dom)])

    def delta_bar(self, t):
        return delta_bar(self.delta(t, d) for d in self.domains[:t + 1])

    @property
    def steps(self):
        return sorted({t for t, _ in self.miou})


def evaluate_models(models, schedule, domains, eval_sets, oracle_model, external_set=None):
    """Fill a MetricsReport for per-step models on eval sets keyed by domain name."""
    rep = MetricsReport([d.name for d in domains])
    for t, model in enumerate(models):
        seen = schedule.seen_classes(t)
        for dom in rep.domains[:t + 1]:
            rep.miou[(t, dom)] = miou(model, eval_sets[dom], seen)
            rep.oracle[(t, dom)] = miou(oracle_model, eval_sets[dom], seen)
        if external_set is not None:
            rep.external = external_set.manifest.get("domain", "external")
            rep.gamma[t] = gamma_gen(model, external_set, seen, rep.domains)
    return rep


REPORT_COLUMNS = ("step", "domain", "miou", "oracle_miou", "delta")


def report_rows(rep):
    rows = []
    for t in rep.steps:
        for dom in rep.domains[:t + 1]:
            if (t, dom) not in rep.oracle:
                raise InvariantError(f"missing oracle mIoU for step {t}, domain {dom!r}")
            rows.append((t, dom, f"{100 * rep.miou[(t, dom)]:.2f}",
                         f"{100 * rep.oracle[(t, dom)]:.2f}", f"{rep.delta(t, dom):.2f}"))
        rows.append((t, "delta_bar", "", "", f"{rep.delta_bar(t):.2f}"))
        if t in rep.gamma:
            rows.append((t, "gamma_gen", f"{100 * rep.gamma[t]:.2f}", "", ""))
    return rows


def report_dict(rep):
    return {
        "domains": rep.domains,
        "external": rep.external,
        "steps": [{
            "step": t,
            "miou": {d: rep.miou[(t, d)] for d in rep.domains[:t + 1]},
            "oracle_miou": {d: rep.oracle[(t, d)] for d in rep.domains[:t + 1]},
            "delta": {d: rep.delta(t, d) for d in rep.domains[:t + 1]},
            "delta_bar": rep.delta_bar(t),
            "gamma_gen": rep.gamma.get(t),
        } for t in rep.steps],
    }


def write_report(rep, path):
    """Write ``<path>.csv`` and ``<path>.json``; refuses reports lacking oracle values."""
    rows = report_rows(rep)
    with open(path + ".csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(REPORT_COLUMNS)
        wr.writerows(rows)
    with open(path + ".json", "w") as fh:
        json.dump(report_dict(rep), fh, indent=1)


def read_report(path):
    if not path.endswith(".json"):
        path = path + ".json"
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    rep = MetricsReport(list(d["domains"]), external=d.get("external", ""))
    for s in d["steps"]:
        t = int(s["step"])
        for dom, v in s["miou"].items():
            rep.miou[(t, dom)] = float(v)
        for dom, v in s["oracle_miou"].items():
            rep.oracle[(t, dom)] = float(v)
        if s.get("gamma_gen") is not None:
            rep.gamma[t] = float(s["gamma_gen"])
    return rep
