"""Channel grouping, the four training objectives, pseudo-labels and the step loop.

At step ``t`` the student's channels cover ``u`` plus every class seen so far.
Two groupings fold channels into ``u`` before a loss is taken:

* ``PAST_INTO_U``: past classes join ``u``; the remaining channels are the
  classes introduced at ``t``. Used with ground-truth labels.
* ``NEW_INTO_U``: classes introduced at ``t`` join ``u``; the remaining
  channels are the past classes. Used with the teacher's pseudo-labels and
  soft outputs.

All losses are means over non-ignored pixels of a single image and return the
gradient with respect to the ungrouped logits.
"""
import csv
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import data as D
from .errors import ConfigError, LabelError, ProtocolError
from .model import backward, expand_head, forward, freeze, init_model, save_checkpoint, sgd_step, softmax
from .numerics import fft2
from .style import StyleBank, apply_style, bank_add, bank_save, extract_style

log = logging.getLogger(__name__)

PAST_INTO_U = "past_into_u"
NEW_INTO_U = "new_into_u"

LOSS_TERMS = ("ce_n", "ce_o", "lws_n", "kd_o")


@dataclass
class GroupedProbMap:
    probs: np.ndarray  # (..., H, W, C')
    log_probs: np.ndarray
    layout: list
    mode: str
    source: np.ndarray  # ungrouped probabilities
    groups: np.ndarray  # source channel -> grouped channel
    within: np.ndarray  # source prob / its group's prob


def grouping(layout, schedule, t, mode):
    """Map every channel of ``layout`` to its grouped channel."""
    layout = [int(c) for c in layout]
    seen = set(schedule.seen_classes(t))
    if layout[0] != D.UNKNOWN or set(layout[1:]) != seen or len(layout) != len(seen) + 1:
        raise ProtocolError(f"channel layout {layout} does not cover u + classes of steps 0..{t}")
    if mode == PAST_INTO_U:
        keep = set(schedule.new_classes(t))
    elif mode == NEW_INTO_U:
        keep = set(schedule.past_classes(t))
    else:
        raise ValueError(f"unknown grouping mode {mode!r}")
    grouped = [D.UNKNOWN] + [c for c in layout[1:] if c in keep]
    pos = {c: i for i, c in enumerate(grouped)}
    groups = np.array([pos.get(c, 0) for c in layout])
    return groups, grouped


def group_logits(logits, layout, schedule, t, mode):
    """Grouped probabilities computed stably in log space from raw logits."""
    groups, grouped = grouping(layout, schedule, t, mode)
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    total = e.sum(axis=-1, keepdims=True)
    g = e @ np.eye(len(grouped))[groups]
    tiny = np.finfo(np.float64).tiny
    if np.all(g > 1e3 * tiny):
        log_g = np.log(g) - np.log(total)
        within = e / g[..., groups]
    else:
        # some group underflowed after the global shift: redo each group in its own frame
        log_g = np.empty(z.shape[:-1] + (len(grouped),))
        within = np.empty_like(z)
        lse_all = np.log(total)
        for j in range(len(grouped)):
            members = groups == j
            zj = z[..., members]
            mj = zj.max(axis=-1, keepdims=True)
            lse_j = mj + np.log(np.exp(zj - mj).sum(axis=-1, keepdims=True))
            log_g[..., j] = (lse_j - lse_all)[..., 0]
            within[..., members] = np.exp(zj - lse_j)
    return GroupedProbMap(np.exp(log_g), log_g, grouped, mode, e / total, groups, within)


def _group_probs(probs, layout, schedule, t, mode):
    groups, grouped = grouping(layout, schedule, t, mode)
    p = np.asarray(probs, dtype=np.float64)
    onehot = np.eye(len(grouped))[groups]
    g = p @ onehot
    safe = np.where(g[..., groups] > 0, g[..., groups], 1.0)
    return GroupedProbMap(g, np.log(np.maximum(g, np.finfo(float).tiny)), grouped, mode, p,
                          groups, p / safe)


def group_past_into_u(probs, layout, schedule, t):
    return _group_probs(probs, layout, schedule, t, PAST_INTO_U)


def group_new_into_u(probs, layout, schedule, t):
    return _group_probs(probs, layout, schedule, t, NEW_INTO_U)


def soft_ce(grouped, target):
    """Mean over pixels with target mass of -sum_j q_j log G_j, and d/dlogits.

    ``target`` has shape ``(..., H, W, C')``; rows that sum to zero are ignored.
    """
    q = np.asarray(target, dtype=np.float64)
    mass = q.sum(axis=-1)
    n_valid = int(np.count_nonzero(mass > 0))
    if n_valid == 0:
        return 0.0, np.zeros_like(grouped.source), 0
    loss = -float(np.sum(q * grouped.log_probs)) / n_valid
    qg = q[..., grouped.groups]
    dz = (grouped.source * mass[..., None] - qg * grouped.within) / n_valid
    return loss, dz, n_valid


def labels_to_target(labels, layout, ignore_id=D.IGNORE):
    labels = np.asarray(labels)
    lut = np.full(256, -1, dtype=np.int64)
    for i, c in enumerate(layout):
        lut[c] = i
    idx = lut[labels]
    bad = (idx < 0) & (labels != ignore_id)
    if np.any(bad):
        raise LabelError(f"labels {sorted(set(labels[bad].tolist()))} not in layout {list(layout)}")
    q = np.zeros(labels.shape + (len(layout),))
    valid = idx >= 0
    q[valid, idx[valid]] = 1.0
    return q


def ce_loss(grouped, labels, ignore_id=D.IGNORE):
    """Hard-label cross-entropy on a grouped map; returns (loss, dlogits)."""
    loss, dz, _ = soft_ce(grouped, labels_to_target(labels, grouped.layout, ignore_id))
    return loss, dz


def lws_loss(grouped_new_into_u, pseudo):
    if grouped_new_into_u.mode != NEW_INTO_U:
        raise ProtocolError("pseudo-label loss needs the new-into-u grouping")
    labels = pseudo.labels if isinstance(pseudo, PseudoLabelMap) else pseudo
    return ce_loss(grouped_new_into_u, labels)


def kd_loss(teacher_probs, grouped_new_into_u, teacher_layout=None):
    """Soft cross-entropy against the frozen teacher (no temperature)."""
    if grouped_new_into_u.mode != NEW_INTO_U:
        raise ProtocolError("distillation needs the new-into-u grouping")
    teacher_probs = np.asarray(teacher_probs)
    if teacher_probs.shape != grouped_new_into_u.probs.shape:
        raise ProtocolError(f"teacher channels {teacher_probs.shape} do not match "
                            f"student {grouped_new_into_u.probs.shape}")
    if teacher_layout is not None and list(teacher_layout) != list(grouped_new_into_u.layout):
        raise ProtocolError(f"teacher layout {teacher_layout} != {grouped_new_into_u.layout}")
    loss, dz, _ = soft_ce(grouped_new_into_u, teacher_probs)
    return loss, dz


# --- pseudo-labels ---------------------------------------------------------

@dataclass
class PseudoLabelMap:
    labels: np.ndarray
    source_style: np.ndarray
    peak: np.ndarray


def fuse_pseudo_labels(prob_maps, layout, current_labels, tau, topk_frac, styles=None):
    """Fuse per-style teacher probabilities into refined hard pseudo-labels.

    ``prob_maps`` is ``(K, H, W, C)``. Per pixel the style whose peak is
    highest wins (lowest index on ties); its argmax is the candidate label
    (lowest class id on ties). A candidate is kept if its peak exceeds
    ``tau`` or ranks within the top ``ceil(topk_frac * n_c)`` peaks of the
    pixels whose candidate is class ``c``. Pixels already labelled with a
    new class become ``u``; unconfident pixels become ignore.
    """
    prob_maps = np.asarray(prob_maps)
    layout = np.asarray(layout)
    peaks = prob_maps.max(axis=-1)
    k_win = np.argmax(peaks, axis=0)
    h, w = k_win.shape
    rows, cols = np.indices((h, w))
    vec = prob_maps[k_win, rows, cols]
    order = np.argsort(layout, kind="stable")
    cand = layout[order][np.argmax(vec[..., order], axis=-1)]
    peak = peaks[k_win, rows, cols]

    confident = peak > tau
    if topk_frac > 0:
        flat_c, flat_p = cand.ravel(), peak.ravel()
        top = np.zeros(flat_c.shape, dtype=bool)
        for c in np.unique(flat_c):
            idx = np.flatnonzero(flat_c == c)
            n_keep = int(np.ceil(topk_frac * idx.size))
            if n_keep:
                ranked = idx[np.argsort(-flat_p[idx], kind="stable")]
                top[ranked[:n_keep]] = True
        confident |= top.reshape(h, w)

    current = np.asarray(current_labels)
    labels = np.where(current != D.UNKNOWN, D.UNKNOWN,
                      np.where(confident, cand, D.IGNORE)).astype(np.uint8)
    src = k_win if styles is None else np.asarray(styles)[k_win]
    return PseudoLabelMap(labels, src, peak)


def stylized_views(image, bank, steps, enabled=True):
    if not enabled:
        return [np.asarray(image, dtype=np.float32) for _ in steps]
    spec = fft2(np.asarray(image, dtype=np.float64))
    return [apply_style(image, bank[k], spectrum=spec) for k in steps]


def pseudo_label(teacher, image, bank, t, tau=0.9, topk_frac=0.66, current_labels=None,
                 include_current=False, stylize=True):
    if t < 1:
        raise ProtocolError("pseudo-labels need a teacher from a previous step")
    steps = list(range(t + 1 if include_current else t))
    missing = [k for k in steps if k not in bank.steps]
    if missing:
        raise ProtocolError(f"style bank lacks steps {missing}")
    views = np.stack(stylized_views(image, bank, steps, stylize))
    probs = softmax(forward(teacher, views))
    if current_labels is None:
        current_labels = np.zeros(views.shape[1:3], dtype=np.uint8)
    return fuse_pseudo_labels(probs, teacher.channel_layout, current_labels, tau, topk_frac, steps)


# --- training --------------------------------------------------------------

@dataclass
class LossBreakdown:
    step: int
    epoch: int
    sample: int
    l_ce_n: float = 0.0
    l_ce_o: float = 0.0
    l_lws_n: float = 0.0
    l_kd_o: float = 0.0
    total: float = 0.0
    valid_pixels: dict = field(default_factory=dict)


TRACE_COLUMNS = ("step", "epoch", "sample", "l_ce_n", "l_ce_o", "l_lws_n", "l_kd_o", "total")


@dataclass
class TrainConfig:
    epochs: int = 15
    lr: float = 0.005
    lambdas: tuple = (10.0, 10.0, 10.0)  # ce_o, lws_n, kd_o
    losses: frozenset = frozenset(LOSS_TERMS)
    stylize: bool = True
    tau: float = 0.9
    topk_frac: float = 0.66
    seed: int = 1234
    pseudo_include_current: bool = False
    cache_views: bool = False

    def weight(self, term):
        return 1.0 if term == "ce_n" else dict(zip(LOSS_TERMS[1:], self.lambdas))[term]

    def active(self, term, t):
        if term not in self.losses:
            return False
        if term != "ce_n" and (t == 0 or self.weight(term) == 0.0):
            return False
        return True


def _sample_update(model, teacher, schedule, t, image, labels, bank, cfg, views_cache=None,
                   memo=None):
    act = {term: cfg.active(term, t) for term in LOSS_TERMS}
    past = list(range(t))
    if views_cache is not None:
        self_view, old_views = views_cache
    else:
        steps = [t] + (past if cfg.stylize else past[:1])
        views = stylized_views(image, bank, steps, cfg.stylize)
        self_view, old_views = views[0], views[1:]

    need_old_student = act["ce_o"] or act["kd_o"]
    batch = [self_view] + (old_views if need_old_student else [])
    logits, cache = forward(model, np.stack(batch), return_cache=True)
    dlogits = np.zeros(logits.shape)
    out = LossBreakdown(t, 0, 0)

    # teacher outputs depend only on the frozen teacher and the views, so they can be memoized
    memo = {} if memo is None else memo
    teacher_probs = memo.get("teacher_probs")
    if teacher_probs is None and (act["lws_n"] or act["kd_o"]):
        teacher_in = list(old_views)
        if act["lws_n"] and cfg.pseudo_include_current:
            teacher_in.append(self_view)
        teacher_probs = memo["teacher_probs"] = softmax(forward(teacher, np.stack(teacher_in)))

    layout = model.channel_layout
    if act["ce_n"]:
        g = group_logits(logits[0], layout, schedule, t, PAST_INTO_U)
        loss, dz = ce_loss(g, labels)
        out.l_ce_n = loss
        dlogits[0] += dz
    if act["ce_o"]:
        n = len(old_views)
        for i in range(n):
            g = group_logits(logits[1 + i], layout, schedule, t, PAST_INTO_U)
            loss, dz = ce_loss(g, labels)
            out.l_ce_o += loss / n
            dlogits[1 + i] += cfg.weight("ce_o") * dz / n
    if act["lws_n"]:
        pl = memo.get("pseudo")
        if pl is None:
            pl = memo["pseudo"] = fuse_pseudo_labels(teacher_probs, teacher.channel_layout, labels,
                                                     cfg.tau, cfg.topk_frac)
        g = group_logits(logits[0], layout, schedule, t, NEW_INTO_U)
        loss, dz = lws_loss(g, pl)
        out.l_lws_n = loss
        out.valid_pixels["lws_n"] = int(np.count_nonzero(pl.labels != D.IGNORE))
        dlogits[0] += cfg.weight("lws_n") * dz
    if act["kd_o"]:
        n = len(old_views)
        for i in range(n):
            g = group_logits(logits[1 + i], layout, schedule, t, NEW_INTO_U)
            loss, dz = kd_loss(teacher_probs[i], g, teacher.channel_layout)
            out.l_kd_o += loss / n
            dlogits[1 + i] += cfg.weight("kd_o") * dz / n

    out.total = (out.l_ce_n + cfg.weight("ce_o") * out.l_ce_o
                 + cfg.weight("lws_n") * out.l_lws_n + cfg.weight("kd_o") * out.l_kd_o)
    grads = backward(model, None, dlogits, cache)
    sgd_step(model, grads, cfg.lr)
    return out


def train_step(t, train_data, bank, teacher, model, cfg, schedule):
    """Run ``cfg.epochs`` epochs of per-sample SGD at step ``t``; returns the loss trace."""
    if (teacher is None) != (t == 0):
        raise ConfigError("a teacher is required exactly when t >= 1")
    if bank.steps != list(range(t + 1)):
        raise ProtocolError(f"style bank holds steps {bank.steps}, expected 0..{t}")
    trace = []
    cache = {}
    n = len(train_data)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, t, epoch]).permutation(n)
        for i in order:
            sample = train_data[i]
            views, memo = None, None
            if cfg.cache_views:
                if i not in cache:
                    steps = [t] + (list(range(t)) if cfg.stylize else list(range(min(t, 1))))
                    v = stylized_views(sample.image, bank, steps, cfg.stylize)
                    cache[i] = ((v[0], v[1:]), {})
                views, memo = cache[i]
            rec = _sample_update(model, teacher, schedule, t, sample.image, sample.step_labels,
                                 bank, cfg, views, memo)
            rec.epoch, rec.sample = epoch, int(i)
            trace.append(rec)
        log.debug("step %d epoch %d: mean total %.4f", t, epoch,
                  np.mean([r.total for r in trace[-n:]]))
    return model, trace


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TRACE_COLUMNS)
        for r in trace:
            wr.writerow([r.step, r.epoch, r.sample] + [repr(float(getattr(r, c)))
                                                        for c in TRACE_COLUMNS[3:]])


def read_trace(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LossBreakdown(int(r["step"]), int(r["epoch"]), int(r["sample"]),
                          *(float(r[c]) for c in TRACE_COLUMNS[3:])) for r in rows]


@dataclass
class ProtocolResult:
    models: list  # frozen model after each step
    bank: StyleBank
    traces: list
    checkpoints: list
    dataset_hashes: list
    access_log: Optional[D.AccessLog] = None
    train_dirs: list = field(default_factory=list)


def run_protocol(schedule, domains, cfg, out_dir, n_train, n_eval, beta=0.01, h=64, w=64,
                 features=16, access_log=None, data_dir=None):
    """Train through every step, writing data, checkpoints, bank and traces under ``out_dir``.

    Each step's training split is read from disk exactly once, at the start
    of that step, through ``access_log``.
    """
    if len(schedule) != len(domains):
        raise ConfigError("schedule and domain sequence lengths differ")
    access_log = access_log or D.AccessLog()
    data_dir = data_dir or os.path.join(out_dir, "data")
    os.makedirs(out_dir, exist_ok=True)
    bank = StyleBank(h, w, beta)
    model, teacher = None, None
    res = ProtocolResult([], bank, [], [], [], access_log)
    for t in range(len(schedule)):
        train_dir = ensure_train_split(data_dir, schedule, domains, t, n_train, cfg.seed, h, w)
        res.train_dirs.append(train_dir)
        access_log.step = t
        train = D.read_dataset(train_dir, access_log.open)
        res.dataset_hashes.append(D.dataset_hash(train))
        bank = bank_add(bank, extract_style(train.images(), beta, t))
        new = schedule.new_classes(t)
        if t == 0:
            model = init_model(cfg.seed, features, new)
        else:
            model = expand_head(model, new, seed=cfg.seed * 1000 + t)
        model.step = t
        model.schedule_hash = schedule.digest()
        model, trace = train_step(t, train.samples, bank, teacher, model, cfg, schedule)
        del train
        teacher = freeze(model)
        ckpt = os.path.join(out_dir, f"step{t}.segc")
        save_checkpoint(model, ckpt)
        write_trace(os.path.join(out_dir, f"trace_step{t}.csv"), trace)
        res.models.append(teacher)
        res.traces.extend(trace)
        res.checkpoints.append(ckpt)
    access_log.step = None
    bank_save(bank, os.path.join(out_dir, "styles.styb"))
    res.bank = bank
    return res


def ensure_train_split(data_dir, schedule, domains, t, n_train, seed, h, w):
    path = os.path.join(data_dir, f"step{t}", "train")
    if not os.path.exists(os.path.join(path, "manifest.json")):
        class_set = schedule.new_classes(t)
        seeds = D.train_seeds(seed, t, n_train)
        ds = D.Dataset(D.make_split(domains[t], seeds, class_set, h, w),
                       D.manifest_dict(t, domains[t].name, class_set, seeds, [], h, w))
        D.write_dataset(path, ds)
    return path


def exemplar_violations(access_log, train_dirs):
    """Reads of a step-k training file while a different step was active."""
    bad = []
    for step, path in access_log.records:
        for k, d in enumerate(train_dirs):
            if os.path.commonpath([os.path.abspath(path), os.path.abspath(d)]) == os.path.abspath(d):
                if step != k:
                    bad.append((step, path))
    return bad
