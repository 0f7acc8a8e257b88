"""Training with pre-trained-model supervision and regularization.

The objective is a weighted sum of a task loss, optional distillation
terms against a frozen teacher (KL on softened predictions, NCM-teacher
logits, hidden-state matching, flow matrices, relational structure), and
weight/feature regularizers (L2, anchor-to-start, spectral norm, batch
spectral shrinkage).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt_mod
from . import tensor as T
from .architect import AdaptedModel
from .errors import (
    BatchMismatch,
    ConfigError,
    DegenerateBatch,
    EmptyClass,
    KOutOfRange,
    LabelOutOfRange,
    MissingHook,
    NonFiniteLoss,
    NotAMatrix,
    RefMismatch,
    ShapeMismatch,
    WidthMismatch,
)
from .linalg import spectral_norm
from .models import ParamStore, forward, spec_digest
from .tensor import Tensor

# -- loss terms ---------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.min(initial=0) < 0 or (labels.size and labels.max() >= c):
        raise LabelOutOfRange(f"labels must be in [0,{c})")
    logp = T.log_softmax(logits)
    picked = logp[(np.arange(n), labels)]
    return -picked.mean()


def kd_kl(student_logits: Tensor, teacher_logits, temperature=1.0) -> Tensor:
    """T^2-scaled mean KL between softened teacher and student rows."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if student_logits.shape != t.shape:
        raise ShapeMismatch(f"{student_logits.shape} vs {t.shape}")
    zt = t / temperature
    zt = zt - zt.max(axis=-1, keepdims=True)
    pt = np.exp(zt)
    pt /= pt.sum(axis=-1, keepdims=True)
    log_pt = np.log(np.maximum(pt, 1e-300))
    log_ps = T.log_softmax(student_logits, temperature)
    n = student_logits.shape[0]
    ent = float((pt * log_pt).sum()) / n
    cross = (Tensor(pt) * log_ps).sum().scale(1.0 / n)
    kl = cross.scale(-1.0) + ent
    return kl.scale(temperature**2)


def fit_class_means(features, labels, n_classes):
    """Per-class feature means; raises EmptyClass for unseen classes."""
    feats = features.data if isinstance(features, Tensor) else np.asarray(features)
    labels = np.asarray(labels)
    means = np.zeros((n_classes, feats.shape[1]))
    for c in range(n_classes):
        mask = labels == c
        if not mask.any():
            raise EmptyClass(f"class {c} has no samples")
        means[c] = feats[mask].mean(axis=0)
    return means


def ncm_teacher_logits(teacher_features, class_means, tau=1.0) -> Tensor:
    """Negative squared distance to class means, scaled by 1/tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    f = teacher_features.data if isinstance(teacher_features, Tensor) else np.asarray(teacher_features)
    mu = class_means.data if isinstance(class_means, Tensor) else np.asarray(class_means)
    d2 = ((f[:, None, :] - mu[None, :, :]) ** 2).sum(axis=-1)
    return Tensor(-d2 / tau)


def _flatten_feature(t: Tensor) -> Tensor:
    if t.ndim == 2:
        return t
    return t.reshape(-1, t.shape[-1])


def fitnet_loss(student_trace, teacher_trace, pairs, projectors=None) -> Tensor:
    """MSE between paired hidden states, optionally after a learned map.

    ``projectors`` maps a (student hook, teacher hook) pair to a linear
    projection tensor of shape [teacher width, student width]; required
    exactly when widths differ.
    """
    projectors = projectors or {}
    total = None
    for s_hook, t_hook in pairs:
        if s_hook not in student_trace:
            raise MissingHook(f"student hook {s_hook!r} not captured")
        if t_hook not in teacher_trace:
            raise MissingHook(f"teacher hook {t_hook!r} not captured")
        s = _flatten_feature(student_trace[s_hook])
        t = _flatten_feature(teacher_trace[t_hook]).detach()
        proj = projectors.get((s_hook, t_hook))
        if s.shape[-1] != t.shape[-1] and proj is None:
            raise WidthMismatch(
                f"widths {s.shape[-1]} vs {t.shape[-1]} need a projector")
        if proj is not None:
            s = T.matmul(s, proj.T)
        if s.shape != t.shape:
            raise ShapeMismatch(f"{s.shape} vs {t.shape}")
        term = (s - t).square().mean()
        total = term if total is None else total + term
    return total.scale(1.0 / len(pairs))


def _fsp_matrix(a1: Tensor, a2: Tensor) -> Tensor:
    if a1.shape[0] != a2.shape[0]:
        raise BatchMismatch(f"batch {a1.shape[0]} vs {a2.shape[0]}")
    n = a1.shape[0]
    return T.matmul(a1.T, a2).scale(1.0 / n)


def fsp_loss(student_pairs, teacher_pairs) -> Tensor:
    """Frobenius gap between flow matrices of paired layer couples."""
    if len(student_pairs) != len(teacher_pairs):
        raise BatchMismatch("pair count mismatch")
    total = None
    for (s1, s2), (t1, t2) in zip(student_pairs, teacher_pairs):
        gs = _fsp_matrix(_flatten_feature(s1), _flatten_feature(s2))
        gt = _fsp_matrix(_flatten_feature(t1), _flatten_feature(t2)).detach()
        d1, d2 = gs.shape
        if gt.shape != (d1, d2):
            raise ShapeMismatch(f"{gs.shape} vs {gt.shape}")
        term = (gs - gt).square().sum().scale(1.0 / (d1 * d2))
        total = term if total is None else total + term
    return total.scale(1.0 / len(student_pairs))


def _huber(x: Tensor, delta=1.0) -> Tensor:
    a = x.abs()
    small = (a.data <= delta).astype(np.float64)
    quad = x.square().scale(0.5)
    lin = (a - 0.5 * delta).scale(delta)
    return quad * Tensor(small) + lin * Tensor(1.0 - small)


def _pairwise_dist(e: Tensor):
    n = e.shape[0]
    i_idx, j_idx = np.triu_indices(n, 1)
    a = e.reshape(n, 1, e.shape[1]).expand((n, n, e.shape[1]))
    b = e.reshape(1, n, e.shape[1]).expand((n, n, e.shape[1]))
    sq = (a - b).square().sum(axis=-1)
    return sq[(i_idx, j_idx)].sqrt()


def rkd_loss(student_emb: Tensor, teacher_emb, mode="dist", delta=1.0) -> Tensor:
    """Relational distillation over pairwise distances or triplet angles."""
    t = teacher_emb.detach() if isinstance(teacher_emb, Tensor) else Tensor(teacher_emb)
    n = student_emb.shape[0]
    if mode == "dist":
        if n < 2:
            raise BatchMismatch("rkd dist needs n >= 2")
        ds = _pairwise_dist(student_emb)
        dt = _pairwise_dist(t)
        mu_s, mu_t = ds.mean(), dt.mean()
        if mu_s.item() == 0.0 or mu_t.item() == 0.0:
            raise DegenerateBatch("all embeddings coincide")
        return _huber(ds / mu_s - (dt / mu_t).detach(), delta).mean()
    if mode != "angle":
        raise ValueError(f"unknown rkd mode {mode!r}")
    if n < 3:
        raise BatchMismatch("rkd angle needs n >= 3")

    def angles(e):
        d = e.shape[1]
        a = e.reshape(1, n, d).expand((n, n, d))
        b = e.reshape(n, 1, d).expand((n, n, d))
        diff = a - b  # diff[j, i] = e_i - e_j
        sq = diff.square().sum(axis=-1)
        eye = np.eye(n)
        norm = (sq + Tensor(eye)).sqrt()
        unit = diff / norm.reshape(n, n, 1).expand((n, n, d))
        cos = T.matmul(unit, unit.transpose(0, 2, 1))  # [j, i, k]
        j, i, k = np.meshgrid(range(n), range(n), range(n), indexing="ij")
        keep = (i != j) & (k != j) & (i != k)
        return cos[(j[keep], i[keep], k[keep])]

    return _huber(angles(student_emb) - angles(t).detach(), delta).mean()


# -- regularizers -------------------------------------------------------


def weight_reg(trainable, ref=None, kind="l2", exclude=()) -> Tensor:
    """0.5 * sum ||w||^2 (l2) or 0.5 * sum ||w - w0||^2 (l2_sp).

    ``trainable`` is an iterable of (path, Tensor); for l2_sp, paths
    absent from ``ref`` (new parameters, task head) are skipped.
    """
    total = None
    for path, w in trainable:
        if path in exclude:
            continue
        if kind == "l2_sp":
            if ref is None:
                raise RefMismatch("l2_sp needs a reference store")
            if path not in ref:
                continue
            w0 = ref.get(path)
            if w0.shape != w.shape:
                raise RefMismatch(f"{path}: {w.shape} vs ref {w0.shape}")
            term = (w - w0.detach()).square().sum()
        elif kind == "l2":
            term = w.square().sum()
        else:
            raise ValueError(f"unknown weight reg {kind!r}")
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return total.scale(0.5)


def spectral_penalty(trainable, iters=50, seed=0) -> Tensor:
    """Sum of squared largest singular values over 2-D weights.

    Singular vectors are treated as locally constant, so the gradient of
    sigma^2 w.r.t. W is 2 sigma u v^T.
    """
    total = None
    for path, w in trainable:
        if w.ndim != 2:
            raise NotAMatrix(f"{path} has shape {w.shape}")
        sigma, u, v = spectral_norm(w.data, iters=iters, seed=seed)
        outer = 2.0 * sigma * np.outer(u.data, v.data)
        term = T.custom_op([w], np.float64(sigma**2), [lambda g, o=outer: g * o])
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def bss_penalty(features: Tensor, k) -> Tensor:
    """Penalty on the k smallest singular values of the feature matrix."""
    f = _flatten_feature(features)
    n, d = f.shape
    r = min(n, d)
    if not 1 <= k <= r:
        raise KOutOfRange(f"k={k} outside [1,{r}]")
    u, s, vt = np.linalg.svd(f.data, full_matrices=False)
    idx = range(r - k, r)  # lexicographic deterministic choice on ties
    value = float(sum(s[i] ** 2 for i in idx))
    g_mat = np.zeros((n, d))
    for i in idx:
        g_mat += 2.0 * s[i] * np.outer(u[:, i], vt[i, :])
    return T.custom_op([f], np.float64(value), [lambda g: g * g_mat])


# -- specs --------------------------------------------------------------

LOSS_KINDS = ("ce", "kd_kl", "kd_ncm", "fitnet", "fsp", "rkd_dist", "rkd_angle")
REG_KINDS = ("l2", "l2_sp", "spec_norm", "bss")
TEACHER_KINDS = ("kd_kl", "kd_ncm", "fitnet", "fsp", "rkd_dist", "rkd_angle")


@dataclass(frozen=True)
class LossTerm:
    kind: str
    weight: float = 1.0
    hyper: tuple = ()          # sorted (key, value) pairs
    hooks: tuple = ()          # (student hook, teacher hook) pairs

    def h(self, key, default=None):
        return dict(self.hyper).get(key, default)


@dataclass
class LossSpec:
    terms: list = field(default_factory=lambda: [LossTerm("ce")])

    def __post_init__(self):
        for t in self.terms:
            if t.kind not in LOSS_KINDS:
                raise ConfigError(f"unknown loss kind {t.kind!r}")
            if t.weight < 0:
                raise ConfigError(f"negative weight for {t.kind}")

    def needs_teacher(self):
        return any(t.kind in TEACHER_KINDS for t in self.terms)


@dataclass
class RegSpec:
    terms: list = field(default_factory=list)

    def __post_init__(self):
        for t in self.terms:
            if t.kind not in REG_KINDS:
                raise ConfigError(f"unknown reg kind {t.kind!r}")
            if t.weight < 0:
                raise ConfigError(f"negative weight for {t.kind}")


@dataclass
class TrainConfig:
    optimizer: str = "sgd"     # sgd | adamw
    lr: float = 0.1
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    schedule: str = "constant"  # constant | cosine

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")


# -- optimizers ---------------------------------------------------------


class _Sgd:
    def __init__(self, cfg):
        self.cfg = cfg
        self.vel = {}

    def step(self, path, w, g, lr):
        if self.cfg.weight_decay:
            g = g + self.cfg.weight_decay * w
        v = self.vel.get(path, 0.0)
        v = self.cfg.momentum * v + g
        self.vel[path] = v
        return w - lr * v


class _AdamW:
    def __init__(self, cfg):
        self.cfg = cfg
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, path, w, g, lr):
        b1, b2 = self.cfg.betas
        t = self.t.get(path, 0) + 1
        self.t[path] = t
        m = self.m.get(path, 0.0) * b1 + (1 - b1) * g
        v = self.v.get(path, 0.0) * b2 + (1 - b2) * g * g
        self.m[path], self.v[path] = m, v
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        w = w - lr * self.cfg.weight_decay * w
        return w - lr * mhat / (np.sqrt(vhat) + 1e-8)


# -- teacher wrapper ----------------------------------------------------


class Teacher:
    """Frozen (spec, params) pair; forward never touches the tape."""

    def __init__(self, spec, params: ParamStore):
        self.spec = spec
        self.params = ParamStore(
            {p: t.detach() for p, t in params.items()},
            {p: False for p, _ in params.items()},
        )

    def forward(self, x, capture=()):
        return forward(self.spec, self.params, x, capture)


# -- training loop ------------------------------------------------------


def _accuracy(model, x, y, batch=256):
    correct = 0
    for lo in range(0, x.shape[0], batch):
        logits, _ = model.forward(Tensor(x[lo:lo + batch]))
        correct += int((np.argmax(logits.data, axis=1) == y[lo:lo + batch]).sum())
    return correct / max(1, x.shape[0])


def _needed_hooks(loss_spec, side):
    hooks = set()
    for term in loss_spec.terms:
        if term.kind == "kd_kl":
            if side == "teacher":
                hooks.add("logits")
        elif term.kind == "kd_ncm":
            if side == "teacher":
                hooks.add(term.h("hook", "feature"))
        elif term.kind in ("rkd_dist", "rkd_angle"):
            hooks.add(term.h("hook", "feature"))
        elif term.kind == "fitnet":
            for s_hook, t_hook in term.hooks:
                hooks.add(s_hook if side == "student" else t_hook)
        elif term.kind == "fsp":
            # hooks are ((s_lo, s_hi), (t_lo, t_hi)) pairs
            for (s_lo, s_hi), (t_lo, t_hi) in term.hooks:
                if side == "student":
                    hooks |= {s_lo, s_hi}
                else:
                    hooks |= {t_lo, t_hi}
    return hooks


def train(model: AdaptedModel, teacher, data, loss_spec: LossSpec,
          reg_spec: RegSpec, cfg: TrainConfig, ref_params=None,
          reg_new_params=False):
    """Minibatch optimization of the composite objective.

    Returns ``(Checkpoint, history)``; the checkpoint holds the adapted
    model's full parameter set (base plus injected parameters) under the
    base spec digest. History is one dict per epoch.
    """
    if loss_spec.needs_teacher() and teacher is None:
        raise ConfigError("loss spec requires a teacher model")
    if ref_params is None:
        ref_params = ParamStore({p: t.detach() for p, t in model.base.items()})

    rng = np.random.default_rng(cfg.seed)
    opt = _Sgd(cfg) if cfg.optimizer == "sgd" else _AdamW(cfg)
    x_train, y_train = data.split("train")
    x_val, y_val = data.split("val")

    s_hooks = _needed_hooks(loss_spec, "student")
    t_hooks = _needed_hooks(loss_spec, "teacher")
    if any(t.kind == "bss" for t in reg_spec.terms):
        s_hooks.add("feature")

    # fitnet projectors where widths differ, trained jointly
    projectors = {}
    if teacher is not None:
        widths = _probe_widths(model, teacher, x_train[:1], loss_spec)
        for pair, (ws, wt) in widths.items():
            if ws != wt:
                bound = 1.0 / math.sqrt(ws)
                projectors[pair] = Tensor(
                    rng.uniform(-bound, bound, size=(wt, ws)), requires_grad=True)

    ncm_means = {}
    for term in loss_spec.terms:
        if term.kind == "kd_ncm":
            hook = term.h("hook", "feature")
            _, tr = teacher.forward(Tensor(x_train), {hook})
            ncm_means[hook] = fit_class_means(
                _flatten_feature(tr[hook]), y_train, data.n_classes)

    def reg_targets():
        items = [(p, t) for p, t, _ in model.trainable()
                 if reg_new_params or p in model.base.paths()]
        return items

    head_exclude = {p for p in model.base.paths()} - set(ref_params.paths())
    head_exclude |= _head_exclude(model)

    history = []
    n_train = x_train.shape[0]
    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        if cfg.schedule == "cosine":
            lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
        else:
            lr = cfg.lr
        order = rng.permutation(n_train)
        term_sums = {}
        n_batches = 0
        for lo in range(0, n_train, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb = Tensor(x_train[idx])
            yb = y_train[idx]
            logits, s_trace = model.forward(xb, s_hooks)
            t_trace = {}
            t_logits = None
            if teacher is not None and (t_hooks or any(
                    t.kind == "kd_kl" for t in loss_spec.terms)):
                t_logits, t_trace = teacher.forward(xb, t_hooks)

            total = None
            values = {}
            for term in loss_spec.terms:
                val = _eval_loss_term(term, logits, yb, s_trace, t_logits,
                                      t_trace, projectors, ncm_means)
                values[term.kind] = val
                total = val.scale(term.weight) if total is None \
                    else total + val.scale(term.weight)
            for term in reg_spec.terms:
                val = _eval_reg_term(term, reg_targets(), ref_params,
                                     head_exclude, s_trace, logits)
                values[term.kind] = val
                total = val.scale(term.weight) if total is None \
                    else total + val.scale(term.weight)
            for name, val in values.items():
                v = val.item()
                if not np.isfinite(v):
                    raise NonFiniteLoss(name, v)
                term_sums[name] = term_sums.get(name, 0.0) + v
            n_batches += 1

            gmap = T.backward(total)
            for path, w, store in model.trainable():
                g = gmap.get(w.uid)
                if g is None:
                    continue
                garr = g.data
                mask = model.grad_mask(path)
                if mask is not None:
                    garr = garr * mask
                new = opt.step(path, w.data, garr, lr)
                store.set(path, Tensor(new, requires_grad=True))
            for pair, proj in list(projectors.items()):
                g = gmap.get(proj.uid)
                if g is not None:
                    new = opt.step(("proj",) + pair, proj.data, g.data, lr)
                    projectors[pair] = Tensor(new, requires_grad=True)

        entry = {"epoch": epoch}
        entry.update({k: v / n_batches for k, v in sorted(term_sums.items())})
        entry["val_acc"] = _accuracy(model, x_val, y_val)
        entry["wall_ms"] = (time.monotonic() - t0) * 1000.0
        history.append(entry)

    entries = {p: t.data.astype(np.float32) for p, t in model.base.items()}
    for p, t in model.extras.items():
        entries[p] = t.data.astype(np.float32)
    ckpt = ckpt_mod.Checkpoint(model.spec.kind, spec_digest(model.spec),
                               {p: entries[p] for p in sorted(entries)})
    return ckpt, history


def _head_exclude(model):
    from .architect import _head_paths
    return _head_paths(model.spec)


def _probe_widths(model, teacher, x0, loss_spec):
    """Last-axis widths for every fitnet hook pair (one tiny forward)."""
    out = {}
    pairs = [p for term in loss_spec.terms if term.kind == "fitnet"
             for p in term.hooks]
    if not pairs:
        return out
    _, s_tr = model.forward(Tensor(x0), {s for s, _ in pairs})
    _, t_tr = teacher.forward(Tensor(x0), {t for _, t in pairs})
    for s_hook, t_hook in pairs:
        out[(s_hook, t_hook)] = (s_tr[s_hook].shape[-1], t_tr[t_hook].shape[-1])
    return out


def _eval_loss_term(term, logits, yb, s_trace, t_logits, t_trace,
                    projectors, ncm_means):
    if term.kind == "ce":
        return cross_entropy(logits, yb)
    if term.kind == "kd_kl":
        return kd_kl(logits, t_logits, term.h("T", 1.0))
    if term.kind == "kd_ncm":
        hook = term.h("hook", "feature")
        tl = ncm_teacher_logits(_flatten_feature(t_trace[hook]),
                                ncm_means[hook], term.h("tau", 1.0))
        return kd_kl(logits, tl, term.h("T", 1.0))
    if term.kind == "fitnet":
        return fitnet_loss(s_trace, t_trace, list(term.hooks), projectors)
    if term.kind == "fsp":
        sp = [(s_trace[lo], s_trace[hi]) for (lo, hi), _ in term.hooks]
        tp = [(t_trace[lo], t_trace[hi]) for _, (lo, hi) in term.hooks]
        return fsp_loss(sp, tp)
    if term.kind in ("rkd_dist", "rkd_angle"):
        hook = term.h("hook", "feature")
        mode = "dist" if term.kind == "rkd_dist" else "angle"
        return rkd_loss(_flatten_feature(s_trace[hook]),
                        _flatten_feature(t_trace[hook]), mode)
    raise ConfigError(f"unknown loss kind {term.kind!r}")


def _eval_reg_term(term, targets, ref_params, head_exclude, s_trace, logits):
    if term.kind == "l2":
        return weight_reg(targets, kind="l2")
    if term.kind == "l2_sp":
        return weight_reg(targets, ref=ref_params, kind="l2_sp",
                          exclude=head_exclude)
    if term.kind == "spec_norm":
        mats = [(p, w) for p, w in targets if w.ndim == 2]
        return spectral_penalty(mats, iters=int(term.h("iters", 20)))
    if term.kind == "bss":
        feat = s_trace.get("feature")
        if feat is None:
            raise MissingHook("bss needs the 'feature' hook")
        return bss_penalty(feat, int(term.h("k", 1)))
    raise ConfigError(f"unknown reg kind {term.kind!r}")
