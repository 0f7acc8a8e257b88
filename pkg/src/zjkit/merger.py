"""Fusion of weights, features, and predictions across trained models.

Weight-space mergers (soups, interpolation, Fisher-weighted averaging,
optimal-transport and permutation alignment, preactivation repair)
operate on checkpoints sharing one spec digest; prediction mergers
combine logits, probabilities, or votes; the feature merger is a
nearest-class-mean classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .checkpoint import Checkpoint, to_params
from .errors import (
    AmbiguousAssignment,
    ClassCountMismatch,
    DegenerateUnit,
    EmptyClass,
    EmptyInput,
    NoConvergence,
    NonFiniteCost,
    NotSupportedKind,
    ShapeMismatch,
    SizeMismatch,
    SpecMismatch,
)
from .models import forward
from .tensor import Tensor

EPS_FLOOR = 1e-12


def _check_aligned(checkpoints):
    if not checkpoints:
        raise EmptyInput("need at least one checkpoint")
    first = checkpoints[0]
    for c in checkpoints[1:]:
        if c.digest != first.digest or c.kind != first.kind:
            raise SpecMismatch("checkpoints come from different model specs")
        if set(c.entries) != set(first.entries):
            raise SpecMismatch("checkpoints carry different parameter sets")
        for p, a in first.entries.items():
            if c.entries[p].shape != a.shape:
                raise ShapeMismatch(f"{p}: {a.shape} vs {c.entries[p].shape}")


def _rebuild(template: Checkpoint, entries):
    return Checkpoint(template.kind, template.digest,
                      {p: np.asarray(entries[p], dtype=np.float32)
                       for p in sorted(entries)})


# -- soups and interpolation --------------------------------------------


def uniform_soup(checkpoints) -> Checkpoint:
    """Elementwise arithmetic mean of the input checkpoints."""
    _check_aligned(checkpoints)
    out = {}
    for p in checkpoints[0].entries:
        out[p] = np.mean([c.entries[p].astype(np.float64) for c in checkpoints],
                         axis=0)
    return _rebuild(checkpoints[0], out)


def greedy_soup(checkpoints, val_data, eval_fn):
    """Accuracy-ordered greedy averaging.

    Candidates are tried best-first; one is kept iff the tentative
    average's validation accuracy does not drop below the current
    soup's. Returns ``(soup, ingredients in acceptance order)``.
    """
    _check_aligned(checkpoints)
    scored = sorted(
        enumerate(checkpoints),
        key=lambda iv: (-eval_fn(iv[1], val_data), iv[0]),
    )
    ingredients = [scored[0][0]]
    soup = checkpoints[scored[0][0]]
    soup_acc = eval_fn(soup, val_data)
    for idx, cand in scored[1:]:
        trial = uniform_soup([checkpoints[i] for i in ingredients] + [cand])
        trial_acc = eval_fn(trial, val_data)
        if trial_acc >= soup_acc:
            ingredients.append(idx)
            soup = trial
            soup_acc = trial_acc
    return soup, ingredients


def wise_ft(ptm: Checkpoint, finetuned: Checkpoint, alpha) -> Checkpoint:
    """(1 - alpha) * pre-trained + alpha * fine-tuned, elementwise."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0,1]")
    _check_aligned([ptm, finetuned])
    if alpha == 0.0:
        return ptm.clone()
    if alpha == 1.0:
        return finetuned.clone()
    out = {p: (1.0 - alpha) * ptm.entries[p].astype(np.float64)
           + alpha * finetuned.entries[p].astype(np.float64)
           for p in ptm.entries}
    return _rebuild(ptm, out)


# -- Fisher merging -----------------------------------------------------


@dataclass
class FisherDiag:
    entries: dict = field(default_factory=dict)  # path -> np array >= 0


def fisher_estimate(spec, ckpt: Checkpoint, data, n_samples=64, seed=0,
                    label_mode="sampled") -> FisherDiag:
    """Diagonal Fisher estimate from squared log-likelihood gradients.

    Labels are drawn from the model's own predictive distribution
    (``sampled``, the default) or taken from the data (``true``).
    """
    from . import tensor as T
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    params = to_params(spec, ckpt)
    x_train, y_train = data.split("train")
    rng = np.random.default_rng(seed)
    acc = {p: np.zeros(t.shape) for p, t in params.items()}
    for _ in range(n_samples):
        i = int(rng.integers(0, x_train.shape[0]))
        xi = Tensor(x_train[i:i + 1])
        logits, _ = forward(spec, params, xi)
        probs = np.exp(logits.data - logits.data.max())
        probs = (probs / probs.sum()).reshape(-1)
        if label_mode == "sampled":
            y = int(rng.choice(probs.size, p=probs))
        else:
            y = int(y_train[i])
        logp = T.log_softmax(logits)[(np.array([0]), np.array([y]))].sum()
        gmap = T.backward(logp)
        for p, t in params.items():
            g = gmap.get(t.uid)
            if g is not None:
                acc[p] += g.data**2
    return FisherDiag({p: a / n_samples for p, a in acc.items()})


def fisher_merge(checkpoints, fishers, lams=None, eps_floor=EPS_FLOOR) -> Checkpoint:
    """Precision-weighted average: theta* = sum(l F theta) / sum(l F).

    Elements where every Fisher is zero fall back to the plain
    lambda-weighted average.
    """
    _check_aligned(checkpoints)
    if lams is None:
        lams = [1.0] * len(checkpoints)
    if len(lams) != len(checkpoints) or any(l < 0 for l in lams) or sum(lams) <= 0:
        raise ValueError("need nonnegative lambdas with positive sum")
    if len(fishers) != len(checkpoints):
        raise ShapeMismatch("one Fisher per checkpoint required")
    out = {}
    for p in checkpoints[0].entries:
        num = np.zeros(checkpoints[0].entries[p].shape)
        den = np.zeros_like(num)
        plain = np.zeros_like(num)
        for c, f, l in zip(checkpoints, fishers, lams):
            fe = f.entries[p]
            if fe.shape != num.shape:
                raise ShapeMismatch(f"fisher shape mismatch at {p}")
            theta = c.entries[p].astype(np.float64)
            num += l * fe * theta
            den += l * fe
            plain += l * theta
        plain /= sum(lams)
        merged = num / (den + eps_floor)
        out[p] = np.where(den > 0, merged, plain)
    return _rebuild(checkpoints[0], out)


# -- optimal transport --------------------------------------------------


def sinkhorn(cost, eps, iters, tol=1e-9):
    """Entropic OT plan with uniform marginals, in the log domain."""
    cost = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise NonFiniteCost("cost matrix contains NaN/Inf")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    n, m = cost.shape
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)

    def lse(z, axis):
        zmax = z.max(axis=axis, keepdims=True)
        return (zmax + np.log(np.exp(z - zmax).sum(axis=axis, keepdims=True))).squeeze(axis)

    for _ in range(iters):
        f = eps * (log_a - lse((g[None, :] - cost) / eps, axis=1))
        g = eps * (log_b - lse((f[:, None] - cost) / eps, axis=0))
        plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
        viol = max(np.abs(plan.sum(1) - 1.0 / n).max(),
                   np.abs(plan.sum(0) - 1.0 / m).max())
        if viol < tol:
            break
    if viol > 1e-4:
        raise NoConvergence(f"marginal violation {viol:.2e} after {iters} iters")
    return plan


# -- permutations -------------------------------------------------------


@dataclass
class Permutation:
    """Per-hidden-layer unit reordering: new slot i takes old unit maps[l][i]."""

    maps: list

    def inverse(self):
        return Permutation([np.argsort(m) for m in self.maps])


def _mlp_layers(ckpt: Checkpoint):
    n = 0
    while f"layers[{n}].weight" in ckpt.entries:
        n += 1
    if n == 0:
        raise NotSupportedKind("checkpoint has no layers[i].weight entries")
    return n


def _require_mlp(ckpt: Checkpoint):
    if ckpt.kind != "mlp":
        raise NotSupportedKind(f"operation defined for mlp models, got {ckpt.kind!r}")
    return _mlp_layers(ckpt)


def permute_model(ckpt: Checkpoint, perm: Permutation) -> Checkpoint:
    """Reorder hidden units; the network function is exactly preserved."""
    n_layers = _require_mlp(ckpt)
    if len(perm.maps) != n_layers - 1:
        raise SizeMismatch(f"{len(perm.maps)} maps for {n_layers - 1} hidden layers")
    out = {p: a.astype(np.float64).copy() for p, a in ckpt.entries.items()}
    for l, pmap in enumerate(perm.maps):
        w = out[f"layers[{l}].weight"]
        if pmap.shape != (w.shape[0],) or sorted(pmap) != list(range(w.shape[0])):
            raise SizeMismatch(f"map {l} is not a bijection over {w.shape[0]} units")
        out[f"layers[{l}].weight"] = w[pmap, :]
        out[f"layers[{l}].bias"] = out[f"layers[{l}].bias"][pmap]
        out[f"layers[{l + 1}].weight"] = out[f"layers[{l + 1}].weight"][:, pmap]
    return _rebuild(ckpt, out)


def _match_objective(a, b, maps, n_layers):
    total = 0.0
    prev = None
    for l in range(n_layers):
        wa = a[f"layers[{l}].weight"].astype(np.float64)
        wb = b[f"layers[{l}].weight"].astype(np.float64)
        if prev is not None:
            wb = wb[:, prev]
        if l < n_layers - 1:
            wb = wb[maps[l], :]
            prev = maps[l]
        total += float((wa * wb).sum())
    return total


def weight_match(ckpt_a: Checkpoint, ckpt_b: Checkpoint, max_sweeps=20):
    """Permutation aligning b's hidden units to a by coordinate descent.

    Each hidden layer solves an exact linear assignment with neighbors
    fixed; sweeps repeat until no layer changes. The trace objective is
    nondecreasing per accepted step; ties prefer the identity map.
    Returns ``(Permutation, per-sweep objective values)``.
    """
    _check_aligned([ckpt_a, ckpt_b])
    n_layers = _require_mlp(ckpt_a)
    a = {p: v.astype(np.float64) for p, v in ckpt_a.entries.items()}
    b = {p: v.astype(np.float64) for p, v in ckpt_b.entries.items()}
    maps = [np.arange(a[f"layers[{l}].weight"].shape[0])
            for l in range(n_layers - 1)]
    history = [_match_objective(a, b, maps, n_layers)]
    for _ in range(max_sweeps):
        changed = False
        for l in range(n_layers - 1):
            prev = maps[l - 1] if l > 0 else None
            wa_l = a[f"layers[{l}].weight"]
            wb_l = b[f"layers[{l}].weight"]
            if prev is not None:
                wb_l = wb_l[:, prev]
            # score[i, j]: benefit of placing b-unit j in slot i
            score = wa_l @ wb_l.T
            wa_n = a[f"layers[{l + 1}].weight"]
            wb_n = b[f"layers[{l + 1}].weight"]
            if l + 1 < n_layers - 1:
                wb_n = wb_n[maps[l + 1], :]
            score += wa_n.T @ wb_n
            rows, cols = linear_sum_assignment(-score)
            cand = cols[np.argsort(rows)]
            cur_val = float(score[np.arange(score.shape[0]), maps[l]].sum())
            new_val = float(score[np.arange(score.shape[0]), cand].sum())
            ident_val = float(np.trace(score))
            if ident_val >= new_val - 1e-12:
                cand, new_val = np.arange(score.shape[0]), ident_val
            if new_val > cur_val + 1e-12 and not np.array_equal(cand, maps[l]):
                maps[l] = cand
                changed = True
        history.append(_match_objective(a, b, maps, n_layers))
        if not changed:
            break
    return Permutation(maps), history


def ot_fuse(ckpt_a: Checkpoint, ckpt_b: Checkpoint, eps=0.01, iters=500):
    """Align b's units to a via entropic OT on incoming weights, then average.

    The coupling is hardened by row argmax and must form a bijection.
    Returns ``(fused checkpoint, Permutation)``.
    """
    _check_aligned([ckpt_a, ckpt_b])
    n_layers = _require_mlp(ckpt_a)
    a = {p: v.astype(np.float64) for p, v in ckpt_a.entries.items()}
    b = {p: v.astype(np.float64) for p, v in ckpt_b.entries.items()}
    maps = []
    prev = None
    for l in range(n_layers - 1):
        wa = a[f"layers[{l}].weight"]
        wb = b[f"layers[{l}].weight"]
        if prev is not None:
            wb = wb[:, prev]
        ba = a[f"layers[{l}].bias"]
        bb = b[f"layers[{l}].bias"]
        rows_a = np.concatenate([wa, ba[:, None]], axis=1)
        rows_b = np.concatenate([wb, bb[:, None]], axis=1)
        cost = ((rows_a[:, None, :] - rows_b[None, :, :]) ** 2).sum(axis=-1)
        plan = sinkhorn(cost, eps=eps, iters=iters)
        assign = plan.argmax(axis=1)
        if len(set(assign.tolist())) != assign.size:
            raise AmbiguousAssignment(f"layer {l}: hardened coupling is not a bijection")
        maps.append(assign)
        prev = assign
    perm = Permutation(maps)
    aligned_b = permute_model(ckpt_b, perm)
    return uniform_soup([ckpt_a, aligned_b]), perm


# -- REPAIR -------------------------------------------------------------


def _mlp_preacts(spec, ckpt, x):
    params = to_params(spec, ckpt)
    hooks = {f"layers[{i}].preact" for i in range(spec.n_layers - 1)}
    _, trace = forward(spec, params, Tensor(x), hooks)
    return {h: t.data for h, t in trace.items()}


def repair(interp: Checkpoint, endpoints, spec, calib_x,
           min_std=1e-8, log=None) -> Checkpoint:
    """Per-unit affine correction of an interpolated network.

    Targets are the alpha-weighted endpoint preactivation statistics
    (alpha weights endpoint a). Corrections are folded into the unit's
    weight row and bias, layer by layer, recomputing the corrected
    model's stats as earlier layers change.
    """
    ckpt_a, ckpt_b, alpha = endpoints
    _check_aligned([interp, ckpt_a, ckpt_b])
    if spec.kind != "mlp":
        raise NotSupportedKind("repair is defined for mlp models")
    calib_x = np.asarray(calib_x, dtype=np.float64)
    if calib_x.shape[0] < 16:
        raise ValueError("calibration batch must have >= 16 samples")
    stats_a = _mlp_preacts(spec, ckpt_a, calib_x)
    stats_b = _mlp_preacts(spec, ckpt_b, calib_x)
    out = {p: v.astype(np.float64) for p, v in interp.entries.items()}
    for l in range(spec.n_layers - 1):
        hook = f"layers[{l}].preact"
        cur = _mlp_preacts(spec, _rebuild(interp, out), calib_x)[hook]
        m_t = alpha * stats_a[hook].mean(0) + (1 - alpha) * stats_b[hook].mean(0)
        s_t = alpha * stats_a[hook].std(0) + (1 - alpha) * stats_b[hook].std(0)
        m_c = cur.mean(0)
        s_c = cur.std(0)
        scale = np.ones_like(s_c)
        ok = s_c >= min_std
        scale[ok] = s_t[ok] / s_c[ok]
        if not ok.all() and log is not None:
            log(f"layer {l}: {int((~ok).sum())} degenerate units, shift-only")
        shift = m_t - scale * m_c
        out[f"layers[{l}].weight"] = scale[:, None] * out[f"layers[{l}].weight"]
        out[f"layers[{l}].bias"] = scale * out[f"layers[{l}].bias"] + shift
    return _rebuild(interp, out)


# -- prediction mergers -------------------------------------------------


def combine_logits(logits_list, mode):
    """Fuse per-model logits: mean logits, mean probabilities, or votes."""
    if not logits_list:
        raise EmptyInput("no logits to combine")
    shape = np.asarray(logits_list[0]).shape
    for lg in logits_list:
        if np.asarray(lg).shape != shape:
            raise ClassCountMismatch("models disagree on class count")
    stack = np.stack([np.asarray(lg, dtype=np.float64) for lg in logits_list])
    if mode == "logits":
        return stack.mean(axis=0)
    if mode == "prob":
        z = stack - stack.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        return p.mean(axis=0)
    if mode == "vote":
        preds = stack.argmax(axis=-1)  # [models, n]
        n_class = shape[-1]
        counts = np.zeros((preds.shape[1], n_class), dtype=int)
        for row in preds:
            counts[np.arange(row.size), row] += 1
        return counts.argmax(axis=1)  # ties: lowest class id
    raise ValueError(f"unknown ensemble mode {mode!r}")


def ensemble(models, x, mode="logits"):
    """Run each model on x and fuse the outputs; returns class predictions."""
    logits_list = []
    for m in models:
        logits, _ = m.forward(x if isinstance(x, Tensor) else Tensor(x))
        logits_list.append(logits.data)
    fused = combine_logits(logits_list, mode)
    if mode == "vote":
        return fused
    return fused.argmax(axis=-1)


# -- nearest class mean -------------------------------------------------


class NcmClassifier:
    """Nearest-class-mean over extracted features."""

    def __init__(self, metric="euclidean"):
        if metric not in ("euclidean", "cosine"):
            raise ValueError(f"unknown metric {metric!r}")
        self.metric = metric
        self.means = None

    def fit(self, features, labels):
        from .tuner import fit_class_means
        labels = np.asarray(labels)
        n_classes = int(labels.max()) + 1
        for c in range(n_classes):
            if not (labels == c).any():
                raise EmptyClass(f"class {c} has no samples")
        self.means = fit_class_means(features, labels, n_classes)
        return self

    def predict(self, features):
        f = features.data if isinstance(features, Tensor) else np.asarray(features)
        if self.metric == "euclidean":
            d = ((f[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=-1)
        else:
            fn = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
            mn = self.means / np.maximum(
                np.linalg.norm(self.means, axis=1, keepdims=True), 1e-12)
            d = 1.0 - fn @ mn.T
        return d.argmin(axis=1)  # argmin ties resolve to lowest class id


# -- report helpers -----------------------------------------------------


def permutation_summary(perm: Permutation):
    out = []
    for pmap in perm.maps:
        seen = np.zeros(pmap.size, dtype=bool)
        cycles = 0
        fixed = int((pmap == np.arange(pmap.size)).sum())
        for i in range(pmap.size):
            if not seen[i]:
                cycles += 1
                j = i
                while not seen[j]:
                    seen[j] = True
                    j = pmap[j]
        out.append({"units": int(pmap.size), "cycles": cycles,
                    "fixed_points": fixed})
    return out


def coupling_entropy(plan):
    p = np.asarray(plan, dtype=np.float64).reshape(-1)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())
