"""Compile adaptation configs into plans and apply them to models.

A plan is the bridge between the config language and a concrete model:
it lists parameter injections (LoRA factors, adapters, prefix tokens,
scale/shift vectors), the freeze mask over original paths, and any
per-element gradient masks (BitFit's query-bias rows). LoRA and SSF
plans can be folded back into plain weights via :func:`merge_reparam`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt_mod
from . import tensor as T
from .dsl import AdaptSpec
from .errors import (
    IncompatibleSite,
    NoMatchingSite,
    NotMergeable,
    PlanMismatch,
)
from .models import ParamStore, match_prefixes, param_shapes
from .tensor import Tensor


@dataclass(frozen=True)
class Injection:
    site: str          # concrete module prefix, e.g. blocks[0].attn.qkv
    kind: str          # lora | adapter | prefix | ssf
    mode: str          # in | out | inout
    instance: int      # adapter-instance index; shared index = shared weights
    params: tuple      # ((new path, shape), ...)


@dataclass
class AdaptationPlan:
    method: str
    hyper: dict
    model_canonical: str
    injections: list = field(default_factory=list)
    freeze: set = field(default_factory=set)
    trainable_original: set = field(default_factory=set)
    new_trainable: set = field(default_factory=set)
    grad_masks: dict = field(default_factory=dict)  # path -> np mask


def _head_paths(spec):
    if spec.kind == "mlp":
        last = spec.n_layers - 1
        return {f"layers[{last}].weight", f"layers[{last}].bias"}
    return {"head.weight", "head.bias"}


def _linear_sites(shapes):
    return {p[: -len(".weight")] for p in shapes
            if p.endswith(".weight") and len(shapes[p]) == 2}


def _resolve_sites(adapt, shapes, valid_sites, site_word):
    """Expand hook patterns to concrete sites; (site, hook) pairs in order."""
    out = []
    for hook in adapt.hooks:
        matches = match_prefixes(sorted(shapes), hook.pattern)
        if not matches:
            raise NoMatchingSite(f"pattern {hook.pattern!r} matched nothing")
        for site in matches:
            if site not in valid_sites:
                raise IncompatibleSite(
                    f"{adapt.method} needs a {site_word}, got {site!r}"
                )
            out.append((site, hook))
    return out


def compile_plan(adapt: AdaptSpec, model_spec) -> AdaptationPlan:
    """Turn a parsed config into an executable plan for one model spec."""
    shapes = param_shapes(model_spec)
    all_paths = set(shapes)
    head = _head_paths(model_spec)
    hyper = adapt.hyperparams()
    plan = AdaptationPlan(adapt.method, hyper, model_spec.canonical())

    def freeze_all_but(trainable):
        plan.trainable_original = set(trainable) & all_paths
        plan.freeze = all_paths - plan.trainable_original

    if adapt.method == "linear_probe":
        freeze_all_but(head)
        return plan

    if adapt.method == "partial_k":
        k = int(hyper["k"])
        trainable = set(head)
        if model_spec.kind == "mlp":
            n = model_spec.n_layers
            for i in range(max(0, n - k), n):
                trainable |= {f"layers[{i}].weight", f"layers[{i}].bias"}
        else:
            b = model_spec.blocks
            for i in range(max(0, b - k), b):
                trainable |= {p for p in all_paths if p.startswith(f"blocks[{i}].")}
            if k > 0:
                trainable |= {"norm.gamma", "norm.beta"}
            if k >= b:
                trainable = set(all_paths)
        freeze_all_but(trainable)
        return plan

    if adapt.method == "bitfit":
        if model_spec.kind == "mlp":
            trainable = {p for p in all_paths if p.endswith(".bias")} | head
        else:
            trainable = set(head)
            d = model_spec.dim
            for i in range(model_spec.blocks):
                qb = f"blocks[{i}].attn.qkv.bias"
                trainable.add(qb)
                mask = np.zeros(shapes[qb])
                mask[:d] = 1.0  # query rows of the fused qkv bias
                plan.grad_masks[qb] = mask
                trainable.add(f"blocks[{i}].mlp.fc1.bias")
        freeze_all_but(trainable)
        return plan

    # injection methods ------------------------------------------------
    explicit = [h.instance for h in adapt.hooks if h.instance is not None]
    next_auto = [max(explicit) + 1 if explicit else 0]
    seen_instances = {}

    def instance_for(hook, params_of):
        if hook.instance is not None:
            idx = hook.instance
        else:
            idx = next_auto[0]
            next_auto[0] += 1
        key = (adapt.method, idx)
        params = params_of(idx)
        if key in seen_instances:
            if seen_instances[key] != params:
                raise IncompatibleSite(
                    f"shared instance {idx} used at sites with different shapes"
                )
        else:
            seen_instances[key] = params
        return idx, params

    if adapt.method in ("lora", "ssf"):
        sites = _resolve_sites(adapt, shapes, _linear_sites(shapes), "weight matrix")
        for site, hook in sites:
            m, n = shapes[f"{site}.weight"]
            if adapt.method == "lora":
                r = int(hyper["r"])
                idx, params = instance_for(hook, lambda i: (
                    (f"lora[{i}].a", (r, n)), (f"lora[{i}].b", (m, r))))
            else:
                idx, params = instance_for(hook, lambda i: (
                    (f"ssf[{i}].gamma", (m,)), (f"ssf[{i}].beta", (m,))))
            plan.injections.append(
                Injection(site, adapt.method, hook.mode, idx, params))
    elif adapt.method == "adapter":
        if model_spec.kind == "mlp":
            valid = {f"layers[{i}]" for i in range(model_spec.n_layers - 1)}
            width = {s: shapes[f"{s}.weight"][0] for s in valid}
        else:
            valid = {f"blocks[{i}]" for i in range(model_spec.blocks)}
            width = {s: model_spec.dim for s in valid}
        sites = _resolve_sites(adapt, shapes, valid, "block position")
        b = int(hyper["dim"])
        for site, hook in sites:
            d = width[site]
            idx, params = instance_for(hook, lambda i: (
                (f"adapter[{i}].down.weight", (b, d)),
                (f"adapter[{i}].down.bias", (b,)),
                (f"adapter[{i}].up.weight", (d, b)),
                (f"adapter[{i}].up.bias", (d,))))
            plan.injections.append(Injection(site, "adapter", hook.mode, idx, params))
    elif adapt.method == "prefix":
        if model_spec.kind != "vit" and model_spec.kind != "mini_vit":
            raise IncompatibleSite("prefix tuning requires a mini_vit model")
        valid = {f"blocks[{i}]" for i in range(model_spec.blocks)}
        sites = _resolve_sites(adapt, shapes, valid, "block")
        t = int(hyper["tokens"])
        d = model_spec.dim
        for site, hook in sites:
            idx, params = instance_for(hook, lambda i: (
                (f"prefix[{i}].key", (t, d)), (f"prefix[{i}].value", (t, d))))
            plan.injections.append(Injection(site, "prefix", hook.mode, idx, params))
    else:
        raise PlanMismatch(f"unknown method {adapt.method}")

    plan.trainable_original = head & all_paths
    plan.freeze = all_paths - plan.trainable_original
    plan.new_trainable = {p for inj in plan.injections for p, _ in inj.params}
    return plan


# -- applying plans -----------------------------------------------------


def _init_extras(plan: AdaptationPlan, seed) -> ParamStore:
    rng = np.random.default_rng(seed)
    extras = ParamStore()
    done = set()
    for inj in plan.injections:
        for path, shape in inj.params:
            if path in done:
                continue
            done.add(path)
            leaf = path.rsplit(".", 1)[-1]
            if leaf in ("b", "bias") or path.endswith(".up.weight") \
                    or leaf == "beta" or path.startswith("lora") and leaf == "b":
                data = np.zeros(shape)
            elif leaf == "gamma":
                data = np.ones(shape)
            else:
                bound = 1.0 / math.sqrt(shape[-1])
                data = rng.uniform(-bound, bound, size=shape)
            extras.set(path, Tensor(data, requires_grad=True))
    return extras


def _linmap(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T over the last axis for 2-D or 3-D x."""
    if x.ndim == 3:
        n, s, din = x.shape
        return _linmap(x.reshape(n * s, din), w).reshape(n, s, w.shape[0])
    return T.matmul(x, w.T)


class _Router:
    """Routes forward-pass sites through the plan's injections."""

    def __init__(self, adapted):
        self.adapted = adapted
        self.by_site = {}
        for inj in adapted.plan.injections:
            self.by_site.setdefault(inj.site, []).append(inj)

    def linear_out(self, site, x, y):
        for inj in self.by_site.get(site, ()):
            e = self.adapted.extras
            if inj.kind == "lora":
                a = e.get(f"lora[{inj.instance}].a")
                b = e.get(f"lora[{inj.instance}].b")
                s = self.adapted.plan.hyper["alpha"] / self.adapted.plan.hyper["r"]
                y = y + _linmap(_linmap(x, a), b).scale(s)
            elif inj.kind == "ssf":
                gamma = e.get(f"ssf[{inj.instance}].gamma")
                beta = e.get(f"ssf[{inj.instance}].beta")
                y = y * gamma.expand(y.shape) + beta.expand(y.shape)
        return y

    def post_mlp(self, site, h):
        for inj in self.by_site.get(site, ()):
            if inj.kind != "adapter":
                continue
            e = self.adapted.extras
            pre = f"adapter[{inj.instance}]"
            dw, db = e.get(f"{pre}.down.weight"), e.get(f"{pre}.down.bias")
            uw, ub = e.get(f"{pre}.up.weight"), e.get(f"{pre}.up.bias")
            mid = (_linmap(h, dw) + db.expand(h.shape[:-1] + (dw.shape[0],))).gelu()
            h = h + _linmap(mid, uw) + ub.expand(h.shape)
        return h

    def kv_prefix(self, site):
        for inj in self.by_site.get(site, ()):
            if inj.kind == "prefix":
                e = self.adapted.extras
                return (e.get(f"prefix[{inj.instance}].key"),
                        e.get(f"prefix[{inj.instance}].value"))
        return None


class AdaptedModel:
    """A base model plus applied plan; forward-capable composite."""

    def __init__(self, spec, base: ParamStore, plan: AdaptationPlan, extras):
        self.spec = spec
        self.base = base
        self.plan = plan
        self.extras = extras
        self._router = _Router(self)

    def forward(self, x, capture=()):
        from .models import forward
        return forward(self.spec, self.base, x, capture, adapters=self._router)

    def trainable(self):
        """(path, tensor, store) triples the optimizer may update."""
        out = []
        for p in self.base.trainable_paths():
            out.append((p, self.base.get(p), self.base))
        for p in self.extras.paths():
            out.append((p, self.extras.get(p), self.extras))
        return out

    def grad_mask(self, path):
        return self.plan.grad_masks.get(path)


def apply_plan(spec, params: ParamStore, plan: AdaptationPlan, seed=0) -> AdaptedModel:
    """Wire a compiled plan onto a concrete parameter store."""
    if plan.model_canonical != spec.canonical():
        raise PlanMismatch("plan was compiled against a different model spec")
    base = params.clone()
    from .models import set_trainable
    for p in base.paths():
        base._trainable[p] = False
    for p in plan.trainable_original:
        base._trainable[p] = True
    extras = _init_extras(plan, seed)
    return AdaptedModel(spec, base, plan, extras)


def merge_reparam(adapted: AdaptedModel):
    """Fold mergeable injections back into plain weights.

    Only LoRA and SSF are mergeable; adapter and prefix injections change
    the computation graph and cannot be expressed as plain weights.
    """
    bad = [i.kind for i in adapted.plan.injections if i.kind not in ("lora", "ssf")]
    if bad:
        raise NotMergeable(f"injections of kind {sorted(set(bad))} cannot be merged")
    merged = {p: t.data.copy() for p, t in adapted.base.items()}
    hyper = adapted.plan.hyper
    for inj in adapted.plan.injections:
        w = merged[f"{inj.site}.weight"]
        if inj.kind == "lora":
            a = adapted.extras.get(f"lora[{inj.instance}].a").data
            b = adapted.extras.get(f"lora[{inj.instance}].b").data
            merged[f"{inj.site}.weight"] = w + (hyper["alpha"] / hyper["r"]) * (b @ a)
        else:
            gamma = adapted.extras.get(f"ssf[{inj.instance}].gamma").data
            beta = adapted.extras.get(f"ssf[{inj.instance}].beta").data
            merged[f"{inj.site}.weight"] = gamma[:, None] * w
            merged[f"{inj.site}.bias"] = gamma * merged[f"{inj.site}.bias"] + beta
    from .models import spec_digest
    entries = {p: merged[p].astype(np.float32) for p in sorted(merged)}
    return ckpt_mod.Checkpoint(adapted.spec.kind, spec_digest(adapted.spec), entries)


def plan_table(plan: AdaptationPlan, shapes=None):
    """Human-readable table of injections and trainable counts."""
    lines = [f"method: {plan.method}"]
    if plan.injections:
        lines.append(f"{'site':<28} {'kind':<8} {'mode':<6} new parameters")
        for inj in plan.injections:
            ps = ", ".join(f"{p} {list(s)}" for p, s in inj.params)
            lines.append(f"{inj.site:<28} {inj.kind:<8} {inj.mode:<6} {ps}")
    new_count = 0
    seen = set()
    for inj in plan.injections:
        for p, s in inj.params:
            if p not in seen:
                seen.add(p)
                new_count += int(np.prod(s))
    orig_count = 0
    if shapes is not None:
        orig_count = sum(int(np.prod(shapes[p])) for p in plan.trainable_original)
        frozen = sum(int(np.prod(shapes[p])) for p in plan.freeze)
        lines.append(f"frozen original parameters: {frozen}")
    lines.append(f"trainable original parameters: {orig_count}"
                 if shapes is not None else
                 f"trainable original paths: {len(plan.trainable_original)}")
    lines.append(f"new trainable parameters: {new_count}")
    return "\n".join(lines)
