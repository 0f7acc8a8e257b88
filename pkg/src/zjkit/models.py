"""Model family (MLP and mini transformer) with named parameter paths.

Parameter paths follow ``segment('.'segment)*`` with ``name[index]``
segments, e.g. ``layers[0].weight`` or ``blocks[1].attn.qkv.bias``. The
path set is a pure function of the spec, so two builds of the same spec
enumerate identical paths in identical (lexicographic) order.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import BadPattern, ShapeMismatch, UnknownHook, UnknownPath
from .tensor import Tensor

# -- specs --------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple  # input width, hidden widths..., class count
    activation: str = "relu"

    kind = "mlp"

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"bad widths {self.widths}")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation}")

    @property
    def n_layers(self):
        return len(self.widths) - 1

    @property
    def n_classes(self):
        return self.widths[-1]

    def canonical(self):
        return f"mlp:{','.join(str(w) for w in self.widths)}:{self.activation}"


@dataclass(frozen=True)
class MiniVitSpec:
    dim: int
    blocks: int
    heads: int
    mlp_dim: int
    classes: int
    seq_len: int
    input_dim: int

    kind = "mini_vit"

    def __post_init__(self):
        dims = (self.dim, self.blocks, self.heads, self.mlp_dim,
                self.classes, self.seq_len, self.input_dim)
        if any(d <= 0 for d in dims):
            raise ValueError(f"all dims must be positive: {self}")
        if self.dim % self.heads != 0:
            raise ValueError(f"heads {self.heads} must divide dim {self.dim}")

    @property
    def n_classes(self):
        return self.classes

    def canonical(self):
        return ("mini_vit:d={},B={},heads={},mlp={},classes={},seq={},din={}"
                .format(self.dim, self.blocks, self.heads, self.mlp_dim,
                        self.classes, self.seq_len, self.input_dim))


def spec_digest(spec) -> bytes:
    return hashlib.sha256(spec.canonical().encode()).digest()


def param_shapes(spec):
    """Map parameter path -> shape tuple, in definition order."""
    shapes = {}
    if spec.kind == "mlp":
        for i in range(spec.n_layers):
            fan_out, fan_in = spec.widths[i + 1], spec.widths[i]
            shapes[f"layers[{i}].weight"] = (fan_out, fan_in)
            shapes[f"layers[{i}].bias"] = (fan_out,)
        return shapes
    d = spec.dim
    shapes["patch_embed.weight"] = (d, spec.input_dim)
    shapes["patch_embed.bias"] = (d,)
    shapes["cls_token"] = (d,)
    shapes["pos_embed"] = (spec.seq_len + 1, d)
    for i in range(spec.blocks):
        p = f"blocks[{i}]"
        shapes[f"{p}.norm1.gamma"] = (d,)
        shapes[f"{p}.norm1.beta"] = (d,)
        shapes[f"{p}.attn.qkv.weight"] = (3 * d, d)
        shapes[f"{p}.attn.qkv.bias"] = (3 * d,)
        shapes[f"{p}.attn.proj.weight"] = (d, d)
        shapes[f"{p}.attn.proj.bias"] = (d,)
        shapes[f"{p}.norm2.gamma"] = (d,)
        shapes[f"{p}.norm2.beta"] = (d,)
        shapes[f"{p}.mlp.fc1.weight"] = (spec.mlp_dim, d)
        shapes[f"{p}.mlp.fc1.bias"] = (spec.mlp_dim,)
        shapes[f"{p}.mlp.fc2.weight"] = (d, spec.mlp_dim)
        shapes[f"{p}.mlp.fc2.bias"] = (d,)
    shapes["norm.gamma"] = (d,)
    shapes["norm.beta"] = (d,)
    shapes["head.weight"] = (spec.classes, d)
    shapes["head.bias"] = (spec.classes,)
    return shapes


# -- parameter store ----------------------------------------------------


class ParamStore:
    """Ordered path -> Tensor map plus a per-path trainable mask."""

    def __init__(self, entries=None, trainable=None):
        self._entries = dict(entries or {})
        self._trainable = dict(trainable or {})
        for p in self._entries:
            self._trainable.setdefault(p, True)

    def paths(self):
        return sorted(self._entries)

    def __contains__(self, path):
        return path in self._entries

    def __len__(self):
        return len(self._entries)

    def get(self, path) -> Tensor:
        if path not in self._entries:
            raise UnknownPath(path)
        return self._entries[path]

    def set(self, path, tensor: Tensor):
        old = self._entries.get(path)
        if old is not None and old.shape != tensor.shape:
            raise ShapeMismatch(f"{path}: {old.shape} -> {tensor.shape}")
        self._entries[path] = tensor
        self._trainable.setdefault(path, True)

    def items(self):
        for p in self.paths():
            yield p, self._entries[p]

    def is_trainable(self, path):
        if path not in self._entries:
            raise UnknownPath(path)
        return self._trainable[path]

    def trainable_paths(self):
        return [p for p in self.paths() if self._trainable[p]]

    def clone(self):
        return ParamStore(dict(self._entries), dict(self._trainable))


def _expand_prefix(store: ParamStore, path):
    """Concrete entry paths covered by an exact path or a module prefix."""
    if path in store:
        return [path]
    hits = [p for p in store.paths() if p.startswith(path + ".")]
    return hits


def set_trainable(store: ParamStore, paths, flag):
    if isinstance(paths, str):
        paths = [paths]
    for path in paths:
        hits = _expand_prefix(store, path)
        if not hits:
            raise UnknownPath(path)
        for p in hits:
            store._trainable[p] = bool(flag)


# -- init / build -------------------------------------------------------


def build_model(spec, seed=0, requires_grad=True) -> ParamStore:
    """Fresh ParamStore with seeded uniform(-1/sqrt(fan_in), ..) weights."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for path, shape in param_shapes(spec).items():
        leaf = path.rsplit(".", 1)[-1]
        if leaf in ("bias", "beta"):
            data = np.zeros(shape)
        elif leaf == "gamma":
            data = np.ones(shape)
        else:
            fan_in = shape[-1]
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        store.set(path, Tensor(data, requires_grad=requires_grad))
    return store


# -- path patterns ------------------------------------------------------

_SEG_RE = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)(?:\[([^\]]*)\])?$")


def _parse_pattern(pattern):
    segs = []
    if not pattern:
        raise BadPattern("empty pattern")
    for raw in pattern.split("."):
        m = _SEG_RE.match(raw)
        if not m:
            raise BadPattern(f"bad segment {raw!r} in {pattern!r}")
        name, idx = m.group(1), m.group(2)
        if idx is None:
            segs.append((name, None))
        elif idx == "*":
            segs.append((name, "*"))
        elif ":" in idx:
            lo, hi = idx.split(":", 1)
            try:
                segs.append((name, (int(lo), int(hi))))
            except ValueError:
                raise BadPattern(f"bad range {raw!r}") from None
        else:
            try:
                segs.append((name, int(idx)))
            except ValueError:
                raise BadPattern(f"bad index {raw!r}") from None
    return segs


def _parse_concrete(path):
    segs = []
    for raw in path.split("."):
        m = _SEG_RE.match(raw)
        name, idx = m.group(1), m.group(2)
        segs.append((name, int(idx) if idx is not None else None))
    return segs


def _seg_matches(pat, conc):
    (pname, pidx), (cname, cidx) = pat, conc
    if pname != cname:
        return False
    if pidx is None:
        return cidx is None
    if cidx is None:
        return False
    if pidx == "*":
        return True
    if isinstance(pidx, tuple):
        return pidx[0] <= cidx < pidx[1]  # half-open
    return pidx == cidx


def _render(segs):
    return ".".join(n if i is None else f"{n}[{i}]" for n, i in segs)


def match_prefixes(paths, pattern):
    """Concrete prefixes of the given paths matched by a pattern."""
    pat = _parse_pattern(pattern)
    hits = set()
    for path in paths:
        conc = _parse_concrete(path)
        if len(pat) > len(conc):
            continue
        if all(_seg_matches(p, c) for p, c in zip(pat, conc)):
            hits.add(_render(conc[: len(pat)]))
    return sorted(hits)


def select_paths(store: ParamStore, pattern):
    """Concrete prefixes of stored paths matched by a pattern.

    ``blocks[0:2].attn.qkv`` on a 2-block model yields the two concrete
    module prefixes; a pattern matching nothing yields an empty list.
    """
    return match_prefixes(store.paths(), pattern)


# -- forward ------------------------------------------------------------


def all_hooks(spec):
    hooks = {"feature", "logits"}
    if spec.kind == "mlp":
        for i in range(spec.n_layers):
            hooks |= {f"layers[{i}].input", f"layers[{i}].preact",
                      f"layers[{i}].output"}
    else:
        for i in range(spec.blocks):
            hooks |= {f"blocks[{i}].input", f"blocks[{i}].preact",
                      f"blocks[{i}].output"}
    return hooks


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w.T + b over the last axis; supports 2-D and 3-D inputs."""
    if x.ndim == 3:
        n, s, din = x.shape
        flat = x.reshape(n * s, din)
        out = _affine(flat, w, b)
        return out.reshape(n, s, w.shape[0])
    y = T.matmul(x, w.T)
    return y + b.expand(y.shape)


class _NoAdapters:
    def linear_out(self, site, x, y):
        return y

    def post_mlp(self, site, h):
        return h

    def kv_prefix(self, site):
        return None


def forward(spec, params: ParamStore, x: Tensor, capture=(), adapters=None):
    """Run the model; returns ``(logits, trace)``.

    ``capture`` is a set of hook paths to record; the trace contains
    exactly those hooks and capturing never perturbs the logits.
    ``adapters`` is an injection router used by the architect; the
    default routes everything through unchanged.
    """
    adapters = adapters or _NoAdapters()
    capture = set(capture)
    unknown = capture - all_hooks(spec)
    if unknown:
        raise UnknownHook(", ".join(sorted(unknown)))
    trace = {}

    def hook(name, value):
        if name in capture:
            trace[name] = value

    def lin(site, inp):
        w = params.get(f"{site}.weight")
        b = params.get(f"{site}.bias")
        return adapters.linear_out(site, inp, _affine(inp, w, b))

    if spec.kind == "mlp":
        if x.ndim != 2 or x.shape[1] != spec.widths[0]:
            raise ShapeMismatch(f"mlp input {x.shape}, expected [n,{spec.widths[0]}]")
        h = x
        act = Tensor.relu if spec.activation == "relu" else Tensor.gelu
        feature = x
        for i in range(spec.n_layers):
            hook(f"layers[{i}].input", h)
            pre = lin(f"layers[{i}]", h)
            hook(f"layers[{i}].preact", pre)
            if i < spec.n_layers - 1:
                h = act(pre)
                h = adapters.post_mlp(f"layers[{i}]", h)
                hook(f"layers[{i}].output", h)
                feature = h
            else:
                h = pre
                hook(f"layers[{i}].output", h)
        logits = h
        hook("feature", feature)
        hook("logits", logits)
        return logits, trace

    # mini_vit
    if x.ndim != 3 or x.shape[1] != spec.seq_len or x.shape[2] != spec.input_dim:
        raise ShapeMismatch(
            f"vit input {x.shape}, expected [n,{spec.seq_len},{spec.input_dim}]"
        )
    n = x.shape[0]
    d, nh = spec.dim, spec.heads
    hd = d // nh
    tokens = lin("patch_embed", x)
    cls = params.get("cls_token").reshape(1, 1, d).expand((n, 1, d))
    h = T.concat([cls, tokens], axis=1)
    h = h + params.get("pos_embed").expand(h.shape)
    for i in range(spec.blocks):
        blk = f"blocks[{i}]"
        hook(f"{blk}.input", h)
        s = h.shape[1]
        a_in = T.layernorm(h, params.get(f"{blk}.norm1.gamma"),
                           params.get(f"{blk}.norm1.beta"))
        qkv = lin(f"{blk}.attn.qkv", a_in)  # [n, s, 3d]
        q = qkv[:, :, 0:d].reshape(n, s, nh, hd).transpose(0, 2, 1, 3)
        k = qkv[:, :, d:2 * d].reshape(n, s, nh, hd).transpose(0, 2, 1, 3)
        v = qkv[:, :, 2 * d:3 * d].reshape(n, s, nh, hd).transpose(0, 2, 1, 3)
        pref = adapters.kv_prefix(blk)
        if pref is not None:
            pk, pv = pref  # [t, d] each
            t_len = pk.shape[0]
            pk = pk.reshape(t_len, nh, hd).transpose(1, 0, 2).expand((n, nh, t_len, hd))
            pv = pv.reshape(t_len, nh, hd).transpose(1, 0, 2).expand((n, nh, t_len, hd))
            k = T.concat([pk, k], axis=2)
            v = T.concat([pv, v], axis=2)
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)).scale(1.0 / math.sqrt(hd))
        attn = T.softmax(scores)
        ctx = T.matmul(attn, v)  # [n, nh, s, hd]
        ctx = ctx.transpose(0, 2, 1, 3).reshape(n, s, d)
        h = h + lin(f"{blk}.attn.proj", ctx)
        m_in = T.layernorm(h, params.get(f"{blk}.norm2.gamma"),
                           params.get(f"{blk}.norm2.beta"))
        pre = lin(f"{blk}.mlp.fc1", m_in)
        hook(f"{blk}.preact", pre)
        mid = pre.gelu()
        mlp_out = lin(f"{blk}.mlp.fc2", mid)
        mlp_out = adapters.post_mlp(blk, mlp_out)
        h = h + mlp_out
        hook(f"{blk}.output", h)
    h = T.layernorm(h, params.get("norm.gamma"), params.get("norm.beta"))
    feature = h[:, 0, :]
    logits = lin("head", feature)
    hook("feature", feature)
    hook("logits", logits)
    return logits, trace
