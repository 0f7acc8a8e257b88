"""One-line adaptation config language.

Grammar::

    config  := decl ':' chain? ;
    decl    := '(' NAME '.' NAME ('|' kv (',' kv)*)? ')' ;   kv := NAME '=' NUMBER
    chain   := ('->' hook)+ ;
    hook    := '(' path ')' '{' MODE INT? '}' ;
    path    := seg ('.' seg)* ;  seg := NAME ('[' (INT | INT ':' INT | '*') ']')? ;
    MODE    := 'in' | 'out' | 'inout' ;

Index ranges are half-open. Example:
``(LoRA.adapt):->(blocks[0:12].attn.qkv){inout1}``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import ParseError

METHODS = {
    "lora": "lora",
    "adapter": "adapter",
    "prefix": "prefix",
    "bitfit": "bitfit",
    "ssf": "ssf",
    "linearprobe": "linear_probe",
    "linear_probe": "linear_probe",
    "partialk": "partial_k",
    "partial_k": "partial_k",
}

HOOK_FREE_METHODS = {"linear_probe", "partial_k", "bitfit"}

DEFAULT_HYPERPARAMS = {
    "lora": {"r": 4.0, "alpha": 4.0},
    "adapter": {"dim": 8.0},
    "prefix": {"tokens": 2.0},
    "partial_k": {"k": 1.0},
    "bitfit": {},
    "ssf": {},
    "linear_probe": {},
}


@dataclass(frozen=True)
class Hook:
    pattern: str
    mode: str  # in | out | inout
    instance: int | None = None


@dataclass
class AdaptSpec:
    method: str
    action: str
    hyper: dict = field(default_factory=dict)
    hooks: list = field(default_factory=list)

    def hyperparams(self):
        merged = dict(DEFAULT_HYPERPARAMS.get(self.method, {}))
        merged.update(self.hyper)
        return merged


_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUM_RE = re.compile(r"-?\d+(\.\d+)?([eE][-+]?\d+)?")
_INT_RE = re.compile(r"\d+")


class _Parser:
    def __init__(self, text):
        self.text = text
        self.pos = 0

    def fail(self, expected):
        raise ParseError(self.pos, expected if isinstance(expected, set) else {expected})

    def eof(self):
        return self.pos >= len(self.text)

    def peek(self, lit):
        return self.text.startswith(lit, self.pos)

    def expect(self, lit):
        if not self.peek(lit):
            self.fail(repr(lit))
        self.pos += len(lit)

    def regex(self, pattern, what):
        m = pattern.match(self.text, self.pos)
        if not m:
            self.fail(what)
        self.pos = m.end()
        return m.group(0)

    # grammar rules ----------------------------------------------------

    def config(self):
        method_off = self.pos
        method, action, hyper = self.decl()
        self.expect(":")
        hooks = []
        while self.peek("->"):
            self.pos += 2
            hooks.append(self.hook())
        if not self.eof():
            self.fail({"'->'", "end of input"})
        if method not in HOOK_FREE_METHODS and not hooks:
            raise ParseError(
                self.pos, {"'->'"},
                f"method {method!r} requires at least one hook",
            )
        spec = AdaptSpec(method, action, hyper, hooks)
        _validate_hyper(spec, method_off)
        return spec

    def decl(self):
        self.expect("(")
        name_off = self.pos
        raw = self.regex(_NAME_RE, "method name")
        method = METHODS.get(raw.lower())
        if method is None:
            raise ParseError(name_off, set(METHODS), f"unknown method {raw!r}")
        self.expect(".")
        action = self.regex(_NAME_RE, "action name")
        hyper = {}
        if self.peek("|"):
            self.pos += 1
            while True:
                key = self.regex(_NAME_RE, "hyperparameter name")
                self.expect("=")
                hyper[key] = float(self.regex(_NUM_RE, "number"))
                if not self.peek(","):
                    break
                self.pos += 1
        self.expect(")")
        return method, action, hyper

    def hook(self):
        self.expect("(")
        pattern = self.path()
        self.expect(")")
        self.expect("{")
        mode = None
        for cand in ("inout", "in", "out"):
            if self.peek(cand):
                mode = cand
                self.pos += len(cand)
                break
        if mode is None:
            self.fail({"'in'", "'out'", "'inout'"})
        instance = None
        m = _INT_RE.match(self.text, self.pos)
        if m:
            instance = int(m.group(0))
            self.pos = m.end()
        self.expect("}")
        return Hook(pattern, mode, instance)

    def path(self):
        segs = [self.seg()]
        while self.peek("."):
            self.pos += 1
            segs.append(self.seg())
        return ".".join(segs)

    def seg(self):
        name = self.regex(_NAME_RE, "path segment")
        if not self.peek("["):
            return name
        self.pos += 1
        if self.peek("*"):
            self.pos += 1
            self.expect("]")
            return f"{name}[*]"
        lo = self.regex(_INT_RE, "index")
        if self.peek(":"):
            self.pos += 1
            hi = self.regex(_INT_RE, "index")
            self.expect("]")
            return f"{name}[{lo}:{hi}]"
        self.expect("]")
        return f"{name}[{lo}]"


def _validate_hyper(spec: AdaptSpec, offset):
    h = spec.hyperparams()
    checks = {
        "lora": ("r", lambda v: v >= 1),
        "partial_k": ("k", lambda v: v >= 0),
        "prefix": ("tokens", lambda v: v >= 1),
        "adapter": ("dim", lambda v: v >= 1),
    }
    if spec.method in checks:
        key, ok = checks[spec.method]
        if not ok(h[key]):
            raise ParseError(offset, {key}, f"{key}={h[key]} out of range")


def parse_config(text) -> AdaptSpec:
    """Parse a one-line adaptation config into an AdaptSpec."""
    return _Parser(text).config()


_CANON_NAMES = {
    "lora": "LoRA",
    "adapter": "Adapter",
    "prefix": "Prefix",
    "bitfit": "BitFit",
    "ssf": "SSF",
    "linear_probe": "LinearProbe",
    "partial_k": "PartialK",
}


def _fmt_num(v):
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def serialize(spec: AdaptSpec) -> str:
    """Canonical string form; parse(serialize(parse(s))) == parse(s)."""
    out = f"({_CANON_NAMES[spec.method]}.{spec.action}"
    if spec.hyper:
        kv = ",".join(f"{k}={_fmt_num(v)}" for k, v in sorted(spec.hyper.items()))
        out += f"|{kv}"
    out += "):"
    for h in spec.hooks:
        inst = "" if h.instance is None else str(h.instance)
        out += f"->({h.pattern}){{{h.mode}{inst}}}"
    return out
