"""Command-line surface: plan, train, merge, eval, inspect.

Runs are driven by a flat ``key=value`` config file whose one-line
adaptation string stays first class. Every command writes its fully
resolved config next to its outputs so a run is reproducible from the
output directory alone.

Exit codes: 0 ok, 2 config-language parse error, 3 config error,
4 spec mismatch, 5 io, 6 numeric failure, 7 dataset error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import architect, checkpoint as ckpt_mod, data as data_mod, dsl, merger, tuner
from .errors import (
    BadMagic,
    ChecksumMismatch,
    ConfigError,
    ConvergenceFailure,
    CorruptCheckpoint,
    IoError,
    LabelMismatch,
    MalformedCsv,
    NoConvergence,
    NonFiniteLoss,
    NonFiniteValue,
    ParseError,
    SpecMismatch,
    ZjError,
)
from .models import MiniVitSpec, MlpSpec, build_model, forward, param_shapes
from .tensor import Tensor

log = logging.getLogger("zjkit")

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_CONFIG = 3
EXIT_SPEC = 4
EXIT_IO = 5
EXIT_NUMERIC = 6
EXIT_DATASET = 7

KNOWN_KEYS = {
    "model.kind", "model.widths", "model.activation",
    "model.dim", "model.blocks", "model.heads", "model.mlp_dim",
    "model.classes", "model.seq_len", "model.input_dim",
    "data.source",
    "architect.config",
    "tuner.loss", "tuner.reg", "tuner.optimizer", "tuner.lr",
    "tuner.momentum", "tuner.weight_decay", "tuner.epochs",
    "tuner.batch_size", "tuner.schedule",
    "teacher.weights",
    "merger.kind", "merger.alpha", "merger.eps", "merger.iters",
    "merger.samples", "merger.sweeps", "merger.ensemble", "merger.lams",
    "pretrained_weights", "seed", "out_dir",
}


# -- config file --------------------------------------------------------


def parse_run_config(text):
    cfg = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
            value = value[1:-1]
        if key not in KNOWN_KEYS:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        if key in cfg:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        cfg[key] = value
    return cfg


def render_config(cfg):
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if any(c in value for c in " #"):
            value = f"'{value}'"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def _model_spec(cfg):
    kind = cfg.get("model.kind")
    if kind == "mlp":
        try:
            widths = tuple(int(w) for w in cfg["model.widths"].split(","))
        except (KeyError, ValueError):
            raise ConfigError("mlp needs model.widths as a comma list") from None
        return MlpSpec(widths, cfg.get("model.activation", "relu"))
    if kind == "mini_vit":
        try:
            return MiniVitSpec(
                dim=int(cfg["model.dim"]), blocks=int(cfg["model.blocks"]),
                heads=int(cfg["model.heads"]), mlp_dim=int(cfg["model.mlp_dim"]),
                classes=int(cfg["model.classes"]), seq_len=int(cfg["model.seq_len"]),
                input_dim=int(cfg["model.input_dim"]))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"incomplete mini_vit spec: {exc}") from None
    raise ConfigError(f"model.kind must be mlp or mini_vit, got {kind!r}")


def _call_spec(text):
    """Parse name(k=v,...) from data.source values."""
    name, _, rest = text.partition("(")
    name = name.strip()
    kwargs = {}
    if rest:
        if not rest.endswith(")"):
            raise ConfigError(f"unbalanced parentheses in {text!r}")
        body = rest[:-1].strip()
        if body:
            for item in body.split(","):
                if "=" not in item:
                    raise ConfigError(f"expected key=value in {text!r}")
                k, v = item.split("=", 1)
                kwargs[k.strip()] = v.strip()
    return name, kwargs


def _load_dataset(cfg, seed):
    source = cfg.get("data.source")
    if not source:
        raise ConfigError("data.source is required")
    name, kw = _call_spec(source)
    num = {k: float(v) for k, v in kw.items()
           if k not in ("images", "labels", "path")}
    num.setdefault("seed", seed)
    ikw = {k: int(v) for k, v in num.items() if k not in ("sigma", "noise", "delta")}
    fkw = {k: v for k, v in num.items() if k in ("sigma", "noise", "delta")}
    if name == "blobs":
        return data_mod.blobs(**ikw, **fkw)
    if name == "blobs_shifted":
        return data_mod.blobs_shifted(**ikw, **fkw)
    if name == "moons":
        return data_mod.moons(**ikw, **fkw)
    if name == "token_xor":
        return data_mod.token_xor(**ikw, **fkw)
    if name == "idx":
        return data_mod.load_idx(kw["images"], kw["labels"], seed=int(num["seed"]))
    if name == "csv":
        return data_mod.load_csv(kw["path"], int(kw.get("label_col", -1)),
                                 seed=int(num["seed"]))
    raise ConfigError(f"unknown data source {name!r}")


def _parse_terms(text, default=None):
    """name:lambda:key=value;key=value, comma separated."""
    terms = []
    if not text:
        return default or []
    for chunk in text.split(","):
        parts = chunk.strip().split(":")
        kind = parts[0]
        weight = float(parts[1]) if len(parts) > 1 and parts[1] else 1.0
        hyper = {}
        hooks = []
        if len(parts) > 2 and parts[2]:
            for kv in parts[2].split(";"):
                k, _, v = kv.partition("=")
                if k == "pairs":
                    for pair in v.split("+"):
                        s_hook, _, t_hook = pair.partition(">")
                        hooks.append((s_hook, t_hook or s_hook))
                elif k == "hook":
                    hyper[k] = v
                else:
                    hyper[k] = float(v)
        terms.append(tuner.LossTerm(kind, weight, tuple(sorted(hyper.items())),
                                    tuple(hooks)))
    return terms


def _full_finetune_plan(spec):
    plan = architect.AdaptationPlan("finetune", {}, spec.canonical())
    plan.trainable_original = set(param_shapes(spec))
    return plan


def _build_adapted(cfg, spec, params, seed):
    text = cfg.get("architect.config")
    if text:
        adapt = dsl.parse_config(text)
        plan = architect.compile_plan(adapt, spec)
    else:
        plan = _full_finetune_plan(spec)
    return architect.apply_plan(spec, params, plan, seed=seed), plan


def _load_ckpt(path):
    if not os.path.exists(path):
        raise IoError(f"no such file: {path}")
    return ckpt_mod.load_checkpoint(path)


def _model_for_eval(cfg, spec, ckpt, seed):
    """Forward-capable model from a checkpoint, replaying the plan if any."""
    base_paths = set(param_shapes(spec))
    extras = {p for p in ckpt.entries if p not in base_paths}
    base_ckpt = ckpt_mod.Checkpoint(ckpt.kind, ckpt.digest,
                                    {p: a for p, a in ckpt.entries.items()
                                     if p in base_paths})
    params = ckpt_mod.to_params(spec, base_ckpt)
    if not extras and not cfg.get("architect.config"):
        class _Plain:
            def forward(self, x, capture=()):
                return forward(spec, params, x, capture)
        return _Plain()
    adapted, _ = _build_adapted(cfg, spec, params, seed)
    for p in sorted(extras):
        adapted.extras.set(p, Tensor(ckpt.entries[p].astype(np.float64),
                                     requires_grad=True))
    return adapted


def _ckpt_accuracy(spec, ckpt, x, y, cfg=None, seed=0):
    model = _model_for_eval(cfg or {}, spec, ckpt, seed)
    preds = []
    for lo in range(0, x.shape[0], 256):
        logits, _ = model.forward(Tensor(x[lo:lo + 256]))
        preds.append(np.argmax(logits.data, axis=1))
    return float((np.concatenate(preds) == y).mean()) if len(y) else 0.0


# -- commands -----------------------------------------------------------


def _out_dir(cfg, args):
    out = args.out or cfg.get("out_dir") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_resolved(cfg, out):
    with open(os.path.join(out, "resolved.cfg"), "w") as fh:
        fh.write(render_config(cfg))


def cmd_plan(cfg, args):
    spec = _model_spec(cfg)
    text = cfg.get("architect.config")
    if not text:
        raise ConfigError("plan requires architect.config")
    adapt = dsl.parse_config(text)
    plan = architect.compile_plan(adapt, spec)
    print(architect.plan_table(plan, param_shapes(spec)))
    return EXIT_OK


def cmd_train(cfg, args):
    seed = int(cfg.get("seed", 0))
    spec = _model_spec(cfg)
    ds = _load_dataset(cfg, seed)
    pretrained = [p for p in cfg.get("pretrained_weights", "").split(",") if p]
    ref_params = None
    if pretrained:
        params = ckpt_mod.to_params(spec, _load_ckpt(pretrained[0]))
        ref_params = ckpt_mod.to_params(spec, _load_ckpt(pretrained[0]))
    else:
        params = build_model(spec, seed=seed)
    adapted, plan = _build_adapted(cfg, spec, params, seed)

    loss_spec = tuner.LossSpec(_parse_terms(
        cfg.get("tuner.loss"), default=[tuner.LossTerm("ce")]))
    reg_spec = tuner.RegSpec(_parse_terms(cfg.get("tuner.reg")))
    if any(t.kind == "l2_sp" for t in reg_spec.terms) and ref_params is None:
        raise ConfigError("l2_sp requires pretrained_weights")
    teacher = None
    if loss_spec.needs_teacher():
        tw = cfg.get("teacher.weights")
        if not tw:
            raise ConfigError("distillation terms require teacher.weights")
        teacher = tuner.Teacher(spec, ckpt_mod.to_params(spec, _load_ckpt(tw)))
    train_cfg = tuner.TrainConfig(
        optimizer=cfg.get("tuner.optimizer", "sgd"),
        lr=float(cfg.get("tuner.lr", 0.1)),
        momentum=float(cfg.get("tuner.momentum", 0.9)),
        weight_decay=float(cfg.get("tuner.weight_decay", 0.0)),
        epochs=int(cfg.get("tuner.epochs", 10)),
        batch_size=int(cfg.get("tuner.batch_size", 32)),
        seed=seed,
        schedule=cfg.get("tuner.schedule", "constant"),
    )
    ckpt, history = tuner.train(adapted, teacher, ds, loss_spec, reg_spec,
                                train_cfg, ref_params=ref_params)
    out = _out_dir(cfg, args)
    ckpt_mod.save_checkpoint(ckpt, os.path.join(out, "final.zjk1"))
    with open(os.path.join(out, "history.jsonl"), "w") as fh:
        for entry in history:
            row = {k: v for k, v in entry.items() if k != "wall_ms"}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    _write_resolved(cfg, out)
    final = history[-1]
    log.info("trained %d epochs, final val_acc=%.4f", len(history), final["val_acc"])
    print(f"val_acc={final['val_acc']:.4f}")
    return EXIT_OK


def cmd_merge(cfg, args):
    seed = int(cfg.get("seed", 0))
    spec = _model_spec(cfg)
    ckpts = [_load_ckpt(p) for p in args.ckpt]
    if not ckpts:
        raise ConfigError("merge needs at least one --ckpt")
    kind = cfg.get("merger.kind", "uniform_soup")
    report = {"recipe": kind, "ingredients": list(args.ckpt)}
    if kind == "uniform_soup":
        merged = merger.uniform_soup(ckpts)
    elif kind == "greedy_soup":
        ds = _load_dataset(cfg, seed)
        x_val, y_val = ds.split("val")
        merged, order = merger.greedy_soup(
            ckpts, (x_val, y_val),
            lambda c, vd: _ckpt_accuracy(spec, c, vd[0], vd[1], cfg, seed))
        report["accepted"] = [args.ckpt[i] for i in order]
    elif kind == "wise_ft":
        if len(ckpts) != 2:
            raise ConfigError("wise_ft needs exactly two checkpoints (ptm, finetuned)")
        merged = merger.wise_ft(ckpts[0], ckpts[1],
                                float(cfg.get("merger.alpha", 0.5)))
    elif kind == "fisher":
        ds = _load_dataset(cfg, seed)
        n = int(cfg.get("merger.samples", 64))
        fishers = [merger.fisher_estimate(spec, c, ds, n_samples=n, seed=seed + i)
                   for i, c in enumerate(ckpts)]
        lams = None
        if cfg.get("merger.lams"):
            lams = [float(v) for v in cfg["merger.lams"].split(",")]
        merged = merger.fisher_merge(ckpts, fishers, lams)
    elif kind == "ot_fusion":
        if len(ckpts) != 2:
            raise ConfigError("ot_fusion needs exactly two checkpoints")
        merged, perm = merger.ot_fuse(
            ckpts[0], ckpts[1], eps=float(cfg.get("merger.eps", 0.01)),
            iters=int(cfg.get("merger.iters", 500)))
        report["permutation"] = merger.permutation_summary(perm)
    elif kind == "git_rebasin":
        if len(ckpts) != 2:
            raise ConfigError("git_rebasin needs exactly two checkpoints")
        perm, history = merger.weight_match(
            ckpts[0], ckpts[1], max_sweeps=int(cfg.get("merger.sweeps", 20)))
        aligned = merger.permute_model(ckpts[1], perm)
        merged = merger.uniform_soup([ckpts[0], aligned])
        report["permutation"] = merger.permutation_summary(perm)
        report["objective"] = history
    elif kind == "repair":
        if len(ckpts) != 2:
            raise ConfigError("repair needs exactly two endpoint checkpoints")
        alpha = float(cfg.get("merger.alpha", 0.5))
        interp = merger.wise_ft(ckpts[1], ckpts[0], alpha)  # weight alpha on a
        ds = _load_dataset(cfg, seed)
        x_train, _ = ds.split("train")
        merged = merger.repair(interp, (ckpts[0], ckpts[1], alpha), spec,
                               x_train[:256], log=log.info)
    else:
        raise ConfigError(f"unknown merger.kind {kind!r}")
    out = _out_dir(cfg, args)
    ckpt_mod.save_checkpoint(merged, os.path.join(out, "merged.zjk1"))
    with open(os.path.join(out, "merge_report.json"), "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _write_resolved(cfg, out)
    print(f"merged {len(ckpts)} checkpoints with {kind}")
    return EXIT_OK


def cmd_eval(cfg, args):
    seed = int(cfg.get("seed", 0))
    spec = _model_spec(cfg)
    ds = _load_dataset(cfg, seed)
    split = "test"
    x, y = ds.split(split)
    ckpts = [_load_ckpt(p) for p in args.ckpt]
    if not ckpts:
        raise ConfigError("eval needs at least one --ckpt")
    models = [_model_for_eval(cfg, spec, c, seed) for c in ckpts]
    mode = cfg.get("merger.ensemble", "prob")
    all_preds = []
    total_loss = 0.0
    for lo in range(0, x.shape[0], 256):
        xb = Tensor(x[lo:lo + 256])
        logits_list = [m.forward(xb)[0].data for m in models]
        fused = merger.combine_logits(logits_list, "logits")
        total_loss += float(
            tuner.cross_entropy(Tensor(fused), y[lo:lo + 256]).item()
        ) * xb.shape[0]
        if len(models) == 1:
            all_preds.append(np.argmax(logits_list[0], axis=1))
        elif mode == "vote":
            all_preds.append(merger.combine_logits(logits_list, "vote"))
        else:
            all_preds.append(
                np.argmax(merger.combine_logits(logits_list, mode), axis=1))
    preds = np.concatenate(all_preds) if all_preds else np.zeros(0, dtype=int)
    acc = float((preds == y).mean()) if len(y) else 0.0
    per_class = {}
    for c in range(ds.n_classes):
        mask = y == c
        per_class[str(c)] = float((preds[mask] == c).mean()) if mask.any() else None
    metrics = {
        "split": split,
        "accuracy": acc,
        "per_class_accuracy": per_class,
        "mean_loss": total_loss / max(1, len(y)),
        "n_models": len(models),
        "ensemble": mode if len(models) > 1 else None,
    }
    print(json.dumps(metrics, sort_keys=True))
    if args.out or cfg.get("out_dir"):
        out = _out_dir(cfg, args)
        with open(os.path.join(out, "metrics.json"), "w") as fh:
            json.dump(metrics, fh, sort_keys=True, indent=2)
            fh.write("\n")
        _write_resolved(cfg, out)
    if log.isEnabledFor(logging.INFO):
        width = max(len(k) for k in metrics)
        for k in sorted(metrics):
            log.info("%-*s %s", width, k, metrics[k])
    return EXIT_OK


def cmd_inspect(cfg, args):
    for path in args.ckpt:
        ckpt = _load_ckpt(path)
        print(f"{path}: kind={ckpt.kind} digest={ckpt.digest.hex()[:16]}...")
        for p in sorted(ckpt.entries):
            a = ckpt.entries[p]
            norm = float(np.linalg.norm(a.astype(np.float64)))
            print(f"  {p:<32} {str(list(a.shape)):<14} |w|={norm:.6g}")
    return EXIT_OK


# -- entry point --------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="zjkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("plan", "train", "merge", "eval", "inspect"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--ckpt", action="append", default=[])
    return parser


_ERROR_EXIT = (
    (ParseError, EXIT_PARSE),
    (ConfigError, EXIT_CONFIG),
    (SpecMismatch, EXIT_SPEC),
    ((IoError, CorruptCheckpoint, ChecksumMismatch, FileNotFoundError), EXIT_IO),
    ((NonFiniteLoss, NonFiniteValue, ConvergenceFailure, NoConvergence), EXIT_NUMERIC),
    ((BadMagic, LabelMismatch, MalformedCsv), EXIT_DATASET),
)


def main(argv=None):
    level = {"quiet": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("ZJ_LOG", "quiet"),
                                         logging.ERROR)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    cfg = {}
    try:
        if args.config:
            if not os.path.exists(args.config):
                raise IoError(f"no such config: {args.config}")
            with open(args.config) as fh:
                cfg = parse_run_config(fh.read())
        if args.seed is not None:
            cfg["seed"] = str(args.seed)
        if args.command != "inspect" and args.command != "plan" and not args.config:
            raise ConfigError("--config is required")
        handler = {
            "plan": cmd_plan, "train": cmd_train, "merge": cmd_merge,
            "eval": cmd_eval, "inspect": cmd_inspect,
        }[args.command]
        return handler(cfg, args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"offset: {exc.offset}", file=sys.stderr)
        return EXIT_PARSE
    except (ZjError, FileNotFoundError) as exc:
        for classes, code in _ERROR_EXIT:
            if isinstance(exc, classes):
                print(f"error: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
