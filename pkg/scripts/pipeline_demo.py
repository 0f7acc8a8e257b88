#!/usr/bin/env python3
"""End-to-end command-line pipeline: plan -> train x2 -> merge -> eval.

Exercises the same entry points as the installed `zjkit` command, writing
all artifacts (checkpoints, history, merge report, metrics) under --workdir.
"""

import argparse
import json
import pathlib
import sys

from zjkit.cli import main as zjkit

CFG = """\
model.kind=mlp
model.widths=2,16,3
data.source=blobs(k=3,d=2,n=300,sigma=0.15)
architect.config='(LoRA.adapt|r=4,alpha=8):->(layers[0]){inout}'
tuner.epochs=12
tuner.lr={lr}
tuner.batch_size=16
seed=0
"""


def run(argv):
    print("$ zjkit " + " ".join(argv))
    code = zjkit(argv)
    if code != 0:
        sys.exit(f"command failed with exit code {code}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="/tmp/zjkit_pipeline")
    args = ap.parse_args()
    work = pathlib.Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)

    # same initialization, different learning rates: the classic soup recipe
    ckpts = []
    for i, lr in enumerate(("0.2", "0.05")):
        cfg = work / f"run{i}.cfg"
        # str.format would trip over the {inout} hook braces
        cfg.write_text(CFG.replace("{lr}", lr))
        if i == 0:
            run(["plan", "--config", str(cfg)])
        out = work / f"run{i}"
        run(["train", "--config", str(cfg), "--out", str(out)])
        ckpts.append(str(out / "final.zjk1"))

    merged = work / "merged"
    run(["merge", "--config", str(work / "run0.cfg"), "--out", str(merged),
         "--ckpt", ckpts[0], "--ckpt", ckpts[1]])
    run(["inspect", "--ckpt", str(merged / "merged.zjk1")])

    evo = work / "eval"
    run(["eval", "--config", str(work / "run0.cfg"), "--out", str(evo),
         "--ckpt", str(merged / "merged.zjk1")])
    metrics = json.loads((evo / "metrics.json").read_text())
    print(f"merged-model test accuracy: {metrics['accuracy']:.3f}")


if __name__ == "__main__":
    main()
