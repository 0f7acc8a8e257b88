"""CLI: config parsing, commands, exit codes, determinism."""

import json

import numpy as np
import pytest

from zjkit import cli
from zjkit.checkpoint import from_params, save_checkpoint
from zjkit.cli import main, parse_run_config
from zjkit.errors import ConfigError
from zjkit.models import MlpSpec, build_model

BASE_CFG = """\
model.kind=mlp
model.widths=2,8,3
data.source=blobs(k=3,d=2,n=120,sigma=0.1)
architect.config='(LinearProbe.adapt):'
tuner.epochs=3
tuner.lr=0.2
tuner.batch_size=16
seed=0
"""


def _cfg(tmp_path, text=BASE_CFG, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# -- config file ---------------------------------------------------------


def test_parse_run_config_basics():
    cfg = parse_run_config("seed=3\n# comment\n\nmodel.kind=mlp\n")
    assert cfg == {"seed": "3", "model.kind": "mlp"}


def test_parse_run_config_strips_quotes():
    cfg = parse_run_config("architect.config='(BitFit.adapt):'\n")
    assert cfg["architect.config"] == "(BitFit.adapt):"


def test_parse_run_config_rejects_unknown_and_duplicate():
    with pytest.raises(ConfigError):
        parse_run_config("bogus.key=1\n")
    with pytest.raises(ConfigError):
        parse_run_config("seed=1\nseed=2\n")
    with pytest.raises(ConfigError):
        parse_run_config("just a line\n")


def test_parse_terms_fitnet_pairs():
    terms = cli._parse_terms("ce:1,fitnet:0.5:pairs=feature>feature;T=2")
    assert terms[0].kind == "ce"
    assert terms[1].kind == "fitnet"
    assert terms[1].weight == 0.5
    assert terms[1].hooks == (("feature", "feature"),)


# -- plan ----------------------------------------------------------------


def test_plan_prints_table(tmp_path, capsys):
    code = main(["plan", "--config", _cfg(tmp_path)])
    out = capsys.readouterr().out
    assert code == 0
    assert "linear_probe" in out
    assert "trainable original parameters" in out


def test_plan_malformed_dsl_exit_2(tmp_path, capsys):
    cfg = BASE_CFG.replace("(LinearProbe.adapt):", "(LoRA.adapt)->(x){in}")
    code = main(["plan", "--config", _cfg(tmp_path, cfg)])
    err = capsys.readouterr().err
    assert code == 2
    assert "offset: 12" in err


def test_unknown_key_exit_3(tmp_path, capsys):
    code = main(["plan", "--config", _cfg(tmp_path, BASE_CFG + "no.such=1\n")])
    assert code == 3


# -- train ---------------------------------------------------------------


def _train(tmp_path, out_name, cfg_text=BASE_CFG):
    out = tmp_path / out_name
    code = main(["train", "--config", _cfg(tmp_path, cfg_text),
                 "--out", str(out)])
    assert code == 0
    return out


def test_train_writes_outputs(tmp_path, capsys):
    out = _train(tmp_path, "run1")
    assert (out / "final.zjk1").exists()
    assert (out / "history.jsonl").exists()
    assert (out / "resolved.cfg").exists()
    assert "val_acc=" in capsys.readouterr().out
    rows = [json.loads(l) for l in (out / "history.jsonl").read_text().splitlines()]
    assert len(rows) == 3
    assert "wall_ms" not in rows[0]


def test_train_deterministic_bytes(tmp_path):
    o1 = _train(tmp_path, "r1")
    o2 = _train(tmp_path, "r2")
    assert (o1 / "final.zjk1").read_bytes() == (o2 / "final.zjk1").read_bytes()
    assert (o1 / "history.jsonl").read_bytes() == (o2 / "history.jsonl").read_bytes()


def test_kd_without_teacher_exit_3(tmp_path, capsys):
    cfg = BASE_CFG + "tuner.loss=ce:1,kd_kl:0.5\n"
    code = main(["train", "--config", _cfg(tmp_path, cfg),
                 "--out", str(tmp_path / "o")])
    assert code == 3


def test_l2sp_without_pretrained_exit_3(tmp_path):
    cfg = BASE_CFG + "tuner.reg=l2_sp:0.1\n"
    code = main(["train", "--config", _cfg(tmp_path, cfg),
                 "--out", str(tmp_path / "o")])
    assert code == 3


def test_missing_config_file_exit_5(tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.cfg")]) == 5


# -- merge / eval / inspect ----------------------------------------------


def test_merge_duplicates_and_eval(tmp_path, capsys):
    out = _train(tmp_path, "m")
    ck = str(out / "final.zjk1")
    mo = tmp_path / "merged"
    code = main(["merge", "--config", _cfg(tmp_path), "--out", str(mo),
                 "--ckpt", ck, "--ckpt", ck])
    assert code == 0
    assert (mo / "merged.zjk1").exists()
    report = json.loads((mo / "merge_report.json").read_text())
    assert report["recipe"] == "uniform_soup"
    capsys.readouterr()
    code = main(["eval", "--config", _cfg(tmp_path),
                 "--ckpt", str(mo / "merged.zjk1")])
    assert code == 0
    metrics = json.loads(capsys.readouterr().out)
    assert 0.0 <= metrics["accuracy"] <= 1.0
    assert metrics["split"] == "test"


def test_merge_digest_mismatch_exit_4(tmp_path):
    spec_a, spec_b = MlpSpec((2, 8, 3)), MlpSpec((2, 9, 3))
    pa, pb = tmp_path / "a.zjk1", tmp_path / "b.zjk1"
    save_checkpoint(from_params(spec_a, build_model(spec_a)), pa)
    save_checkpoint(from_params(spec_b, build_model(spec_b)), pb)
    code = main(["merge", "--config", _cfg(tmp_path),
                 "--out", str(tmp_path / "o"),
                 "--ckpt", str(pa), "--ckpt", str(pb)])
    assert code == 4


def test_merge_missing_ckpt_exit_5(tmp_path):
    code = main(["merge", "--config", _cfg(tmp_path),
                 "--out", str(tmp_path / "o"),
                 "--ckpt", str(tmp_path / "ghost.zjk1")])
    assert code == 5


def test_malformed_csv_exit_7(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2,0\n1,nope,1\n")
    cfg = BASE_CFG.replace("data.source=blobs(k=3,d=2,n=120,sigma=0.1)",
                           f"data.source=csv(path={bad})")
    code = main(["train", "--config", _cfg(tmp_path, cfg),
                 "--out", str(tmp_path / "o")])
    assert code == 7


def test_eval_writes_metrics_file(tmp_path, capsys):
    out = _train(tmp_path, "e")
    eo = tmp_path / "evalout"
    code = main(["eval", "--config", _cfg(tmp_path), "--out", str(eo),
                 "--ckpt", str(out / "final.zjk1")])
    assert code == 0
    metrics = json.loads((eo / "metrics.json").read_text())
    assert "per_class_accuracy" in metrics


def test_inspect_lists_paths(tmp_path, capsys):
    out = _train(tmp_path, "i")
    code = main(["inspect", "--ckpt", str(out / "final.zjk1")])
    assert code == 0
    text = capsys.readouterr().out
    assert "layers[0].weight" in text
    assert "kind=mlp" in text


def test_wise_ft_endpoint_via_cli(tmp_path):
    out = _train(tmp_path, "w")
    ck = str(out / "final.zjk1")
    mo = tmp_path / "wmerged"
    cfg = BASE_CFG + "merger.kind=wise_ft\nmerger.alpha=1\n"
    code = main(["merge", "--config", _cfg(tmp_path, cfg), "--out", str(mo),
                 "--ckpt", ck, "--ckpt", ck])
    assert code == 0
    from zjkit.checkpoint import load_checkpoint
    a = load_checkpoint(ck)
    b = load_checkpoint(mo / "merged.zjk1")
    for p in a.entries:
        assert np.array_equal(a.entries[p], b.entries[p])
