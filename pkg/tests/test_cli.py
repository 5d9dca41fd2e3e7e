import csv
import io as _io
import json

import numpy as np
import pytest

from builders import cylinder_tree
from cadseq import cli, io
from cadseq.core import serialize_tree
from cadseq.numerics import checkpoint


@pytest.fixture
def tree_file(tmp_path):
    p = tmp_path / "tree.json"
    io.save_tree(cylinder_tree(), p)
    return p


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert cli.main(["gen-data", "--n", "6", "--min-len", "20", "--max-len", "40", "--n-ts", "48",
                     "--seed", "2", "--out", str(d)]) == 0
    return d


def test_tokenize_detokenize_roundtrip(tree_file, tmp_path):
    seq = tmp_path / "seq.json"
    back = tmp_path / "back.json"
    assert cli.main(["tokenize", str(tree_file), "--out", str(seq)]) == 0
    assert cli.main(["detokenize", str(seq), "--out", str(back)]) == 0
    assert back.read_bytes() == tree_file.read_bytes()
    binary = tmp_path / "seq.gfc"
    assert cli.main(["tokenize", str(tree_file), "--binary", "--out", str(binary)]) == 0
    assert io.sequence_from_bytes(binary.read_bytes()) == serialize_tree(cylinder_tree())
    assert cli.main(["detokenize", str(binary), "--out", str(back)]) == 0
    assert back.read_bytes() == tree_file.read_bytes()


def test_validate_and_execute(tree_file, tmp_path, capsys):
    seq = tmp_path / "seq.json"
    cli.main(["tokenize", str(tree_file), "--out", str(seq)])
    assert cli.main(["validate", str(seq)]) == 0
    assert json.loads(capsys.readouterr().out)["ok"] is True
    assert cli.main(["execute", str(tree_file), "--resolution", "32"]) == 0
    assert json.loads(capsys.readouterr().out)["volume"] > 0
    for name in ("v.gfv", "p.obj", "p.f32"):
        assert cli.main(["execute", str(seq), "--resolution", "32", "--points", "64", "--out", str(tmp_path / name)]) == 0
    assert len((tmp_path / "p.obj").read_text().splitlines()) == 64
    assert (tmp_path / "p.f32").stat().st_size == 64 * 3 * 4


def test_exit_codes(tmp_path, tree_file):
    assert cli.main(["tokenize", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    seq = serialize_tree(cylinder_tree())
    d = io.sequence_to_dict(seq)
    d["tokens"][4] = [9, 0]
    bad.write_text(io.canonical_json(d))
    assert cli.main(["detokenize", str(bad)]) == 1
    assert cli.main(["validate", str(bad)]) == 1
    assert cli.main(["gen-data", "--n", "1", "--min-len", "2", "--max-len", "5", "--out", str(tmp_path / "x")]) == 1


def test_stats(corpus_dir, capsys):
    assert cli.main(["stats", str(corpus_dir)]) == 0
    rows = list(csv.reader(_io.StringIO(capsys.readouterr().out)))
    assert rows[0][:3] == ["Dataset", "Total", "Avg. Length"]
    assert rows[1][1] == "6"
    assert abs(sum(float(x) for x in rows[1][3:]) - 100) <= 0.1
    assert rows[-1][1] == "215914"


def test_eval_same_directories(corpus_dir, capsys):
    assert cli.main(["eval", "--gen", str(corpus_dir), "--ref", str(corpus_dir), "--points", "256",
                     "--resolution", "32"]) == 0
    header, row = capsys.readouterr().out.strip().splitlines()
    rec = dict(zip(header.split(","), row.split(",")))
    assert float(rec["COV"]) == 100 and float(rec["MMD_x100"]) == 0 and float(rec["JSD_x100"]) == 0


def test_train_sample_eval(corpus_dir, tmp_path, capsys):
    ck = tmp_path / "model.gft"
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"d_e": 16, "n_blocks": 1, "steps": 3, "batch": 2, "T": 5}))
    assert cli.main(["train", "--data", str(corpus_dir), "--config", str(cfg), "--out", str(ck)]) == 0
    tensors, meta = checkpoint.load(ck)
    assert meta["step"] == 3 and meta["config"]["d_e"] == 16
    log = (tmp_path / "model.gft.log.csv").read_text().splitlines()
    assert len(log) == 4
    assert cli.main(["train", "--data", str(corpus_dir), "--config", str(cfg), "--resume", str(ck),
                     "--steps", "5", "--out", str(ck)]) == 0
    assert checkpoint.load(ck)[1]["step"] == 5
    out = tmp_path / "samples"
    capsys.readouterr()
    assert cli.main(["sample", "--checkpoint", str(ck), "--n", "3", "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["count"] == 3 and len(list(out.glob("0*.json"))) == 3
    assert cli.main(["eval", "--gen", str(out), "--ref", str(corpus_dir), "--resolution", "32",
                     "--points", "128", "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "metrics.csv").exists()


def test_numeric_failure(corpus_dir, tmp_path):
    ck = tmp_path / "model.gft"
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"d_e": 8, "n_blocks": 1, "steps": 1, "batch": 2, "T": 5}))
    assert cli.main(["train", "--data", str(corpus_dir), "--config", str(cfg), "--out", str(ck)]) == 0
    tensors, meta = checkpoint.load(ck)
    tensors["model.proj.weight"] = np.full_like(tensors["model.proj.weight"], np.inf)
    checkpoint.save(ck, tensors, meta)
    assert cli.main(["sample", "--checkpoint", str(ck), "--n", "2", "--out", str(tmp_path / "s")]) == 3


def test_bench_scan(tmp_path):
    out = tmp_path / "bench.csv"
    assert cli.main(["bench-scan", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.read_text().splitlines()))
    assert [int(r["L"]) for r in rows] == [512, 1024, 2048, 4096]
    t = {int(r["L"]): float(r["time_s"]) for r in rows}
    assert t[4096] / t[512] <= 10
    assert all(int(r["tape_peak_bytes"]) >= int(r["peak_bytes"]) > 0 for r in rows)
