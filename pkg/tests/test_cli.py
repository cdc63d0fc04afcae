import json

import pytest

from egcm import cli
from egcm.corpus import MASK, corpus_paths


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-corpus", "--out", d / "data", "--sentences", 300, "--seed", 3) == 0
    assert run("train-mlm", "--corpus", d / "data", "--out", d / "mlm.bin", "--epochs", 1, "--d-model", 16,
               "--layers", 1) == 0
    assert run("detect", "--corpus", d / "data", "--mlm", d / "mlm.bin") == 0
    assert run("train", "--corpus", d / "data", "--out", d / "m.egcm", "--epochs", 1, "--dev-limit", 0,
               "--d-model", 16) == 0
    return d


def test_manifests_written(workdir):
    for out in ("mlm.bin", "m.egcm", "data/corpus", "data/test.jsonl.det"):
        manifest = json.loads((workdir / f"{out}.manifest.json").read_text())
        assert {"subcommand", "config", "seed", "inputs", "outputs", "build", "wall_time_s"} <= set(manifest)


def test_correct_emits_no_mask(workdir):
    out = workdir / "pred.jsonl"
    assert run("correct", "--corpus", workdir / "data", "--model", workdir / "m.egcm", "--out", out,
               "--no-gfi", "--iterations", 2) == 0
    for line in out.read_text().splitlines():
        assert MASK not in json.loads(line)["pred"]
    assert run("eval", "--corpus", workdir / "data", "--pred", out, "--out", workdir / "r.json") == 0
    report = json.loads((workdir / "r.json").read_text())
    assert report["zero_shot"]["k"] == 2
    assert report["sentences"] == 30


def test_env_threads(workdir, monkeypatch):
    monkeypatch.setenv("EGCM_THREADS", "2")
    out = workdir / "pred2.jsonl"
    assert run("correct", "--corpus", workdir / "data", "--model", workdir / "m.egcm", "--out", out) == 0
    manifest = json.loads((workdir / "pred2.jsonl.manifest.json").read_text())
    assert manifest["config"]["threads"] is None


def test_config_file_and_flag_precedence(workdir):
    cfg = workdir / "c.json"
    cfg.write_text(json.dumps({"iterations": 3, "mode": "autoregressive"}))
    out = workdir / "pred3.jsonl"
    assert run("--config", cfg, "correct", "--corpus", workdir / "data", "--model", workdir / "m.egcm",
               "--out", out, "--iterations", 4) == 0
    resolved = json.loads((workdir / "pred3.jsonl.manifest.json").read_text())["config"]
    assert resolved["iterations"] == 4 and resolved["mode"] == "autoregressive"


def test_exit_codes(workdir, tmp_path):
    data = workdir / "data"
    assert run("train", "--corpus", data, "--out", tmp_path / "x", "--nonsense") == cli.EXIT_USAGE
    assert run("correct", "--corpus", tmp_path / "nowhere", "--model", workdir / "m.egcm",
               "--out", tmp_path / "o") == cli.EXIT_MISSING
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_option": 1}))
    assert run("--config", bad, "eval", "--corpus", data, "--pred", tmp_path / "p",
               "--out", tmp_path / "o") == cli.EXIT_CONFIG
    bogus = tmp_path / "bogus.egcm"
    bogus.write_bytes(b"JUNK")
    assert run("correct", "--corpus", data, "--model", bogus, "--out", tmp_path / "o") == cli.EXIT_INPUT


def test_stale_cache_exit_code(workdir, tmp_path):
    import shutil

    data = tmp_path / "data"
    shutil.copytree(workdir / "data", data)
    with open(corpus_paths(data)["test"], "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"src": ["t0"], "tgt": ["t0"]}) + "\n")
    assert run("correct", "--corpus", data, "--model", workdir / "m.egcm", "--out", tmp_path / "o") == cli.EXIT_STALE


def test_gen_corpus_same_seed_identical(tmp_path):
    for name in ("a", "b"):
        assert run("gen-corpus", "--out", tmp_path / name, "--seed", 7, "--sentences", 200) == 0
    for f in (tmp_path / "a").iterdir():
        if not f.name.endswith("manifest.json"):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
