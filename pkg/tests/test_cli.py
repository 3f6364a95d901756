import json

import pytest

from dvlm.cli import main, read_corpus, resolve_config, UsageError
from dvlm.tasks import default_vocab

TINY = "n_layers=1\nn_heads=2\nd_model=16\nd_ff=32\nd_vision=8\nmax_context=96\nn_train=20\nn_val=5\nL=16\nbatch_size=4\n"


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    (d / "tiny.cfg").write_text(TINY)
    cfg = str(d / "tiny.cfg")
    assert main(["train", "--config", cfg, "--stage", "1", "--steps", "2", "--out", str(d / "s1")]) == 0
    assert main(["train", "--config", cfg, "--stage", "2", "--steps", "3", "--out", str(d / "s2"),
                 "--init-from", str(d / "s1" / "model.ckpt")]) == 0
    return d, cfg


def test_train_outputs(run):
    d, _ = run
    for name in ("model.ckpt", "metrics.csv", "config.txt"):
        assert (d / "s2" / name).exists()
    resolved = (d / "s2" / "config.txt").read_text()
    assert "init_from=" + str(d / "s1" / "model.ckpt") in resolved
    assert "stage=2" in resolved


def test_metrics_deterministic(run, tmp_path):
    d, cfg = run
    assert main(["train", "--config", cfg, "--stage", "1", "--steps", "2", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (d / "s1" / "metrics.csv").read_bytes()


def test_fim_subsample(run, tmp_path):
    d, cfg = run
    assert main(["train", "--config", cfg, "--stage", "fim", "--steps", "1", "--out", str(tmp_path),
                 "--init-from", str(d / "s2" / "model.ckpt")]) == 0
    assert "corpus_records=4\n" in (tmp_path / "config.txt").read_text()


def test_generate_nfe_and_cache(run, capsys, tmp_path):
    d, cfg = run
    ck = str(d / "s2" / "model.ckpt")
    base = ["generate", "--config", cfg, "--checkpoint", ck, "--image", "grid-3-7", "--nfe", "0.5",
            "--schedule", "shift", "--alpha", "0.3333"]
    assert main(base + ["--trace", str(tmp_path / "t.jsonl")]) == 0
    out1 = capsys.readouterr()
    assert "forward_passes=8" in out1.err
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == 8
    assert main(base + ["--no-cache"]) == 0
    assert capsys.readouterr().out == out1.out


def test_infill(run, capsys):
    d, cfg = run
    ck = str(d / "s2" / "model.ckpt")
    assert main(["infill", "--config", cfg, "--checkpoint", ck, "--raw", "red [M] [M] [M] [M] [FIM] row one"]) == 0
    words = capsys.readouterr().out.split()
    assert words[0] == "red" and words[5] == "[FIM]" and "[M]" not in words
    assert main(["infill", "--config", cfg, "--checkpoint", ck, "red circle"]) == 0
    assert capsys.readouterr().out.strip() == "red circle"


def test_sweep_and_cache(run, tmp_path):
    d, cfg = run
    ck = str(d / "s2" / "model.ckpt")
    assert main(["sweep", "--config", cfg, "--checkpoint", ck, "--out", str(tmp_path), "--seeds", "1",
                 "--n-eval", "2", "--json"]) == 0
    lines = [l for l in (tmp_path / "sweep.csv").read_text().splitlines() if not l.startswith("#")]
    assert len(lines) == 1 + 16
    assert len((tmp_path / "sweep.jsonl").read_text().splitlines()) == 16
    assert main(["bench-cache", "--config", cfg, "--checkpoint", ck, "--out", str(tmp_path), "--ratios", "0,1",
                 "--repeats", "1", "--n-eval", "1"]) == 0
    assert (tmp_path / "cache.csv").exists()


def test_corpus_roundtrip(tmp_path):
    assert main(["corpus", "--out", str(tmp_path), "--config", "/dev/null"]) == 0
    vocab = default_vocab()
    ex = read_corpus(tmp_path / "val.tsv", vocab, 32, 24)
    assert len(ex) == 200 and ex[0].img.shape == (24, 24, 3)


def test_multi_round_corpus(tmp_path):
    (tmp_path / "c.tsv").write_text("-\titem one\tw1 w2\titem two\tw3\n")
    ex = read_corpus(tmp_path / "c.tsv", default_vocab(), 8, 24)
    assert ex[0].img is None and ex[0].text in ("w1 w2", "w3")


def test_errors(tmp_path, capsys):
    assert main(["generate", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
    (tmp_path / "bad.cfg").write_text("bogus_key=1\n")
    assert main(["schedule", "--config", str(tmp_path / "bad.cfg")]) == 2
    assert main(["train", "--corpus", str(tmp_path / "none.tsv"), "--out", str(tmp_path)]) == 2
    assert "dvlm:" in capsys.readouterr().err


def test_flags_override_file(tmp_path):
    (tmp_path / "c.cfg").write_text("nfe=0.5\nalpha=3\n")
    cfg = resolve_config(str(tmp_path / "c.cfg"), {"alpha": 0.5})
    assert cfg["nfe"] == "0.5" and cfg["alpha"] == 0.5
    with pytest.raises(UsageError):
        resolve_config(str(tmp_path / "nope.cfg"), {})


def test_schedule_command(capsys):
    assert main(["schedule", "--L", "8", "--nfe", "0.5", "--schedule", "linear"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "0,2,4,6,8"
