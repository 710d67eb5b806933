import json
import re

import pytest

from treetx import cli
from treetx.treecore import Vocabulary

ERROR_LINE = re.compile(r"^error: [A-Za-z]+: .+$")

TINY = """\
# small model for fast runs
N = 1
d_model = 16
d_ff = 32
h = 2
d_k = 8
d_v = 8
p_drop = 0.1
eps_ls = 0.1
lr = 0.1
warmup = 20
train_steps = 6
batch_words = 400
edit_weight = 3.0
mode = tree2tree
seed = 5
beam_width = 3
max_nodes = 30
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--n-train", "60", "--n-test", "8", "--seed", "1",
                     "--out", str(d / "data")]) == 0
    (d / "tiny.conf").write_text(TINY)
    assert cli.main(["train", "--config", str(d / "tiny.conf"), "--data", str(d / "data/train.pairs"),
                     "--vocab", str(d / "data/vocab.txt"), "--out", str(d / "run")]) == 0
    return d


def _err(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1 and ERROR_LINE.match(lines[0]), lines
    return lines[0]


def test_gen_data_outputs(workdir):
    data = workdir / "data"
    vocab = Vocabulary.load(data / "vocab.txt")
    train = (data / "train.pairs").read_text().splitlines()
    test = (data / "test.pairs").read_text().splitlines()
    assert len(train) == 60 and len(test) == 8
    bads = [line.split("\t")[0] for line in train + test]
    assert len(set(bads)) == len(bads)
    assert len(vocab) <= 40


def test_gen_data_is_seeded(tmp_path, workdir):
    assert cli.main(["gen-data", "--n-train", "60", "--n-test", "8", "--seed", "1",
                     "--out", str(tmp_path)]) == 0
    assert (tmp_path / "train.pairs").read_text() == (workdir / "data/train.pairs").read_text()


def test_train_writes_log_and_checkpoints(workdir):
    log = [json.loads(l) for l in (workdir / "run/log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == list(range(1, 7))
    assert set(log[0]) >= {"step", "lr", "loss", "mode", "wall_time"}
    assert (workdir / "run/ckpt-last/manifest.txt").exists()


def test_resume_continues(workdir, tmp_path):
    assert cli.main(["train", "--resume", str(workdir / "run/ckpt-last"), "--data",
                     str(workdir / "data/train.pairs"), "--out", str(tmp_path), "--steps", "2"]) == 0
    log = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [7, 8]


def test_correct_and_eval(workdir, capsys):
    src = workdir / "src.txt"
    src.write_text("\n".join(l.split("\t")[0] for l in (workdir / "data/test.pairs").read_text().splitlines()) + "\n")
    out = workdir / "hyp.txt"
    assert cli.main(["correct", "--checkpoint", str(workdir / "run/ckpt-last"), "--input", str(src),
                     "--output", str(out), "--config", str(workdir / "tiny.conf"), "--nbest", "2"]) == 0
    rows = [l.split("\t") for l in out.read_text().splitlines()]
    assert {r[0] for r in rows} == {str(i) for i in range(8)}
    assert all(r[1] in ("0", "1") for r in rows)
    capsys.readouterr()
    assert cli.main(["eval", "--pairs", str(workdir / "data/test.pairs"), "--hypotheses", str(out),
                     "--vocab", str(workdir / "data/vocab.txt")]) == 0
    report = dict(l.split("\t") for l in capsys.readouterr().out.strip().splitlines())
    assert report["sentences"] == "8"
    assert 0.0 <= float(report["f0.5"]) <= 1.0


def test_correct_greedy(workdir, capsys):
    src = workdir / "one.txt"
    src.write_text("(Func (Params VAR_0) (Body (Return VAR_0)))\n")
    assert cli.main(["correct", "--checkpoint", str(workdir / "run/ckpt-last"), "--input", str(src),
                     "--greedy", "--max-nodes", "20"]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("0\t0\t")


def test_eval_perfect(workdir, capsys):
    hyp = workdir / "gold.txt"
    hyp.write_text("\n".join(l.split("\t")[1] for l in (workdir / "data/test.pairs").read_text().splitlines()) + "\n")
    assert cli.main(["eval", "--pairs", str(workdir / "data/test.pairs"), "--hypotheses", str(hyp),
                     "--vocab", str(workdir / "data/vocab.txt")]) == 0
    report = dict(l.split("\t") for l in capsys.readouterr().out.strip().splitlines())
    assert float(report["exact_match"]) == 1.0 and float(report["f0.5"]) == 1.0


def test_editdist(capsys):
    assert cli.main(["editdist", "(P a (Q b))", "(P a (Q c))"]) == 0
    out = capsys.readouterr().out
    assert re.search(r"distance\D*1\b", out)


def test_grad_check(capsys):
    assert cli.main(["grad-check", "--coords", "4"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[0].startswith("parameter") and out[-1].startswith("max\t")
    assert float(out[-1].split("\t")[1]) < 1e-4


def test_grad_check_failure_exit(capsys):
    assert cli.main(["grad-check", "--coords", "4", "--tol", "0"]) == 1
    assert _err(capsys).startswith("error: GradCheckFailed:")


@pytest.mark.parametrize("text,kind", [
    ("bogus = 1\n", "ConfigError"),
    ("N 2\n", "ConfigError"),
    ("d_model = sixteen\n", "ConfigError"),
])
def test_bad_config(tmp_path, workdir, capsys, text, kind):
    conf = tmp_path / "bad.conf"
    conf.write_text(text)
    code = cli.main(["train", "--config", str(conf), "--data", str(workdir / "data/train.pairs"),
                     "--vocab", str(workdir / "data/vocab.txt"), "--out", str(tmp_path / "o")])
    assert code != 0
    assert _err(capsys).startswith(f"error: {kind}:")


def test_missing_file(capsys, tmp_path):
    assert cli.main(["eval", "--pairs", str(tmp_path / "nope"), "--hypotheses", "x",
                     "--vocab", str(tmp_path / "nope")]) != 0
    _err(capsys)


def test_bad_tree_syntax(capsys):
    assert cli.main(["editdist", "(P a", "(P a)"]) != 0
    _err(capsys)


def test_usage_errors(capsys):
    assert cli.main(["frobnicate"]) == 2
    _err(capsys)
    assert cli.main(["gen-data"]) == 2
    _err(capsys)


def test_bad_ops(capsys, tmp_path):
    assert cli.main(["gen-data", "--ops", "Explode=1", "--out", str(tmp_path)]) != 0
    assert _err(capsys).startswith("error: ConfigError:")


def test_exhausted_grammar(capsys, tmp_path):
    g = tmp_path / "tiny.grammar"
    g.write_text("%start Root\nRoot -> x | y\n")
    assert cli.main(["gen-data", "--grammar", str(g), "--n-train", "5", "--n-test", "0",
                     "--out", str(tmp_path / "d")]) != 0
    _err(capsys)


def test_config_parsing():
    c = cli.parse_config("N = 3\nlr = 0.5  # scale\nmode = lm\nalpha = 0.15\nself_attention = false\n")
    assert c["model"] == {"N": 3, "self_attention": False}
    assert c["train"] == {"lr_scale": 0.5, "mode": "lm"}
    assert c["decode"] == {"alpha": 0.15}
