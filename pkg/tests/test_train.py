import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import tiny_config
from treetx import numcore as nc
from treetx import train as tr
from treetx.decode import tree_stream
from treetx.errors import CheckpointError, ConfigError, DataExhausted, OversizedExample, ShapeMismatch
from treetx.model import init_params
from treetx.numcore import Tensor
from treetx.treecore import random_tree


def test_lr_examples():
    assert tr.lr(16000, 512, 16000) == pytest.approx(512 ** -0.5 * 16000 ** -0.5, rel=1e-15)
    assert tr.lr(1, 512, 16000) == pytest.approx(512 ** -0.5 * 16000 ** -1.5, rel=1e-15)
    for k in (1, 7, 100, 3999):
        assert tr.lr(2 * k, 512, 16000) == pytest.approx(2 * tr.lr(k, 512, 16000), rel=1e-12)
    with pytest.raises(ValueError):
        tr.lr(0, 512, 100)


def test_lr_peaks_at_warmup():
    w = 400
    vals = [tr.lr(s, 64, w) for s in range(1, 4 * w)]
    assert int(np.argmax(vals)) + 1 == w
    assert all(a > b for a, b in zip(vals[w - 1:], vals[w:]))
    assert w ** -0.5 == pytest.approx(w * w ** -1.5, rel=1e-15)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        tr.TrainConfig(warmup_steps=0)
    with pytest.raises(ConfigError):
        tr.TrainConfig(mode="other")
    cfg = tr.TrainConfig(seed=4)
    assert tr.TrainConfig.from_dict(cfg.to_dict()) == cfg


def _nll(logits, targets):
    z = logits - logits.max(-1, keepdims=True)
    lp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    return -np.take_along_axis(lp, targets[..., None], -1)[..., 0]


def test_unit_weights_give_cross_entropy():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 5, 7))
    targets = rng.integers(0, 7, size=(2, 5))
    loss = tr.edit_weighted_mle(Tensor(logits), targets, np.ones((2, 5)), 0.0)
    assert float(loss.data) == pytest.approx(_nll(logits, targets).mean(), rel=1e-12)


def test_uniform_logits_give_log_v():
    logits = np.zeros((1, 3, 9))
    lam = np.array([[1.0, 3.0, 1.0]])
    loss = tr.edit_weighted_mle(Tensor(logits), np.array([[1, 4, 2]]), lam, 0.0)
    assert float(loss.data) == pytest.approx(math.log(9), rel=1e-12)


def test_two_position_hand_case():
    logits = np.array([[[2.0, 0.0, -1.0], [0.5, 0.5, 1.0]]])
    targets = np.array([[0, 2]])
    lam = np.array([[1.0, 3.0]])
    p0 = math.exp(2) / (math.exp(2) + 1 + math.exp(-1))
    p1 = math.exp(1) / (2 * math.exp(0.5) + math.exp(1))
    expected = -(1 * math.log(p0) + 3 * math.log(p1)) / 4
    got = float(tr.edit_weighted_mle(Tensor(logits), targets, lam, 0.0).data)
    assert got == pytest.approx(expected, rel=1e-12)


def test_label_smoothing_skips_pad():
    logits = np.random.default_rng(1).normal(size=(1, 2, 5))
    targets = np.array([[3, 1]])
    eps, pad = 0.1, 0
    z = logits - logits.max(-1, keepdims=True)
    lp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    q = np.full((1, 2, 5), eps / 4)
    q[..., pad] = 0
    q[0, 0, 3] += 1 - eps
    q[0, 1, 1] += 1 - eps
    expected = -(q * lp).sum() / 2
    got = tr.edit_weighted_mle(Tensor(logits), targets, np.ones((1, 2)), eps, pad)
    assert float(got.data) == pytest.approx(expected, rel=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        tr.edit_weighted_mle(Tensor(np.zeros((1, 3, 4))), np.zeros((1, 2), int), np.ones((1, 3)))


def test_loss_gradient():
    rng = np.random.default_rng(2)
    s = nc.ParamStore(np.float64)
    s.add("z", rng.normal(size=(2, 3, 6)))
    targets = rng.integers(1, 6, size=(2, 3))
    lam = np.array([[1.0, 3.0, 1.0], [3.0, 1.0, 2.0]])
    report = nc.grad_check(lambda: tr.edit_weighted_mle(s["z"], targets, lam, 0.1, 0), s, eps=1e-5)
    assert report["z"].max_rel_error < 1e-6


def test_batch_by_size_examples():
    assert tr.batch_by_size([7, 5, 6], 12) == [[5, 6], [7]]
    assert tr.batch_by_size([3, 1, 2], 100) == [[1, 2, 3]]
    with pytest.raises(OversizedExample):
        tr.batch_by_size([5, 13], 12)


@given(st.lists(st.integers(1, 40), max_size=200), st.integers(40, 300))
def test_batch_by_size_partition(sizes, cap):
    batches = tr.batch_by_size(list(enumerate(sizes)), cap, size=lambda x: x[1])
    flat = [x for b in batches for x in b]
    assert sorted(flat) == sorted(enumerate(sizes))
    assert all(sum(x[1] for x in b) <= cap for b in batches)


def test_batch_by_size_on_tree_pairs(vocab):
    rng = np.random.default_rng(0)
    pairs = [(random_tree(rng, vocab, 20), random_tree(rng, vocab, 20)) for _ in range(1000)]
    from treetx.treecore import linearize
    dfs = [(linearize(a), linearize(b)) for a, b in pairs]
    batches = tr.batch_by_size(dfs, 200)
    assert sum(len(b) for b in batches) == 1000
    assert all(sum(len(a) + len(b) for a, b in batch) <= 200 for batch in batches)


def test_make_examples_weights(vocab):
    from treetx.treecore import parse_sexpr
    bad = parse_sexpr("(P a b)", vocab)
    good = parse_sexpr("(P a c)", vocab)
    (ex,) = tr.make_examples([(bad, good)], vocab, vocab, "tree2tree", 3.0)
    # stream: P a c EOS EOS
    assert ex.lam.tolist() == [1.0, 1.0, 3.0, 1.0, 1.0]
    (lm,) = tr.make_examples([(bad, good)], vocab, vocab, "lm_pretrain")
    assert lm.source is None and lm.lam.tolist() == [1.0] * 5
    (dn,) = tr.make_examples([(bad, good)], vocab, vocab, "denoise_pretrain")
    assert dn.source.tokens == tuple(n.token for n in good.preorder())


def _examples(vocab, n=8, seed=0):
    rng = np.random.default_rng(seed)
    pairs = [(random_tree(rng, vocab, 8), random_tree(rng, vocab, 8)) for _ in range(n)]
    return tr.make_examples(pairs, vocab, vocab)


def test_zero_learning_rate_keeps_parameters(vocab):
    cfg = tiny_config(vocab)
    ex = _examples(vocab)
    params = init_params(cfg, 0)
    before = {k: v.copy() for k, v in params.arrays().items()}
    opt = tr.AdamState.for_params(params)
    batch = tr.Batch.collate(ex, vocab.pad_id, vocab.pad_id)
    tr.train_step(batch, params, opt, tr.TrainConfig(), cfg, 1, np.random.default_rng(0),
                  vocab.pad_id, lr_value=0.0)
    for k, v in params.arrays().items():
        assert np.array_equal(v, before[k])


def test_adam_without_momentum_is_normalized_sgd():
    s = nc.ParamStore(np.float64)
    s.add("w", np.array([1.0, -2.0, 3.0]))
    s["w"].grad = np.array([0.5, -4.0, 1e-3])
    opt = tr.AdamState.for_params(s)
    tr.adam_update(s, opt, 0.1, beta1=0.0, beta2=0.0, eps=1e-9)
    g = np.array([0.5, -4.0, 1e-3])
    expected = np.array([1.0, -2.0, 3.0]) - 0.1 * g / (np.abs(g) + 1e-9)
    assert np.allclose(s["w"].data, expected, rtol=0, atol=1e-15)


def test_adam_bias_correction_first_step():
    s = nc.ParamStore(np.float64)
    s.add("w", np.zeros(2))
    s["w"].grad = np.array([2.0, -0.5])
    opt = tr.AdamState.for_params(s)
    tr.adam_update(s, opt, 0.01)
    # with bias correction the first step has magnitude lr for any gradient scale
    assert np.allclose(s["w"].data, [-0.01, 0.01], atol=1e-10)


def test_loss_decreases_on_tiny_problem(vocab):
    cfg = tiny_config(vocab)
    ex = _examples(vocab, 4)
    trainer = tr.Trainer(cfg, tr.TrainConfig(lr_scale=0.05, warmup_steps=20, batch_words=1000),
                         ex, vocab, vocab)
    losses = [trainer.step() for _ in range(60)]
    assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])


@pytest.mark.parametrize("mode", ["lm_pretrain", "denoise_pretrain"])
def test_pretraining_modes_run(vocab, mode):
    cfg = tiny_config(vocab)
    rng = np.random.default_rng(0)
    pairs = [(random_tree(rng, vocab, 8), random_tree(rng, vocab, 8)) for _ in range(4)]
    ex = tr.make_examples(pairs, vocab, vocab, mode)
    trainer = tr.Trainer(cfg, tr.TrainConfig(mode=mode, warmup_steps=5, batch_words=1000),
                         ex, vocab, vocab)
    assert all(np.isfinite(trainer.step()) for _ in range(3))


def test_denoise_mode_applies_source_word_dropout(vocab, monkeypatch):
    seen = []
    real = nc.word_dropout

    def spy(x, p, rng, training=True):
        seen.append(p)
        return real(x, p, rng, training)

    import treetx.model as m
    monkeypatch.setattr(m.nc, "word_dropout", spy)
    cfg = tiny_config(vocab)
    ex = tr.make_examples([(None, random_tree(np.random.default_rng(0), vocab, 6))],
                          vocab, vocab, "denoise_pretrain")
    trainer = tr.Trainer(cfg, tr.TrainConfig(mode="denoise_pretrain"), ex, vocab, vocab)
    trainer.step()
    assert seen[0] == 0.4


def test_no_examples(vocab):
    with pytest.raises(DataExhausted):
        tr.Trainer(tiny_config(vocab), tr.TrainConfig(), [], vocab, vocab)


def test_checkpoint_roundtrip_and_resume(tmp_path, vocab):
    cfg = tiny_config(vocab, p_drop=0.1, p_des=0.2)
    ex = _examples(vocab, 12)
    tcfg = tr.TrainConfig(warmup_steps=10, batch_words=40, seed=3)
    a = tr.Trainer(cfg, tcfg, ex, vocab, vocab)
    for _ in range(7):
        a.step()
    a.save(tmp_path / "ck")
    expected = [a.step() for _ in range(5)]
    b = tr.Trainer.load(tmp_path / "ck", ex)
    assert [b.step() for _ in range(5)] == expected
    for name, t in a.params.items():
        assert np.array_equal(t.data, b.params[name].data)
    ck = tr.load_checkpoint(tmp_path / "ck")
    assert ck.model_config == cfg and ck.train_config == tcfg
    assert ck.src_vocab == vocab and ck.meta["step"] == "7"


def test_checkpoint_manifest_is_text(tmp_path, vocab):
    cfg = tiny_config(vocab)
    tr.save_checkpoint(tmp_path / "c", cfg, {"x": np.arange(6, dtype=np.float32).reshape(2, 3)}, {})
    manifest = (tmp_path / "c" / "manifest.txt").read_text()
    assert "format_version = 1" in manifest
    assert "tensor\tx\t<f4\t2,3\t0\t24" in manifest
    assert (tmp_path / "c" / "tensors.bin").stat().st_size == 24
    with pytest.raises(CheckpointError):
        tr.load_checkpoint(tmp_path / "missing")


def test_same_seed_same_losses_and_log(tmp_path, vocab):
    cfg = tiny_config(vocab, p_drop=0.1)
    ex = _examples(vocab, 10)
    tcfg = tr.TrainConfig(warmup_steps=10, train_steps=6, batch_words=30, seed=1,
                          checkpoint_every=3)
    runs = []
    for k in range(2):
        t = tr.Trainer(cfg, tcfg, ex, vocab, vocab)
        written = t.run(out_dir=tmp_path / f"r{k}", log_file=tmp_path / f"log{k}.jsonl")
        assert [p.name for p in written] == ["ckpt-0000003", "ckpt-0000006", "ckpt-last"]
        recs = [json.loads(line) for line in (tmp_path / f"log{k}.jsonl").read_text().splitlines()]
        assert set(recs[0]) == {"step", "lr", "loss", "mode", "wall_time"}
        runs.append([r["loss"] for r in recs])
    assert runs[0] == runs[1]


def test_init_from_copies_matching_tensors(vocab):
    cfg = tiny_config(vocab)
    a, b = init_params(cfg, 0), init_params(cfg, 1)
    copied = tr.init_from(a, b)
    assert set(copied) == set(a.names())
    assert np.array_equal(a["out.W"].data, b["out.W"].data)


def test_teacher_forced_accuracy_bounds(vocab):
    cfg = tiny_config(vocab)
    ex = _examples(vocab, 5)
    acc = tr.teacher_forced_accuracy(init_params(cfg), cfg, ex, "tree2tree", 0, 0)
    assert 0.0 <= acc <= 1.0


def test_model_grad_check_small(vocab):
    cfg = tiny_config(vocab, N=1, eps_ls=0.1)
    rep = tr.model_grad_check(cfg, _examples(vocab, 2), vocab.pad_id, n_coords=4)
    assert max(e.max_rel_error for e in rep.values()) < 1e-4
