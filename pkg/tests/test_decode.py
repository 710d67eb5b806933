import math

import numpy as np
import pytest

from conftest import tiny_config
from treetx import decode as dec
from treetx.decode import GenerationState, Limits, advance
from treetx.errors import IllegalToken, LimitExceeded, Terminated
from treetx.model import init_params
from treetx.treecore import TreeNode, Vocabulary, check_dftree, linearize, random_tree, validate_tree

V2 = Vocabulary.build(["P"], ["a"])  # two node tokens: enumerable toy language


def run(vocab, names, limits=Limits()):
    st = GenerationState(vocab, limits)
    for n in names:
        st = advance(st, vocab.id(n))
    return st


def test_state_machine_examples(vocab):
    st = run(vocab, ["P", "a", "<eos>", "<eos>"])
    assert st.terminated and st.tree() == TreeNode(vocab.id("P"), (TreeNode(vocab.id("a")),))
    st = run(vocab, ["P", "<eos>", "<eos>"])
    assert st.tree() == TreeNode(vocab.id("P"))
    st = run(vocab, ["a", "<eos>"])
    assert st.tree() == TreeNode(vocab.id("a"))
    with pytest.raises(Terminated):
        advance(st, vocab.id("a"))


def test_stream_contexts(vocab):
    st = run(vocab, ["P", "a", "Q", "b", "<eos>", "<eos>", "<eos>"])
    s = st.stream
    assert s.parent_idx == (-1, 0, 0, 2, 2, 0, -1)
    assert s.sibling_idx == (-1, -1, 1, -1, 3, 2, 0)
    assert dec.node_positions(s, vocab) == [0, 1, 2, 3]
    assert st.prefix_tree() == linearize(st.tree())


def test_illegal_tokens(vocab):
    fresh = GenerationState(vocab)
    with pytest.raises(IllegalToken):
        advance(fresh, vocab.eos_id)
    with pytest.raises(IllegalToken):
        advance(fresh, vocab.pad_id)
    with pytest.raises(IllegalToken):
        advance(fresh, 999)
    after_root = advance(fresh, vocab.id("a"))
    assert after_root.legal_mask().tolist() == [i == vocab.eos_id for i in range(len(vocab))]


def test_limits(vocab):
    with pytest.raises(LimitExceeded):
        run(vocab, ["P", "a", "a"], Limits(max_nodes=2))
    with pytest.raises(LimitExceeded):
        run(vocab, ["P", "P", "P"], Limits(max_depth=2))
    run(vocab, ["P", "P", "<eos>", "<eos>"], Limits(max_nodes=2, max_depth=2))


def test_random_walks_keep_invariants(vocab):
    rng = np.random.default_rng(0)
    for _ in range(200):
        st = GenerationState(vocab, Limits(30, 6))
        while not st.terminated:
            legal = np.flatnonzero(st.legal_mask())
            lp = -rng.random()
            try:
                nxt = advance(st, int(rng.choice(legal)), lp)
            except LimitExceeded:
                nxt = advance(st, vocab.eos_id, lp)
            assert nxt.logprob <= st.logprob
            st = nxt
            check_dftree(st.prefix_tree(), vocab)
        validate_tree(st.tree(), vocab)


def test_tree_stream_roundtrip(vocab):
    rng = np.random.default_rng(1)
    for _ in range(100):
        t = random_tree(rng, vocab, 40)
        s = dec.tree_stream(t, vocab)
        assert len(s) == t.size() + sum(vocab.is_parent(n.token) for n in t.preorder()) + 1
        assert dec.stream_to_tree(s, vocab) == t


# ------------------------------------------------------------ scripted scorer


def scripted(monkeypatch, table, vocab, default=None):
    """Replace the model with fixed next-token distributions keyed by prefix names."""

    def fake(params, cfg, enc, states, pad_id, lm_params, lm_cfg, alpha):
        rows = []
        for st in states:
            key = tuple(vocab.name(t) for t in st.stream.tokens)
            probs = table.get(key, default)
            logits = np.log(np.array([probs.get(vocab.name(i), 1e-9) for i in range(len(vocab))]))
            rows.append(logits - np.log(np.exp(logits).sum()))
        lp = np.array(rows)
        return lp, (lp if alpha > 0 else None)

    monkeypatch.setattr(dec, "_step_scores", fake)


def test_greedy_follows_forced_table(monkeypatch, vocab):
    table = {
        (): {"P": 0.9, "a": 0.1},
        ("P",): {"a": 0.8, "<eos>": 0.2},
        ("P", "a"): {"<eos>": 0.7, "b": 0.3},
        ("P", "a", "<eos>"): {"<eos>": 1.0},
    }
    scripted(monkeypatch, table, vocab)
    cfg = tiny_config(vocab)
    x = linearize(TreeNode(vocab.id("a")))
    r = dec.greedy_decode(x, init_params(cfg), cfg, vocab)
    assert r.tree == TreeNode(vocab.id("P"), (TreeNode(vocab.id("a")),))
    assert not r.truncated
    assert r.score == pytest.approx(math.log(0.9) + math.log(0.8) + math.log(0.7), abs=1e-6)


def test_greedy_tie_goes_to_smaller_id(monkeypatch, vocab):
    scripted(monkeypatch, {(): {"a": 0.5, "b": 0.5}}, vocab, default={"<eos>": 1.0})
    cfg = tiny_config(vocab)
    r = dec.greedy_decode(linearize(TreeNode(vocab.id("a"))), init_params(cfg), cfg, vocab)
    assert r.tree == TreeNode(vocab.id("a"))


def test_truncation_when_eos_never_wins(monkeypatch, vocab):
    scripted(monkeypatch, {}, vocab, default={"P": 0.9, "<eos>": 0.01})
    cfg = tiny_config(vocab)
    x = linearize(TreeNode(vocab.id("a")))
    r = dec.greedy_decode(x, init_params(cfg), cfg, vocab, Limits(max_nodes=2))
    assert r.truncated and r.tree.size() == 2
    hyps = dec.beam_search(x, init_params(cfg), cfg, vocab, width=1, limits=Limits(max_nodes=2))
    assert hyps[0].truncated and hyps[0].tree() == r.tree
    assert hyps[0].score == pytest.approx(r.score)


def test_beam_finds_better_tree_than_greedy(monkeypatch, vocab):
    table = {
        (): {"P": 0.6, "a": 0.4},
        ("P",): {"a": 0.5, "b": 0.5},
        ("P", "a"): {"<eos>": 0.5, "b": 0.5},
        ("P", "b"): {"<eos>": 0.5, "c": 0.5},
        ("a",): {"<eos>": 1.0},
    }
    scripted(monkeypatch, table, vocab, default={"<eos>": 1.0})
    cfg = tiny_config(vocab)
    x = linearize(TreeNode(vocab.id("a")))
    params = init_params(cfg)
    assert dec.greedy_decode(x, params, cfg, vocab).tree.size() == 2
    best = dec.beam_search(x, params, cfg, vocab, width=2)[0]
    assert best.tree() == TreeNode(vocab.id("a"))


def test_alpha_combines_scores(monkeypatch, vocab):
    scripted(monkeypatch, {(): {"a": 0.5, "b": 0.5}}, vocab, default={"<eos>": 0.5, "c": 0.5})
    cfg = tiny_config(vocab)
    params = init_params(cfg)
    x = linearize(TreeNode(vocab.id("a")))
    h = dec.beam_search(x, params, cfg, vocab, width=2, alpha=0.5, lm_params=params)[0]
    assert h.score == pytest.approx(h.model_logprob + 0.5 * h.lm_logprob)


def test_argument_checks(vocab):
    cfg = tiny_config(vocab)
    p = init_params(cfg)
    x = linearize(TreeNode(vocab.id("a")))
    with pytest.raises(ValueError):
        dec.beam_search(x, p, cfg, vocab, width=0)
    with pytest.raises(ValueError):
        dec.beam_search(x, p, cfg, vocab, alpha=0.2)
    with pytest.raises(ValueError):
        dec.beam_search(x, p, cfg, vocab, alpha=1.5, lm_params=p)


# ------------------------------------------------------------ real models


def _toy(seed):
    cfg = tiny_config(V2, N=1, d_model=8, d_ff=16, h=2, d_k=4, d_v=4)
    return cfg, init_params(cfg, seed)


def test_enumeration_counts():
    streams = dec.enumerate_trees(V2, Limits(max_nodes=3, max_depth=3))
    assert len(streams) == 10
    assert len({dec.stream_to_tree(s, V2) for s in streams}) == 10


def test_width_one_is_greedy(vocab):
    rng = np.random.default_rng(0)
    for seed in range(10):
        cfg = tiny_config(vocab)
        params = init_params(cfg, seed)
        x = linearize(random_tree(rng, vocab, 10))
        lim = Limits(max_nodes=12, max_depth=5)
        g = dec.greedy_decode(x, params, cfg, vocab, lim)
        b = dec.beam_search(x, params, cfg, vocab, width=1, limits=lim)[0]
        assert b.tree() == g.tree and b.truncated == g.truncated
        assert b.state.stream.tokens == dec.tree_stream(g.tree, vocab).tokens or g.truncated


def test_beam_matches_exhaustive_argmax():
    lim = Limits(max_nodes=3, max_depth=3)
    streams = dec.enumerate_trees(V2, lim)
    rng = np.random.default_rng(1)
    for seed in range(5):
        cfg, params = _toy(seed)
        x = linearize(random_tree(rng, V2, 5))
        scores = [dec.stream_logprobs(params, cfg, x, s, V2.pad_id).sum() for s in streams]
        best = streams[int(np.argmax(scores))]
        hyp = dec.beam_search(x, params, cfg, V2, width=64, limits=lim)[0]
        assert not hyp.truncated
        assert hyp.state.stream.tokens == best.tokens
        assert hyp.score == pytest.approx(max(scores), abs=1e-5)


def test_scores_match_rescoring(vocab):
    rng = np.random.default_rng(2)
    cfg = tiny_config(vocab)
    params = init_params(cfg, 9)
    lm_cfg = tiny_config(vocab, N=1)
    lm = init_params(lm_cfg, 10)
    for _ in range(3):
        x = linearize(random_tree(rng, vocab, 8))
        for h in dec.beam_search(x, params, cfg, vocab, width=4, alpha=0.3, lm_params=lm,
                                 lm_cfg=lm_cfg, limits=Limits(10, 4), nbest=4):
            if h.truncated:
                continue
            m = dec.stream_logprobs(params, cfg, x, h.state.stream, vocab.pad_id).sum()
            l_ = dec.stream_logprobs(lm, lm_cfg, None, h.state.stream, vocab.pad_id, lm=True).sum()
            assert h.model_logprob == pytest.approx(m, abs=1e-5)
            assert h.lm_logprob == pytest.approx(l_, abs=1e-5)
            assert h.score == pytest.approx(m + 0.3 * l_, abs=1e-5)


def test_width_monotone_on_toy_models():
    lim = Limits(max_nodes=3, max_depth=3)
    rng = np.random.default_rng(3)
    for seed in range(20):
        cfg, params = _toy(100 + seed)
        x = linearize(random_tree(rng, V2, 5))
        best = [dec.beam_search(x, params, cfg, V2, width=w, limits=lim)[0] for w in range(1, 8)]
        complete = [h.score for h in best if not h.truncated]
        assert all(b >= a - 1e-12 for a, b in zip(complete, complete[1:]))


def test_width_monotone_larger_vocab(vocab):
    lim = Limits(max_nodes=6, max_depth=3)
    rng = np.random.default_rng(4)
    for seed in range(6):
        cfg = tiny_config(vocab)
        params = init_params(cfg, 200 + seed)
        x = linearize(random_tree(rng, vocab, 6))
        best = [dec.beam_search(x, params, cfg, vocab, width=w, limits=lim)[0] for w in (1, 2, 3, 5, 8)]
        for a, b in zip(best, best[1:]):
            assert b.sort_key() <= a.sort_key()


def test_nbest_is_sorted_and_distinct(vocab):
    cfg = tiny_config(vocab)
    params = init_params(cfg, 3)
    x = linearize(random_tree(np.random.default_rng(0), vocab, 8))
    hyps = dec.beam_search(x, params, cfg, vocab, width=6, limits=Limits(10, 4), nbest=6)
    keys = [h.sort_key() for h in hyps]
    assert keys == sorted(keys)
    assert len({h.state.stream.tokens for h in hyps}) == len(hyps)


def test_batched_greedy_matches_single(vocab):
    cfg = tiny_config(vocab)
    params = init_params(cfg, 4)
    rng = np.random.default_rng(5)
    xs = [linearize(random_tree(rng, vocab, 12)) for _ in range(6)]
    lim = Limits(15, 5)
    batched = dec.greedy_decode_batch(xs, params, cfg, vocab, lim)
    for x, r in zip(xs, batched):
        single = dec.greedy_decode(x, params, cfg, vocab, lim)
        assert single.tree == r.tree and single.truncated == r.truncated
        validate_tree(r.tree, vocab)
