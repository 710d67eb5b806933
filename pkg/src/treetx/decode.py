"""Depth-first tree generation from a flat token stream.

A tree is produced as a stream of tokens.  Each sibling list is closed by
the end-of-siblings token (EOS), and a parent token opens the child list of
the node it creates.  ``P(a)`` is therefore the stream ``P a EOS EOS``: the
first EOS closes P's children and the second closes the root frame.

Every stream position carries the context the decoder sees: the stream index
of the current parent and of the last sibling emitted in that frame.  EOS
positions are scored like any other token but never become tree nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import IllegalToken, LimitExceeded, Terminated
from .model import Encoded, ModelConfig, TreeBatch, decoder_forward, encoder_forward, lm_forward
from .numcore import ParamStore
from .treecore import NONE, DfTree, TreeNode, Vocabulary, delinearize, linearize


@dataclass(frozen=True)
class Limits:
    max_nodes: int = 512
    max_depth: int = 64


@dataclass(frozen=True)
class Stream:
    """Decoder input: tokens plus parent/sibling stream indices (``NONE`` if absent)."""

    tokens: tuple[int, ...]
    parent_idx: tuple[int, ...]
    sibling_idx: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class GenerationState:
    vocab: Vocabulary
    limits: Limits = Limits()
    # frames: (parent stream index or NONE for the root frame, last sibling or NONE)
    frames: tuple[tuple[int, int], ...] = ((NONE, NONE),)
    stream: Stream = Stream((), (), ())
    node_positions: tuple[int, ...] = ()
    logprob: float = 0.0

    @property
    def terminated(self) -> bool:
        return not self.frames

    @property
    def n_nodes(self) -> int:
        return len(self.node_positions)

    @property
    def steps(self) -> int:
        return len(self.stream)

    def context(self) -> tuple[int, int]:
        """(parent, sibling) stream indices for the next position."""
        if self.terminated:
            raise Terminated("generation already finished")
        return self.frames[-1]

    def legal_mask(self) -> np.ndarray:
        """Tokens the state machine accepts next (limits are not applied here)."""
        v = self.vocab
        mask = np.zeros(len(v), dtype=bool)
        if self.terminated:
            return mask
        parent, sibling = self.frames[-1]
        in_root = parent == NONE
        for tok, kind in enumerate(v.kinds):
            if kind.value == "eos":
                mask[tok] = not (in_root and sibling == NONE)
            elif kind.value in ("parent", "leaf"):
                mask[tok] = not (in_root and sibling != NONE)
        return mask

    def prefix_tree(self) -> DfTree:
        """Nodes produced so far as a depth-first tree (node indices, not stream indices)."""
        where = {pos: i for i, pos in enumerate(self.node_positions)}
        toks, parents, sibs = [], [], []
        for pos in self.node_positions:
            toks.append(self.stream.tokens[pos])
            p, s = self.stream.parent_idx[pos], self.stream.sibling_idx[pos]
            parents.append(where[p] if p != NONE else NONE)
            sibs.append(where[s] if s != NONE else NONE)
        return DfTree(tuple(toks), tuple(parents), tuple(sibs))

    def tree(self) -> TreeNode:
        return delinearize(self.prefix_tree(), self.vocab)


def advance(state: GenerationState, token: int, logprob: float = 0.0) -> GenerationState:
    """Consume one generated token and return the successor state."""
    if state.terminated:
        raise Terminated("no tokens are accepted after the root frame closed")
    v = state.vocab
    if not 0 <= token < len(v):
        raise IllegalToken(f"token id {token} outside vocabulary")
    if not state.legal_mask()[token]:
        raise IllegalToken(f"{v.name(token)!r} is not legal in the current frame")
    parent, sibling = state.frames[-1]
    pos = len(state.stream)
    stream = Stream(state.stream.tokens + (token,), state.stream.parent_idx + (parent,),
                    state.stream.sibling_idx + (sibling,))
    frames = state.frames
    nodes = state.node_positions
    if token == v.eos_id:
        frames = frames[:-1]
    else:
        depth = len(frames)
        if len(nodes) + 1 > state.limits.max_nodes:
            raise LimitExceeded(f"tree would exceed {state.limits.max_nodes} nodes")
        if depth > state.limits.max_depth:
            raise LimitExceeded(f"tree would exceed depth {state.limits.max_depth}")
        frames = frames[:-1] + ((parent, pos),)
        if v.is_parent(token):
            frames = frames + ((pos, NONE),)
        nodes = nodes + (pos,)
    return GenerationState(v, state.limits, frames, stream, nodes, state.logprob + logprob)


def stream_tokens(tree: TreeNode, vocab: Vocabulary) -> list[int]:
    """Preorder tokens with an EOS closing every child list and the root frame."""
    out: list[int] = []
    stack: list[TreeNode | None] = [None, tree]  # None marks an EOS
    while stack:
        node = stack.pop()
        if node is None:
            out.append(vocab.eos_id)
            continue
        out.append(node.token)
        if vocab.is_parent(node.token):
            stack.append(None)
            stack.extend(reversed(node.children))
    return out


def tree_stream(tree: TreeNode, vocab: Vocabulary, limits: Limits | None = None) -> Stream:
    """Teacher-forcing stream of ``tree``, built by replaying the state machine."""
    state = GenerationState(vocab, limits or Limits(10**9, 10**9))
    for tok in stream_tokens(tree, vocab):
        state = advance(state, tok)
    return state.stream


def node_positions(stream: Stream, vocab: Vocabulary) -> list[int]:
    return [i for i, t in enumerate(stream.tokens) if t != vocab.eos_id]


def stream_to_tree(stream: Stream, vocab: Vocabulary) -> TreeNode:
    state = GenerationState(vocab, Limits(10**9, 10**9))
    for tok in stream.tokens:
        state = advance(state, tok)
    return state.tree()


# -------------------------------------------------------------- scoring


def _next_batch(states: Sequence[GenerationState], pad_id: int) -> TreeBatch:
    """Each state's stream plus one open slot carrying the next context."""
    items = []
    for st in states:
        p, s = st.context()
        items.append(Stream(st.stream.tokens + (pad_id,), st.stream.parent_idx + (p,),
                            st.stream.sibling_idx + (s,)))
    return TreeBatch.from_trees(items, pad_id)


def _next_logprobs(logits: nc.Tensor, batch: TreeBatch) -> np.ndarray:
    last = batch.lengths - 1
    z = logits.data[np.arange(len(last)), last].astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _step_scores(params, cfg, enc, states, pad_id, lm_params, lm_cfg, alpha):
    batch = _next_batch(states, pad_id)
    with nc.no_grad():
        model_lp = _next_logprobs(decoder_forward(params, cfg, enc, batch, pad_id), batch)
        lm_lp = None
        if alpha > 0:
            lm_lp = _next_logprobs(lm_forward(lm_params, lm_cfg, batch, pad_id), batch)
    return model_lp, lm_lp


def stream_logprobs(params: ParamStore, cfg: ModelConfig, source: DfTree | None,
                    stream: Stream, pad_id: int, lm: bool = False) -> np.ndarray:
    """Per-position log-probabilities of ``stream`` under one teacher-forced pass."""
    batch = TreeBatch.from_trees([stream], pad_id)
    with nc.no_grad():
        if lm:
            logits = lm_forward(params, cfg, batch, pad_id)
        else:
            enc = encoder_forward(params, cfg, source, pad_id)
            logits = decoder_forward(params, cfg, enc, batch, pad_id)
    z = logits.data[0].astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return lp[np.arange(len(stream)), np.asarray(stream.tokens)]


# -------------------------------------------------------------- search


@dataclass
class Hypothesis:
    state: GenerationState
    score: float
    model_logprob: float
    lm_logprob: float = 0.0
    truncated: bool = False

    @property
    def finished(self) -> bool:
        return self.truncated or self.state.terminated

    def tree(self) -> TreeNode:
        """The produced tree; a truncated prefix is closed at its current frames."""
        return self.state.tree()

    def df_tree(self) -> DfTree:
        return self.state.prefix_tree()

    def sort_key(self, length_penalty: float = 0.0):
        score = self.score
        if length_penalty:
            score = score / max(1, self.state.steps) ** length_penalty
        return (self.truncated, -score, self.state.stream.tokens)


@dataclass
class DecodeResult:
    tree: TreeNode
    df: DfTree
    score: float
    truncated: bool


def _encode_one(params, cfg, x, pad_id):
    with nc.no_grad():
        return encoder_forward(params, cfg, x, pad_id)


def greedy_decode(x: DfTree, params: ParamStore, cfg: ModelConfig, vocab: Vocabulary,
                  limits: Limits = Limits()) -> DecodeResult:
    """Repeatedly take the most probable legal token (ties to the smaller id)."""
    return greedy_decode_batch([x], params, cfg, vocab, limits)[0]


def greedy_decode_batch(xs: Sequence[DfTree], params: ParamStore, cfg: ModelConfig,
                        vocab: Vocabulary, limits: Limits = Limits()) -> list[DecodeResult]:
    """Greedy decoding of several sources with one decoder pass per step."""
    pad = vocab.pad_id
    with nc.no_grad():
        enc_all = encoder_forward(params, cfg, TreeBatch.from_trees(list(xs), pad), pad)
    states = [GenerationState(vocab, limits) for _ in xs]
    truncated = [False] * len(xs)
    active = list(range(len(xs)))
    while active:
        enc = Encoded(nc.Tensor(enc_all.states.data[active]), enc_all.valid[active])
        lp, _ = _step_scores(params, cfg, enc, [states[i] for i in active], pad, None, None, 0.0)
        still = []
        for row, i in enumerate(active):
            scores = np.where(states[i].legal_mask(), lp[row], -np.inf)
            tok = int(np.argmax(scores))  # first maximum = smallest id
            try:
                states[i] = advance(states[i], tok, float(lp[row, tok]))
            except LimitExceeded:
                truncated[i] = True
                continue
            if not states[i].terminated:
                still.append(i)
        active = still
    return [DecodeResult(st.tree(), st.prefix_tree(), st.logprob, tr)
            for st, tr in zip(states, truncated)]


class _Beam:
    """One standard beam of a fixed width."""

    def __init__(self, width: int, root: Hypothesis):
        self.width = width
        self.active = [root]
        self.finished: list[Hypothesis] = []

    def step(self, scored: dict, alpha: float) -> None:
        candidates = []
        for row, hyp in enumerate(self.active):
            model_lp, lm_lp = scored[hyp.state.stream.tokens]
            for tok in np.flatnonzero(hyp.state.legal_mask()):
                m = float(model_lp[tok])
                l_ = float(lm_lp[tok]) if lm_lp is not None else 0.0
                score = hyp.score + m + alpha * l_
                candidates.append((-score, hyp.state.stream.tokens + (int(tok),), row, int(tok), m, l_))
        candidates.sort(key=lambda c: (c[0], c[1]))
        next_active = []
        cut: set[int] = set()
        for neg, _, row, tok, m, l_ in candidates[: self.width]:
            hyp = self.active[row]
            try:
                state = advance(hyp.state, tok, m)
            except LimitExceeded:
                # the prefix is kept as is; the token that broke the limit is not scored
                if row not in cut:
                    cut.add(row)
                    self.finished.append(Hypothesis(hyp.state, hyp.score, hyp.model_logprob,
                                                    hyp.lm_logprob, truncated=True))
                continue
            new = Hypothesis(state, -neg, hyp.model_logprob + m, hyp.lm_logprob + l_)
            (self.finished if state.terminated else next_active).append(new)
        self.active = next_active

    def done(self, length_penalty: float) -> bool:
        if not self.active:
            return True
        complete = [h.score for h in self.finished if not h.truncated]
        # scores only decrease, so nothing active can overtake the best finished tree
        return bool(complete) and length_penalty == 0.0 and \
            max(complete) >= max(h.score for h in self.active)


def beam_search(x: DfTree, params: ParamStore, cfg: ModelConfig, vocab: Vocabulary,
                width: int = 6, alpha: float = 0.0, lm_params: ParamStore | None = None,
                lm_cfg: ModelConfig | None = None, limits: Limits = Limits(),
                nbest: int | None = None, length_penalty: float = 0.0) -> list[Hypothesis]:
    """Beam search over depth-first token steps.

    A hypothesis scores ``sum log P_model + alpha * sum log P_lm``.  At each
    step the best ``width`` extensions survive; extensions that finish the
    tree, or would break a size limit (kept as truncated), leave the beam.
    A beam stops when no active hypothesis can beat its best finished one.

    Beams of every width ``1..width`` run in lockstep and share one batched
    forward pass over their distinct prefixes; the result merges their
    finished hypotheses.  Plain beam search is not monotone in the width,
    the merged list is: widening never loses a tree a narrower beam found.
    Finished trees rank before truncated ones.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    if (alpha > 0) != (lm_params is not None):
        raise ValueError("a language model is required exactly when alpha > 0")
    lm_cfg = lm_cfg or cfg
    pad = vocab.pad_id
    enc1 = _encode_one(params, cfg, x, pad)
    root = Hypothesis(GenerationState(vocab, limits), 0.0, 0.0)
    beams = [_Beam(w, root) for w in range(1, width + 1)]
    running = list(beams)
    while running:
        states: dict[tuple, GenerationState] = {}
        for b in running:
            for h in b.active:
                states.setdefault(h.state.stream.tokens, h.state)
        keys = list(states)
        model_lp, lm_lp = _step_scores(params, cfg, enc1.repeat([len(keys)]),
                                       [states[k] for k in keys], pad, lm_params, lm_cfg, alpha)
        scored = {k: (model_lp[i], None if lm_lp is None else lm_lp[i]) for i, k in enumerate(keys)}
        for b in running:
            b.step(scored, alpha)
        running = [b for b in running if not b.done(length_penalty)]
    merged: dict[tuple, Hypothesis] = {}
    for b in beams:
        for h in b.finished:
            merged.setdefault((h.state.stream.tokens, h.truncated), h)
    out = sorted(merged.values(), key=lambda h: h.sort_key(length_penalty))
    return out[: (nbest or width)]


def enumerate_trees(vocab: Vocabulary, limits: Limits, cap: int = 100_000) -> list[Stream]:
    """Every complete stream the state machine admits within ``limits`` (small vocabularies)."""
    out: list[Stream] = []
    todo = [GenerationState(vocab, limits)]
    while todo:
        st = todo.pop()
        for tok in np.flatnonzero(st.legal_mask()):
            try:
                nxt = advance(st, int(tok))
            except LimitExceeded:
                continue
            if nxt.terminated:
                out.append(nxt.stream)
                if len(out) > cap:
                    raise ValueError(f"more than {cap} trees within limits")
            else:
                todo.append(nxt)
    return out
