"""The tree transformer: tree convolution blocks inside a transformer stack.

Each encoder layer is {self-attention, TCB}; each decoder layer is
{masked self-attention, encoder-decoder attention, TCB}.  Every sublayer is
wrapped as ``layer_norm(x + dropout(sublayer(x)))``.  A TCB combines a node's
own state with the states of its parent and left sibling, fetched from the
previous sublayer with one batched gather per context.  Missing contexts
(root, first child) read a learned vector instead.  There is no positional
encoding; tree position enters only through the gathers.

Decoder inputs are streams (see :mod:`treetx.decode`): position ``t`` sees the
embeddings of its parent and left sibling, never its own token.
"""

from __future__ import annotations

import collections
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigError, MaskViolation, TokenOutOfRange
from .numcore import ParamStore, Tensor
from .treecore import NONE

#: Gather passes performed by :func:`context_gather`, keyed by TCB name.
GATHER_COUNTS: collections.Counter = collections.Counter()


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    N: int = 6
    d_model: int = 512
    d_ff: int = 2048
    h: int = 8
    d_k: int = 64
    d_v: int = 64
    p_drop: float = 0.3
    p_dattn: float = 0.1
    p_dff: float = 0.3
    p_des: float = 0.2
    p_det: float = 0.1
    eps_ls: float = 0.1
    ln_eps: float = 1e-5
    self_attention: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("src_vocab", "tgt_vocab", "N", "d_model", "d_ff", "h", "d_k", "d_v"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be a positive integer")
        for name in ("p_drop", "p_dattn", "p_dff", "p_des", "p_det", "eps_ls"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, not {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


# ------------------------------------------------------------------ params


def _xavier(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _add_tcb(store, rng, prefix, cfg, has_t=True):
    d, f = cfg.d_model, cfg.d_ff
    names = ("W_t", "W_p", "W_s") if has_t else ("W_p", "W_s")
    for w in names:
        store.add(f"{prefix}.{w}", _xavier(rng, d, f))
    store.add(f"{prefix}.b", np.zeros(f))
    store.add(f"{prefix}.W_2", _xavier(rng, f, d))
    store.add(f"{prefix}.b_2", np.zeros(d))
    store.add(f"{prefix}.v_p", rng.normal(0.0, 1.0, d))
    store.add(f"{prefix}.v_s", rng.normal(0.0, 1.0, d))


def _add_attention(store, rng, prefix, cfg):
    d = cfg.d_model
    store.add(f"{prefix}.W_q", _xavier(rng, d, cfg.h * cfg.d_k))
    store.add(f"{prefix}.W_k", _xavier(rng, d, cfg.h * cfg.d_k))
    store.add(f"{prefix}.W_v", _xavier(rng, d, cfg.h * cfg.d_v))
    store.add(f"{prefix}.W_o", _xavier(rng, cfg.h * cfg.d_v, d))


def _add_norm(store, prefix, cfg):
    store.add(f"{prefix}.g", np.ones(cfg.d_model))
    store.add(f"{prefix}.b", np.zeros(cfg.d_model))


def init_params(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> ParamStore:
    """Fresh parameters for ``cfg`` (xavier weights, unit-normal embeddings and v_p/v_s)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    store = ParamStore(np.dtype(cfg.dtype))
    d = cfg.d_model
    store.add("src_embed", rng.normal(0.0, 1.0, (cfg.src_vocab, d)))
    store.add("tgt_embed", rng.normal(0.0, 1.0, (cfg.tgt_vocab, d)))
    _add_tcb(store, rng, "enc.in", cfg, has_t=True)
    for i in range(cfg.N):
        p = f"enc.{i}"
        _add_attention(store, rng, f"{p}.self", cfg)
        _add_norm(store, f"{p}.ln_self", cfg)
        _add_tcb(store, rng, f"{p}.tcb", cfg)
        _add_norm(store, f"{p}.ln_tcb", cfg)
    _add_tcb(store, rng, "dec.in", cfg, has_t=False)
    for i in range(cfg.N):
        p = f"dec.{i}"
        _add_attention(store, rng, f"{p}.self", cfg)
        _add_norm(store, f"{p}.ln_self", cfg)
        _add_attention(store, rng, f"{p}.cross", cfg)
        _add_norm(store, f"{p}.ln_cross", cfg)
        _add_tcb(store, rng, f"{p}.tcb", cfg)
        _add_norm(store, f"{p}.ln_tcb", cfg)
    store.add("out.W", _xavier(rng, d, cfg.tgt_vocab))
    store.add("out.b", np.zeros(cfg.tgt_vocab))
    return store


# ----------------------------------------------------------------- batches


@dataclass
class TreeBatch:
    """Padded batch of linearized trees or decoder streams.

    ``parent`` and ``sibling`` hold per-tree indices with ``NONE`` for a
    missing link; padding positions carry ``pad_id`` and ``NONE`` links.
    """

    tokens: np.ndarray
    parent: np.ndarray
    sibling: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_trees(cls, trees: Sequence, pad_id: int) -> "TreeBatch":
        B = len(trees)
        T = max(len(t.tokens) for t in trees)
        tokens = np.full((B, T), pad_id, dtype=np.int64)
        parent = np.full((B, T), NONE, dtype=np.int64)
        sibling = np.full((B, T), NONE, dtype=np.int64)
        lengths = np.zeros(B, dtype=np.int64)
        for b, t in enumerate(trees):
            n = len(t.tokens)
            tokens[b, :n] = t.tokens
            parent[b, :n] = t.parent_idx
            sibling[b, :n] = t.sibling_idx
            lengths[b] = n
        return cls(tokens, parent, sibling, lengths)

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.tokens.shape[1])[None, :] < self.lengths[:, None]

    def flat_context(self, which: np.ndarray) -> np.ndarray:
        """Row indices into ``[B*T states ; missing-context vector]``."""
        B, T = self.tokens.shape
        base = np.arange(B, dtype=np.int64)[:, None] * T
        return np.where(which >= 0, which + base, B * T).reshape(-1)


def _as_batch(x, pad_id: int) -> TreeBatch:
    if isinstance(x, TreeBatch):
        return x
    return TreeBatch.from_trees([x], pad_id)


def _check_tokens(batch: TreeBatch, vocab_size: int, side: str) -> None:
    tok = batch.tokens[batch.valid]
    if tok.size and (tok.min() < 0 or tok.max() >= vocab_size):
        raise TokenOutOfRange(f"{side} token id outside [0, {vocab_size})")


# ---------------------------------------------------------------- building blocks


def context_gather(x: Tensor, flat_idx: np.ndarray, missing: Tensor, tag: str) -> Tensor:
    """One batched gather of parent (or sibling) states for every node at once."""
    B, T, d = x.shape
    table = nc.concat([nc.reshape(x, (B * T, d)), nc.reshape(missing, (1, d))], axis=0)
    GATHER_COUNTS[tag] += 1
    return nc.reshape(nc.gather_rows(table, flat_idx), (B, T, d))


def tcb(params: ParamStore, prefix: str, x_t: Tensor | None, x_p: Tensor | None,
        x_s: Tensor | None, p_dff: float = 0.0, training: bool = False,
        rng: np.random.Generator | None = None) -> Tensor:
    """``relu(x_t W_t + x_p W_p + x_s W_s + b) W_2 + b_2``.

    ``x_t=None`` leaves the own-node term out (decoder input block); a
    missing ``x_p``/``x_s`` is replaced by the block's learned ``v_p``/``v_s``.
    """
    if x_p is None:
        x_p = params[f"{prefix}.v_p"]
    if x_s is None:
        x_s = params[f"{prefix}.v_s"]
    pre = nc.add(nc.matmul(x_p, params[f"{prefix}.W_p"]), nc.matmul(x_s, params[f"{prefix}.W_s"]))
    if x_t is not None:
        pre = nc.add(pre, nc.matmul(x_t, params[f"{prefix}.W_t"]))
    hidden = nc.relu(nc.add(pre, params[f"{prefix}.b"]))
    hidden = nc.dropout(hidden, p_dff, rng, training)
    return nc.add(nc.matmul(hidden, params[f"{prefix}.W_2"]), params[f"{prefix}.b_2"])


def _tcb_over_tree(params, prefix, cfg, x, x_own, batch, training, rng, use_own=True):
    parents = context_gather(x, batch.flat_context(batch.parent), params[f"{prefix}.v_p"], prefix)
    siblings = context_gather(x, batch.flat_context(batch.sibling), params[f"{prefix}.v_s"], prefix)
    return tcb(params, prefix, x_own if use_own else None, parents, siblings,
               cfg.p_dff, training, rng)


def attention(params: ParamStore, prefix: str, cfg: ModelConfig, xq: Tensor, xkv: Tensor,
              allowed: np.ndarray, training: bool = False,
              rng: np.random.Generator | None = None) -> Tensor:
    """Multi-head scaled dot-product attention; ``allowed`` is ``[B, Tq, Tk]``."""
    B, Tq, _ = xq.shape
    Tk = xkv.shape[1]
    h, dk, dv = cfg.h, cfg.d_k, cfg.d_v
    q = nc.transpose(nc.reshape(nc.matmul(xq, params[f"{prefix}.W_q"]), (B, Tq, h, dk)), (0, 2, 1, 3))
    k = nc.transpose(nc.reshape(nc.matmul(xkv, params[f"{prefix}.W_k"]), (B, Tk, h, dk)), (0, 2, 3, 1))
    v = nc.transpose(nc.reshape(nc.matmul(xkv, params[f"{prefix}.W_v"]), (B, Tk, h, dv)), (0, 2, 1, 3))
    scores = nc.scale(nc.matmul(q, k), 1.0 / math.sqrt(dk))
    weights = nc.softmax_rows(scores, allowed[:, None, :, :])
    weights = nc.dropout(weights, cfg.p_dattn, rng, training)
    out = nc.reshape(nc.transpose(nc.matmul(weights, v), (0, 2, 1, 3)), (B, Tq, h * dv))
    return nc.matmul(out, params[f"{prefix}.W_o"])


def _residual(params, prefix, cfg, x, y, training, rng):
    y = nc.dropout(y, cfg.p_drop, rng, training)
    return nc.layer_norm(nc.add(x, y), params[f"{prefix}.g"], params[f"{prefix}.b"], cfg.ln_eps)


def causal_allowed(batch: TreeBatch) -> np.ndarray:
    """``[B, T, T]`` mask: position t may attend to valid positions j <= t."""
    T = batch.tokens.shape[1]
    allowed = np.tril(np.ones((T, T), dtype=bool))[None] & batch.valid[:, None, :]
    if np.triu(allowed, 1).any():
        raise MaskViolation("decoder mask lets a position see a later one")
    return allowed


# ------------------------------------------------------------------ stacks


@dataclass
class Encoded:
    states: Tensor
    valid: np.ndarray

    def repeat(self, counts: Sequence[int] | np.ndarray) -> "Encoded":
        """Row-repeat (no gradient) so several hypotheses share one source."""
        idx = np.repeat(np.arange(len(counts)), counts)
        return Encoded(Tensor(self.states.data[idx]), self.valid[idx])


def encoder_forward(params: ParamStore, cfg: ModelConfig, x, pad_id: int = 0,
                    training: bool = False, rng: np.random.Generator | None = None) -> Encoded:
    batch = _as_batch(x, pad_id)
    _check_tokens(batch, cfg.src_vocab, "source")
    emb = nc.embed(batch.tokens, params["src_embed"])
    emb = nc.word_dropout(emb, cfg.p_des, rng, training)
    x = _tcb_over_tree(params, "enc.in", cfg, emb, emb, batch, training, rng)
    allowed = np.broadcast_to(batch.valid[:, None, :], (batch.shape[0], batch.shape[1], batch.shape[1]))
    for i in range(cfg.N):
        p = f"enc.{i}"
        if cfg.self_attention:
            x = _residual(params, f"{p}.ln_self", cfg, x,
                          attention(params, f"{p}.self", cfg, x, x, allowed, training, rng),
                          training, rng)
        x = _residual(params, f"{p}.ln_tcb", cfg, x,
                      _tcb_over_tree(params, f"{p}.tcb", cfg, x, x, batch, training, rng),
                      training, rng)
    return Encoded(x, batch.valid)


def _decoder_stack(params, cfg, enc: Encoded | None, batch: TreeBatch, training, rng,
                   embed_override: Tensor | None = None) -> Tensor:
    _check_tokens(batch, cfg.tgt_vocab, "target")
    emb = embed_override if embed_override is not None else nc.embed(batch.tokens, params["tgt_embed"])
    emb = nc.word_dropout(emb, cfg.p_det, rng, training)
    x = _tcb_over_tree(params, "dec.in", cfg, emb, None, batch, training, rng, use_own=False)
    self_allowed = causal_allowed(batch)
    if enc is not None:
        B, T = batch.shape
        cross_allowed = np.broadcast_to(enc.valid[:, None, :], (B, T, enc.valid.shape[1]))
    for i in range(cfg.N):
        p = f"dec.{i}"
        if cfg.self_attention:
            x = _residual(params, f"{p}.ln_self", cfg, x,
                          attention(params, f"{p}.self", cfg, x, x, self_allowed, training, rng),
                          training, rng)
        if enc is not None:
            x = _residual(params, f"{p}.ln_cross", cfg, x,
                          attention(params, f"{p}.cross", cfg, x, enc.states, cross_allowed,
                                    training, rng),
                          training, rng)
        x = _residual(params, f"{p}.ln_tcb", cfg, x,
                      _tcb_over_tree(params, f"{p}.tcb", cfg, x, x, batch, training, rng),
                      training, rng)
    return nc.add(nc.matmul(x, params["out.W"]), params["out.b"])


def decoder_forward(params: ParamStore, cfg: ModelConfig, enc: Encoded, y, pad_id: int = 0,
                    training: bool = False, rng: np.random.Generator | None = None,
                    embed_override: Tensor | None = None) -> Tensor:
    """Target-vocabulary logits ``[B, T, V]`` for every stream position."""
    batch = _as_batch(y, pad_id)
    if enc.states.shape[0] != batch.shape[0]:
        raise ValueError(f"{enc.states.shape[0]} encoded sources for {batch.shape[0]} targets")
    return _decoder_stack(params, cfg, enc, batch, training, rng, embed_override)


def lm_forward(params: ParamStore, cfg: ModelConfig, y, pad_id: int = 0,
               training: bool = False, rng: np.random.Generator | None = None,
               embed_override: Tensor | None = None) -> Tensor:
    """The decoder alone, with the encoder-decoder attention sublayers removed."""
    batch = _as_batch(y, pad_id)
    return _decoder_stack(params, cfg, None, batch, training, rng, embed_override)


def forward(params: ParamStore, cfg: ModelConfig, x, y, pad_id: int = 0,
            training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Teacher-forced logits for source ``x`` and target stream ``y``."""
    enc = encoder_forward(params, cfg, x, pad_id, training, rng)
    return decoder_forward(params, cfg, enc, y, pad_id, training, rng)
