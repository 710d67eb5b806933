"""Losses, learning-rate schedule, batching, optimizer, training loop, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numcore as nc
from .decode import Stream, node_positions, tree_stream
from .editmap import label_edits
from .errors import CheckpointError, ConfigError, DataExhausted, OversizedExample, ShapeMismatch
from .model import ModelConfig, TreeBatch, encoder_forward, decoder_forward, init_params, lm_forward
from .numcore import ParamStore, Tensor, word_dropout  # noqa: F401  (re-exported)
from .treecore import DfTree, TreeNode, Vocabulary, linearize

MODES = ("tree2tree", "lm_pretrain", "denoise_pretrain")
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr_scale: float | None = None  # None: d_model ** -0.5
    warmup_steps: int = 4000
    train_steps: int = 100_000
    batch_words: int = 20_000
    edit_weight: float = 3.0
    mode: str = "tree2tree"
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    denoise_dropout: float = 0.4

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, not {self.mode!r}")
        if self.batch_words < 1:
            raise ConfigError("batch_words must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


def lr(step: int, d_model: int, warmup: int, scale: float | None = None) -> float:
    """Inverse-square-root schedule with linear warmup."""
    if step < 1:
        raise ValueError("step must be >= 1")
    scale = d_model ** -0.5 if scale is None else scale
    return scale * min(step ** -0.5, step * warmup ** -1.5)


# ------------------------------------------------------------------ loss


def smoothed_targets(targets: np.ndarray, vocab_size: int, eps_ls: float,
                     pad_id: int | None, dtype=np.float64) -> np.ndarray:
    """One-hot targets mixed with ``eps_ls`` of uniform mass over non-pad tokens."""
    q = np.zeros(targets.shape + (vocab_size,), dtype=dtype)
    np.put_along_axis(q, targets[..., None], 1.0 - eps_ls, axis=-1)
    if eps_ls:
        uniform = np.ones(vocab_size, dtype=dtype)
        if pad_id is not None:
            uniform[pad_id] = 0.0
        q += eps_ls * uniform / uniform.sum()
    return q


def edit_weighted_mle(logits: Tensor, targets: np.ndarray, lam: np.ndarray,
                      eps_ls: float = 0.0, pad_id: int | None = None) -> Tensor:
    """``-sum_t lam_t log P(y_t)`` over label-smoothed targets, divided by ``sum_t lam_t``.

    Padding positions take ``lam = 0``.
    """
    targets = np.asarray(targets)
    lam = np.asarray(lam, dtype=logits.dtype)
    if logits.shape[:-1] != targets.shape or lam.shape != targets.shape:
        raise ShapeMismatch(f"logits {logits.shape}, targets {targets.shape}, weights {lam.shape}")
    total = lam.sum()
    if total <= 0:
        raise ValueError("edit weights sum to zero")
    q = smoothed_targets(targets, logits.shape[-1], eps_ls, pad_id, logits.dtype)
    weights = q * (lam / total)[..., None]
    return nc.scale(nc.tsum(nc.mul(nc.log_softmax(logits), Tensor(weights))), -1.0)


# ------------------------------------------------------------------ data


@dataclass
class Example:
    """One training item: source tree (or ``None`` in LM mode), target stream, weights."""

    source: DfTree | None
    target: Stream
    lam: np.ndarray

    @property
    def words(self) -> int:
        n_tgt = len(self.target)
        return n_tgt + (len(self.source) if self.source is not None else 0)


def _in_target_ids(tree: TreeNode, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> TreeNode:
    if src_vocab == tgt_vocab:
        return tree

    def conv(node):
        name = src_vocab.name(node.token)
        tok = tgt_vocab.id(name) if name in tgt_vocab else -1 - node.token
        return TreeNode(tok, tuple(conv(c) for c in node.children))

    return conv(tree)


def stream_weights(source: TreeNode | None, target: TreeNode, stream: Stream,
                   vocab: Vocabulary, edit_weight: float) -> np.ndarray:
    """Edit weights over stream positions; end-of-siblings positions weigh 1."""
    lam = np.ones(len(stream))
    if edit_weight != 1.0:
        node_lam = label_edits(source, target, edit_weight).lam
        lam[node_positions(stream, vocab)] = node_lam
    return lam


def make_examples(pairs: Iterable[tuple[TreeNode | None, TreeNode]], src_vocab: Vocabulary,
                  tgt_vocab: Vocabulary, mode: str = "tree2tree",
                  edit_weight: float = 3.0) -> list[Example]:
    out = []
    for bad, good in pairs:
        stream = tree_stream(good, tgt_vocab)
        if mode == "lm_pretrain":
            out.append(Example(None, stream, np.ones(len(stream))))
        elif mode == "denoise_pretrain":
            out.append(Example(linearize(good), stream, np.ones(len(stream))))
        else:
            lam = stream_weights(_in_target_ids(bad, src_vocab, tgt_vocab), good, stream,
                                 tgt_vocab, edit_weight)
            out.append(Example(linearize(bad), stream, lam))
    return out


def batch_by_size(items: Sequence, cap: int, size: Callable | None = None) -> list[list]:
    """Sort by size (stable) and pack greedily so no batch exceeds ``cap`` words."""
    if size is None:
        size = _pair_words
    sizes = [size(x) for x in items]
    for s in sizes:
        if s > cap:
            raise OversizedExample(f"example of {s} words exceeds the batch cap {cap}")
    order = sorted(range(len(items)), key=lambda i: sizes[i])
    batches: list[list] = []
    current: list = []
    used = 0
    for i in order:
        if current and used + sizes[i] > cap:
            batches.append(current)
            current, used = [], 0
        current.append(items[i])
        used += sizes[i]
    if current:
        batches.append(current)
    return batches


def _pair_words(item) -> int:
    if isinstance(item, Example):
        return item.words
    if isinstance(item, (int, np.integer)):
        return int(item)
    src, tgt = item
    return (len(src) if src is not None else 0) + len(tgt)


@dataclass
class Batch:
    source: TreeBatch | None
    target: TreeBatch
    lam: np.ndarray

    @classmethod
    def collate(cls, examples: Sequence[Example], src_pad: int, tgt_pad: int) -> "Batch":
        target = TreeBatch.from_trees([e.target for e in examples], tgt_pad)
        lam = np.zeros(target.shape)
        for b, e in enumerate(examples):
            lam[b, : len(e.lam)] = e.lam
        source = None
        if examples[0].source is not None:
            source = TreeBatch.from_trees([e.source for e in examples], src_pad)
        return cls(source, target, lam)


# ------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: ParamStore) -> "AdamState":
        return cls({n: np.zeros_like(p.data) for n, p in params.items()},
                   {n: np.zeros_like(p.data) for n, p in params.items()}, 0)


def adam_update(params: ParamStore, state: AdamState, rate: float, beta1: float = 0.9,
                beta2: float = 0.98, eps: float = 1e-9) -> None:
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = p.grad
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= (rate * step).astype(p.dtype, copy=False)


# ------------------------------------------------------------- training


def batch_logits(params: ParamStore, mcfg: ModelConfig, batch: Batch, mode: str, pad_id: int,
                 training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    if mode == "lm_pretrain":
        return lm_forward(params, mcfg, batch.target, pad_id, training, rng)
    enc = encoder_forward(params, mcfg, batch.source, pad_id, training, rng)
    return decoder_forward(params, mcfg, enc, batch.target, pad_id, training, rng)


def train_step(batch: Batch, params: ParamStore, opt: AdamState, cfg: TrainConfig,
               mcfg: ModelConfig, step: int, rng: np.random.Generator, pad_id: int,
               lr_value: float | None = None) -> float:
    """One forward/backward/ADAM step; returns the batch loss."""
    if cfg.mode == "denoise_pretrain":
        mcfg = dataclasses.replace(mcfg, p_des=cfg.denoise_dropout)
    params.zero_grad()
    logits = batch_logits(params, mcfg, batch, cfg.mode, pad_id, training=True, rng=rng)
    loss = edit_weighted_mle(logits, batch.target.tokens, batch.lam, mcfg.eps_ls, pad_id)
    nc.backward(loss, params)
    rate = lr(step, mcfg.d_model, cfg.warmup_steps, cfg.lr_scale) if lr_value is None else lr_value
    adam_update(params, opt, rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return float(loss.data)


def teacher_forced_accuracy(params: ParamStore, mcfg: ModelConfig, examples: Sequence[Example],
                            mode: str, src_pad: int, tgt_pad: int, batch_words: int = 4000) -> float:
    correct = total = 0
    with nc.no_grad():
        for chunk in batch_by_size(list(examples), batch_words):
            batch = Batch.collate(chunk, src_pad, tgt_pad)
            logits = batch_logits(params, mcfg, batch, mode, tgt_pad)
            pred = logits.data.argmax(axis=-1)
            valid = batch.target.valid
            correct += int((pred == batch.target.tokens)[valid].sum())
            total += int(valid.sum())
    return correct / max(total, 1)


class Trainer:
    """Stateful training loop with exact resume.

    Epoch ``e`` shuffles examples with ``default_rng([seed, e])`` before
    size-sorting, packs them, and visits batches in a shuffled order; the
    cursor into that order is checkpointed, as is the dropout RNG.
    """

    def __init__(self, mcfg: ModelConfig, cfg: TrainConfig, examples: Sequence[Example],
                 src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                 params: ParamStore | None = None):
        if not examples:
            raise DataExhausted("no training examples")
        self.mcfg, self.cfg = mcfg, cfg
        self.examples = list(examples)
        self.src_vocab, self.tgt_vocab = src_vocab, tgt_vocab
        self.params = params if params is not None else init_params(mcfg, cfg.seed)
        self.opt = AdamState.for_params(self.params)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.step_no = 0
        self.epoch = 0
        self.cursor = 0
        self._order: list[list[Example]] | None = None
        self.log: list[dict] = []

    def _epoch_batches(self) -> list[list[Example]]:
        erng = np.random.default_rng([self.cfg.seed, 2, self.epoch])
        shuffled = [self.examples[i] for i in erng.permutation(len(self.examples))]
        batches = batch_by_size(shuffled, self.cfg.batch_words)
        return [batches[i] for i in erng.permutation(len(batches))]

    def next_batch(self) -> Batch:
        if self._order is None:
            self._order = self._epoch_batches()
        if self.cursor >= len(self._order):
            self.epoch += 1
            self.cursor = 0
            self._order = self._epoch_batches()
        chunk = self._order[self.cursor]
        self.cursor += 1
        return Batch.collate(chunk, self.src_vocab.pad_id, self.tgt_vocab.pad_id)

    def step(self) -> float:
        batch = self.next_batch()
        self.step_no += 1
        rate = lr(self.step_no, self.mcfg.d_model, self.cfg.warmup_steps, self.cfg.lr_scale)
        loss = train_step(batch, self.params, self.opt, self.cfg, self.mcfg, self.step_no,
                          self.rng, self.tgt_vocab.pad_id, rate)
        self.log.append({"step": self.step_no, "lr": rate, "loss": loss,
                         "mode": self.cfg.mode, "wall_time": time.time()})
        return loss

    def run(self, steps: int | None = None, out_dir: str | Path | None = None,
            log_file: str | Path | None = None,
            callback: Callable[["Trainer"], bool] | None = None) -> list[Path]:
        """Train up to ``steps`` (default: ``train_steps``) more steps.

        ``callback`` is called after each step and may return True to stop early.
        Returns the checkpoint directories written.
        """
        target = self.step_no + (steps if steps is not None else self.cfg.train_steps - self.step_no)
        written: list[Path] = []
        log_fh = open(log_file, "a", encoding="utf-8") if log_file else None
        try:
            while self.step_no < target:
                self.step()
                if log_fh and self.step_no % self.cfg.log_every == 0:
                    log_fh.write(json.dumps(self.log[-1]) + "\n")
                every = self.cfg.checkpoint_every
                if out_dir and every and self.step_no % every == 0:
                    written.append(self.save(Path(out_dir) / f"ckpt-{self.step_no:07d}"))
                if callback is not None and callback(self):
                    break
            if out_dir:
                written.append(self.save(Path(out_dir) / "ckpt-last"))
        finally:
            if log_fh:
                log_fh.close()
        return written

    # -------------------------------------------------------- persistence

    def save(self, path: str | Path) -> Path:
        tensors = dict(self.params.arrays())
        for name in self.params:
            tensors[f"adam.m:{name}"] = self.opt.m[name]
            tensors[f"adam.v:{name}"] = self.opt.v[name]
        meta = {
            "step": self.step_no, "epoch": self.epoch, "cursor": self.cursor,
            "adam_t": self.opt.t,
            "rng": json.dumps(self.rng.bit_generator.state),
        }
        save_checkpoint(path, self.mcfg, tensors, meta, self.cfg, self.src_vocab, self.tgt_vocab)
        return Path(path)

    @classmethod
    def load(cls, path: str | Path, examples: Sequence[Example],
             cfg: TrainConfig | None = None) -> "Trainer":
        ck = load_checkpoint(path)
        trainer = cls(ck.model_config, cfg or ck.train_config, examples, ck.src_vocab,
                      ck.tgt_vocab, params=ck.params)
        trainer.opt = AdamState(
            {n: ck.tensors[f"adam.m:{n}"].copy() for n in ck.params},
            {n: ck.tensors[f"adam.v:{n}"].copy() for n in ck.params},
            int(ck.meta["adam_t"]))
        trainer.step_no = int(ck.meta["step"])
        trainer.epoch = int(ck.meta["epoch"])
        trainer.cursor = int(ck.meta["cursor"])
        trainer.rng.bit_generator.state = json.loads(ck.meta["rng"])
        trainer._order = trainer._epoch_batches()
        return trainer


def train_loop(mcfg: ModelConfig, cfg: TrainConfig, examples: Sequence[Example],
               src_vocab: Vocabulary, tgt_vocab: Vocabulary, out_dir: str | Path | None = None,
               log_file: str | Path | None = None, params: ParamStore | None = None) -> Trainer:
    trainer = Trainer(mcfg, cfg, examples, src_vocab, tgt_vocab, params)
    trainer.run(out_dir=out_dir, log_file=log_file)
    return trainer


# ------------------------------------------------------------ checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig | None
    params: ParamStore
    tensors: dict[str, np.ndarray]
    meta: dict[str, str]
    src_vocab: Vocabulary | None
    tgt_vocab: Vocabulary | None


def save_checkpoint(path: str | Path, mcfg: ModelConfig, tensors: dict[str, np.ndarray],
                    meta: dict, tcfg: TrainConfig | None = None,
                    src_vocab: Vocabulary | None = None,
                    tgt_vocab: Vocabulary | None = None) -> None:
    """Directory with ``manifest.txt``, raw little-endian ``tensors.bin`` and vocabularies."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"format_version = {CHECKPOINT_VERSION}"]
    lines += [f"model.{k} = {v}" for k, v in mcfg.to_dict().items()]
    if tcfg is not None:
        lines += [f"train.{k} = {v}" for k, v in tcfg.to_dict().items()]
    lines += [f"meta.{k} = {v}" for k, v in meta.items()]
    offset = 0
    with open(path / "tensors.bin", "wb") as fh:
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            fh.write(raw)
            shape = ",".join(str(s) for s in arr.shape)
            lines.append(f"tensor\t{name}\t{le.dtype.str}\t{shape}\t{offset}\t{len(raw)}")
            offset += len(raw)
    (path / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if src_vocab is not None:
        src_vocab.save(path / "src.vocab")
    if tgt_vocab is not None:
        tgt_vocab.save(path / "tgt.vocab")


def _coerce(text: str):
    if text == "None":
        return None
    if text in ("True", "False"):
        return text == "True"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.exists():
        raise CheckpointError(f"{path} has no manifest.txt")
    model_vals, train_vals, meta = {}, {}, {}
    entries = []
    version = None
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if line.startswith("tensor\t"):
            _, name, dtype, shape, offset, length = line.split("\t")
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            entries.append((name, np.dtype(dtype), dims, int(offset), int(length)))
            continue
        key, _, value = line.partition(" = ")
        if key == "format_version":
            version = int(value)
        elif key.startswith("model."):
            model_vals[key[6:]] = _coerce(value)
        elif key.startswith("train."):
            train_vals[key[6:]] = _coerce(value)
        elif key.startswith("meta."):
            meta[key[5:]] = value
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    blob = (path / "tensors.bin").read_bytes()
    tensors = {}
    for name, dtype, dims, offset, length in entries:
        arr = np.frombuffer(blob[offset: offset + length], dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    mcfg = ModelConfig.from_dict(model_vals)
    params = ParamStore(np.dtype(mcfg.dtype))
    for name, arr in tensors.items():
        if not name.startswith("adam."):
            params.add(name, arr)
    tcfg = TrainConfig.from_dict(train_vals) if train_vals else None
    src = Vocabulary.load(path / "src.vocab") if (path / "src.vocab").exists() else None
    tgt = Vocabulary.load(path / "tgt.vocab") if (path / "tgt.vocab").exists() else None
    return Checkpoint(mcfg, tcfg, params, tensors, meta, src, tgt)


def init_from(params: ParamStore, pretrained: ParamStore) -> list[str]:
    """Copy every same-named, same-shaped tensor from ``pretrained``; return the names copied."""
    copied = []
    for name, t in params.items():
        if name in pretrained and pretrained[name].shape == t.shape:
            t.data[...] = pretrained[name].data
            copied.append(name)
    return copied


def model_grad_check(mcfg: ModelConfig, examples: Sequence[Example], pad_id: int,
                     mode: str = "tree2tree", seed: int = 0, eps: float = 1e-6,
                     n_coords: int = 32) -> dict[str, nc.GradCheckEntry]:
    """Finite-difference check of the full loss over every parameter (float64, no dropout)."""
    mcfg = dataclasses.replace(mcfg, dtype="float64", p_drop=0.0, p_dattn=0.0, p_dff=0.0,
                               p_des=0.0, p_det=0.0)
    params = init_params(mcfg, seed)
    batch = Batch.collate(list(examples), pad_id, pad_id)

    def loss():
        logits = batch_logits(params, mcfg, batch, mode, pad_id)
        return edit_weighted_mle(logits, batch.target.tokens, batch.lam, mcfg.eps_ls, pad_id)

    return nc.grad_check(loss, params, eps=eps, n_coords=n_coords,
                         rng=np.random.default_rng(seed))
