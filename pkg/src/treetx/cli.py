"""``treetx`` command line: data generation, training, correction, scoring and checks.

Every failure exits nonzero after printing one line ``error: <Kind>: <message>``
to stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import decode as dec
from . import taskbench as tb
from . import train as tr
from .editmap import format_script, tree_edit_distance
from .errors import ConfigError, DataExhausted, TreeTxError
from .model import ModelConfig
from .treecore import (TreeNode, Vocabulary, linearize, parse_sexpr, random_tree, read_trees,
                       to_sexpr)

# config key -> (section, field name)
CONFIG_KEYS = {
    "N": ("model", "N"), "d_model": ("model", "d_model"), "d_ff": ("model", "d_ff"),
    "h": ("model", "h"), "d_k": ("model", "d_k"), "d_v": ("model", "d_v"),
    "p_drop": ("model", "p_drop"), "p_dattn": ("model", "p_dattn"),
    "p_dff": ("model", "p_dff"), "p_des": ("model", "p_des"), "p_det": ("model", "p_det"),
    "eps_ls": ("model", "eps_ls"), "self_attention": ("model", "self_attention"),
    "dtype": ("model", "dtype"),
    "lr": ("train", "lr_scale"), "warmup": ("train", "warmup_steps"),
    "train_steps": ("train", "train_steps"), "edit_weight": ("train", "edit_weight"),
    "mode": ("train", "mode"), "seed": ("train", "seed"),
    "batch_words": ("train", "batch_words"), "checkpoint_every": ("train", "checkpoint_every"),
    "log_every": ("train", "log_every"), "denoise_dropout": ("train", "denoise_dropout"),
    "alpha": ("decode", "alpha"), "beam_width": ("decode", "beam_width"),
    "max_nodes": ("decode", "max_nodes"), "max_depth": ("decode", "max_depth"),
    "init_from": ("train", "init_from"),
}


def _value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def parse_config(text: str) -> dict[str, dict]:
    """``key = value`` lines (``#`` comments) grouped into model/train/decode sections."""
    out: dict[str, dict] = {"model": {}, "train": {}, "decode": {}}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key or not value:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, name = CONFIG_KEYS[key]
        out[section][name] = _value(value)
    return out


def load_config(path: str | None) -> dict[str, dict]:
    if path is None:
        return parse_config("")
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _configs(conf: dict, vocab: Vocabulary) -> tuple[ModelConfig, tr.TrainConfig]:
    try:
        mcfg = ModelConfig(src_vocab=len(vocab), tgt_vocab=len(vocab), **conf["model"])
        train_vals = {k: v for k, v in conf["train"].items() if k != "init_from"}
        tcfg = tr.TrainConfig(**train_vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return mcfg, tcfg


def _limits(conf: dict, args) -> dec.Limits:
    d = conf["decode"]
    return dec.Limits(int(d.get("max_nodes", args.max_nodes or 512)),
                      int(d.get("max_depth", args.max_depth or 64)))


# ----------------------------------------------------------------- commands


def _parse_ops(spec: str) -> list[tb.CorruptionOp]:
    ops = []
    for item in filter(None, (s.strip() for s in spec.split(","))):
        name, _, p = item.partition("=")
        try:
            ops.append(tb.CorruptionOp(tb.CorruptionKind(name), float(p or 1.0)))
        except ValueError as exc:
            raise ConfigError(f"bad corruption spec {item!r}: {exc}") from None
    return ops


def cmd_gen_data(args) -> None:
    grammar = tb.load_grammar(args.grammar)
    vocab = grammar.vocabulary()
    rng = np.random.default_rng(args.seed)
    ops = _parse_ops(args.ops)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    seen: set[TreeNode] = set()
    for split, n in (("train", args.n_train), ("test", args.n_test)):
        groups = []
        stale = 0
        while len(groups) < n:
            before = len(groups)
            pairs = tb.generate_pairs(grammar, ops, n - len(groups), rng, vocab)
            for bad, goods in tb.dedup(pairs):
                if bad not in seen and len(groups) < n:
                    seen.add(bad)
                    groups.append((bad, goods))
            stale = stale + 1 if len(groups) == before else 0
            if stale >= 20:
                raise DataExhausted(f"only {len(groups)} distinct bad trees for the {split} split")
        tb.write_pairs(out / f"{split}.pairs", groups, vocab)
        print(f"{split}\t{len(groups)}\t{out / f'{split}.pairs'}")


def _load_examples(path, vocab, tcfg) -> list[tr.Example]:
    groups = tb.read_pairs(path, vocab)
    return tr.make_examples(tb.flatten(groups), vocab, vocab, tcfg.mode, tcfg.edit_weight)


def cmd_train(args) -> None:
    conf = load_config(args.config)
    if args.resume:
        ck = tr.load_checkpoint(args.resume)
        vocab = ck.tgt_vocab
        tcfg = ck.train_config or _configs(conf, vocab)[1]
        examples = _load_examples(args.data, vocab, tcfg)
        trainer = tr.Trainer.load(args.resume, examples, tcfg)
    else:
        vocab = Vocabulary.load(args.vocab)
        mcfg, tcfg = _configs(conf, vocab)
        examples = _load_examples(args.data, vocab, tcfg)
        trainer = tr.Trainer(mcfg, tcfg, examples, vocab, vocab)
        init = conf["train"].get("init_from")
        if init:
            copied = tr.init_from(trainer.params, tr.load_checkpoint(init).params)
            print(f"init_from\t{init}\t{len(copied)} tensors")
    steps = args.steps if args.steps is not None else tcfg.train_steps - trainer.step_no
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = trainer.run(steps, out_dir=out, log_file=out / "log.jsonl")
    last = trainer.log[-1] if trainer.log else None
    if last:
        print(f"step\t{last['step']}\tloss\t{last['loss']:.6f}")
    print(f"checkpoint\t{written[-1]}")


def cmd_correct(args) -> None:
    conf = load_config(args.config)
    ck = tr.load_checkpoint(args.checkpoint)
    vocab = ck.tgt_vocab
    if vocab is None:
        raise ConfigError("checkpoint carries no vocabulary")
    limits = _limits(conf, args)
    width = args.beam_width or int(conf["decode"].get("beam_width", 6))
    alpha = args.alpha if args.alpha is not None else float(conf["decode"].get("alpha", 0.0))
    lm_params = lm_cfg = None
    if alpha > 0:
        if not args.lm:
            raise ConfigError("alpha > 0 needs --lm")
        lm = tr.load_checkpoint(args.lm)
        lm_params, lm_cfg = lm.params, lm.model_config
    sources = read_trees(args.input, vocab)
    lines = []
    for i, src in enumerate(sources):
        x = linearize(src)
        if args.greedy:
            r = dec.greedy_decode(x, ck.params, ck.model_config, vocab, limits)
            lines.append(f"{i}\t0\t{r.score:.6f}\t{to_sexpr(r.tree, vocab)}")
            continue
        hyps = dec.beam_search(x, ck.params, ck.model_config, vocab, width, alpha, lm_params,
                               lm_cfg, limits, nbest=args.nbest)
        for rank, h in enumerate(hyps):
            flag = "\ttruncated" if h.truncated else ""
            lines.append(f"{i}\t{rank}\t{h.score:.6f}\t{to_sexpr(h.tree(), vocab)}{flag}")
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _read_hypotheses(path, vocab) -> list[TreeNode]:
    """Plain s-expressions, or ``correct`` output (rank-0 lines are used)."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) >= 4:
            if parts[1] != "0":
                continue
            line = parts[3]
        out.append(parse_sexpr(line, vocab))
    return out


def cmd_eval(args) -> None:
    vocab = Vocabulary.load(args.vocab)
    groups = tb.read_pairs(args.pairs, vocab)
    hyps = _read_hypotheses(args.hypotheses, vocab)
    if len(hyps) != len(groups):
        raise ConfigError(f"{len(hyps)} hypotheses for {len(groups)} sources")
    report = tb.evaluate([b for b, _ in groups], hyps, [g for _, g in groups], vocab)
    print("\n".join(report.lines()))


def infer_vocabulary(texts) -> Vocabulary:
    """Heads of parenthesised lists are parent tokens; bare atoms are leaves."""
    parents: dict[str, None] = {}
    leaves: dict[str, None] = {}
    for text in texts:
        tokens = text.replace("(", " ( ").replace(")", " ) ").split()
        for prev, tok in zip(["<start>"] + tokens, tokens):
            if tok in "()":
                continue
            (parents if prev == "(" else leaves).setdefault(tok)
    clash = set(parents) & set(leaves)
    if clash:
        raise ConfigError(f"tokens used both as parent and leaf: {sorted(clash)}")
    return Vocabulary.build(list(parents), list(leaves))


def cmd_editdist(args) -> None:
    texts = [args.a, args.b]
    if args.files:
        texts = [Path(t).read_text(encoding="utf-8").strip() for t in texts]
    vocab = Vocabulary.load(args.vocab) if args.vocab else infer_vocabulary(texts)
    a, b = (parse_sexpr(t, vocab) for t in texts)
    script = tree_edit_distance(a, b)
    names = lambda t: [vocab.name(n.token) for n in t.preorder()]  # noqa: E731
    print(format_script(script, names(a), names(b)))


def cmd_grad_check(args) -> None:
    conf = load_config(args.config)
    model_vals = {"N": 2, "d_model": 16, "d_ff": 32, "h": 2, "d_k": 8, "d_v": 8,
                  "eps_ls": 0.1}
    model_vals.update(conf["model"])
    vocab = Vocabulary.build(["P", "Q", "R"], ["a", "b", "c", "d"])
    mcfg = ModelConfig(src_vocab=len(vocab), tgt_vocab=len(vocab), **model_vals)
    rng = np.random.default_rng(args.seed)
    pairs = [(random_tree(rng, vocab, 6), random_tree(rng, vocab, 6)) for _ in range(2)]
    mode = conf["train"].get("mode", "tree2tree")
    examples = tr.make_examples(pairs, vocab, vocab, mode, 3.0)
    report = tr.model_grad_check(mcfg, examples, vocab.pad_id, mode, args.seed,
                                 n_coords=args.coords)
    worst = 0.0
    print("parameter\tmax_rel_error\tchecked\texcluded")
    for name, e in report.items():
        worst = max(worst, e.max_rel_error)
        print(f"{name}\t{e.max_rel_error:.3e}\t{e.n_checked}\t{len(e.excluded)}")
    print(f"max\t{worst:.3e}")
    if worst >= args.tol:
        raise GradCheckFailed(f"max relative error {worst:.3e} >= {args.tol:g}")


class GradCheckFailed(TreeTxError):
    kind = "GradCheckFailed"


# ----------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: UsageError: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="treetx", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="sample (bad, good) tree pairs from a grammar")
    g.add_argument("--grammar", help="grammar file (default: bundled toy language)")
    g.add_argument("--n-train", type=int, default=10000)
    g.add_argument("--n-test", type=int, default=1000)
    g.add_argument("--ops", default="RelabelNode=1.0",
                   help="comma list of Kind=probability")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a pair file")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--vocab", help="vocabulary file (not needed with --resume)")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--steps", type=int, help="steps to run now (default: up to train_steps)")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("correct", help="decode corrections for source trees")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--input", required=True, help="one s-expression per line")
    c.add_argument("--output")
    c.add_argument("--config")
    c.add_argument("--beam-width", type=int)
    c.add_argument("--alpha", type=float)
    c.add_argument("--lm", help="language-model checkpoint for alpha > 0")
    c.add_argument("--nbest", type=int, default=1)
    c.add_argument("--greedy", action="store_true")
    c.add_argument("--max-nodes", type=int)
    c.add_argument("--max-depth", type=int)
    c.set_defaults(func=cmd_correct)

    e = sub.add_parser("eval", help="precision, recall, F0.5 and exact match")
    e.add_argument("--pairs", required=True, help="pair file with sources and references")
    e.add_argument("--hypotheses", required=True)
    e.add_argument("--vocab", required=True)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("editdist", help="tree edit distance and script")
    d.add_argument("a")
    d.add_argument("b")
    d.add_argument("--vocab")
    d.add_argument("--files", action="store_true", help="treat a and b as file paths")
    d.set_defaults(func=cmd_editdist)

    k = sub.add_parser("grad-check", help="finite-difference gradient table")
    k.add_argument("--config")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--coords", type=int, default=32)
    k.add_argument("--tol", type=float, default=1e-4)
    k.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except TreeTxError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: IOError: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
