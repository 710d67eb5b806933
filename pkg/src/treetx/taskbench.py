"""Synthetic correction tasks and their metrics.

A small grammar file describes a toy programming language.  Good trees are
sampled from it, variables are renamed canonically, and corruption operators
turn each good tree into a bad one.  Corrections are scored with span edits
extracted from leaf sequences (precision, recall and F0.5) and with exact
tree match.

Grammar file syntax::

    %start Func            # root symbol (must be a node label)
    %vars 6                # leaf tokens VAR_0 .. VAR_5, used via $VAR
    %chars 0 1 2           # literal characters, used via $DIGITS
    %max_literal 2         # $DIGITS expands to 1..2 characters
    %max_depth 6
    %max_nodes 25
    Assign -> $VAR expr
    expr -> $VAR [3] | Num [2] | BinOp
    op -> + | - | *

Capitalised symbols with productions become parent tokens.  Lowercase
symbols with productions are spliced into their parent's child list.  Any
other symbol is a leaf token.  ``[w]`` sets a production weight (default 1);
an empty alternative allows zero children.  A line starting with ``|``
continues the previous rule.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import DepthExceeded, GrammarError, PairRejected
from .treecore import TreeNode, Vocabulary, parse_sexpr, to_sexpr

DEFAULT_GRAMMAR = "toylang.grammar"


# ---------------------------------------------------------------- grammar


@dataclass(frozen=True)
class Production:
    symbols: tuple[str, ...]
    weight: float = 1.0


@dataclass
class GrammarSpec:
    rules: dict[str, list[Production]]
    start: str
    n_vars: int = 0
    chars: tuple[str, ...] = ()
    max_literal: int = 2
    max_depth: int = 8
    max_nodes: int = 25

    def __post_init__(self):
        if self.start not in self.rules or not self.is_label(self.start):
            raise GrammarError(f"start symbol {self.start!r} must be a capitalised rule")
        for lhs, prods in self.rules.items():
            if not prods:
                raise GrammarError(f"{lhs} has no productions")
            for prod in prods:
                if not prod.weight > 0:
                    raise GrammarError(f"{lhs}: weights must be positive")
                for sym in prod.symbols:
                    if sym == "$VAR" and not self.n_vars:
                        raise GrammarError("$VAR used without %vars")
                    if sym == "$DIGITS" and not self.chars:
                        raise GrammarError("$DIGITS used without %chars")
                    if sym.startswith("$") and sym not in ("$VAR", "$DIGITS"):
                        raise GrammarError(f"unknown macro {sym}")
        self._check_transparent_cycles()
        if any(h == np.inf for h in self.min_height.values()):
            bad = [s for s, h in self.min_height.items() if h == np.inf]
            raise GrammarError(f"symbols derive no finite tree: {', '.join(bad)}")

    # ----------------------------------------------------------- symbols

    def is_label(self, sym: str) -> bool:
        return sym in self.rules and sym[0].isupper()

    def is_transparent(self, sym: str) -> bool:
        return sym in self.rules and not sym[0].isupper()

    @cached_property
    def var_tokens(self) -> tuple[str, ...]:
        return tuple(f"VAR_{i}" for i in range(self.n_vars))

    @cached_property
    def labels(self) -> list[str]:
        return [s for s in self.rules if self.is_label(s)]

    @cached_property
    def terminals(self) -> list[str]:
        seen: dict[str, None] = {}
        for prods in self.rules.values():
            for prod in prods:
                for sym in prod.symbols:
                    if sym not in self.rules and not sym.startswith("$"):
                        seen.setdefault(sym)
        return list(seen)

    def vocabulary(self) -> Vocabulary:
        leaves = self.terminals + list(self.var_tokens)
        leaves += [c for c in self.chars if c not in leaves]
        return Vocabulary.build(self.labels, leaves)

    def _check_transparent_cycles(self) -> None:
        state: dict[str, int] = {}

        def visit(sym, path):
            if state.get(sym) == 1:
                raise GrammarError(f"spliced symbols form a cycle: {' -> '.join(path + [sym])}")
            if state.get(sym) == 2:
                return
            state[sym] = 1
            for prod in self.rules[sym]:
                for s in prod.symbols:
                    if self.is_transparent(s):
                        visit(s, path + [sym])
            state[sym] = 2

        for sym in self.rules:
            if self.is_transparent(sym):
                visit(sym, [])

    @cached_property
    def min_height(self) -> dict[str, float]:
        """Smallest subtree height each rule symbol can derive (spliced rules add none)."""
        h = {s: np.inf for s in self.rules}
        changed = True
        while changed:
            changed = False
            for sym, prods in self.rules.items():
                best = min(self._prod_height(p, h) for p in prods)
                best += 1 if self.is_label(sym) else 0
                if best < h[sym]:
                    h[sym] = best
                    changed = True
        return h

    def _prod_height(self, prod: Production, h) -> float:
        out = 0.0
        for sym in prod.symbols:
            out = max(out, h[sym] if sym in self.rules else 1)
        return out

    # ----------------------------------------------------------- sampling

    def sample(self, rng: np.random.Generator, vocab: Vocabulary | None = None,
               retries: int = 100) -> TreeNode:
        """Weighted top-down expansion.  Near the depth cutoff only the
        shallowest productions are used; oversized trees are resampled."""
        vocab = vocab or self.vocabulary()
        for _ in range(retries):
            tree = self._expand_label(self.start, 1, rng, vocab)
            if tree.size() <= self.max_nodes:
                return tree
        raise DepthExceeded(f"no tree within {self.max_nodes} nodes after {retries} tries")

    def _choose(self, sym: str, budget: int, rng) -> Production:
        prods = self.rules[sym]
        fits = [p for p in prods if self._prod_height(p, self.min_height) <= budget]
        if not fits:
            low = min(self._prod_height(p, self.min_height) for p in prods)
            fits = [p for p in prods if self._prod_height(p, self.min_height) == low]
        w = np.array([p.weight for p in fits])
        return fits[int(rng.choice(len(fits), p=w / w.sum()))]

    def _expand_label(self, sym: str, depth: int, rng, vocab) -> TreeNode:
        prod = self._choose(sym, self.max_depth - depth, rng)
        kids: list[TreeNode] = []
        for s in prod.symbols:
            kids.extend(self._expand(s, depth + 1, rng, vocab))
        return TreeNode(vocab.id(sym), tuple(kids))

    def _expand(self, sym: str, depth: int, rng, vocab) -> list[TreeNode]:
        if sym == "$VAR":
            return [TreeNode(vocab.id(self.var_tokens[int(rng.integers(self.n_vars))]))]
        if sym == "$DIGITS":
            n = int(rng.integers(1, self.max_literal + 1))
            return [TreeNode(vocab.id(self.chars[int(rng.integers(len(self.chars)))]))
                    for _ in range(n)]
        if self.is_label(sym):
            return [self._expand_label(sym, depth, rng, vocab)]
        if self.is_transparent(sym):
            prod = self._choose(sym, self.max_depth - depth + 1, rng)
            out: list[TreeNode] = []
            for s in prod.symbols:
                out.extend(self._expand(s, depth, rng, vocab))
            return out
        return [TreeNode(vocab.id(sym))]

    # ---------------------------------------------------------- checking

    def _code(self, name: str) -> str:
        return chr(0xE000 + self._codes[name])

    @cached_property
    def _codes(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.vocabulary().names)}

    def _regex(self, sym: str) -> str:
        if sym == "$VAR":
            return "[" + "".join(self._code(v) for v in self.var_tokens) + "]"
        if sym == "$DIGITS":
            chars = "[" + "".join(self._code(c) for c in dict.fromkeys(self.chars)) + "]"
            return f"{chars}{{1,{self.max_literal}}}"
        if self.is_transparent(sym):
            return "(?:" + "|".join(self._prod_regex(p) for p in self.rules[sym]) + ")"
        return re.escape(self._code(sym))

    def _prod_regex(self, prod: Production) -> str:
        return "".join(self._regex(s) for s in prod.symbols)

    @cached_property
    def _child_patterns(self) -> dict[str, re.Pattern]:
        return {lab: re.compile("|".join(f"(?:{self._prod_regex(p)})" for p in self.rules[lab]))
                for lab in self.labels}

    def node_ok(self, node: TreeNode, vocab: Vocabulary) -> bool:
        """Does ``node``'s child label sequence match one of its productions?"""
        name = vocab.name(node.token)
        pattern = self._child_patterns.get(name)
        if pattern is None:
            return not node.children
        kids = "".join(self._code(vocab.name(c.token)) for c in node.children)
        return pattern.fullmatch(kids) is not None

    def accepts(self, tree: TreeNode, vocab: Vocabulary | None = None) -> bool:
        vocab = vocab or self.vocabulary()
        if vocab.name(tree.token) != self.start:
            return False
        if tree.depth() > self.max_depth:
            return False
        return all(self.node_ok(n, vocab) for n in tree.preorder())


_DIRECTIVES = {"start", "vars", "chars", "max_literal", "max_depth", "max_nodes"}


def parse_grammar(text: str) -> GrammarSpec:
    rules: dict[str, list[Production]] = {}
    opts: dict[str, list[str]] = {}
    last = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip() if not raw.lstrip().startswith("#") else ""
        if not line:
            continue
        if line.startswith("%"):
            key, *args = line[1:].split()
            if key not in _DIRECTIVES:
                raise GrammarError(f"line {lineno}: unknown directive %{key}")
            opts[key] = args
            continue
        if line.startswith("|"):
            if last is None:
                raise GrammarError(f"line {lineno}: continuation without a rule")
            lhs, rhs = last, line[1:]
        else:
            lhs, sep, rhs = line.partition("->")
            lhs = lhs.strip()
            if not sep or not lhs or " " in lhs:
                raise GrammarError(f"line {lineno}: expected 'Symbol -> alternatives'")
            last = lhs
        rules.setdefault(lhs, []).extend(_parse_alternatives(rhs, lineno))
    try:
        start = opts["start"][0]
        spec = GrammarSpec(
            rules, start,
            n_vars=int(opts.get("vars", ["0"])[0]),
            chars=tuple(opts.get("chars", [])),
            max_literal=int(opts.get("max_literal", ["2"])[0]),
            max_depth=int(opts.get("max_depth", ["8"])[0]),
            max_nodes=int(opts.get("max_nodes", ["25"])[0]),
        )
    except (KeyError, IndexError):
        raise GrammarError("grammar needs a %start directive") from None
    except ValueError as exc:
        raise GrammarError(f"bad directive value: {exc}") from None
    return spec


def _parse_alternatives(rhs: str, lineno: int) -> list[Production]:
    out = []
    for alt in rhs.split("|"):
        weight = 1.0
        m = re.search(r"\[([^\]]*)\]\s*$", alt)
        if m:
            try:
                weight = float(m.group(1))
            except ValueError:
                raise GrammarError(f"line {lineno}: bad weight {m.group(1)!r}") from None
            alt = alt[: m.start()]
        out.append(Production(tuple(alt.split()), weight))
    return out


def load_grammar(path: str | Path | None = None) -> GrammarSpec:
    """Read a grammar file; ``None`` loads the bundled toy language."""
    if path is None:
        text = resources.files("treetx").joinpath("grammars", DEFAULT_GRAMMAR).read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_grammar(text)


# ------------------------------------------------------------- corruption


class CorruptionKind(str, enum.Enum):
    RELABEL = "RelabelNode"
    DELETE_CHILD = "DeleteSubtreeChild"
    INSERT_PARENT = "InsertRedundantParent"
    SWAP = "SwapSiblings"
    RENAME = "InconsistentRename"


@dataclass(frozen=True)
class CorruptionOp:
    """One corruption kind fired with probability ``p``.

    With ``recoverable`` (relabel only), the relabel must leave the tree
    outside the grammar with the original label as its only single-relabel
    repair, so the correction is determined by the bad tree alone.
    """

    kind: CorruptionKind
    p: float = 1.0
    recoverable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", CorruptionKind(self.kind))
        if not 0 <= self.p <= 1:
            raise ValueError("corruption probability must lie in [0, 1]")


def _paths(tree: TreeNode) -> list[tuple[int, ...]]:
    out = []
    stack = [((), tree)]
    while stack:
        path, node = stack.pop()
        out.append(path)
        for i in reversed(range(len(node.children))):
            stack.append((path + (i,), node.children[i]))
    return out


def _get(tree: TreeNode, path: Sequence[int]) -> TreeNode:
    for i in path:
        tree = tree.children[i]
    return tree


def _replace(tree: TreeNode, path: Sequence[int], new: TreeNode) -> TreeNode:
    if not path:
        return new
    i = path[0]
    kids = list(tree.children)
    kids[i] = _replace(kids[i], path[1:], new)
    return TreeNode(tree.token, tuple(kids))


def _relabel_candidates(vocab: Vocabulary, token: int) -> list[int]:
    same = vocab.ids_of_kind(vocab.kind(token))
    return [t for t in same if t != token]


def _relabel_valid_here(grammar: GrammarSpec, vocab: Vocabulary, tree: TreeNode,
                        path: tuple[int, ...], token: int) -> bool:
    """Grammar check restricted to what a relabel at ``path`` can change."""
    node = _get(tree, path)
    if not grammar.node_ok(TreeNode(token, node.children), vocab):
        return False
    if not path:
        return vocab.name(token) == grammar.start
    parent = _get(tree, path[:-1])
    kids = list(parent.children)
    kids[path[-1]] = TreeNode(token, node.children)
    return grammar.node_ok(TreeNode(parent.token, tuple(kids)), vocab)


def _relabel(tree, rng, vocab, grammar, recoverable) -> TreeNode | None:
    paths = _paths(tree)
    for _ in range(64):
        path = paths[int(rng.integers(len(paths)))]
        node = _get(tree, path)
        options = _relabel_candidates(vocab, node.token)
        if not options:
            continue
        new = options[int(rng.integers(len(options)))]
        if recoverable:
            if grammar is None:
                raise ValueError("recoverable relabeling needs the grammar")
            if _relabel_valid_here(grammar, vocab, tree, path, new):
                continue
            bad = _replace(tree, path, TreeNode(new, node.children))
            if not _only_repair(grammar, vocab, bad, path, node.token):
                continue
        return _replace(tree, path, TreeNode(new, node.children))
    return None


def _only_repair(grammar, vocab, bad, path, original) -> bool:
    """Is relabeling ``path`` back to ``original`` the single one-relabel fix of ``bad``?

    A relabel at node q only changes whether q and q's parent are well
    formed, so the candidate sites are the node, its children, its parent
    and its siblings.
    """
    if grammar.accepts(bad, vocab):
        return False
    node = _get(bad, path)
    sites = {path} | {path + (i,) for i in range(len(node.children))}
    if path:
        up = path[:-1]
        sites |= {up} | {up + (i,) for i in range(len(_get(bad, up).children))}
    repairs = []
    for q in sorted(sites):
        cur = _get(bad, q)
        for t in _relabel_candidates(vocab, cur.token):
            if not _relabel_valid_here(grammar, vocab, bad, q, t):
                continue
            if grammar.accepts(_replace(bad, q, TreeNode(t, cur.children)), vocab):
                repairs.append((q, t))
                if len(repairs) > 1:
                    return False
    return repairs == [(path, original)]


def _delete_child(tree, rng, vocab, grammar, recoverable) -> TreeNode | None:
    paths = [p for p in _paths(tree) if _get(tree, p).children]
    if not paths:
        return None
    path = paths[int(rng.integers(len(paths)))]
    node = _get(tree, path)
    i = int(rng.integers(len(node.children)))
    kids = node.children[:i] + node.children[i + 1:]
    return _replace(tree, path, TreeNode(node.token, kids))


def _insert_parent(tree, rng, vocab, grammar, recoverable) -> TreeNode | None:
    paths = [p for p in _paths(tree) if p]
    parents = vocab.ids_of_kind("parent")
    if not paths or not parents:
        return None
    path = paths[int(rng.integers(len(paths)))]
    wrapper = parents[int(rng.integers(len(parents)))]
    return _replace(tree, path, TreeNode(wrapper, (_get(tree, path),)))


def _swap(tree, rng, vocab, grammar, recoverable) -> TreeNode | None:
    options = []
    for p in _paths(tree):
        kids = _get(tree, p).children
        options += [(p, i) for i in range(len(kids) - 1) if kids[i] != kids[i + 1]]
    if not options:
        return None
    path, i = options[int(rng.integers(len(options)))]
    node = _get(tree, path)
    kids = list(node.children)
    kids[i], kids[i + 1] = kids[i + 1], kids[i]
    return _replace(tree, path, TreeNode(node.token, tuple(kids)))


def _rename(tree, rng, vocab, grammar, recoverable) -> TreeNode | None:
    var_ids = {i for i, n in enumerate(vocab.names) if n.startswith("VAR_")}
    paths = [p for p in _paths(tree) if _get(tree, p).token in var_ids]
    if not paths or len(var_ids) < 2:
        return None
    path = paths[int(rng.integers(len(paths)))]
    old = _get(tree, path).token
    choices = sorted(var_ids - {old})
    return _replace(tree, path, TreeNode(choices[int(rng.integers(len(choices)))]))


_APPLY = {
    CorruptionKind.RELABEL: _relabel,
    CorruptionKind.DELETE_CHILD: _delete_child,
    CorruptionKind.INSERT_PARENT: _insert_parent,
    CorruptionKind.SWAP: _swap,
    CorruptionKind.RENAME: _rename,
}


def apply_corruption(op: CorruptionOp, tree: TreeNode, rng: np.random.Generator,
                     vocab: Vocabulary, grammar: GrammarSpec | None = None) -> TreeNode | None:
    """Apply one operator; ``None`` when it has no valid site in ``tree``."""
    return _APPLY[op.kind](tree, rng, vocab, grammar, op.recoverable)


def rename_variables(tree: TreeNode, vocab: Vocabulary) -> TreeNode:
    """Rename variables to VAR_0, VAR_1, ... in order of first preorder occurrence."""
    var_names = {i: n for i, n in enumerate(vocab.names) if n.startswith("VAR_")}
    mapping: dict[int, int] = {}

    def conv(node: TreeNode) -> TreeNode:
        if node.token in var_names:
            if node.token not in mapping:
                mapping[node.token] = vocab.id(f"VAR_{len(mapping)}")
            return TreeNode(mapping[node.token])
        return TreeNode(node.token, tuple(conv(c) for c in node.children))

    return conv(tree)


def sample_pair(grammar: GrammarSpec, ops: Sequence[CorruptionOp], rng: np.random.Generator,
                vocab: Vocabulary | None = None) -> tuple[TreeNode, TreeNode]:
    """Sample (bad, good): good from the grammar, renamed; bad has at least one corruption."""
    vocab = vocab or grammar.vocabulary()
    good = rename_variables(grammar.sample(rng, vocab), vocab)
    active = [op for op in ops if op.p > 0]
    if not active:
        raise PairRejected("no corruption operator configured")
    fired = [op for op in active if rng.random() < op.p]
    if not fired:
        w = np.array([op.p for op in active])
        fired = [active[int(rng.choice(len(active), p=w / w.sum()))]]
    bad = good
    for op in fired:
        out = apply_corruption(op, bad, rng, vocab, grammar)
        if out is not None:
            bad = out
    if bad == good:
        raise PairRejected("corruption left the tree unchanged")
    return bad, good


def generate_pairs(grammar: GrammarSpec, ops: Sequence[CorruptionOp], n: int,
                   rng: np.random.Generator, vocab: Vocabulary | None = None,
                   max_rejects: int | None = None) -> list[tuple[TreeNode, TreeNode]]:
    vocab = vocab or grammar.vocabulary()
    max_rejects = 20 * n + 100 if max_rejects is None else max_rejects
    out, rejects = [], 0
    while len(out) < n:
        try:
            out.append(sample_pair(grammar, ops, rng, vocab))
        except (PairRejected, DepthExceeded):
            rejects += 1
            if rejects > max_rejects:
                raise PairRejected(f"{rejects} rejected samples; check the corruption setup")
    return out


def dedup(pairs: Iterable[tuple[TreeNode, TreeNode]]) -> list[tuple[TreeNode, tuple[TreeNode, ...]]]:
    """Drop bad == good pairs and merge identical bad trees (first-seen order)."""
    groups: dict[TreeNode, dict[TreeNode, None]] = {}
    for bad, good in pairs:
        if bad == good:
            continue
        groups.setdefault(bad, {})[good] = None
    return [(bad, tuple(goods)) for bad, goods in groups.items()]


def flatten(groups: Iterable[tuple[TreeNode, Iterable[TreeNode]]]) -> list[tuple[TreeNode, TreeNode]]:
    return [(bad, good) for bad, goods in groups for good in goods]


def write_pairs(path: str | Path, groups, vocab: Vocabulary) -> None:
    """One group per line: ``bad<TAB>good[<TAB>good...]`` as s-expressions."""
    with open(path, "w", encoding="utf-8") as fh:
        for bad, goods in groups:
            fh.write("\t".join([to_sexpr(bad, vocab)] + [to_sexpr(g, vocab) for g in goods]) + "\n")


def read_pairs(path: str | Path, vocab: Vocabulary) -> list[tuple[TreeNode, tuple[TreeNode, ...]]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        bad, *goods = line.split("\t")
        out.append((parse_sexpr(bad, vocab), tuple(parse_sexpr(g, vocab) for g in goods)))
    return out


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class Edit:
    start: int
    end: int
    replacement: tuple[str, ...]


EditSet = tuple  # tuple[Edit, ...], sorted and non-overlapping


def leaf_tokens(tree: TreeNode, vocab: Vocabulary) -> list[str]:
    """Left-to-right leaf names: the detokenized text of a tree."""
    return [vocab.name(t) for t in tree.leaves()]


def extract_edits(source: Sequence[str], hypothesis: Sequence[str]) -> EditSet:
    """Span edits from a minimal Levenshtein alignment.

    The backtrace runs from the end and prefers match, then substitution, then
    deletion, then insertion, which places edits as far left as possible.
    Adjacent non-match operations merge into one span.
    """
    ids: dict[str, int] = {}
    a = np.array([ids.setdefault(t, len(ids)) for t in source], dtype=np.int64)
    b = np.array([ids.setdefault(t, len(ids)) for t in hypothesis], dtype=np.int64)
    d = _kernels.levenshtein_table(a, b)
    ops: list[tuple[str, int, int]] = []  # (op, source index, hypothesis index)
    i, j = len(a), len(b)
    while i > 0 or j > 0:
        here = d[i, j]
        if i > 0 and j > 0 and a[i - 1] == b[j - 1] and here == d[i - 1, j - 1]:
            ops.append(("M", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and here == d[i - 1, j - 1] + 1:
            ops.append(("S", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and here == d[i - 1, j] + 1:
            ops.append(("D", i - 1, j))
            i -= 1
        else:
            ops.append(("I", i, j - 1))
            j -= 1
    ops.reverse()
    edits: list[Edit] = []
    span = None  # [start, end, replacement list]
    for op, si, hj in ops:
        if op == "M":
            if span:
                edits.append(Edit(span[0], span[1], tuple(span[2])))
                span = None
            continue
        if span is None:
            span = [si, si, []]
        if op in ("S", "D"):
            span[1] = si + 1
        if op in ("S", "I"):
            span[2].append(hypothesis[hj])
    if span:
        edits.append(Edit(span[0], span[1], tuple(span[2])))
    return tuple(edits)


def apply_edits(source: Sequence[str], edits: EditSet) -> list[str]:
    out: list[str] = []
    pos = 0
    for e in sorted(edits, key=lambda e: (e.start, e.end)):
        if e.start < pos:
            raise ValueError("overlapping edits")
        out.extend(source[pos: e.start])
        out.extend(e.replacement)
        pos = e.end
    out.extend(source[pos:])
    return out


def f_beta(p: float, r: float, beta: float = 0.5) -> float:
    b2 = beta * beta
    denom = b2 * p + r
    return 0.0 if denom == 0 else (1 + b2) * p * r / denom


@dataclass(frozen=True)
class Counts:
    matches: int = 0
    system: int = 0
    reference: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.matches + other.matches, self.system + other.system,
                      self.reference + other.reference)

    @property
    def precision(self) -> float:
        if self.system == 0:
            return 1.0 if self.reference == 0 else 0.0
        return self.matches / self.system

    @property
    def recall(self) -> float:
        return 1.0 if self.reference == 0 else self.matches / self.reference

    @property
    def f05(self) -> float:
        return f_beta(self.precision, self.recall)


@dataclass(frozen=True)
class Score:
    precision: float
    recall: float
    f05: float
    counts: Counts = field(default_factory=Counts)


def _counts(system: EditSet, reference: EditSet) -> Counts:
    return Counts(len(set(system) & set(reference)), len(system), len(reference))


def best_reference(system: EditSet, references: Sequence[EditSet]) -> Counts:
    """Counts against the reference with the highest sentence F0.5 (earliest on ties)."""
    if not references:
        raise ValueError("at least one reference is required")
    best = None
    for ref in references:
        c = _counts(system, ref)
        if best is None or c.f05 > best.f05:
            best = c
    return best


def score(system: EditSet, references: Sequence[EditSet]) -> Score:
    c = best_reference(system, references)
    return Score(c.precision, c.recall, c.f05, c)


def corpus_score(items: Iterable[tuple[EditSet, Sequence[EditSet]]]) -> Score:
    """Sum matched/system/reference counts over sentences, then compute P, R, F0.5."""
    total = Counts()
    for system, refs in items:
        total = total + best_reference(system, refs)
    return Score(total.precision, total.recall, total.f05, total)


def exact_match(hyp: TreeNode, refs: Iterable[TreeNode]) -> bool:
    return any(hyp == r for r in refs)


@dataclass(frozen=True)
class EvalReport:
    n: int
    precision: float
    recall: float
    f05: float
    exact: float

    def lines(self) -> list[str]:
        return [f"sentences\t{self.n}", f"precision\t{self.precision:.4f}",
                f"recall\t{self.recall:.4f}", f"f0.5\t{self.f05:.4f}",
                f"exact_match\t{self.exact:.4f}"]


def evaluate(sources: Sequence[TreeNode], hypotheses: Sequence[TreeNode],
             references: Sequence[Sequence[TreeNode]], vocab: Vocabulary) -> EvalReport:
    if not len(sources) == len(hypotheses) == len(references):
        raise ValueError("sources, hypotheses and references differ in length")
    items, exact = [], 0
    for src, hyp, refs in zip(sources, hypotheses, references):
        s = leaf_tokens(src, vocab)
        sys_edits = extract_edits(s, leaf_tokens(hyp, vocab))
        ref_edits = [extract_edits(s, leaf_tokens(r, vocab)) for r in refs]
        items.append((sys_edits, ref_edits))
        exact += exact_match(hyp, refs)
    sc = corpus_score(items)
    return EvalReport(len(sources), sc.precision, sc.recall, sc.f05, exact / max(1, len(sources)))
