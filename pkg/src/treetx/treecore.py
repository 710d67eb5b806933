"""Tree data model, depth-first linearization and the s-expression text format.

Trees are immutable :class:`TreeNode` values over integer token ids.  The
token ids are interpreted by a :class:`Vocabulary`, which also records the
kind of each token (parent, leaf, end-of-siblings, pad).  :class:`DfTree` is
the flat preorder form used everywhere else in the package: a token list plus
parent and left-sibling indices, with :data:`NONE` marking a missing link.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    KindMismatch,
    MalformedTree,
    SexprSyntaxError,
    UnknownToken,
    VocabularyError,
)

#: Sentinel for a missing parent or sibling.  It lies outside ``[0, T)`` and is
#: written as ``-1`` in every external format.
NONE = -1


class TokenKind(str, enum.Enum):
    PARENT = "parent"
    LEAF = "leaf"
    EOS = "eos"
    PAD = "pad"


class Vocabulary:
    """Ordered token inventory; the position of an entry is its token id."""

    def __init__(self, entries: Iterable[tuple[str, TokenKind | str]]):
        self.names: list[str] = []
        self.kinds: list[TokenKind] = []
        self._index: dict[str, int] = {}
        for name, kind in entries:
            kind = TokenKind(kind)
            if not name or any(c.isspace() for c in name) or "(" in name or ")" in name:
                raise VocabularyError(f"invalid token name {name!r}")
            if name in self._index:
                raise VocabularyError(f"duplicate token name {name!r}")
            self._index[name] = len(self.names)
            self.names.append(name)
            self.kinds.append(kind)
        n_eos = self.kinds.count(TokenKind.EOS)
        n_pad = self.kinds.count(TokenKind.PAD)
        if n_eos != 1 or n_pad != 1:
            raise VocabularyError(
                f"vocabulary needs exactly one eos and one pad entry (got {n_eos}, {n_pad})"
            )
        self.eos_id = self.kinds.index(TokenKind.EOS)
        self.pad_id = self.kinds.index(TokenKind.PAD)

    @classmethod
    def build(cls, parents: Sequence[str], leaves: Sequence[str],
              eos: str = "<eos>", pad: str = "<pad>") -> "Vocabulary":
        """Pad first, then end-of-siblings, then parent and leaf tokens."""
        entries = [(pad, TokenKind.PAD), (eos, TokenKind.EOS)]
        entries += [(p, TokenKind.PARENT) for p in parents]
        entries += [(x, TokenKind.LEAF) for x in leaves]
        return cls(entries)

    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Vocabulary) and self.names == other.names
                and self.kinds == other.kinds)

    def __repr__(self) -> str:
        return f"Vocabulary({len(self)} tokens)"

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def id(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownToken(f"unknown token {name!r}") from None

    def name(self, token: int) -> str:
        return self.names[token]

    def kind(self, token: int) -> TokenKind:
        return self.kinds[token]

    def is_parent(self, token: int) -> bool:
        return self.kinds[token] is TokenKind.PARENT

    def is_leaf(self, token: int) -> bool:
        return self.kinds[token] is TokenKind.LEAF

    def is_node(self, token: int) -> bool:
        return self.kinds[token] in (TokenKind.PARENT, TokenKind.LEAF)

    def ids_of_kind(self, kind: TokenKind | str) -> list[int]:
        kind = TokenKind(kind)
        return [i for i, k in enumerate(self.kinds) if k is kind]

    def save(self, path: str | Path) -> None:
        lines = [f"{n}\t{k.value}\n" for n, k in zip(self.names, self.kinds)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        entries = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split("\t")
            if len(parts) != 2:
                raise VocabularyError(f"{path}:{lineno}: expected 'name<TAB>kind'")
            try:
                entries.append((parts[0], TokenKind(parts[1].strip())))
            except ValueError:
                raise VocabularyError(f"{path}:{lineno}: unknown kind {parts[1]!r}") from None
        return cls(entries)


@dataclass(frozen=True)
class TreeNode:
    token: int
    children: tuple["TreeNode", ...] = field(default=())

    def __post_init__(self):
        if not isinstance(self.children, tuple):
            object.__setattr__(self, "children", tuple(self.children))

    def size(self) -> int:
        return sum(1 for _ in self.preorder())

    def preorder(self) -> Iterator["TreeNode"]:
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def depth(self) -> int:
        best = 0
        stack = [(self, 1)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            stack.extend((c, d + 1) for c in node.children)
        return best

    def leaves(self) -> list[int]:
        return [n.token for n in self.preorder() if not n.children]


def validate_tree(tree: TreeNode, vocab: Vocabulary) -> None:
    """Raise if ``tree`` uses an unknown id, a non-node token, or a leaf with children."""
    n = len(vocab)
    for node in tree.preorder():
        if not 0 <= node.token < n:
            raise UnknownToken(f"token id {node.token} outside vocabulary of size {n}")
        kind = vocab.kind(node.token)
        if kind not in (TokenKind.PARENT, TokenKind.LEAF):
            raise KindMismatch(f"{vocab.name(node.token)!r} ({kind.value}) cannot be a tree node")
        if node.children and kind is not TokenKind.PARENT:
            raise KindMismatch(f"leaf {vocab.name(node.token)!r} has children")


@dataclass(frozen=True)
class DfTree:
    """A tree in depth-first preorder with per-node parent/left-sibling indices."""

    tokens: tuple[int, ...]
    parent_idx: tuple[int, ...]
    sibling_idx: tuple[int, ...]

    def __post_init__(self):
        for name in ("tokens", "parent_idx", "sibling_idx"):
            value = getattr(self, name)
            if not isinstance(value, tuple):
                object.__setattr__(self, name, tuple(int(v) for v in value))

    def __len__(self) -> int:
        return len(self.tokens)


def linearize(tree: TreeNode) -> DfTree:
    tokens: list[int] = []
    parents: list[int] = []
    siblings: list[int] = []
    # each frame: (iterator over remaining children, parent index, last emitted child)
    tokens.append(tree.token)
    parents.append(NONE)
    siblings.append(NONE)
    stack = [[iter(tree.children), 0, NONE]]
    while stack:
        frame = stack[-1]
        child = next(frame[0], None)
        if child is None:
            stack.pop()
            continue
        me = len(tokens)
        tokens.append(child.token)
        parents.append(frame[1])
        siblings.append(frame[2])
        frame[2] = me
        if child.children:
            stack.append([iter(child.children), me, NONE])
    return DfTree(tuple(tokens), tuple(parents), tuple(siblings))


def check_dftree(df: DfTree, vocab: Vocabulary | None = None) -> None:
    """Validate every :class:`DfTree` invariant; raise :class:`MalformedTree`."""
    n = len(df.tokens)
    if len(df.parent_idx) != n or len(df.sibling_idx) != n:
        raise MalformedTree(
            f"inconsistent lengths: {n} tokens, {len(df.parent_idx)} parents, "
            f"{len(df.sibling_idx)} siblings")
    if n == 0:
        raise MalformedTree("empty tree")
    if df.parent_idx[0] != NONE or df.sibling_idx[0] != NONE:
        raise MalformedTree("position 0 must be the root")
    if vocab is not None:
        for t, tok in enumerate(df.tokens):
            if not 0 <= tok < len(vocab):
                raise MalformedTree(f"token id {tok} at {t} outside vocabulary")
            if not vocab.is_node(tok):
                raise MalformedTree(f"{vocab.name(tok)!r} at {t} is not a node token")
    path = [0]
    last_child: dict[int, int] = {}
    for t in range(1, n):
        p, s = df.parent_idx[t], df.sibling_idx[t]
        if not 0 <= p < t:
            raise MalformedTree(f"parent index {p} at position {t} does not precede it")
        if s != NONE and not 0 <= s < t:
            raise MalformedTree(f"sibling index {s} at position {t} does not precede it")
        if vocab is not None and not vocab.is_parent(df.tokens[p]):
            raise MalformedTree(
                f"position {t} names {vocab.name(df.tokens[p])!r} at {p} as parent, "
                "but it is not a parent token")
        while path and path[-1] != p:
            path.pop()
        if not path:
            raise MalformedTree(f"position {t}: parent {p} is not on the current preorder path")
        expected = last_child.get(p, NONE)
        if s != expected:
            raise MalformedTree(
                f"position {t}: sibling link {s} disagrees with parent links (expected {expected})")
        last_child[p] = t
        path.append(t)


def delinearize(df: DfTree, vocab: Vocabulary | None = None) -> TreeNode:
    check_dftree(df, vocab)
    n = len(df.tokens)
    kids: list[list[int]] = [[] for _ in range(n)]
    for t in range(1, n):
        kids[df.parent_idx[t]].append(t)
    built: list[TreeNode | None] = [None] * n
    for t in range(n - 1, -1, -1):  # children always follow their parent
        built[t] = TreeNode(df.tokens[t], tuple(built[c] for c in kids[t]))
    return built[0]


_SEXPR_TOKEN = re.compile(r"\(|\)|[^\s()]+")


def parse_sexpr(text: str, vocab: Vocabulary) -> TreeNode:
    """Parse ``(Head child ...)`` / ``atom`` into a tree.

    Heads must be parent tokens and bare atoms leaf tokens; a childless
    parent is written ``(P)``.
    """
    toks = _SEXPR_TOKEN.findall(text)
    if not toks:
        raise SexprSyntaxError("empty expression")
    pos = 0

    def lookup(name: str) -> int:
        return vocab.id(name)

    def parse() -> TreeNode:
        nonlocal pos
        if pos >= len(toks):
            raise SexprSyntaxError("unexpected end of input (unbalanced parentheses)")
        tok = toks[pos]
        pos += 1
        if tok == ")":
            raise SexprSyntaxError("unexpected ')'")
        if tok != "(":
            tid = lookup(tok)
            if not vocab.is_leaf(tid):
                raise KindMismatch(f"{tok!r} used as an atom but is {vocab.kind(tid).value}-kind")
            return TreeNode(tid)
        if pos >= len(toks) or toks[pos] in "()":
            raise SexprSyntaxError("expected a head symbol after '('")
        head = toks[pos]
        pos += 1
        hid = lookup(head)
        if not vocab.is_parent(hid):
            raise KindMismatch(f"{head!r} used as a head but is {vocab.kind(hid).value}-kind")
        children = []
        while True:
            if pos >= len(toks):
                raise SexprSyntaxError("unbalanced parentheses: missing ')'")
            if toks[pos] == ")":
                pos += 1
                return TreeNode(hid, tuple(children))
            children.append(parse())

    tree = parse()
    if pos != len(toks):
        raise SexprSyntaxError(f"trailing input after expression: {' '.join(toks[pos:])!r}")
    return tree


def to_sexpr(tree: TreeNode, vocab: Vocabulary) -> str:
    out: list[str] = []
    stack: list[TreeNode | str] = [tree]
    while stack:
        item = stack.pop()
        if isinstance(item, str):
            out.append(item)
            continue
        name = vocab.name(item.token)
        if vocab.is_parent(item.token):
            out.append("(" + name)
            stack.append(")")
            stack.extend(reversed(item.children))
        else:
            out.append(name)
    # closing parens attach to the preceding token
    text = " ".join(out)
    return text.replace(" )", ")")


def read_trees(path: str | Path, vocab: Vocabulary) -> list[TreeNode]:
    trees = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        trees.append(parse_sexpr(line, vocab))
    return trees


def write_trees(path: str | Path, trees: Iterable[TreeNode], vocab: Vocabulary) -> None:
    Path(path).write_text("".join(to_sexpr(t, vocab) + "\n" for t in trees), encoding="utf-8")


def random_tree(rng: np.random.Generator, vocab: Vocabulary, max_nodes: int,
                p_parent: float = 0.4, max_children: int = 4) -> TreeNode:
    """Uniform-ish random tree with at most ``max_nodes`` nodes (used by tests and benches)."""
    parents = vocab.ids_of_kind(TokenKind.PARENT)
    leaves = vocab.ids_of_kind(TokenKind.LEAF)
    budget = [max(1, int(rng.integers(1, max_nodes + 1)))]

    def grow() -> TreeNode:
        budget[0] -= 1
        if parents and (not leaves or rng.random() < p_parent):
            tok = int(rng.choice(parents))
            kids = []
            for _ in range(int(rng.integers(0, max_children + 1))):
                if budget[0] <= 0:
                    break
                kids.append(grow())
            return TreeNode(tok, tuple(kids))
        return TreeNode(int(rng.choice(leaves)))

    return grow()
