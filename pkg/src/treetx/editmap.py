"""Ordered tree edit distance with node mapping, and edit-based loss weights.

The distance is the classical Zhang-Shasha dynamic program over postorder
keyroots with unit costs for relabel, insert and delete.  After the distance
table is filled, one backtrace recovers a minimal mapping.  Ties are broken
toward mapping nodes (match or relabel) first, then deletion, then insertion.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import SizeLimit
from .treecore import TreeNode

DEFAULT_SIZE_CAP = 10**6


class EditTag(str, enum.Enum):
    MATCH = "match"
    RELABEL = "relabel"
    INSERT = "insert"
    DELETE = "delete"


@dataclass(frozen=True)
class EditScript:
    distance: int
    mapping: tuple[tuple[int, int], ...]
    source_tags: tuple[EditTag, ...]
    target_tags: tuple[EditTag, ...]

    def count(self, tag: EditTag) -> int:
        side = self.target_tags if tag is EditTag.INSERT else self.source_tags
        return sum(1 for t in side if t is tag)


@dataclass(frozen=True)
class EditLabeling:
    lam: tuple[float, ...]


class _Postorder:
    """Postorder arrays of a tree plus the map back to preorder positions."""

    __slots__ = ("labels", "lmld", "keyroots", "pre")

    def __init__(self, tree: TreeNode):
        labels: list[int] = []
        lmld: list[int] = []
        pre: list[int] = []
        n_pre = 0
        # (node, expanded, preorder id, postorder slot where its subtree starts)
        stack: list[tuple[TreeNode, bool, int, int]] = [(tree, False, 0, 0)]
        while stack:
            node, expanded, pid, start = stack.pop()
            if expanded:
                labels.append(node.token)
                lmld.append(start)  # the first postorder slot of a subtree is its leftmost leaf
                pre.append(pid)
                continue
            stack.append((node, True, n_pre, len(labels)))
            n_pre += 1
            stack.extend((c, False, 0, 0) for c in reversed(node.children))
        self.labels = np.asarray(labels, dtype=np.int64)
        self.lmld = np.asarray(lmld, dtype=np.int64)
        self.pre = np.asarray(pre, dtype=np.int64)
        highest: dict[int, int] = {}
        for i, leftmost in enumerate(lmld):
            highest[leftmost] = i
        self.keyroots = np.asarray(sorted(highest.values()), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)


def tree_distance(a: TreeNode, b: TreeNode) -> int:
    """Unit-cost edit distance only, without recovering the mapping."""
    pa, pb = _Postorder(a), _Postorder(b)
    td = _kernels.tree_dist_table(pa.labels, pa.lmld, pa.keyroots, pb.labels, pb.lmld, pb.keyroots)
    return int(td[-1, -1])


def tree_edit_distance(a: TreeNode | None, b: TreeNode | None,
                       size_cap: int = DEFAULT_SIZE_CAP) -> EditScript:
    """Minimal unit-cost edit script between two ordered labeled trees.

    Node indices in ``mapping`` and the tag tuples are depth-first preorder
    positions.  ``None`` stands for the empty tree.
    """
    if a is None or b is None:
        na = 0 if a is None else a.size()
        nb = 0 if b is None else b.size()
        return EditScript(na + nb, (), (EditTag.DELETE,) * na, (EditTag.INSERT,) * nb)
    pa, pb = _Postorder(a), _Postorder(b)
    n, m = len(pa), len(pb)
    if n * m > size_cap:
        raise SizeLimit(f"{n} x {m} nodes exceeds the size cap {size_cap}")
    la, ma, lb, mb = pa.labels, pa.lmld, pb.labels, pb.lmld
    td = _kernels.tree_dist_table(la, ma, pa.keyroots, lb, mb, pb.keyroots)
    ma_l, mb_l, la_l, lb_l = ma.tolist(), mb.tolist(), la.tolist(), lb.tolist()

    mapping: list[tuple[int, int]] = []
    pending = [(n - 1, m - 1)]
    while pending:
        i, j = pending.pop()
        fd = _kernels.forest_table(la, ma, lb, mb, td, i, j, False)
        li, lj = ma_l[i], mb_l[j]
        x, y = i - li + 1, j - lj + 1
        while x > 0 or y > 0:
            here = fd[x, y]
            if x > 0 and y > 0:
                ai, bj = li + x - 1, lj + y - 1
                if ma_l[ai] == li and mb_l[bj] == lj:
                    if here == fd[x - 1, y - 1] + (la_l[ai] != lb_l[bj]):
                        mapping.append((ai, bj))
                        x, y = x - 1, y - 1
                        continue
                else:
                    px, qy = ma_l[ai] - li, mb_l[bj] - lj
                    if here == fd[px, qy] + td[ai, bj]:
                        pending.append((ai, bj))
                        x, y = px, qy
                        continue
            if x > 0 and here == fd[x - 1, y] + 1:
                x -= 1
            else:
                y -= 1

    src_tags = [EditTag.DELETE] * n
    tgt_tags = [EditTag.INSERT] * m
    pre_pairs = []
    for ai, bj in mapping:
        tag = EditTag.MATCH if la_l[ai] == lb_l[bj] else EditTag.RELABEL
        sa, tb = int(pa.pre[ai]), int(pb.pre[bj])
        src_tags[sa] = tag
        tgt_tags[tb] = tag
        pre_pairs.append((sa, tb))
    distance = int(td[n - 1, m - 1])
    relabels = sum(1 for t in src_tags if t is EditTag.RELABEL)
    cost = relabels + src_tags.count(EditTag.DELETE) + tgt_tags.count(EditTag.INSERT)
    assert cost == distance, (cost, distance)
    return EditScript(distance, tuple(sorted(pre_pairs)), tuple(src_tags), tuple(tgt_tags))


def label_edits(source: TreeNode | None, target: TreeNode, edit_weight: float = 3.0,
                size_cap: int = DEFAULT_SIZE_CAP) -> EditLabeling:
    """Per-target-node loss weights: ``edit_weight`` on inserted or relabeled nodes, else 1."""
    script = tree_edit_distance(source, target, size_cap)
    edited = (EditTag.INSERT, EditTag.RELABEL)
    return EditLabeling(tuple(float(edit_weight) if t in edited else 1.0
                              for t in script.target_tags))


def format_script(script: EditScript, source_names: list[str], target_names: list[str]) -> str:
    """Human-readable script: one line per node operation."""
    lines = [f"distance\t{script.distance}"]
    mapped_src = {s: t for s, t in script.mapping}
    for s, tag in enumerate(script.source_tags):
        if tag is EditTag.DELETE:
            lines.append(f"delete\t{s}\t{source_names[s]}")
        else:
            t = mapped_src[s]
            lines.append(f"{tag.value}\t{s}->{t}\t{source_names[s]}->{target_names[t]}")
    for t, tag in enumerate(script.target_tags):
        if tag is EditTag.INSERT:
            lines.append(f"insert\t{t}\t{target_names[t]}")
    return "\n".join(lines)
