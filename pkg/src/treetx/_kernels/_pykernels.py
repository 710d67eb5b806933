"""Pure-Python dynamic-programming kernels (fallback for ``_ckernels``).

Trees are passed in postorder as three int64 arrays: ``labels``, ``lmld``
(postorder index of each node's leftmost leaf descendant) and ``keyroots``
(ascending).  Forest tables are indexed from 1 with row/column 0 standing
for the empty forest.
"""

import numpy as np


def forest_table(la, lmld_a, lb, lmld_b, td, i, j, fill):
    """Forest-distance table for the subtree pair rooted at postorder ``i``, ``j``.

    Row ``x`` covers source nodes ``lmld_a[i] .. lmld_a[i] + x - 1``; likewise
    columns.  When ``fill`` is true, tree distances of whole-subtree cells are
    written into ``td``.
    """
    la = la.tolist() if hasattr(la, "tolist") else la
    lb = lb.tolist() if hasattr(lb, "tolist") else lb
    ma = lmld_a.tolist() if hasattr(lmld_a, "tolist") else lmld_a
    mb = lmld_b.tolist() if hasattr(lmld_b, "tolist") else lmld_b
    li, lj = ma[i], mb[j]
    rows, cols = i - li + 2, j - lj + 2
    fd = [[0] * cols for _ in range(rows)]
    for x in range(1, rows):
        fd[x][0] = fd[x - 1][0] + 1
    for y in range(1, cols):
        fd[0][y] = fd[0][y - 1] + 1
    for x in range(1, rows):
        a = li + x - 1
        la_a, ma_a = la[a], ma[a]
        row, prev = fd[x], fd[x - 1]
        for y in range(1, cols):
            b = lj + y - 1
            dele = prev[y] + 1
            ins = row[y - 1] + 1
            if ma_a == li and mb[b] == lj:
                sub = prev[y - 1] + (la_a != lb[b])
                best = dele if dele < ins else ins
                if sub < best:
                    best = sub
                row[y] = best
                if fill:
                    td[a, b] = best
            else:
                sub = fd[ma_a - li][mb[b] - lj] + int(td[a, b])
                best = dele if dele < ins else ins
                if sub < best:
                    best = sub
                row[y] = best
    return np.asarray(fd, dtype=np.int64)


def tree_dist_table(la, lmld_a, kr_a, lb, lmld_b, kr_b):
    """All subtree-pair distances ``td[a, b]`` (Zhang-Shasha keyroot sweep)."""
    n, m = len(la), len(lb)
    td = np.zeros((n, m), dtype=np.int64)
    la_l, lb_l = la.tolist(), lb.tolist()
    ma_l, mb_l = lmld_a.tolist(), lmld_b.tolist()
    for i in kr_a.tolist():
        for j in kr_b.tolist():
            forest_table(la_l, ma_l, lb_l, mb_l, td, i, j, True)
    return td


def levenshtein_table(a, b):
    """Unit-cost edit-distance table ``D[i, j]`` between prefixes of ``a`` and ``b``."""
    a = a.tolist() if hasattr(a, "tolist") else list(a)
    b = b.tolist() if hasattr(b, "tolist") else list(b)
    n, m = len(a), len(b)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        ai = a[i - 1]
        row, prev = d[i], d[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1] + (ai != b[j - 1])
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if row[j - 1] + 1 < best:
                best = row[j - 1] + 1
            row[j] = best
    return np.asarray(d, dtype=np.int64)
