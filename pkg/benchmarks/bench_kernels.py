"""Compare the compiled and pure-Python dynamic-programming kernels.

    python benchmarks/bench_kernels.py [--repeat 3]

Prints one row per (kernel, size) with the median wall time of each backend
and the speedup.  Outputs of the two backends are checked for equality.
"""

import argparse
import statistics
import time

import numpy as np

from treetx._kernels import available_backends
from treetx.editmap import _Postorder
from treetx.treecore import Vocabulary, random_tree


def median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def tree_case(n, rng, vocab):
    def sized():
        t = random_tree(rng, vocab, n)
        while t.size() < 0.8 * n:
            t = random_tree(rng, vocab, n)
        return _Postorder(t)
    a, b = sized(), sized()
    return (a.labels, a.lmld, a.keyroots, b.labels, b.lmld, b.keyroots), len(a.labels) + len(b.labels)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
        return 1
    py, cy = backends["python"], backends["cython"]
    rng = np.random.default_rng(args.seed)
    vocab = Vocabulary.build(["P", "Q", "R"], ["a", "b", "c", "d"])

    rows = []
    for n in (25, 100, 200):
        case, total = tree_case(n, rng, vocab)
        tp, op = median_time(lambda: py.tree_dist_table(*case), args.repeat)
        tc, oc = median_time(lambda: cy.tree_dist_table(*case), args.repeat)
        assert np.array_equal(op, oc)
        rows.append(("tree_dist", f"{total} nodes", tp, tc))
    for n in (25, 200, 1000):
        a = rng.integers(8, size=n)
        b = rng.integers(8, size=n)
        tp, op = median_time(lambda: py.levenshtein_table(a, b), args.repeat)
        tc, oc = median_time(lambda: cy.levenshtein_table(a, b), args.repeat)
        assert np.array_equal(op, oc)
        rows.append(("levenshtein", f"{n}x{n}", tp, tc))

    print(f"{'kernel':<12} {'size':>12} {'python s':>10} {'cython s':>10} {'speedup':>8}")
    for kernel, size, tp, tc in rows:
        print(f"{kernel:<12} {size:>12} {tp:>10.4f} {tc:>10.5f} {tp / tc:>7.0f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
