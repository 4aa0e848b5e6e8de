"""Smoke test for the `aqe` extension module.

Build it first, for example with `maturin develop -m crates/py/Cargo.toml --release`.
"""

import math
import os
import sys
import tempfile

import aqe


def main() -> int:
    docs, queries, background = aqe.gen_synthetic(60, 12, 0.7, 3)
    assert len(docs) == 60 and len(queries) == 12 and len(background) == 60

    index = aqe.Index(docs)
    assert index.num_docs == 60
    qid, question, gold = queries[0]
    hits = index.search(question, 5)
    assert all(hits[i][1] >= hits[i + 1][1] for i in range(len(hits) - 1))
    rank = index.rank_of_gold(question, gold)
    assert 1 <= rank <= 101

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "index.bin")
        digest = index.save(path)
        assert len(digest) == 64
        again = aqe.Index.load(path)
        assert again.search(question, 5) == hits

    acc = aqe.top_n_accuracy([1, 7, 101], [1, 5, 10])
    assert acc == {1: 1 / 3, 5: 1 / 3, 10: 2 / 3}, acc

    same = aqe.diversity(["kefe bosi"] * 3, index)
    assert abs(same - 1.0) < 1e-12, same

    t = aqe.paired_t_test([1.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 0.0])
    assert t["df"] == 3 and 0.0 < t["p_value"] < 1.0

    identity = aqe.evaluate(index, queries)
    assert set(identity) == {1, 5, 10, 20, 50, 100}

    print(f"aqe {aqe.__version__}: identity Top-5 {100 * identity[5]:.1f}%, rank of gold {rank}")
    if "--full" in sys.argv:
        res = aqe.run_toy_experiment(7)
        for name in sorted(res):
            print(f"{name:10s} Top-5 {100 * res[name][5]:.1f}%")
        assert math.isfinite(res["rsft+dpo"][5])
    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
