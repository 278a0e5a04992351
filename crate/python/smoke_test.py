"""Smoke test for the Python bindings.

Build and install first:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/splade_lab-*.whl
"""

import math

import splade_lab_py as sl

SMALL = [
    "synth.n_docs=300",
    "synth.n_train_queries=60",
    "synth.n_test_queries=20",
    "synth.n_content_words=400",
    "synth.n_topics=20",
    "encoder.d_model=16",
    "encoder.d_ff=32",
    "encoder.max_len=32",
    "train.n_hard=3",
    "train.max_steps=20",
    "train.learning_rate=0.003",
]


def main():
    w = sl.pool_sparse([[0.0, 2.0, -1.0], [3.0, 1.0, 5.0]], [True, True, False])
    assert w == {0: math.log1p(3.0), 1: math.log1p(2.0)}, w
    assert sl.paired_ttest([0.1, 0.2, 0.3], [0.1, 0.2, 0.3]) == 1.0
    print("metrics", sl.default_metrics())

    exp = sl.Experiment(overrides=SMALL)
    print("docs", exp.n_docs, "vocab", exp.vocab_size)
    bm25 = exp.bm25(k=100)
    model = exp.train("random_k:150")
    print("model", model.label, "steps", model.steps, "doc nnz", round(model.mean_doc_nnz, 2))

    qid, text = exp.test_queries()[0]
    weights = model.encode(text)
    print("query", repr(text), "->", len(weights), "terms")
    hits = model.search(text, k=5)
    assert len(hits) <= 5
    assert all(a[1] >= b[1] for a, b in zip(hits, hits[1:]))

    run = model.run(exp.test_queries(), k=100)
    means = exp.evaluate({"bm25": bm25, "sparse": run})
    for name, m in sorted(means.items()):
        print(name, {k: round(v, 4) for k, v in m.items()})
    assert means["bm25"]["RR@10"] > 0.5

    before, after = exp.pruning(model, top_n=20)
    print("pruning rr@10", round(before, 4), "->", round(after, 4))
    print("ok")


if __name__ == "__main__":
    main()
