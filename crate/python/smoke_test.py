"""Smoke test for the trialemu_py extension module.

Build and copy the module next to this script first:

    cargo build --release -p trialemu-py --features extension-module
    cp target/release/libtrialemu_py.so python/trialemu_py.so
    python3 python/smoke_test.py
"""

import os
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, HERE)

import trialemu_py as te  # noqa: E402


def main():
    assert te.model_tags() == ["lr", "dripw", "blocking", "bart", "tarnet", "cfr"]

    fixture = os.path.join(HERE, "..", "fixtures", "figure2_events.csv")
    original, artificial, prone = te.session_counts(fixture)
    assert (original + artificial, prone) == (4, 2), (original, artificial, prone)

    table = te.simulate(n=600, seed=1)
    assert len(table) == 600
    assert abs(table.true_ate() - 10.0) < 1e-12

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "synthetic.csv")
        table.write(path)
        splits = te.load_splits(path, seed=1)
        assert len(splits.test) == 120
        ate, preds = te.fit_and_evaluate("lr", splits.train, splits.validation, splits.test)
        assert abs(ate - 10.0) < 0.5, ate
        assert len(preds) == len(splits.test)

        report = te.evaluate(splits, models=["lr", "dripw"], replicates=20, seed=2)
        assert [r[0] for r in report.rows()] == ["lr", "dripw"]
        assert len(report.ate_samples("lr")) == 20
        assert "target-trial ATE 15 (3, 27)" in report.render()

    try:
        te.fit_and_evaluate("xyz", splits.train, splits.validation, splits.test)
    except ValueError as e:
        assert "valid tags" in str(e)
    else:
        raise AssertionError("unknown tag accepted")

    data = te.Dataset([[0.0], [1.0], [2.0]], [0, 1, 1], [1.0, 2.0, 3.0])
    assert len(data) == 3 and data.d == 1

    a = [[1.0, 0.0], [0.0, 1.0]]
    assert te.wasserstein_approx(a, a) < 1e-6
    assert abs(te.wasserstein_exact([[0.0, 0.0]], [[3.0, 4.0]]) - 25.0) < 1e-12

    print("python smoke test passed")


if __name__ == "__main__":
    main()
