"""Quick end-to-end check of the Python bindings.

Build first:  pip install -e crates/py --no-build-isolation
Then run:     python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import grokking


def main():
    names = grokking.presets()
    assert "zp-sphere-wd0-lr1e-4" in names and "s5-sphere-wd0" in names

    exp = grokking.Experiment.preset("zp-sphere-wd0-lr1e-4")
    assert exp.model["norm_mode"] == "spherical"
    assert grokking.Experiment.from_json(exp.to_json()).to_json() == exp.to_json()

    ds = grokking.Dataset(113, seed=0)
    assert len(ds) == 113 * 113
    assert len(ds.train_indices) == 3830 and len(ds.test_indices) == 8939
    assert all(l == (a + b) % 113 for (a, b, _), l in zip(ds.sequences, ds.labels))

    model = grokking.Model(exp, seed=0)
    logits = model.forward(ds.sequences[:4])
    assert len(logits) == 4 and len(logits[0]) == 114
    assert max(abs(x) for row in logits for x in row) <= 10.0
    stats = model.evaluate(ds, "test")
    assert abs(stats["accuracy"] - 1 / 113) < 0.02, stats

    short = exp.with_training(max_epochs=3, eval_every=1)
    record, trained = grokking.train_model(short, seed=0)
    assert [m["epoch"] for m in record["metrics"]] == [0, 1, 2, 3]
    assert all(math.isfinite(m["train_loss"]) for m in record["metrics"])
    assert record["metrics"][-1]["train_loss"] < record["metrics"][0]["train_loss"]

    report = trained.analyze(ds, top=5)
    assert len(report["top_frequencies"]) == 5 and not report["grokked"]

    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "run"
        summary = grokking.run(short, 1, str(out))
        assert summary["final_metrics"]["epoch"] == 3
        assert (out / "metrics.csv").is_file()
        reloaded = grokking.Model.load(short, str(out / "checkpoint_final.bin"))
        assert len(reloaded.parameter_names()) == len(trained.parameter_names())
        try:
            grokking.run(short, 1, str(out))
        except ValueError as e:
            assert "--force" in str(e)
        else:
            raise AssertionError("existing run directory was overwritten")

    try:
        grokking.Experiment.from_json('{"preset": "zp-sphere-wd0-lr1e-4", "overrides": {"lr": 1}}')
    except ValueError as e:
        assert "overrides" in str(e)
    else:
        raise AssertionError("unknown override accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
