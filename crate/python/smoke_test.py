"""Smoke test for the attnforge_py extension.

Build first:  pip install --no-build-isolation -e crates/python
"""

import os
import tempfile

import attnforge_py as af


def main():
    assert "vgg_mini" in af.families()
    assert "b1.last" in af.hook_names("vgg_mini")

    v3 = af.Plan.canonical("efficientnet_mini", "v3")
    assert v3.count("SE") == 3 and v3.count("SA") == 1
    assert af.Plan.parse(v3.serialize()) == v3
    try:
        af.Plan.parse("family = vgg_mini\nattach XX at b1.last\n")
        raise AssertionError("bad plan accepted")
    except ValueError as e:
        assert "line 2" in str(e)

    base = af.Model("vgg_mini", num_classes=4, seed=0)
    plan = af.Plan.canonical("vgg_mini", "v3")
    model = base.attach(plan)
    over = base.overhead(plan)
    assert model.count_params("attention") == over["params_added"] > 0
    assert len(model.hooks()) > 0

    train, test = af.gen_synthetic(n_per_class=10, size=32, seed=0)
    assert len(train) == 32 and len(test) == 8 and train.num_classes == 4

    n = 2
    pixels = train.image(0) + train.image(1)
    logits, shape = model.predict(pixels, [n, 3, 32, 32])
    assert shape == [n, 4] and len(logits) == 8

    log = af.train_model(model, train, test, epochs=2, patience=2, seed=0)
    assert len(log["records"]) == 2
    best = log["records"][log["best_epoch"]]["eval_accuracy"]
    report = model.evaluate(test, "v3")
    assert report["accuracy"] == best

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.atnf")
        model.save(path)
        again = af.Model.load(path)
        assert again.evaluate(test, "v3")["accuracy"] == best
        raw = os.path.join(d, "t.atnd")
        test.save_raw(raw)
        assert af.Dataset.load_raw(raw, test=True).labels() == test.labels()

    gc = af.gradcheck("se", seed=0)
    assert gc["passed"] and gc["max_rel_err"] < 1e-4

    m = af.classification_report([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert m["confusion"]["counts"] == [[1, 0], [1, 2]]
    assert abs(m["accuracy"] - 0.75) < 1e-12

    print("smoke test passed:", repr(model))


if __name__ == "__main__":
    main()
