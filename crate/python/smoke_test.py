"""Smoke test for the hbaf_py extension.

Build and install first:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/hbaf_py-*.whl
Then run with pytest or plain python.
"""

import math
import tempfile
from pathlib import Path

import hbaf_py


def test_loss_identities():
    k = 5
    same = [[1.0, 0.5, -0.25]] * k
    # Every row is identical, so each term is a uniform softmax over k.
    loss = hbaf_py.inter_modal_loss(same, same, same)
    assert abs(loss["total"] - math.log(k)) < 1e-9
    probs = [[0.25] * 4] * 3
    assert abs(hbaf_py.cross_entropy(probs, [0, 1, 3]) - math.log(4)) < 1e-12


def test_weighted_f1():
    assert hbaf_py.weighted_f1([0, 1, 1], [0, 1, 1], 2) == 1.0
    try:
        hbaf_py.weighted_f1([0, 1], [0], 2)
    except hbaf_py.HbafError:
        pass
    else:
        raise AssertionError("length mismatch accepted")


def test_grad_check():
    report = hbaf_py.grad_check(width=8)
    assert report["passed"], report["max_rel_err"]


def test_train_save_load_evaluate():
    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "data"
        digest = hbaf_py.synthesize(str(data), seed=7)
        assert digest == hbaf_py.synthesize(str(Path(tmp) / "again"), seed=7)

        model = hbaf_py.Model(16, 16, ["a", "b", "c", "d"], width=16, seed=1)
        assert model.num_parameters > 0
        history = model.train(str(data), epochs=3, lr=1e-3)
        assert [h["epoch"] for h in history] == [1, 2, 3]

        ckpt = Path(tmp) / "m.hbaf"
        model.save(str(ckpt))
        loaded = hbaf_py.Model.load(str(ckpt))
        assert loaded.labels == ["a", "b", "c", "d"]
        assert loaded.evaluate(str(data)) == model.evaluate(str(data))


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_"):
            fn()
            print("ok", name)
