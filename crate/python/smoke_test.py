"""Smoke test for the angiogan Python extension.

Build and install first:
    pip install --no-build-isolation ./crates/py
"""

import math
import os
import random
import tempfile

import angiogan


def image(channels, size, seed):
    rng = random.Random(seed)
    return [[[rng.uniform(-0.9, 0.9) for _ in range(size)] for _ in range(size)] for _ in range(channels)]


def main():
    assert angiogan.block_parameters("proposed", 32, 3) == 10784
    assert angiogan.block_parameters("original", 32, 3) == 18688
    assert [row[2] for row in angiogan.patch_table()] == [64, 32, 32, 16]

    model = angiogan.Model("toy", seed=1)
    size = model.crop_size
    fundus = image(3, size, 0)
    out = model.translate(fundus)
    assert (len(out), len(out[0]), len(out[0][0])) == (1, size, size)
    assert all(-1.0 <= v <= 1.0 for row in out[0] for v in row)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.agc")
        model.save(path)
        again = angiogan.Model.load(path)
        assert again.translate(fundus) == out

        assert angiogan.run_cli(["inspect", "--block", "proposed"]) == 0
        assert angiogan.run_cli(["train", "--epochs", "0", "--model", "toy", "--out", tmp]) == 0
        assert os.path.exists(os.path.join(tmp, "checkpoint_00000000.agc"))

    assert angiogan.perturb(fundus, "pinch", amount=0.0) == fundus
    whirled = angiogan.perturb(fundus, "whirl", amount=2.0, radius_fraction=0.5)
    assert whirled[0][0][0] == fundus[0][0][0]

    d = angiogan.frechet_distance([0.0, 1.0], [[1.0, 0.0], [0.0, 4.0]], [3.0, 1.0], [[4.0, 0.0], [0.0, 4.0]])
    assert math.isclose(d, 9.0 + 1.0, abs_tol=1e-9)

    key = {f"item{i:03d}": ("real" if i % 2 == 0 else "fake") for i in range(40)}
    responses = dict(key)
    fakes = [k for k, v in key.items() if v == "fake"][3:]
    reals = [k for k, v in key.items() if v == "real"][16:]
    for k in fakes:
        responses[k] = "real"
    for k in reals:
        responses[k] = "fake"
    report = angiogan.score_study(key, responses)
    assert report["confusion"] == 52.5, report

    try:
        angiogan.perturb(fundus, "swirl")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown kind accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
