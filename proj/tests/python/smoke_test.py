"""Smoke tests for the distillforge python module."""

import json
import os

import numpy as np

import distillforge as df


def load_config(name):
    path = os.path.join(os.environ["DISTILLFORGE_CONFIGS"], name)
    with open(path) as f:
        return f.read()


def test_budgets():
    sdxl = df.count_params(load_config("sdxl-unet.json"))
    k1b = df.count_params(load_config("koala-1b.json"))
    k700 = df.count_params(load_config("koala-700m.json"))
    assert abs(sdxl["total"] - 2567e6) / 2567e6 < 0.05
    assert abs(k1b["total"] - 1161e6) / 1161e6 < 0.05
    assert abs(k700["total"] - 782e6) / 782e6 < 0.05
    assert abs((1 - k1b["total"] / sdxl["total"]) - 0.54) < 0.03
    assert abs((1 - k700["total"] / sdxl["total"]) - 0.69) < 0.03
    assert 0.80 < sdxl["lowest_level_tx_share"] < 0.86


def test_compress_and_plan():
    spec = json.dumps(
        {
            "remove_encoder_last_pair": True,
            "remove_decoder_intermediate_pair": True,
            "target_tx_depths": [0, 2, 6],
            "remove_mid": False,
        }
    )
    teacher = load_config("sdxl-unet.json")
    student = df.compress_config(teacher, spec)
    parsed = json.loads(student)
    assert parsed["tx_depths"] == [0, 2, 6]
    assert parsed["tx_pairs_encoder"] == 1

    assert df.plan_layer_match(10, 6, "SA-interleave") == [1, 3, 5, 7, 9, 10]
    assert df.plan_layer_match(10, 5, "SA-up") == [6, 7, 8, 9, 10]

    plan = json.loads(df.plan_feature_match(teacher, student, "koala-default"))
    mids = [
        p["teacher"]["block_index"]
        for p in plan["pairs"]
        if p["student"]["stage"] == "MID" and p["student"]["kind"] == "SA"
    ]
    assert mids == [1, 2, 3, 4, 5, 6]


def test_schedule_and_q_sample():
    s = df.make_schedule(1000, 1e-4, 0.02)
    ab = s["alpha_bars"]
    assert abs(ab[0] - 0.9999) < 1e-9
    assert np.all(np.diff(ab) < 0)
    assert ab[-1] < 0.01
    assert np.allclose(s["sigmas"], np.sqrt((1 - ab) / ab))

    x0 = np.zeros((1, 4))
    eps = np.ones((1, 4))
    xt = df.q_sample(x0, [500], eps)
    assert np.allclose(xt, np.sqrt(1 - ab[500]))


def test_pca_and_cosine():
    rng = np.random.default_rng(0)
    rows = rng.normal(size=(20, 16))
    comps, evs, projs = df.attention_pca(rows, 3)
    assert comps.shape == (3, 16)
    assert projs.shape == (20, 3)
    assert np.allclose(comps @ comps.T, np.eye(3), atol=1e-6)
    assert sorted(evs, reverse=True) == list(evs)

    centered = rows - rows.mean(axis=0)
    cov = centered.T @ centered / (rows.shape[0] - 1)
    evals = np.sort(np.linalg.eigvalsh(cov))[::-1]
    assert np.allclose(evs, evals[:3], atol=1e-6)

    a = rng.normal(size=(2, 8))
    idx, vals, warned = df.cross_layer_cosine([a, a * 3.0], True)
    assert not warned
    assert abs(vals[0] - 1.0) < 1e-9


def test_dataset():
    images, captions = df.gen_dataset(18, 16, 16, 5)
    assert images.shape == (18, 3, 16, 16)
    assert len(set(captions)) == 18
    assert images.min() >= -1.0 and images.max() <= 1.0


if __name__ == "__main__":
    failures = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            try:
                fn()
                print(f"{name}: ok")
            except AssertionError as e:
                failures += 1
                print(f"{name}: FAILED {e}")
    raise SystemExit(failures)
