import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from semimatch import data, eval as ev
from semimatch.data import PairManifest
from semimatch.model import MatchingModel, ModelConfig


@pytest.fixture(scope="module")
def small_bench():
    return data.generate_benchmark(data.SynthConfig(n_train=0, n_val=0, n_test=20, seed=3))["test"]


def rec(kps, category="kite", hw=(50, 50)):
    kps = np.asarray(kps, float)
    return PairManifest("x", "a", "b", kps, kps, category, "test", True, hw)


def pck_oracle(pred, gt, scale, alpha):
    hits = 0
    for (px, py), (gx, gy) in zip(pred, gt):
        hits += ((px - gx) ** 2 + (py - gy) ** 2) ** 0.5 <= alpha * scale
    return 100.0 * hits / len(gt)


def test_pck_example():
    gt = np.array([[10.0, 10.0], [20.0, 20.0]])
    pred = gt + [[2.0, 0.0], [0.0, 6.0]]
    # image max side 50 at alpha 0.1 gives a 5 pixel radius
    assert ev.pck(pred, gt, 50, (0.1,)) == {0.1: 50.0}
    assert ev.pck(pred, gt, 50, (0.05, 0.15)) == {0.05: 50.0, 0.15: 100.0}


def test_pck_absent_and_mismatch():
    assert ev.pck(np.zeros((0, 2)), np.zeros((0, 2)), 10) == {a: None for a in ev.DEFAULT_ALPHAS}
    with pytest.raises(ValueError):
        ev.pck(np.zeros((2, 2)), np.zeros((3, 2)), 10)


@given(seed=st.integers(0, 2**31), alpha=st.floats(0.01, 0.99))
def test_pck_matches_oracle(seed, alpha):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 64, size=(9, 2))
    pred = gt + rng.normal(scale=6, size=gt.shape)
    assert ev.pck(pred, gt, 64, (alpha,))[alpha] == pytest.approx(pck_oracle(pred, gt, 64, alpha))


@given(seed=st.integers(0, 2**31))
def test_pck_monotone_in_alpha(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 64, size=(12, 2))
    pred = gt + rng.normal(scale=8, size=gt.shape)
    alphas = (0.02, 0.05, 0.1, 0.15, 0.3)
    vals = [ev.pck(pred, gt, 64, alphas)[a] for a in alphas]
    assert vals == sorted(vals)


@given(seed=st.integers(0, 2**31), dx=st.integers(-50, 50), dy=st.integers(-50, 50))
def test_pck_translation_invariant(seed, dx, dy):
    # integer coordinates keep every distance exact under the shift
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 64, size=(7, 2)).astype(float)
    pred = gt + rng.integers(-9, 10, size=gt.shape)
    shift = np.array([dx, dy], float)
    assert ev.pck(pred + shift, gt + shift, 64) == ev.pck(pred, gt, 64)


def test_threshold_scale():
    assert ev.threshold_scale("image", (48, 64)) == 64
    assert ev.threshold_scale("bbox", (64, 64), [[1, 2], [11, 7]]) == 10
    with pytest.raises(ValueError):
        ev.threshold_scale("bbox", (64, 64), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        ev.PckConfig(alphas=(1.5,))


def test_cells_to_pixels_and_prob_readout():
    np.testing.assert_allclose(ev.cells_to_pixels([[0, 0], [15, 3]], (16, 16), (64, 64)), [[2, 2], [62, 14]])
    prob = np.zeros((16, 16))
    prob[1 * 4 + 2, 3 * 4 + 0] = 1.0  # target cell (2, 1) -> source cell (0, 3)
    out = ev.keypoints_from_prob(prob, [[9.0, 5.0]], (16, 16), (4, 4))
    np.testing.assert_allclose(out, [[2.0, 14.0]])


def test_evaluate_predictions_pools_per_class():
    a = rec([[10, 10], [20, 20]], "kite")
    b = rec([[30, 30]], "fish")
    preds = [(a.source_keypoints + [[0, 0], [0, 9]], a.source_keypoints), (b.source_keypoints, b.source_keypoints)]
    report = ev.evaluate_predictions([a, b], preds, ev.PckConfig(alphas=(0.1,)))
    assert report.keypoints == 3 and report.pairs == 2
    assert report.pck[0.1] == pytest.approx(200 / 3)
    assert report.per_class == {"fish": {0.1: 100.0}, "kite": {0.1: 50.0}}
    empty = ev.evaluate_predictions([], [], ev.PckConfig())
    assert all(v is None for v in empty.pck.values())


def test_build_report_groups_and_files(tmp_path):
    a = rec([[10, 10], [20, 20]], "kite")
    r1 = ev.evaluate_predictions([a], [(a.source_keypoints, a.source_keypoints)], metadata={"label_fraction": 0.1})
    r2 = ev.evaluate_predictions([a], [(a.source_keypoints + 30, a.source_keypoints)], metadata={"label_fraction": 0.1})
    r3 = ev.evaluate_predictions([a], [(a.source_keypoints, a.source_keypoints)], metadata={"label_fraction": 0.3})
    rows, pooled = ev.build_report([r1, r2, r3], out_dir=tmp_path)
    assert [r["group"] for r in rows] == [0.1, 0.3]
    assert rows[0]["pck@0.1"] == 50.0 and rows[1]["pck@0.1"] == 100.0
    assert pooled.pck[0.1] == pytest.approx(200 / 3)
    assert (tmp_path / "report.csv").exists() and (tmp_path / "report.png").exists()
    by_class, _ = ev.build_report([r1, r2], group_by="class")
    assert by_class[0]["group"] == "kite" and by_class[0]["pck@0.1"] == 50.0
    odd = ev.evaluate_predictions([a], [(a.source_keypoints, a.source_keypoints)], ev.PckConfig(alphas=(0.2,)))
    with pytest.raises(ValueError):
        ev.build_report([r1, odd])


def test_untrained_model_is_poor(small_bench):
    model = MatchingModel(ModelConfig(), seed=0)
    report = ev.evaluate(model, small_bench)
    assert report.pck[0.1] < 25.0


def test_identity_pairs_score_perfectly():
    # source and target identical: a model with perfectly peaked probabilities lands on the right cells
    scene = data.make_scene(1)
    pair = data.generate_synthetic_pair(scene, 2, 2, split="test", source_pose=data.Pose(), target_pose=data.Pose())
    kps = pair.record.target_keypoints
    pred = ev.keypoints_from_prob(np.eye(256), kps, (64, 64), (16, 16), "hard")
    # cell centres lie within half a cell diagonal (2.83 px) of the keypoint
    assert ev.pck(pred, pair.record.source_keypoints, 64, (0.05,))[0.05] == 100.0
