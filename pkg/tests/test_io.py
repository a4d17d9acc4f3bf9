import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fewshot_adapt import io
from fewshot_adapt.correspondence import CorrespondenceSet, PointCloudModel
from fewshot_adapt.evaluation import RecallReport
from fewshot_adapt.feature_model import DescriptorHead
from fewshot_adapt.geometry import PoseError, look_at
from fewshot_adapt.losses import LossWeights
from fewshot_adapt.synthworld import SceneConfig, generate_scene, make_domain
from fewshot_adapt.trainer import AdamState
from fewshot_adapt.vocabulary import VisualVocabulary

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@pytest.fixture(scope="module")
def scene():
    s = generate_scene(SceneConfig(seed=4, num_landmarks=300, num_queries=10))
    s.domains = {"target-0.60": make_domain("target-0.60", 0.6, 32, 4, 1.0, 0.03, 0.1)}
    return s


def test_scene_round_trip_is_byte_stable(scene, tmp_path):
    splits = {"train": np.array([3, 1]), "val": np.array([0]), "test": np.array([2, 5])}
    io.save_scene(tmp_path / "a.json", scene, splits, {"note": "x"})
    loaded, sp, extra = io.load_scene(tmp_path / "a.json")
    io.save_scene(tmp_path / "b.json", loaded, sp, extra)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    np.testing.assert_array_equal(loaded.positions, scene.positions)
    np.testing.assert_array_equal(loaded.appearances, scene.appearances)
    assert loaded.query_poses[3] == scene.query_poses[3]
    np.testing.assert_array_equal(loaded.domains["target-0.60"].mix_matrix, scene.domains["target-0.60"].mix_matrix)
    np.testing.assert_array_equal(sp["train"], [3, 1])
    assert extra == {"note": "x"}


def test_same_seed_same_scene_bytes(tmp_path):
    for name in ("a", "b"):
        io.save_scene(tmp_path / f"{name}.json", generate_scene(SceneConfig(seed=9, num_landmarks=100, num_queries=4)))
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.tuples(st.integers(1, 5), st.integers(5, 9)), elements=finite), st.booleans())
def test_head_round_trip_bit_exact(tmp_path_factory, W, frozen):
    path = tmp_path_factory.mktemp("h") / "head.txt"
    io.save_head(path, DescriptorHead(W, frozen=frozen))
    back = io.load_head(path)
    assert back.W.tobytes() == np.asarray(W, dtype=float).tobytes()
    assert back.frozen == frozen


def test_head_header(tmp_path):
    io.save_head(tmp_path / "h.txt", DescriptorHead(np.arange(6.0).reshape(2, 3)))
    lines = (tmp_path / "h.txt").read_text().splitlines()
    assert lines[:4] == ["# fewshot-adapt/head/1", "shape 2 3", "frozen 0", "data"]
    assert lines[4] == "0.0 1.0 2.0"


def test_head_shape_mismatch_rejected(tmp_path):
    p = tmp_path / "h.txt"
    p.write_text("# fewshot-adapt/head/1\nshape 2 3\nfrozen 0\ndata\n1.0 2.0 3.0\n")
    with pytest.raises(io.FormatError, match="shape"):
        io.load_head(p)


def test_wrong_schema_rejected(tmp_path):
    io.save_vocabulary(tmp_path / "v.txt", VisualVocabulary(np.eye(3), seed=2))
    with pytest.raises(io.FormatError):
        io.load_head(tmp_path / "v.txt")
    (tmp_path / "bad.json").write_text('{"schema": "something/else"}')
    with pytest.raises(io.FormatError):
        io.load_cloud(tmp_path / "bad.json")


def test_vocabulary_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    v = VisualVocabulary(rng.standard_normal((5, 4)), seed=17)
    io.save_vocabulary(tmp_path / "v.txt", v)
    assert io.load_vocabulary(tmp_path / "v.txt") == v


def test_cloud_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    cloud = PointCloudModel(rng.normal(size=(7, 3)), rng.normal(size=(7, 4)), rng.uniform(size=7), np.arange(7) * 3,
                            [0, 1, 2])
    io.save_cloud(tmp_path / "c.json", cloud)
    assert io.load_cloud(tmp_path / "c.json").content_hash() == cloud.content_hash()


def test_correspondence_round_trip(tmp_path):
    cset = CorrespondenceSet(12, look_at([5, 1, 1], [0, 0, 0]), "ground_truth", np.array([4, 9, 2]),
                             np.array([0, 3, 8]), np.array([[1.5, 2.25], [300.125, 20.0], [7.0, 8.0]]),
                             np.array([1, 1, 0]), np.array([7, -1, 3]))
    io.save_correspondences(tmp_path / "v.json", cset)
    back = io.load_correspondences(tmp_path / "v.json")
    assert back.view_id == 12 and back.pose_source == "ground_truth"
    assert back.training_pose == cset.training_pose
    for name in ("feature_index", "point_index", "reprojected", "words", "negative_index"):
        np.testing.assert_array_equal(getattr(back, name), getattr(cset, name))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    head = DescriptorHead(rng.normal(size=(3, 5)))
    adam = AdamState(rng.normal(size=(3, 5)), rng.uniform(size=(3, 5)), 42)
    io.save_checkpoint(tmp_path / "ck.json", head, adam, [3.0, 2.5], {"best_epoch": 1})
    h, a, hist, extra = io.load_checkpoint(tmp_path / "ck.json")
    np.testing.assert_array_equal(h.W, head.W)
    np.testing.assert_array_equal(a.m, adam.m)
    np.testing.assert_array_equal(a.v, adam.v)
    assert a.step == 42 and hist == [3.0, 2.5] and extra == {"best_epoch": 1}


def test_weights_round_trip(tmp_path):
    w = LossWeights({"corres": 0.3, "vwcoral": 12.5}, {"corres": (0.5, 0.25), "vwcoral": (0.01, 0.003)})
    io.save_weights(tmp_path / "w.json", w)
    back = io.load_weights(tmp_path / "w.json")
    assert back.lambdas == w.lambdas and back.stats == w.stats


def test_reports_round_trip(tmp_path):
    r = RecallReport((0.25, 0.5, 0.75), [PoseError(0.1, 1.0), None], 0.5, "frozen", 0.6)
    io.save_reports(tmp_path / "r.json", [r])
    (back,) = io.load_reports(tmp_path / "r.json")
    assert back.recall == r.recall and back.errors == r.errors and back.label == "frozen"


def test_append_rows(tmp_path):
    p = tmp_path / "log.csv"
    io.append_rows(p, [{"epoch": 1, "loss": 0.1}], ("epoch", "loss"))
    io.append_rows(p, [{"epoch": 2, "loss": 0.30000000000000004}], ("epoch", "loss"))
    assert p.read_text() == "epoch,loss\n1,0.1\n2,0.30000000000000004\n"
    assert io.read_rows(p)[1] == {"epoch": "2", "loss": "0.30000000000000004"}
