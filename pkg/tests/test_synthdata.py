import json

import numpy as np
import pytest

from fdsos.labelspace import ToothLabel
from fdsos.matching import anterior_extremities, posterior_mask
from fdsos.synthdata import (
    DEFAULT_FD_FRACTION,
    CocoFormatError,
    DatasetSpec,
    LayoutError,
    decode_boxes,
    from_coco,
    generate,
    generate_multitask,
    load_coco,
    save_coco,
    split,
    to_coco,
)

ANTERIOR = (ToothLabel.ANTERIOR_FD, ToothLabel.ANTERIOR_NO_FD, ToothLabel.ANTERIOR_TEETH)


def _posterior(scene):
    return [b for lab, b in scene.hidden_truth if lab is ToothLabel.POSTERIOR_TEETH]


def test_default_fd_fraction():
    assert DEFAULT_FD_FRACTION == pytest.approx(626 / (454 + 626))
    scenes = generate(DatasetSpec(num_images=90, anterior_per_image=(12, 12), seed=0))
    labels = [lab for s in scenes for lab, _ in s.annotations]
    assert len(labels) == 90 * 12
    frac = np.mean([lab is ToothLabel.ANTERIOR_FD for lab in labels])
    assert abs(frac - 0.5796) < 0.03


def test_posteriors_are_masked():
    scenes = generate(DatasetSpec(num_images=100, seed=3))
    total = 0
    for s in scenes:
        e = anterior_extremities([b for _, b in s.annotations])
        post = _posterior(s)
        total += len(post)
        assert posterior_mask(post, e).all()
        assert not posterior_mask([b for _, b in s.annotations], e).any()
    assert total > 100


def test_anterior_layout():
    for s in generate(DatasetSpec(num_images=30, seed=4)):
        boxes = np.array([b.as_array() for _, b in s.annotations])
        assert all(lab in ANTERIOR for lab, _ in s.annotations)
        upper = boxes[: len(boxes) - len(boxes) // 2]
        assert np.all(np.diff(upper[:, 0]) > 0)  # left to right
        # no two anterior boxes overlap
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a, b = boxes[i], boxes[j]
                assert min(a[2], b[2]) <= max(a[0], b[0]) or min(a[3], b[3]) <= max(a[1], b[1])
        assert 0.2 < boxes[:, 1].min() and boxes[:, 3].max() < 0.8


def test_hidden_truth_difference():
    for s in generate(DatasetSpec(num_images=20, seed=5)):
        extra = [x for x in s.hidden_truth if x not in s.annotations]
        assert [lab for lab, _ in extra] == [ToothLabel.POSTERIOR_TEETH] * len(extra)
        assert len(extra) == len(_posterior(s))
        assert all(x in s.hidden_truth for x in s.annotations)
    for s in generate(DatasetSpec(num_images=20, seed=5, annotate_posterior=True)):
        assert sorted(s.hidden_truth, key=repr) != [] and all(
            (ToothLabel.ANTERIOR_TEETH if lab in ANTERIOR else lab, b) in s.annotations for lab, b in s.hidden_truth
        )
        assert len(s.annotations) == len(s.hidden_truth)
        assert s.annotation_complete


def test_deterministic():
    a = generate(DatasetSpec(num_images=10, seed=9))
    b = generate(DatasetSpec(num_images=10, seed=9))
    for x, y in zip(a, b):
        assert np.array_equal(x.features, y.features)
        assert x.annotations == y.annotations
    c = generate(DatasetSpec(num_images=10, seed=10))
    assert not np.array_equal(a[0].features, c[0].features)


def test_noiseless_decode():
    spec = DatasetSpec(num_images=20, noise_level=0.0, feature_dim=150, seed=2)
    for s in generate(spec):
        hidden = sorted((tuple(b.as_array()) for _, b in s.hidden_truth))
        decoded = sorted(map(tuple, decode_boxes(s.features, spec)))
        np.testing.assert_allclose(decoded, hidden, atol=1e-6)


def test_infeasible_layout():
    with pytest.raises(LayoutError):
        generate(DatasetSpec(num_images=1, anterior_per_image=(200, 200)))


@pytest.mark.parametrize(
    "kw",
    [
        {"fd_fraction": 1.5},
        {"anterior_per_image": (5, 3)},
        {"anterior_per_image": (0, 0)},
        {"num_images": 0},
        {"feature_dim": 10},
        {"noise_level": -1.0},
    ],
)
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        DatasetSpec(**kw)


def test_spec_dict_round_trip():
    spec = DatasetSpec(num_images=7, posterior_per_image=(0, 4), seed=3)
    assert DatasetSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_split_shape():
    scenes = generate_multitask(DatasetSpec(num_images=20, seed=1), 10)
    tr, va, te = split(scenes)
    assert (len(tr), len(va), len(te)) == (21, 3, 6)
    for part in (tr, va, te):
        assert {s.annotation_complete for s in part} == {False, True}
    assert [s.image_id for s in scenes] == list(range(30))


class TestCoco:
    def test_round_trip(self, tmp_path):
        scenes = generate_multitask(DatasetSpec(num_images=15, seed=6), 5)
        save_coco(scenes, tmp_path / "d.json")
        back = load_coco(tmp_path / "d.json")
        assert len(back) == len(scenes)
        for a, b in zip(scenes, back):
            assert a.image_id == b.image_id and a.annotation_complete == b.annotation_complete
            assert [lab for lab, _ in a.annotations] == [lab for lab, _ in b.annotations]
            got = np.array([x.as_array() for _, x in b.annotations])
            want = np.array([x.as_array() for _, x in a.annotations])
            np.testing.assert_allclose(got, want, atol=1e-9)
            np.testing.assert_array_equal(a.features, b.features)

    def test_fd_categories(self):
        doc = to_coco(generate(DatasetSpec(num_images=2)))
        assert [c["name"] for c in doc["categories"]] == ["Anterior Teeth No FD", "Anterior Teeth FD"]
        assert set(doc) >= {"images", "annotations", "categories"}
        assert {"id", "width", "height"} <= set(doc["images"][0])

    def test_hand_written_file(self, tmp_path):
        doc = {
            "images": [{"id": 7, "width": 200, "height": 100}],
            "annotations": [
                {"id": 1, "image_id": 7, "category_id": 4, "bbox": [20, 10, 40, 50]},
                {"id": 2, "image_id": 7, "category_id": 3, "bbox": [100, 0, 100, 100]},
            ],
            "categories": [{"id": 3, "name": "Anterior Teeth No FD"}, {"id": 4, "name": "Anterior Teeth FD"}],
        }
        (tmp_path / "h.json").write_text(json.dumps(doc))
        (s,) = load_coco(tmp_path / "h.json")
        assert s.image_id == 7 and len(s.annotations) == 2
        (l1, b1), (l2, b2) = s.annotations
        assert l1 is ToothLabel.ANTERIOR_FD and l2 is ToothLabel.ANTERIOR_NO_FD
        np.testing.assert_allclose(b1.as_array(), [0.1, 0.1, 0.3, 0.6], atol=1e-15)
        np.testing.assert_allclose(b2.as_array(), [0.5, 0.0, 1.0, 1.0], atol=1e-15)

    def _doc(self):
        return {
            "images": [{"id": 1, "width": 100, "height": 100}],
            "annotations": [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [10, 10, 20, 20]}],
            "categories": [{"id": 1, "name": "Posterior Teeth"}],
        }

    def test_errors(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(CocoFormatError):
            load_coco(bad)
        d = self._doc()
        d["categories"][0]["name"] = "Molar"
        with pytest.raises(CocoFormatError):
            from_coco(d)
        d = self._doc()
        d["annotations"][0]["bbox"] = [90, 10, 20, 20]
        with pytest.raises(CocoFormatError):
            from_coco(d)
        d = self._doc()
        d["annotations"][0]["image_id"] = 5
        with pytest.raises(CocoFormatError):
            from_coco(d)
        d = self._doc()
        del d["images"]
        with pytest.raises(CocoFormatError):
            from_coco(d)
        d = self._doc()
        d["annotations"][0]["category_id"] = 9
        with pytest.raises(CocoFormatError):
            from_coco(d)
