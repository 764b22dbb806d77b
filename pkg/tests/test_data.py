import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equinv.data import (
    EYE_INDICES, LANDMARK_NAMES, DatasetManifest, generate_synthetic_dataset, load_annotations,
    load_dataset, preprocess_image, preprocess_landmarks, save_annotations, write_dataset,
)
from equinv.errors import InvalidArgument, ParseError, SchemaError
from equinv.evaluation import LandmarkSet


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic_dataset(16, seed=3)


def test_dataset_shapes(ds):
    assert ds.images.shape == (16, 96, 96, 3) and ds.images.dtype == np.float32
    assert ds.masks.shape == (16, 96, 96)
    assert all(len(l.points) == len(LANDMARK_NAMES) for l in ds.landmarks)
    assert 0.0 <= ds.images.min() and ds.images.max() <= 1.0


def test_generation_deterministic(ds):
    again = generate_synthetic_dataset(16, seed=3)
    assert np.array_equal(again.images, ds.images)
    assert all(a == b for a, b in zip(again.landmarks, ds.landmarks))


def test_eyes_apart_and_in_foreground(ds):
    for lm, mask in zip(ds.landmarks, ds.masks):
        a, b = lm.points[list(EYE_INDICES)]
        assert np.linalg.norm(a - b) > 5
        x, y = np.round(lm.points[3]).astype(int)
        assert mask[y, x]


def test_annotation_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    sets = [LandmarkSet(rng.uniform(0, 96, (5, 2)), rng.random(5) > 0.3, f"img{i}") for i in range(6)]
    save_annotations(tmp_path / "a.csv", sets)
    assert load_annotations(tmp_path / "a.csv") == sets


@settings(max_examples=20)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.booleans()), min_size=1, max_size=8))
def test_annotation_roundtrip_property(tmp_path_factory, pts):
    path = tmp_path_factory.mktemp("ann") / "a.csv"
    lm = LandmarkSet([(x, y) for x, y, _ in pts], [v for *_, v in pts], "x")
    save_annotations(path, [lm])
    assert load_annotations(path) == [lm]


@pytest.mark.parametrize("text,err", [
    ("image,x1,y1\n", ParseError),
    ("image,x1,y1,v1\na,1,2,3\n", ParseError),
    ("image,x1,y1,v1\na,1,two,1\n", ParseError),
    ("image,x1,y1,v1\na,1,2,1,3,4,1\n", SchemaError),
    ("image,x1,y1,v1\na,1,2\n", ParseError),
])
def test_malformed_annotations(tmp_path, text, err):
    (tmp_path / "a.csv").write_text(text)
    with pytest.raises(err):
        load_annotations(tmp_path / "a.csv")


def test_write_and_load_dataset(tmp_path, ds):
    write_dataset(ds, tmp_path)
    back = load_dataset(tmp_path, limit=5)
    assert back.images.shape == (5, 96, 96, 3)
    assert np.abs(back.images - ds.images[:5]).max() <= 0.5 / 255 + 1e-6
    assert np.array_equal(back.masks, ds.masks[:5])
    assert back.landmarks[2] == ds.landmarks[2]


def test_manifest_missing_file(tmp_path, ds):
    write_dataset(ds, tmp_path)
    (tmp_path / "images" / f"{ds.landmarks[0].image_id}.png").unlink()
    with pytest.raises(SchemaError):
        DatasetManifest.load(tmp_path)


def test_face_crop_preprocessing():
    img = np.random.default_rng(1).random((120, 120, 3)).astype(np.float32)
    assert preprocess_image(img, "face_crop_136_96").shape == (96, 96, 3)
    lm = LandmarkSet([[59.5, 59.5], [0.0, 0.0]], [True, True])
    out = preprocess_landmarks(lm, (120, 120), "face_crop_136_96")
    # image centre maps to crop centre; a corner falls outside the crop
    assert np.allclose(out.points[0], 47.5)
    assert out.visible.tolist() == [True, False]
    with pytest.raises(InvalidArgument):
        preprocess_image(img, "bogus")


def test_zero_images_rejected():
    with pytest.raises(InvalidArgument):
        generate_synthetic_dataset(0)
