import json
import os

import numpy as np
import pytest

from popcft.boxes import BoundingBox
from popcft.datagen import (
    Annotation,
    DatasetError,
    FrameSequence,
    NoEligibleObject,
    Scene,
    TitleStyle,
    degrade_sprite,
    generate_title,
    inject_pop,
    make_scene,
    read_dataset,
    read_manifest,
    write_dataset,
)


def quiet(style: TitleStyle) -> TitleStyle:
    d = style.to_dict()
    d["noise_sigma"] = 0.0
    return TitleStyle.from_dict(d)


def test_style_roundtrip_and_validation(styles):
    for s in styles:
        assert TitleStyle.from_dict(json.loads(json.dumps(s.to_dict()))) == s
    with pytest.raises(ValueError):
        TitleStyle("x", 1, "space", 0.5, 1.0, 1.0)
    with pytest.raises(ValueError):
        TitleStyle("x", 1, "park", 0.0, 1.0, 1.0)


def test_titles_have_distinct_histograms(styles):
    hists = []
    for s in styles:
        ds = generate_title(s, 0, 0, 0, 20, seed=0)
        px = np.concatenate([q.frames.reshape(-1) for q in ds.unlabeled])
        hists.append(np.bincount(px, minlength=256) / px.size)
    for i in range(3):
        for j in range(i + 1, 3):
            assert 0.5 * np.abs(hists[i] - hists[j]).sum() > 0.1


def test_pool_size_default(styles):
    ds = generate_title(styles[0], 2, 1, 1, seed=7)
    assert len(ds.unlabeled) == 2000
    assert all(not s.annotations for s in ds.unlabeled)


def test_deterministic(styles):
    a = generate_title(styles[1], 5, 2, 2, 5, seed=3)
    b = generate_title(styles[1], 5, 2, 2, 5, seed=3)
    assert a == b
    for x, y in zip(a.train, b.train):
        assert x.frames.tobytes() == y.frames.tobytes()


def test_labeled_invariants_and_disjoint(styles):
    ds = generate_title(styles[2], 30, 5, 5, 10, seed=1)
    ids = [s.sequence_id for split in ("train", "validation", "test", "unlabeled") for s in ds.split(split)]
    assert len(ids) == len(set(ids))
    classes = set()
    for split in ("train", "validation", "test"):
        for s in ds.split(split):
            assert len(s.annotations) >= 1
            for a in s.annotations:
                assert a.frame_index == 2
                assert a.box.inside(*s.image_size)
                classes.add(a.bug_class)
    assert classes == {"culling_pop", "lod_pop"}


def test_bug_class_restriction(styles):
    ds = generate_title(styles[0], 10, 0, 0, 0, seed=1, bug_classes=("lod_pop",))
    assert {a.bug_class for s in ds.train for a in s.annotations} == {"lod_pop"}


@pytest.mark.parametrize("idx", [0, 1, 2])
def test_locality_oracle(styles, idx):
    """Outside every box frames 1 and 2 match exactly; inside some box they differ."""
    ds = generate_title(quiet(styles[idx]), 8, 0, 0, 0, seed=idx)
    for seq in ds.train:
        inside = np.zeros(seq.image_size, dtype=bool)
        for a in seq.annotations:
            x0, y0, x1, y1 = (int(v) for v in a.box.as_tuple())
            inside[y0:y1, x0:x1] = True
            assert np.any(seq.frames[1, y0:y1, x0:x1] != seq.frames[2, y0:y1, x0:x1])
        np.testing.assert_array_equal(seq.frames[1][~inside], seq.frames[2][~inside])


def test_generation_errors(styles):
    with pytest.raises(ValueError, match="zero image dimensions"):
        generate_title(styles[0], 1, 0, 0, 0, image_size=(0, 64))
    with pytest.raises(ValueError, match="safety cap"):
        generate_title(styles[0], 11, 0, 0, 0, max_sequences=10)
    with pytest.raises(ValueError, match="divisible"):
        generate_title(styles[0], 1, 0, 0, 0, image_size=(60, 64), patch_size=8)


def scene_for(style, seed=0):
    return make_scene(quiet(style), np.random.default_rng(seed), (64, 64))


def test_inject_no_objects(styles):
    scene = scene_for(styles[0])
    scene.objects = []
    with pytest.raises(NoEligibleObject, match="no eligible object"):
        inject_pop(scene, "culling_pop", np.random.default_rng(0))


def test_culling_pop_presence(styles):
    for seed in range(10):
        scene = scene_for(styles[1], seed)
        frames, ann = inject_pop(scene, "culling_pop", np.random.default_rng(seed))
        obj = next(o for o in scene.objects if o.popped)
        assert obj.visible in ([False, False, True, True], [True, True, False, False])
        assert ann.box == scene.box_in_frame(obj, 2)
        x0, y0, x1, y1 = (int(v) for v in ann.box.as_tuple())
        assert np.array_equal(frames[0, y0:y1, x0:x1], frames[1, y0:y1, x0:x1])
        assert np.array_equal(frames[2, y0:y1, x0:x1], frames[3, y0:y1, x0:x1])
        assert not np.array_equal(frames[1, y0:y1, x0:x1], frames[2, y0:y1, x0:x1])


def test_lod_pop_starts_at_frame_two(styles):
    scene = scene_for(styles[0], 4)
    clean = scene.render(noise=False)
    frames, ann = inject_pop(scene, "lod_pop", np.random.default_rng(4))
    x0, y0, x1, y1 = (int(v) for v in ann.box.as_tuple())
    np.testing.assert_array_equal(frames[:2], clean[:2])
    assert not np.array_equal(frames[2, y0:y1, x0:x1], clean[2, y0:y1, x0:x1])


def test_degrade_sprite_is_coarse(rng):
    sprite = rng.integers(0, 256, size=(16, 12, 3)).astype(np.uint8)
    out = degrade_sprite(sprite)
    assert out.shape == sprite.shape
    # nearest upsampling by 4 makes each 4x4 block constant
    blocks = out.reshape(4, 4, 3, 4, 3).transpose(0, 2, 1, 3, 4)
    assert np.all(blocks == blocks[:, :, :1, :1])


def test_roundtrip(tmp_path, styles):
    ds = generate_title(styles[0], 4, 2, 2, 3, seed=5)
    manifest = write_dataset(ds, tmp_path / "d")
    assert manifest["splits"]["train"]["images"] == 4
    assert read_dataset(tmp_path / "d") == ds
    assert read_manifest(tmp_path / "d")["title_id"] == "GiantMap"


def test_manifest_counts_multi_pop(tmp_path, styles):
    ds = generate_title(styles[0], 3, 0, 0, 0, seed=5)
    s = ds.train[0]
    box = BoundingBox(1, 1, 9, 9)
    extra = tuple(Annotation(box, "lod_pop") for _ in range(3 - len(s.annotations)))
    ds.train[0] = FrameSequence(s.sequence_id, s.title_id, s.frames, s.annotations + extra, "train")
    m = write_dataset(ds, tmp_path / "d")
    assert m["splits"]["train"]["pops"] > m["splits"]["train"]["images"] == 3
    assert read_dataset(tmp_path / "d") == ds


def test_hundred_single_pop_manifest(tmp_path, styles):
    ds = generate_title(styles[1], 100, 0, 0, 0, seed=2, extra_pop_prob=0.0, image_size=(32, 32))
    m = write_dataset(ds, tmp_path / "d")
    assert m["splits"]["train"] == {**m["splits"]["train"], "pops": 100, "images": 100}


def test_read_errors(tmp_path, styles):
    ds = generate_title(styles[0], 2, 0, 0, 0, seed=5)
    root = tmp_path / "d"
    write_dataset(ds, root)
    seq_dir = root / "train" / ds.train[0].sequence_id
    (seq_dir / "boxes").write_text("2 1 1 5\n")
    with pytest.raises(DatasetError):
        read_dataset(root)
    write_dataset(ds, root)
    os.remove(seq_dir / "frame_3.png")
    with pytest.raises(DatasetError, match="missing"):
        read_dataset(root)
    with pytest.raises(DatasetError, match="manifest"):
        read_dataset(tmp_path / "nowhere")


def test_write_leaves_no_partial_dirs(tmp_path, styles):
    ds = generate_title(styles[0], 1, 0, 0, 0, seed=5)
    write_dataset(ds, tmp_path / "d")
    write_dataset(ds, tmp_path / "d")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["d"]


def test_frame_sequence_rejects_labels_on_unlabeled():
    frames = np.zeros((4, 8, 8, 3), np.uint8)
    with pytest.raises(ValueError):
        FrameSequence("s", "t", frames, (Annotation(BoundingBox(0, 0, 4, 4), "lod_pop"),), "unlabeled")
    with pytest.raises(ValueError):
        FrameSequence("s", "t", frames, (Annotation(BoundingBox(0, 0, 9, 4), "lod_pop"),), "train")


def test_scene_render_noise_is_reproducible(styles):
    s = make_scene(styles[2], np.random.default_rng(0))
    assert isinstance(s, Scene)
    np.testing.assert_array_equal(s.render(), s.render())
