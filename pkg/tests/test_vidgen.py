import numpy as np
import pytest
import torch

from queryvis import vidgen
from queryvis.maskops import rle_decode


def disk_spec(**kw):
    defaults = dict(kind="disk", size=12.0, color=(200, 60, 60),
                    position=(40.0, 40.0))
    defaults.update(kw)
    return vidgen.ObjectSpec(**defaults)


class TestGenerateVideo:
    def test_zero_velocity_constant_box(self):
        spec = vidgen.SceneSpec(width=80, height=80, num_frames=4,
                                objects=[disk_spec()], noise_std=0)
        _, ann = vidgen.generate_video(spec)
        for t in range(1, 4):
            assert torch.equal(ann.boxes[t], ann.boxes[0])
            assert torch.equal(ann.masks[t], ann.masks[0])

    def test_exit_schedule(self):
        spec = vidgen.SceneSpec(num_frames=5, objects=[disk_spec(exit_frame=3)])
        _, ann = vidgen.generate_video(spec)
        assert ann.present[:, 0].tolist() == [True, True, True, False, False]

    def test_hidden_frames(self):
        spec = vidgen.SceneSpec(num_frames=3, objects=[disk_spec(hidden_frames=(1,))])
        _, ann = vidgen.generate_video(spec)
        assert ann.present[:, 0].tolist() == [True, False, True]

    def test_deterministic_given_seed(self):
        spec = vidgen.SceneSpec(num_frames=3, objects=[disk_spec()], seed=7)
        clip_a, _ = vidgen.generate_video(spec)
        clip_b, _ = vidgen.generate_video(spec)
        assert np.array_equal(clip_a.frames, clip_b.frames)

    def test_box_is_tight_bbox_of_mask(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            spec = vidgen.random_scene_spec(rng, width=64, height=64, num_frames=4)
            _, ann = vidgen.generate_video(spec)
            H = W = 64
            for t in range(ann.num_frames):
                for i in range(ann.num_instances):
                    if not ann.present[t, i]:
                        assert not ann.masks[t, i].any()
                        continue
                    box = vidgen.mask_to_box_pixels(ann.masks[t, i].numpy())
                    expected = vidgen.box_pixels_to_normalized(box, W, H)
                    assert torch.allclose(ann.boxes[t, i],
                                          torch.tensor(expected, dtype=torch.float32),
                                          atol=1e-6)

    def test_occlusion_by_later_object(self):
        # second object drawn fully on top of the first -> first absent
        front = disk_spec(size=20.0, position=(40.0, 40.0), color=(0, 255, 0))
        back = disk_spec(size=6.0, position=(40.0, 40.0))
        spec = vidgen.SceneSpec(width=80, height=80, num_frames=2,
                                objects=[back, front])
        _, ann = vidgen.generate_video(spec)
        # the fully-hidden instance is dropped entirely
        assert ann.num_instances == 1
        assert ann.labels.tolist() == [0]  # the surviving disk

    def test_off_canvas_absent(self):
        obj = disk_spec(position=(10.0, 40.0), velocity=(-30.0, 0.0))
        spec = vidgen.SceneSpec(width=80, height=80, num_frames=3, objects=[obj])
        _, ann = vidgen.generate_video(spec)
        assert ann.present[0, 0]
        assert not ann.present[1, 0] and not ann.present[2, 0]

    def test_zero_objects_allowed(self):
        spec = vidgen.SceneSpec(num_frames=2, objects=[])
        clip, ann = vidgen.generate_video(spec)
        assert clip.num_frames == 2
        assert ann.num_instances == 0


class TestPseudoVideo:
    def _disk_image(self):
        spec = vidgen.SceneSpec(width=96, height=96, num_frames=1,
                                objects=[disk_spec(size=20, position=(48, 48))],
                                noise_std=0)
        clip, ann = vidgen.generate_video(spec)
        return clip.frames[0], ann.masks[0].numpy()

    def test_single_frame_is_identity(self):
        image, masks = self._disk_image()
        clip, ann = vidgen.pseudo_video(image, masks, [0], num_frames=1)
        assert np.array_equal(clip.frames[0], image)
        assert torch.equal(ann.masks[0], torch.from_numpy(masks))

    def test_zero_rotation_identical_frames(self):
        image, masks = self._disk_image()
        clip, ann = vidgen.pseudo_video(image, masks, [0], num_frames=4,
                                        max_rotation_deg=0.0)
        for t in range(1, 4):
            assert np.array_equal(clip.frames[t], clip.frames[0])
            assert torch.equal(ann.masks[t], ann.masks[0])

    def test_rotated_disk_area_within_two_percent(self):
        image, masks = self._disk_image()
        _, ann = vidgen.pseudo_video(image, masks, [0], num_frames=6,
                                     rng=np.random.default_rng(0))
        areas = ann.masks.sum(dim=(2, 3)).squeeze(1).tolist()
        for area in areas[1:]:
            assert abs(area - areas[0]) / areas[0] < 0.02

    def test_boxes_follow_rotated_masks(self):
        image, masks = self._disk_image()
        _, ann = vidgen.pseudo_video(image, masks, [0], num_frames=3,
                                     rng=np.random.default_rng(1))
        for t in range(3):
            box = vidgen.mask_to_box_pixels(ann.masks[t, 0].numpy())
            expected = vidgen.box_pixels_to_normalized(box, 96, 96)
            assert torch.allclose(ann.boxes[t, 0],
                                  torch.tensor(expected, dtype=torch.float32))


class TestAnnotationIO:
    def _dataset(self, tmp_path, num_videos=2):
        return vidgen.build_synthetic_dataset(tmp_path, num_videos=num_videos,
                                              seed=3, width=48, height=48,
                                              num_frames=3)

    def test_round_trip_identity(self, tmp_path):
        ann_path, _ = self._dataset(tmp_path)
        dataset = vidgen.load_annotations(ann_path)
        again = tmp_path / "again.json"
        vidgen.save_annotations(dataset, again)
        assert vidgen.load_annotations(again) == dataset

    def test_empty_dataset_round_trip(self, tmp_path):
        dataset = {"videos": [], "annotations": [], "categories": []}
        path = tmp_path / "empty.json"
        vidgen.save_annotations(dataset, path)
        assert vidgen.load_annotations(path) == dataset

    def test_schema_violation_reports_path(self, tmp_path):
        bad = {"videos": [{"id": 1, "width": 8, "height": 8, "length": 1,
                           "file_names": ["a.png"]}],
               "annotations": [{"id": 1, "video_id": 1, "category_id": "dog",
                                "segmentations": [None], "bboxes": [None]}],
               "categories": []}
        with pytest.raises(ValueError, match="category_id"):
            vidgen.validate_annotations(bad)

    def test_mismatched_lengths_rejected(self):
        bad = {"videos": [{"id": 1, "width": 8, "height": 8, "length": 2,
                           "file_names": ["a.png", "b.png"]}],
               "annotations": [{"id": 1, "video_id": 1, "category_id": 1,
                                "segmentations": [None], "bboxes": [None]}],
               "categories": [{"id": 1, "name": "disk"}]}
        with pytest.raises(ValueError, match="length"):
            vidgen.validate_annotations(bad)

    def test_null_segmentation_marks_absent(self, tmp_path):
        spec = vidgen.SceneSpec(num_frames=4, objects=[disk_spec(exit_frame=2)])
        clip, ann = vidgen.generate_video(spec)
        records = vidgen.annotation_records(1, ann)
        assert records[0]["segmentations"][2] is None
        assert records[0]["bboxes"][2] is None
        dataset = {
            "videos": [{"id": 1, "width": spec.width, "height": spec.height,
                        "length": 4, "file_names": [f"{t}.png" for t in range(4)]}],
            "annotations": records,
            "categories": vidgen.DEFAULT_CATEGORIES,
        }
        loaded = vidgen.dataset_annotation(dataset, 1)
        assert loaded.present[:, 0].tolist() == [True, True, False, False]

    def test_pixel_box_normalized_on_load(self):
        mask = np.zeros((10, 20), dtype=bool)
        mask[2:6, 4:12] = True  # box x=4 y=2 w=8 h=4
        from queryvis.maskops import rle_encode
        dataset = {
            "videos": [{"id": 1, "width": 20, "height": 10, "length": 1,
                        "file_names": ["f.png"]}],
            "annotations": [{"id": 1, "video_id": 1, "category_id": 1,
                             "segmentations": [rle_encode(mask)],
                             "bboxes": [[4, 2, 8, 4]]}],
            "categories": vidgen.DEFAULT_CATEGORIES,
        }
        ann = vidgen.dataset_annotation(dataset, 1)
        assert torch.allclose(ann.boxes[0, 0],
                              torch.tensor([(4 + 4) / 20, (2 + 2) / 10,
                                            8 / 20, 4 / 10]))

    def test_masks_and_boxes_round_trip_through_files(self, tmp_path):
        ann_path, frames_dir = self._dataset(tmp_path)
        dataset = vidgen.load_annotations(ann_path)
        vid = dataset["videos"][0]["id"]
        ann = vidgen.dataset_annotation(dataset, vid)
        clip = vidgen.load_video_clip(dataset, vid, frames_dir)
        assert clip.num_frames == 3
        for rec in dataset["annotations"]:
            if rec["video_id"] != vid:
                continue
            for t, seg in enumerate(rec["segmentations"]):
                if seg is not None:
                    assert rle_decode(seg).shape == (48, 48)

    def test_frames_saved_losslessly(self, tmp_path):
        spec = vidgen.SceneSpec(width=32, height=32, num_frames=2,
                                objects=[disk_spec(size=6, position=(16, 16))])
        clip, _ = vidgen.generate_video(spec)
        names = vidgen.write_video_frames(clip, tmp_path, "vid")
        dataset = {"videos": [{"id": 1, "width": 32, "height": 32, "length": 2,
                               "file_names": names}],
                   "annotations": [], "categories": vidgen.DEFAULT_CATEGORIES}
        loaded = vidgen.load_video_clip(dataset, 1, tmp_path)
        assert np.array_equal(loaded.frames, clip.frames)
