import math

import numpy as np
import pytest
import torch
from PIL import Image

from fewgen.data import (ChipDataset, RotatedBox, augment_basic, crop_min_square,
                         denormalize, from_uint8, load_chip_dataset,
                         load_flat_images, load_rotated_boxes, make_toy_dataset,
                         min_square_side, normalize, save_chip_dataset, to_uint8,
                         _render_toy_chip)
from fewgen.errors import DimensionError, ValidationError


class TestValueMaps:
    def test_normalize_endpoints(self):
        assert normalize(torch.tensor([0.0, 0.5, 1.0])).tolist() == [-1.0, 0.0, 1.0]

    def test_round_trip(self):
        x = torch.rand(50)
        back = denormalize(normalize(x))
        assert torch.allclose(back, x, atol=1e-6)

    def test_denormalize_clamps(self):
        assert denormalize(torch.tensor([-3.0, 3.0])).tolist() == [0.0, 1.0]

    def test_uint8_round_trip_every_value(self):
        a = np.arange(256, dtype=np.uint8).reshape(16, 16)
        assert np.array_equal(to_uint8(from_uint8(a)), a)

    def test_accepts_numpy(self):
        assert normalize(np.array([1.0])).item() == 1.0


class TestRotatedBox:
    def test_axis_aligned_corners(self):
        box = RotatedBox(10.0, 20.0, 4.0, 2.0, 0.0)
        got = {tuple(np.round(c, 6)) for c in box.corners()}
        assert got == {(8.0, 19.0), (12.0, 19.0), (12.0, 21.0), (8.0, 21.0)}

    def test_quarter_turn_swaps_extents(self):
        box = RotatedBox(10.0, 20.0, 4.0, 2.0, math.pi / 2)
        got = {tuple(np.round(c, 6)) for c in box.corners()}
        assert got == {(9.0, 18.0), (11.0, 18.0), (11.0, 22.0), (9.0, 22.0)}

    def test_rejects_empty_sides(self):
        with pytest.raises(ValidationError):
            RotatedBox(0, 0, 0.0, 2.0, 0.0)


class TestChipDataset:
    def make(self, n=4, s=8, labels=None):
        imgs = torch.rand(n, 1, s, s) * 2 - 1
        lab = torch.tensor(labels if labels is not None else [0, 0, 1, 1])
        return ChipDataset(imgs, lab)

    def test_basic_properties(self):
        ds = self.make()
        assert len(ds) == 4
        assert ds.image_size == 8
        assert ds.num_classes == 2
        assert ds.sources == [f"chip-{i}" for i in range(4)]

    def test_num_classes_from_max_label(self):
        assert self.make(labels=[0, 5, 1, 2]).num_classes == 6

    def test_empty_dataset(self):
        ds = ChipDataset(torch.zeros(0, 1, 8, 8), torch.zeros(0, dtype=torch.long))
        assert len(ds) == 0 and ds.num_classes == 0

    @pytest.mark.parametrize("imgs,labels,err", [
        (torch.zeros(4, 8, 8), torch.zeros(4), DimensionError),
        (torch.zeros(4, 3, 8, 8), torch.zeros(4), DimensionError),
        (torch.zeros(4, 1, 8, 6), torch.zeros(4), DimensionError),
        (torch.zeros(4, 1, 8, 8), torch.zeros(3), DimensionError),
        (torch.full((4, 1, 8, 8), 1.5), torch.zeros(4), ValidationError),
    ])
    def test_rejects_malformed(self, imgs, labels, err):
        with pytest.raises(err):
            ChipDataset(imgs, labels)

    def test_indices_for_class(self):
        ds = self.make(labels=[0, 1, 0, 1])
        assert ds.indices_for_class(1).tolist() == [1, 3]

    def test_subset_is_independent_copy(self):
        ds = self.make()
        sub = ds.subset([0, 2])
        assert len(sub) == 2
        assert sub.sources == ["chip-0", "chip-2"]
        sub.images += 0.0  # in-place on the subset tensor
        sub.images.fill_(0.0)
        assert not torch.equal(ds.images[0], sub.images[0])


class TestFolderIO:
    def quantized_ds(self, n_per_class=3, s=12):
        torch.manual_seed(0)
        raw = to_uint8(torch.rand(n_per_class * 2, s, s) * 2 - 1)
        imgs = torch.stack([from_uint8(raw[i]).unsqueeze(0) for i in range(len(raw))])
        labels = torch.tensor([0] * n_per_class + [1] * n_per_class)
        return ChipDataset(imgs, labels)

    def test_save_load_round_trip_exact(self, tmp_path):
        ds = self.quantized_ds()
        save_chip_dataset(ds, tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["class_00", "class_01"]
        back = load_chip_dataset(tmp_path, image_size=12)
        assert torch.equal(back.images, ds.images)
        assert torch.equal(back.labels, ds.labels)

    def test_resize_on_load(self, tmp_path):
        save_chip_dataset(self.quantized_ds(s=16), tmp_path)
        back = load_chip_dataset(tmp_path, image_size=8)
        assert back.images.shape == (6, 1, 8, 8)
        assert back.images.min() >= -1.0 and back.images.max() <= 1.0

    def test_non_square_source_center_cropped(self, tmp_path):
        arr = np.tile(np.arange(10, dtype=np.uint8), (6, 1))  # 6 rows x 10 cols
        cdir = tmp_path / "class_00"
        cdir.mkdir()
        Image.fromarray(arr, mode="L").save(cdir / "wide.png")
        ds = load_chip_dataset(tmp_path, image_size=6)
        want = from_uint8(arr[:, 2:8])
        assert torch.equal(ds.images[0, 0], want)

    def test_unreadable_chip_skipped_with_warning(self, tmp_path):
        ds = self.quantized_ds()
        save_chip_dataset(ds, tmp_path)
        (tmp_path / "class_00" / "broken.png").write_bytes(b"not a raster")
        with pytest.warns(UserWarning, match="broken.png"):
            back = load_chip_dataset(tmp_path, image_size=12)
        assert len(back) == len(ds)

    def test_class_with_nothing_readable_rejected(self, tmp_path):
        (tmp_path / "class_00").mkdir()
        with pytest.raises(ValidationError, match="no readable chips"):
            load_chip_dataset(tmp_path, image_size=8)

    def test_missing_root_rejected(self, tmp_path):
        with pytest.raises(ValidationError, match="no class folders"):
            load_chip_dataset(tmp_path / "absent", image_size=8)

    def test_label_order_follows_sorted_folders(self, tmp_path):
        for name in ("b_class", "a_class"):
            d = tmp_path / name
            d.mkdir()
            Image.fromarray(np.zeros((8, 8), np.uint8), mode="L").save(d / "c.png")
        ds = load_chip_dataset(tmp_path, image_size=8)
        assert ds.sources[0].startswith("a_class")
        assert ds.labels.tolist() == [0, 1]

    def test_load_flat_images(self, tmp_path):
        for i in range(3):
            arr = np.full((8, 8), i * 40, np.uint8)
            Image.fromarray(arr, mode="L").save(tmp_path / f"s_{i}.png")
        batch = load_flat_images(tmp_path)
        assert batch.shape == (3, 1, 8, 8)
        assert batch[0, 0, 0, 0] < batch[2, 0, 0, 0]  # sorted order

    def test_load_flat_images_empty(self, tmp_path):
        with pytest.raises(ValidationError):
            load_flat_images(tmp_path)


class TestMinSquare:
    def test_axis_aligned_takes_long_side(self):
        assert min_square_side(RotatedBox(0, 0, 20.0, 10.0, 0.0)) == 20

    def test_quarter_turn_same(self):
        assert min_square_side(RotatedBox(0, 0, 20.0, 10.0, math.pi / 2)) == 20

    def test_square_at_45_degrees(self):
        assert min_square_side(RotatedBox(0, 0, 10.0, 10.0, math.pi / 4)) == 15

    def test_exact_integer_not_inflated(self):
        assert min_square_side(RotatedBox(0, 0, 7.0, 7.0, 0.0)) == 7


class TestCropMinSquare:
    def scene(self, h=32, w=32):
        return (torch.arange(h * w, dtype=torch.float32).reshape(h, w)) / (h * w)

    def test_interior_crop_matches_slice(self):
        sc = self.scene()
        crop = crop_min_square(sc, RotatedBox(10.0, 12.0, 4.0, 4.0, 0.0))
        assert crop.shape == (1, 4, 4)
        assert torch.equal(crop[0], normalize(sc[10:14, 8:12]))

    def test_edge_crop_pads_with_floor_value(self):
        sc = torch.ones(16, 16)
        crop = crop_min_square(sc, RotatedBox(0.0, 0.0, 6.0, 6.0, 0.0))
        assert crop.shape == (1, 6, 6)
        assert crop[0, 0, 0].item() == -1.0  # off-scene corner
        assert crop[0, 5, 5].item() == 1.0   # on-scene corner

    def test_center_outside_rejected(self):
        with pytest.raises(ValidationError):
            crop_min_square(torch.ones(8, 8), RotatedBox(20.0, 4.0, 2.0, 2.0, 0.0))

    def test_accepts_channel_dim_and_numpy(self):
        a = crop_min_square(torch.ones(1, 16, 16), RotatedBox(8, 8, 4, 4, 0.0))
        b = crop_min_square(np.ones((16, 16)), RotatedBox(8, 8, 4, 4, 0.0))
        assert torch.equal(a, b)

    def test_bad_scene_shape(self):
        with pytest.raises(DimensionError):
            crop_min_square(torch.ones(2, 16, 16), RotatedBox(8, 8, 4, 4, 0.0))

    def test_rotated_corners_always_contained(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            box = RotatedBox(cx=float(rng.uniform(0, 64)), cy=float(rng.uniform(0, 64)),
                             w=float(rng.uniform(1, 30)), h=float(rng.uniform(1, 30)),
                             theta=float(rng.uniform(-math.pi, math.pi)))
            side = min_square_side(box)
            # rounding the window origin can shift it half a pixel
            for x, y in box.corners():
                assert abs(x - box.cx) <= side / 2 + 0.5
                assert abs(y - box.cy) <= side / 2 + 0.5


class TestAnnotations:
    def test_parse_with_comments(self, tmp_path):
        f = tmp_path / "boxes.txt"
        f.write_text("# header\n\nscene1.png 10 20 4 2 0.5 3\nscene2.png 1 2 3 4 0 0\n")
        recs = load_rotated_boxes(f)
        assert len(recs) == 2
        scene, box = recs[0]
        assert scene == "scene1.png"
        assert (box.cx, box.cy, box.w, box.h) == (10.0, 20.0, 4.0, 2.0)
        assert box.theta == 0.5 and box.class_id == 3

    def test_field_count_error_names_line(self, tmp_path):
        f = tmp_path / "boxes.txt"
        f.write_text("# ok\nscene1.png 10 20 4 2 0.5\n")
        with pytest.raises(ValidationError, match=":2:"):
            load_rotated_boxes(f)


class TestToyDataset:
    def test_shapes_and_labels(self):
        ds = make_toy_dataset(classes=3, per_class=4, image_size=16, seed=0)
        assert ds.images.shape == (12, 1, 16, 16)
        assert ds.labels.tolist() == [0] * 4 + [1] * 4 + [2] * 4
        assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0

    def test_deterministic_per_seed(self):
        a = make_toy_dataset(3, 2, 16, seed=5)
        b = make_toy_dataset(3, 2, 16, seed=5)
        c = make_toy_dataset(3, 2, 16, seed=6)
        assert torch.equal(a.images, b.images)
        assert not torch.equal(a.images, c.images)

    def test_split_tag_propagates(self):
        ds = make_toy_dataset(2, 1, 16, seed=0, split="test")
        assert ds.split == "test"
        assert "test" in ds.sources[0]

    @pytest.mark.parametrize("kw", [
        {"classes": 1, "per_class": 2},
        {"classes": 2, "per_class": 0},
        {"classes": 2, "per_class": 1, "image_size": 4},
        {"classes": 2, "per_class": 1, "looks": 0},
    ])
    def test_rejects_bad_arguments(self, kw):
        with pytest.raises(ValidationError):
            make_toy_dataset(**kw)

    def test_class_means_are_distinct(self):
        ds = make_toy_dataset(classes=10, per_class=8, image_size=32, seed=0)
        means = torch.stack([ds.images[ds.indices_for_class(c)].mean(dim=0).flatten()
                             for c in range(10)])
        centered = means - means.mean(dim=1, keepdim=True)
        for i in range(10):
            for j in range(i + 1, 10):
                ncc = torch.dot(centered[i], centered[j]) / (
                    centered[i].norm() * centered[j].norm())
                assert ncc.item() < 0.9, (i, j, ncc.item())

    def test_more_looks_smooth_the_texture(self):
        a = _render_toy_chip("bar", 0.0, 0.0, 0.0, 1.0, 32,
                             np.random.default_rng(0), looks=1)
        b = _render_toy_chip("bar", 0.0, 0.0, 0.0, 1.0, 32,
                             np.random.default_rng(0), looks=16)
        assert b.std() < a.std()


class TestAugment:
    class _FixedRng:
        def __init__(self, draws):
            self.draws = list(draws)

        def integers(self, lo, hi):
            return self.draws.pop(0)

    def test_identity_draw(self):
        chip = torch.rand(1, 8, 8) * 2 - 1
        out = augment_basic(chip, self._FixedRng([0, 0]))
        assert torch.equal(out, chip)

    def test_rot_plus_flip_composition(self):
        chip = torch.rand(1, 8, 8)
        out = augment_basic(chip, self._FixedRng([1, 1]))
        want = torch.flip(torch.rot90(chip, 1, dims=(-2, -1)), dims=(-1,))
        assert torch.equal(out, want)

    def test_value_multiset_preserved(self):
        chip = torch.rand(1, 8, 8) * 2 - 1
        out = augment_basic(chip, np.random.default_rng(3))
        assert torch.equal(out.flatten().sort().values, chip.flatten().sort().values)

    def test_batch_input(self):
        batch = torch.rand(4, 1, 8, 8)
        out = augment_basic(batch, np.random.default_rng(0))
        assert out.shape == batch.shape

    def test_reproducible(self):
        chip = torch.rand(1, 8, 8)
        a = augment_basic(chip, np.random.default_rng(9))
        b = augment_basic(chip, np.random.default_rng(9))
        assert torch.equal(a, b)
