import numpy as np
import pytest

from modules.image_grid import load_image_png, load_mask_png
from modules.phantom_generator import (
    DEFAULT_ARCHETYPES, Archetype, PhantomGenerator, PhantomSpec, ellipse_mask, lesion_id_for,
    load_archetype_labels, phantom_generate, recist_from_mask,
)
from modules.recist_parser import load_annotations

SMALL = PhantomSpec(count=6, image_size=64, seed=3)


def test_ellipse_mask_axis_aligned():
    mask = ellipse_mask(41, (20, 20), (10, 5), 0.0)
    assert mask[20, 10] and mask[20, 30] and not mask[20, 9] and not mask[20, 31]
    assert mask[15, 20] and mask[25, 20] and not mask[14, 20] and not mask[26, 20]


def test_ellipse_mask_rotation_swaps_axes():
    flat = ellipse_mask(41, (20, 20), (10.3, 5.2), 0.0)
    upright = ellipse_mask(41, (20, 20), (10.3, 5.2), np.pi / 2)
    assert np.array_equal(upright, flat.T)


class TestRecistFromMask:
    def test_axis_aligned_ellipse(self):
        ann = recist_from_mask(ellipse_mask(41, (20, 20), (10, 5), 0.0), 'E1')
        assert abs(ann.major_length - 20) <= 1
        assert abs(ann.minor_length - 10) <= 1
        major = np.array(ann.major)
        # major runs along x
        assert abs(major[1, 0] - major[0, 0]) > abs(major[1, 1] - major[0, 1])
        assert ann.crosses()

    def test_circle_diameters_agree(self):
        ann = recist_from_mask(ellipse_mask(41, (20, 20), (9, 9), 0.0), 'C1')
        assert abs(ann.major_length - ann.minor_length) <= 2
        assert abs(ann.major_length - 18) <= 1

    def test_rotated_ellipse(self):
        ann = recist_from_mask(ellipse_mask(64, (31, 32), (16, 8), np.pi / 4), 'R1')
        assert abs(ann.major_length - 32) <= 2
        assert abs(ann.minor_length - 16) <= 2

    def test_too_small(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[3, 3:5] = True
        with pytest.raises(ValueError, match='too small'):
            recist_from_mask(mask, 'T1')


class TestValidation:
    def test_archetype_ranges(self):
        with pytest.raises(ValueError, match='reversed'):
            Archetype('x', (5, 4), (0.5, 1.0), (0.8, 0.9), (0.1, 0.2))
        with pytest.raises(ValueError, match='aspect'):
            Archetype('x', (5, 6), (0.5, 1.5), (0.8, 0.9), (0.1, 0.2))
        with pytest.raises(ValueError, match='Unsupported background pattern'):
            Archetype('x', (5, 6), (0.5, 1.0), (0.8, 0.9), (0.1, 0.2), pattern='plaid')

    def test_spec_needs_room_for_largest_lesion(self):
        with pytest.raises(ValueError, match='too small'):
            PhantomSpec(image_size=57)
        assert PhantomSpec(image_size=58).image_size == 58

    def test_spec_count(self):
        with pytest.raises(ValueError, match='count'):
            PhantomSpec(count=0)


class TestGenerate:
    def test_cases(self):
        cases = phantom_generate(SMALL)
        assert [c.lesion_id for c in cases] == [lesion_id_for(i) for i in range(6)]
        assert cases[0].lesion_id == 'L00000'
        names = [a.name for a in DEFAULT_ARCHETYPES]
        assert [c.archetype for c in cases] == [names[i % 4] for i in range(6)]
        for case in cases:
            assert case.image.data.shape == (64, 64)
            assert case.image.data.min() >= 0 and case.image.data.max() <= 1
            assert case.mask.area > 0
            # lesions never touch the border
            assert not case.mask.labels[[0, -1], :].any() and not case.mask.labels[:, [0, -1]].any()
            assert case.annotation.inside(64, 64)
            assert case.annotation.image_path == f"images/{case.lesion_id}.png"

    def test_lesion_contrast(self):
        for case in phantom_generate(SMALL):
            inside = case.image.data[case.mask.as_bool()].mean()
            outside = case.image.data[~case.mask.as_bool()].mean()
            assert abs(inside - outside) > 0.05

    def test_deterministic(self):
        first, second = phantom_generate(SMALL), phantom_generate(SMALL)
        for a, b in zip(first, second):
            assert np.array_equal(a.image.data, b.image.data)
            assert a.annotation == b.annotation

    def test_seed_changes_output(self):
        other = PhantomSpec(count=6, image_size=64, seed=4)
        assert not np.array_equal(phantom_generate(SMALL)[0].image.data, phantom_generate(other)[0].image.data)


class TestPhantomGenerator:
    def test_writes_dataset(self, tmp_path):
        result = PhantomGenerator(SMALL).generate(tmp_path / 'data')
        assert result['success']
        paths = result['paths']
        assert sorted(p.name for p in paths['images'].iterdir()) == [f"L0000{i}.png" for i in range(6)]
        annotations = load_annotations(paths['annotations'])
        assert len(annotations) == 6
        labels = load_archetype_labels(paths['archetypes'])
        assert labels['L00001'] == DEFAULT_ARCHETYPES[1].name
        case = result['cases'][2]
        assert np.array_equal(load_mask_png(paths['gt_masks'] / 'L00002.png').labels, case.mask.labels)
        assert np.allclose(load_image_png(paths['images'] / 'L00002.png').data / 65535, case.image.data, atol=1e-4)

    def test_byte_identical_reruns(self, tmp_path):
        PhantomGenerator(SMALL).generate(tmp_path / 'a')
        PhantomGenerator(SMALL).generate(tmp_path / 'b')
        files = sorted(p.relative_to(tmp_path / 'a') for p in (tmp_path / 'a').rglob('*') if p.is_file())
        assert len(files) == 14
        for rel in files:
            assert (tmp_path / 'a' / rel).read_bytes() == (tmp_path / 'b' / rel).read_bytes()

    def test_unwritable_destination(self, tmp_path):
        blocker = tmp_path / 'blocker'
        blocker.write_text('not a directory')
        result = PhantomGenerator(SMALL).generate(blocker)
        assert not result['success']
        assert 'Could not write phantom dataset' in result['explanation']
