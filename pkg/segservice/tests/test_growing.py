import numpy as np
import pytest

from segservice.growing import boundary_contrast, grow_region, segment


def flood_fill_oracle(image, seed, threshold):
    """Independent wave-by-wave reimplementation with plain Python loops:
    neighbors join when their color is within threshold of the mean of all
    pixels accepted so far; the mean updates between waves."""
    img = np.asarray(image, dtype=float)
    h, w = img.shape[:2]
    region = {(seed[1], seed[0])}
    total = img[seed[1], seed[0]].astype(float).copy()
    count = 1
    frontier = set(region)
    while frontier:
        mean = total / count
        wave = set()
        for (y, x) in frontier:
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and (ny, nx) not in region:
                    if np.sqrt(((img[ny, nx] - mean) ** 2).sum()) <= threshold:
                        wave.add((ny, nx))
        region |= wave
        for (y, x) in wave:
            total += img[y, x]
        count += len(wave)
        frontier = wave
    out = np.zeros((h, w), bool)
    for (y, x) in region:
        out[y, x] = True
    return out


def two_tone(h=24, w=32):
    img = np.full((h, w, 3), 40, dtype=np.uint8)
    img[5:15, 8:20] = (200, 160, 120)
    return img


class TestGrowRegion:
    def test_two_tone_exact_component(self):
        img = two_tone()
        mask = grow_region(img, (10, 8), threshold=30.0)
        expect = np.zeros(img.shape[:2], bool)
        expect[5:15, 8:20] = True
        assert np.array_equal(mask, expect)  # [TRIVIAL] flat region

    def test_disconnected_same_color_not_joined(self):
        img = two_tone()
        img[20:23, 2:6] = (200, 160, 120)  # same color, separate component
        mask = grow_region(img, (10, 8), threshold=30.0)
        assert not mask[20:23, 2:6].any()

    def test_matches_bruteforce_oracle(self):
        # [DERIVED] independent Python flood fill with the same wave rule
        rng = np.random.default_rng(0)
        for trial in range(5):
            img = rng.integers(0, 255, (16, 20, 3), dtype=np.uint8)
            seed = (int(rng.integers(0, 20)), int(rng.integers(0, 16)))
            for thr in (20.0, 60.0, 120.0):
                assert np.array_equal(grow_region(img, seed, thr),
                                      flood_fill_oracle(img, seed, thr))

    def test_gradient_area_monotone_in_threshold(self):
        # [DERIVED] brute-force flood fill oracle at 3 thresholds
        x = np.linspace(0, 255, 64)
        img = np.repeat(np.tile(x, (32, 1))[:, :, None], 3, axis=2).astype(np.uint8)
        areas = []
        for thr in (10.0, 30.0, 90.0):
            m = grow_region(img, (0, 16), thr)
            assert np.array_equal(m, flood_fill_oracle(img, (0, 16), thr))
            areas.append(int(m.sum()))
        assert areas[0] <= areas[1] <= areas[2]
        assert areas[0] < areas[2]

    def test_seed_out_of_bounds_raises(self):
        with pytest.raises(ValueError):
            grow_region(two_tone(), (99, 99))

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 255, (20, 20, 3), dtype=np.uint8)
        a = grow_region(img, (10, 10), 80.0)
        b = grow_region(img, (10, 10), 80.0)
        assert np.array_equal(a, b)


class TestSegment:
    def test_negative_prompt_carves_its_region(self):
        img = two_tone()
        img[5:15, 14:20] = (90, 200, 90)  # right half of the block, third tone
        mask, _ = segment(img, [{"x": 10, "y": 8, "positive": True},
                                {"x": 16, "y": 8, "positive": False}])
        expect = np.zeros(img.shape[:2], bool)
        expect[5:15, 8:14] = True
        assert np.array_equal(mask, expect)

    def test_enclosed_positive_gives_empty_mask_conf_zero(self):
        img = two_tone()
        mask, conf = segment(img, [{"x": 10, "y": 8, "positive": True},
                                   {"x": 12, "y": 10, "positive": False}])
        assert not mask.any()  # [TRIVIAL]
        assert conf == 0.0

    def test_confidence_in_unit_interval_and_orders_contrast(self):
        strong = two_tone()
        weak = two_tone()
        weak[weak[:, :, 0] == 40] = 170  # background close to the block tone
        _, c_strong = segment(strong, [{"x": 10, "y": 8, "positive": True}])
        _, c_weak = segment(weak, [{"x": 10, "y": 8, "positive": True}])
        assert 0.0 <= c_weak <= c_strong <= 1.0
        assert c_strong == 1.0  # contrast far beyond twice the threshold

    def test_boundary_contrast_empty_and_full(self):
        img = two_tone()
        assert boundary_contrast(img, np.zeros(img.shape[:2], bool), 30.0) == 0.0
        assert boundary_contrast(img, np.ones(img.shape[:2], bool), 30.0) == 0.0
