import torch
from django.test import SimpleTestCase

from superres.core import (
    alpha_bar_at,
    check_image_batch,
    derive_sample_seed,
    make_generator,
    make_schedule,
    numpy_rng,
    seeded,
)
from superres.exceptions import ChannelCountError, InvalidRangeError, OutOfRangeError, ShapeMismatchError


class SeedDerivationTests(SimpleTestCase):
    def test_known_value(self):
        self.assertEqual(derive_sample_seed(0, 0), 0xE220A8397B1DCDAF)

    def test_distinct_per_index(self):
        seeds = {derive_sample_seed(42, i) for i in range(2000)}
        self.assertEqual(len(seeds), 2000)

    def test_fits_in_64_bits(self):
        for i in range(50):
            self.assertLess(derive_sample_seed(2 ** 63 + 5, i), 2 ** 64)

    def test_negative_index_rejected(self):
        with self.assertRaises(InvalidRangeError):
            derive_sample_seed(0, -1)

    def test_generators_are_reproducible(self):
        a = torch.rand(4, generator=make_generator(7))
        b = torch.rand(4, generator=make_generator(7))
        self.assertTrue(torch.equal(a, b))
        self.assertEqual(numpy_rng(3).integers(0, 1000), numpy_rng(3).integers(0, 1000))


class ScheduleTests(SimpleTestCase):
    def test_linear_schedule(self):
        schedule = make_schedule(1000, 1e-4, 0.02)
        self.assertEqual(schedule.alpha_bars.shape, (1000,))
        self.assertAlmostEqual(alpha_bar_at(schedule, 0), 1.0 - 1e-4, places=12)
        self.assertTrue(bool((schedule.alpha_bars[1:] < schedule.alpha_bars[:-1]).all()))
        self.assertGreater(alpha_bar_at(schedule, 999), 0.0)
        self.assertEqual(schedule.describe()['family'], 'linear')

    def test_invalid_betas(self):
        with self.assertRaises(InvalidRangeError):
            make_schedule(1000, 0.0, 0.02)
        with self.assertRaises(InvalidRangeError):
            make_schedule(1000, 0.03, 0.02)
        with self.assertRaises(InvalidRangeError):
            make_schedule(0)

    def test_step_out_of_range(self):
        schedule = make_schedule(10)
        with self.assertRaises(OutOfRangeError):
            alpha_bar_at(schedule, 10)


class ImageContractTests(SimpleTestCase):
    def test_channel_count(self):
        with self.assertRaises(ChannelCountError):
            check_image_batch(torch.zeros(1, 4, 8, 8))

    def test_rank(self):
        with self.assertRaises(ShapeMismatchError):
            check_image_batch(torch.zeros(3, 8, 8))

    def test_seeded_leaves_global_rng_alone(self):
        torch.manual_seed(5)
        expected = torch.rand(3)
        torch.manual_seed(5)
        with seeded(123):
            torch.rand(10)
        self.assertTrue(torch.equal(torch.rand(3), expected))
