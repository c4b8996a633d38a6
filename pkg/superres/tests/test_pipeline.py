import torch
from django.test import SimpleTestCase
from torch import nn

from superres.backbones import BackboneConfig, build_backbone, module_checksum
from superres.core import make_generator, make_schedule
from superres.dtsm import CandidateSet, SelectionMode, SelectorConfig, build_selector, fixed_selection
from superres.exceptions import (
    AdapterTargetError,
    DivisibilityError,
    InvalidRangeError,
    OutOfRangeError,
    ShapeMismatchError,
)
from superres.pipeline import (
    AdapterSpec,
    LoRAConv2d,
    LoRALinear,
    adapter_state_dict,
    apply_adapters,
    decode,
    default_adapter_specs,
    denoise_one_step,
    encode,
    pre_upsample,
    predict_x0,
    renoise,
    super_resolve,
    trainable_parameters,
)
from superres.tests.utils import TINY_BACKBONE, TINY_CANDIDATES, TINY_SELECTOR


class NoiseRelationTests(SimpleTestCase):
    def test_renoise_inverts_x0_prediction(self):
        generator = make_generator(0)
        for _ in range(100):
            z = torch.randn(1, 4, 4, 4, generator=generator, dtype=torch.float64)
            eps = torch.randn(1, 4, 4, 4, generator=generator, dtype=torch.float64)
            alpha_bar = float(torch.rand(1, generator=generator, dtype=torch.float64)) * 0.98 + 0.01
            x0 = predict_x0(z, eps, alpha_bar)
            self.assertLess(float((renoise(x0, eps, alpha_bar) - z).abs().max()), 1e-5)

    def test_per_item_alpha(self):
        z = torch.ones(2, 1, 2, 2)
        x0 = predict_x0(z, torch.zeros_like(z), torch.tensor([1.0, 0.25]))
        self.assertTrue(torch.allclose(x0[0], z[0]))
        self.assertTrue(torch.allclose(x0[1], 2 * z[1]))


class OneStepPipelineTests(SimpleTestCase):
    def setUp(self):
        self.schedule = make_schedule()
        self.base = build_backbone(TINY_BACKBONE, seed=0)
        self.bundle = apply_adapters(self.base, default_adapter_specs(rank=4), seed=1)
        self.selector = build_selector(TINY_CANDIDATES, TINY_SELECTOR, seed=2)
        self.lr = torch.rand(2, 3, 8, 8, generator=make_generator(3))

    def run_pipeline(self, bundle, selector=None, **kwargs):
        return super_resolve(bundle, self.schedule, TINY_CANDIDATES, selector, TINY_SELECTOR, self.lr,
                             scale_factor=4, **kwargs)

    def test_exactly_one_unet_evaluation(self):
        self.bundle.unet_calls = 0
        result = self.run_pipeline(self.bundle, self.selector, mode=SelectionMode.TRAIN,
                                   generator=make_generator(0))
        self.assertEqual(self.bundle.unet_calls, 1)
        self.assertEqual(tuple(result.image.shape), (2, 3, 32, 32))
        self.assertGreaterEqual(float(result.image.min()), 0.0)
        self.assertLessEqual(float(result.image.max()), 1.0)

    def test_zero_initialised_adapters_are_neutral(self):
        adapted = self.run_pipeline(self.bundle, fixed_timestep=599).image
        base = self.run_pipeline(self.base, fixed_timestep=599).image
        self.assertEqual(float((adapted - base).abs().max()), 0.0)

    def test_disabled_selector_uses_largest_candidate(self):
        result = self.run_pipeline(self.bundle)
        self.assertEqual(result.t_star.tolist(), [999, 999])
        self.assertEqual(self.run_pipeline(self.bundle, fixed_timestep=399).t_star.tolist(), [399, 399])

    def test_identity_backbone_applies_x0_relation(self):
        bundle = build_backbone(BackboneConfig(kind='identity'), seed=0)
        lr = torch.rand(1, 3, 12, 12, generator=make_generator(4)) * 0.5
        result = super_resolve(bundle, self.schedule, CandidateSet(), None, SelectorConfig(), lr,
                               scale_factor=1, fixed_timestep=0)
        expected = (lr / self.schedule.alpha_bars[0].sqrt().float()).clamp(0, 1)
        self.assertTrue(torch.allclose(result.image, expected, atol=1e-6))

    def test_only_adapters_train(self):
        names = [name for name, p in self.bundle.named_parameters() if p.requires_grad]
        self.assertTrue(names)
        self.assertTrue(all('lora_' in name for name in names))
        self.assertFalse(any(p.requires_grad for p in self.bundle.decoder.parameters()))
        self.assertEqual(set(adapter_state_dict(self.bundle)), set(names))
        self.assertEqual(len(trainable_parameters(self.bundle, None)), len(names))

    def test_base_bundle_untouched(self):
        before = module_checksum(self.base)
        apply_adapters(self.base, default_adapter_specs(rank=2), seed=5)
        self.assertEqual(module_checksum(self.base), before)
        self.assertTrue(all(p.requires_grad for p in self.base.parameters()))

    def test_adapters_cannot_target_decoder(self):
        with self.assertRaises(AdapterTargetError):
            AdapterSpec('decoder')
        with self.assertRaises(InvalidRangeError):
            AdapterSpec('unet', rank=0)


class AdapterParameterTests(SimpleTestCase):
    def lora_modules(self, bundle):
        return [module for module in bundle.modules() if isinstance(module, (LoRALinear, LoRAConv2d))]

    def trainable_count(self, bundle):
        return sum(p.numel() for p in trainable_parameters(bundle))

    def test_linear_rank_adds_rank_times_in_plus_out(self):
        layer = LoRALinear(nn.Linear(20, 12), 16, 1.0)
        lora = sum(p.numel() for name, p in layer.named_parameters() if name.startswith('lora_'))
        self.assertEqual(lora, 16 * (20 + 12))

    def test_identity_backbone_rank_sixteen(self):
        bundle = build_backbone(BackboneConfig(kind='identity'), seed=0)
        adapted = apply_adapters(bundle, default_adapter_specs(), seed=0)
        self.assertEqual(len(self.lora_modules(adapted)), 2)
        self.assertEqual(self.trainable_count(adapted), 2 * 16 * (3 + 3))

    def test_repeated_spec_does_not_nest(self):
        base = build_backbone(TINY_BACKBONE, seed=0)
        once = apply_adapters(base, [AdapterSpec('unet', rank=4)], seed=1)
        twice = apply_adapters(base, [AdapterSpec('unet', rank=4), AdapterSpec('unet', rank=4)], seed=1)
        self.assertEqual(len(self.lora_modules(twice)), len(self.lora_modules(once)))
        self.assertEqual(self.trainable_count(twice), self.trainable_count(once))
        for module in self.lora_modules(twice):
            self.assertNotIsInstance(module.base, (LoRALinear, LoRAConv2d))

    def test_adapting_an_adapted_bundle_keeps_its_corrections(self):
        base = build_backbone(BackboneConfig(kind='identity'), seed=0)
        adapted = apply_adapters(base, default_adapter_specs(rank=4), seed=0)
        again = apply_adapters(adapted, default_adapter_specs(rank=4), seed=3)
        self.assertIsInstance(again.encoder, LoRAConv2d)
        self.assertIsInstance(again.encoder.base, nn.Conv2d)
        self.assertEqual(self.trainable_count(again), self.trainable_count(adapted))
        for name, tensor in adapter_state_dict(adapted).items():
            self.assertTrue(torch.equal(adapter_state_dict(again)[name], tensor))


class GeometryTests(SimpleTestCase):
    def test_pre_upsample(self):
        lr = torch.rand(1, 3, 5, 7)
        self.assertEqual(tuple(pre_upsample(lr, 4).shape), (1, 3, 20, 28))
        self.assertIs(pre_upsample(lr, 1), lr)
        with self.assertRaises(InvalidRangeError):
            pre_upsample(lr, 0)

    def test_encode_requires_divisible_size(self):
        bundle = build_backbone(TINY_BACKBONE, seed=0)
        with self.assertRaises(DivisibilityError):
            encode(bundle, torch.rand(1, 3, 10, 12))
        self.assertEqual(tuple(encode(bundle, torch.rand(1, 3, 16, 12)).shape), (1, 4, 4, 3))


class DenoiseDecodeTests(SimpleTestCase):
    def setUp(self):
        self.identity = build_backbone(BackboneConfig(kind='identity'), seed=0)
        self.z = torch.rand(2, 3, 6, 6, generator=make_generator(5))

    def test_zero_noise_with_unit_alpha_is_identity(self):
        schedule = make_schedule(1, 1e-12, 1e-12)
        out = denoise_one_step(self.identity, schedule, self.z, fixed_selection(0, 2))
        self.assertTrue(torch.allclose(out, self.z, atol=1e-6))

    def test_zero_noise_with_quarter_alpha_doubles(self):
        schedule = make_schedule(1, 0.75, 0.75)
        out = denoise_one_step(self.identity, schedule, self.z, fixed_selection(0, 2))
        self.assertTrue(torch.allclose(out, 2 * self.z, atol=1e-6))

    def test_step_outside_schedule(self):
        with self.assertRaises(OutOfRangeError):
            denoise_one_step(self.identity, make_schedule(10), self.z, fixed_selection(10, 2))

    def test_decode_shape_and_range(self):
        bundle = build_backbone(TINY_BACKBONE, seed=0)
        image = decode(bundle, 3 * torch.randn(1, 4, 32, 32, generator=make_generator(6)))
        self.assertEqual(tuple(image.shape), (1, 3, 128, 128))
        self.assertGreaterEqual(float(image.min()), 0.0)
        self.assertLessEqual(float(image.max()), 1.0)
        with self.assertRaises(ShapeMismatchError):
            decode(bundle, torch.zeros(1, 3, 8, 8))

    def test_identity_round_trip(self):
        x = torch.rand(1, 3, 9, 9, generator=make_generator(7))
        self.assertTrue(torch.allclose(decode(self.identity, encode(self.identity, x)), x, atol=1e-6))
