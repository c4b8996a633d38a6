import torch
from django.test import SimpleTestCase

from superres.core import make_generator
from superres.dtsm import (
    CandidateSet,
    SelectionMode,
    SelectorConfig,
    build_selector,
    extract_features,
    fixed_selection,
    gumbel_softmax_select,
    select_timestep,
)
from superres.exceptions import InvalidRangeError, NumericError, ShapeMismatchError


class CandidateSetTests(SimpleTestCase):
    def test_default(self):
        self.assertEqual(CandidateSet().steps, (199, 399, 599, 799, 999))
        self.assertEqual(CandidateSet().max_step, 999)

    def test_must_increase(self):
        with self.assertRaises(InvalidRangeError):
            CandidateSet((399, 199))
        with self.assertRaises(InvalidRangeError):
            CandidateSet((199, 199))

    def test_range(self):
        with self.assertRaises(InvalidRangeError):
            CandidateSet((0, 1000))
        with self.assertRaises(InvalidRangeError):
            CandidateSet(())


class GumbelSoftmaxTests(SimpleTestCase):
    candidates = CandidateSet((199, 599, 999))

    def test_hard_frequencies_follow_softmax(self):
        logits = torch.tensor([2.0, 1.0, 0.0], dtype=torch.float64).expand(10000, 3)
        selection = gumbel_softmax_select(logits, self.candidates, 1.0, True, generator=make_generator(0))
        frequencies = torch.bincount(selection.hard_index, minlength=3).to(torch.float64) / 10000
        expected = torch.softmax(logits[0], dim=0)
        for observed, target in zip(frequencies.tolist(), expected.tolist()):
            self.assertAlmostEqual(observed, target, delta=0.02)

    def test_noise_free_is_argmax(self):
        logits = torch.tensor([[0.1, 3.0, -1.0], [2.0, 0.0, 1.0]])
        selection = gumbel_softmax_select(logits, self.candidates, 0.5, False)
        self.assertEqual(selection.hard_index.tolist(), [1, 0])
        self.assertEqual(selection.t_star.tolist(), [599, 199])
        self.assertTrue(torch.allclose(selection.soft_probs.sum(-1), torch.ones(2)))

    def test_same_generator_same_draw(self):
        logits = torch.zeros(16, 3)
        a = gumbel_softmax_select(logits, self.candidates, 1.0, True, generator=make_generator(11))
        b = gumbel_softmax_select(logits, self.candidates, 1.0, True, generator=make_generator(11))
        self.assertTrue(torch.equal(a.hard_index, b.hard_index))

    def test_rejects_bad_input(self):
        with self.assertRaises(InvalidRangeError):
            gumbel_softmax_select(torch.zeros(1, 3), self.candidates, 0.0, False)
        with self.assertRaises(NumericError):
            gumbel_softmax_select(torch.tensor([[0.0, float('nan'), 1.0]]), self.candidates, 1.0, False)
        with self.assertRaises(ShapeMismatchError):
            gumbel_softmax_select(torch.zeros(1, 4), self.candidates, 1.0, False)

    def test_mix_forward_is_hard_value(self):
        logits = torch.tensor([[0.5, 2.0, -0.3]], dtype=torch.float64, requires_grad=True)
        values = torch.tensor([10.0, 20.0, 30.0], dtype=torch.float64)
        selection = gumbel_softmax_select(logits, self.candidates, 1.0, False)
        mixed = selection.mix(values)
        self.assertEqual(mixed.item(), 20.0)

        mixed.sum().backward()
        reference = logits.detach().clone().requires_grad_(True)
        (torch.softmax(reference, dim=-1) @ values).sum().backward()
        self.assertTrue(torch.allclose(logits.grad, reference.grad))

    def test_soft_probs_sum_to_one(self):
        logits = torch.randn(64, 3, generator=make_generator(4), dtype=torch.float64) * 5
        for temperature in (0.1, 0.5, 1.0, 3.0, 10.0):
            for noise in (False, True):
                selection = gumbel_softmax_select(logits, self.candidates, temperature, noise,
                                                  generator=make_generator(9))
                self.assertTrue((selection.soft_probs >= 0).all())
                self.assertLess((selection.soft_probs.sum(-1) - 1).abs().max().item(), 1e-6)

    def test_shift_invariance(self):
        logits = torch.randn(8, 3, generator=make_generator(5), dtype=torch.float64)
        for shift in (-7.5, 0.25, 40.0):
            base = gumbel_softmax_select(logits, self.candidates, 0.7, True, generator=make_generator(2))
            shifted = gumbel_softmax_select(logits + shift, self.candidates, 0.7, True, generator=make_generator(2))
            self.assertLess((base.soft_probs - shifted.soft_probs).abs().max().item(), 1e-6)
            self.assertTrue(torch.equal(base.hard_index, shifted.hard_index))

    def test_worked_example(self):
        logits = torch.tensor([[2.0, 1.0, 0.0]], dtype=torch.float64)
        selection = gumbel_softmax_select(logits, self.candidates, 1.0, False)
        for observed, expected in zip(selection.soft_probs[0].tolist(), (0.6652, 0.2447, 0.0900)):
            self.assertAlmostEqual(observed, expected, places=4)
        self.assertEqual(selection.hard_index.tolist(), [0])
        self.assertEqual(selection.t_star.tolist(), [199])

    def test_single_candidate_always_chosen(self):
        single = CandidateSet((599,))
        logits = torch.randn(32, 1, generator=make_generator(6))
        selection = gumbel_softmax_select(logits, single, 0.3, True, generator=make_generator(7))
        self.assertTrue(torch.equal(selection.soft_probs, torch.ones(32, 1)))
        self.assertEqual(selection.hard_index.tolist(), [0] * 32)
        self.assertEqual(selection.t_star.tolist(), [599] * 32)


class SelectorTests(SimpleTestCase):
    candidates = CandidateSet((199, 599, 999))
    config = SelectorConfig(conv_channels=4, n_resblocks=1, mlp_hidden=8, noise_enabled=False)

    def test_straight_through_gradient_matches_finite_differences(self):
        selector = build_selector(self.candidates, self.config, seed=3).double()
        values = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
        image = torch.rand(1, 3, 8, 8, generator=make_generator(1), dtype=torch.float64)

        leaf = image.clone().requires_grad_(True)
        selection = select_timestep(selector, leaf, self.candidates, self.config)
        objective = selection.mix(values).sum()
        self.assertEqual(objective.item(), values[selection.hard_index].item())
        objective.backward()
        analytic = leaf.grad

        def surrogate(x):
            with torch.no_grad():
                probs = torch.softmax(selector(x) / self.config.temperature, dim=-1)
                return float((probs @ values).sum())

        eps = 1e-6
        numeric = torch.zeros_like(image)
        for i in range(image.numel()):
            plus, minus = image.clone(), image.clone()
            plus.view(-1)[i] += eps
            minus.view(-1)[i] -= eps
            numeric.view(-1)[i] = (surrogate(plus) - surrogate(minus)) / (2 * eps)
        relative = float((analytic - numeric).norm() / numeric.norm())
        self.assertLess(relative, 1e-3)

    def test_inference_is_deterministic(self):
        config = SelectorConfig(conv_channels=4, n_resblocks=1, mlp_hidden=8)
        selector = build_selector(self.candidates, config, seed=0)
        image = torch.rand(3, 3, 12, 12, generator=make_generator(2))
        a = select_timestep(selector, image, self.candidates, config, SelectionMode.INFER)
        b = select_timestep(selector, image, self.candidates, config, SelectionMode.INFER)
        self.assertTrue(torch.equal(a.t_star, b.t_star))
        self.assertTrue(set(a.t_star.tolist()) <= set(self.candidates.steps))

    def test_same_seed_same_weights(self):
        a = build_selector(self.candidates, self.config, seed=9)
        b = build_selector(self.candidates, self.config, seed=9)
        for (_, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
            self.assertTrue(torch.equal(p, q))

    def test_tiny_input_rejected(self):
        selector = build_selector(self.candidates, self.config, seed=0)
        with self.assertRaises(ShapeMismatchError):
            extract_features(selector, torch.zeros(1, 3, 2, 2))

    def test_candidate_count_mismatch(self):
        selector = build_selector(CandidateSet((199, 999)), self.config, seed=0)
        with self.assertRaises(ShapeMismatchError):
            select_timestep(selector, torch.zeros(1, 3, 8, 8), self.candidates, self.config)

    def test_fixed_selection(self):
        selection = fixed_selection(999, 3)
        self.assertEqual(selection.t_star.tolist(), [999, 999, 999])
        with self.assertRaises(InvalidRangeError):
            fixed_selection(1000, 1)

    def test_temperature_annealing(self):
        config = SelectorConfig(temperature=1.0, temperature_min=0.1, anneal_steps=10)
        self.assertEqual(config.temperature_at(0), 1.0)
        self.assertAlmostEqual(config.temperature_at(10), 0.1)
        self.assertAlmostEqual(config.temperature_at(50), 0.1)
        self.assertAlmostEqual(config.temperature_at(5), 0.1 ** 0.5)
        self.assertEqual(SelectorConfig().temperature_at(1000), 1.0)

    def test_single_candidate_selector(self):
        single = CandidateSet((599,))
        config = SelectorConfig(conv_channels=4, n_resblocks=1, mlp_hidden=8)
        selector = build_selector(single, config, seed=1)
        image = torch.rand(4, 3, 8, 8, generator=make_generator(3))
        for mode in (SelectionMode.TRAIN, SelectionMode.INFER):
            selection = select_timestep(selector, image, single, config, mode, generator=make_generator(8))
            self.assertEqual(selection.t_star.tolist(), [599] * 4)
