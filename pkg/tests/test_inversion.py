import tempfile
import unittest
from pathlib import Path
from unittest.mock import MagicMock, patch

import torch
import torch.nn.functional as F

from inversion import InversionConfig, InversionResult, invert, invert_conditional
from sista_common import ConfigurationError, ContractViolation, NonFiniteLossError
from stylegen import (
    ArchitectureDescriptor,
    DiscriminatorDescriptor,
    build_toy_discriminator,
    build_toy_generator,
    draw_latent,
    mean_latent,
    synthesize,
)

TINY_GEN = ArchitectureDescriptor(resolution=16, channels=(8, 8, 8))
TINY_DISC = DiscriminatorDescriptor(resolution=16, channels=(8, 8), feature_dim=8, taps=(0, 1, 2))
FAST = dict(steps=5, mean_latent_samples=64)


def tiny_generator(seed=0, num_classes=None):
    desc = TINY_GEN if num_classes is None else TINY_GEN.model_copy(update={"num_classes": num_classes})
    return build_toy_generator(seed=seed, descriptor=desc, device="cpu")


def tiny_disc():
    return build_toy_discriminator(seed=0, descriptor=TINY_DISC, device="cpu")


class InversionConfigTests(unittest.TestCase):
    def test_both_weights_zero_rejected(self):
        with self.assertRaises(ValueError):
            InversionConfig(pixel_weight=0, feature_weight=0)


class InvertTests(unittest.TestCase):
    def setUp(self):
        self.gen = tiny_generator()
        self.disc = tiny_disc()
        self.x_t = synthesize(self.gen, draw_latent(self.gen, 11))[0]

    def test_trace_and_shapes(self):
        res = invert(self.x_t, self.gen, self.disc, InversionConfig(**FAST))
        self.assertEqual(tuple(res.w_plus.shape), (3, TINY_GEN.w_dim))
        self.assertEqual(len(res.loss_trace), 5)
        self.assertEqual(res.final_loss, res.loss_trace[-1])
        self.assertIsNone(res.condition)
        self.assertFalse(res.w_plus.requires_grad)

    def test_generator_and_discriminator_untouched(self):
        g_sum, d_sum = self.gen.checksum(), self.disc.checksum()
        invert(self.x_t, self.gen, self.disc, InversionConfig(**FAST))
        self.assertEqual(self.gen.checksum(), g_sum)
        self.assertEqual(self.disc.checksum(), d_sum)

    def test_monotone_trace_never_increases(self):
        res = invert(self.x_t, self.gen, self.disc, InversionConfig(steps=15, monotone=True, step_size=0.5, mean_latent_samples=64))
        for prev, cur in zip(res.loss_trace, res.loss_trace[1:]):
            self.assertLessEqual(cur, prev)

    def test_deterministic(self):
        cfg = InversionConfig(init="random", **FAST)
        a = invert(self.x_t, self.gen, self.disc, cfg)
        b = invert(self.x_t, self.gen, self.disc, cfg)
        self.assertTrue(torch.equal(a.w_plus, b.w_plus))
        self.assertEqual(a.loss_trace, b.loss_trace)

    def test_self_inversion_reconstructs_target(self):
        cfg = InversionConfig(steps=500, mean_latent_samples=512)
        start = synthesize(self.gen, mean_latent(self.gen, samples=512))[0]
        res = invert(self.x_t, self.gen, self.disc, cfg)
        recon = synthesize(self.gen, res.w_plus)[0]
        mse = float(F.mse_loss(recon, self.x_t))
        self.assertLess(mse, 1e-2)
        self.assertLessEqual(mse, float(F.mse_loss(start, self.x_t)))

    def test_zero_step_size_returns_initial_latent(self):
        cfg = InversionConfig(steps=1, step_size=0.0, mean_latent_samples=64)
        res = invert(self.x_t, self.gen, self.disc, cfg)
        self.assertTrue(torch.equal(res.w_plus, mean_latent(self.gen, samples=64)))

    def test_wrong_target_shape(self):
        with self.assertRaises(ContractViolation):
            invert(torch.zeros(3, 8, 8), self.gen, self.disc, InversionConfig(**FAST))

    def test_conditional_generator_rejected(self):
        with self.assertRaises(ConfigurationError):
            invert(self.x_t, tiny_generator(num_classes=2), self.disc, InversionConfig(**FAST))

    def test_non_finite_loss_reports_step(self):
        with patch("inversion.feature_l1_distance", return_value=torch.tensor(float("nan"))):
            with self.assertRaises(NonFiniteLossError) as ctx:
                invert(self.x_t, self.gen, self.disc, InversionConfig(**FAST))
        self.assertEqual(ctx.exception.where, 0)


class InvertConditionalTests(unittest.TestCase):
    def setUp(self):
        self.gen = tiny_generator(num_classes=3)
        self.disc = tiny_disc()
        self.x_t = torch.rand(3, 16, 16) * 2 - 1

    def test_label_shortcut(self):
        res = invert_conditional(self.x_t, self.gen, self.disc, InversionConfig(**FAST), label=2)
        self.assertEqual(res.condition, 2)
        with self.assertRaises(ConfigurationError):
            invert_conditional(self.x_t, self.gen, self.disc, InversionConfig(**FAST), label=3)

    def test_picks_lowest_loss_class(self):
        losses = {0: 0.7, 1: 0.2, 2: 0.2}

        def fake(x_t, gen, disc, cfg, condition):
            return InversionResult(torch.zeros(3, 4), condition, losses[condition], [losses[condition]])

        with patch("inversion._run_inversion", side_effect=fake) as run:
            res = invert_conditional(self.x_t, self.gen, self.disc, InversionConfig(**FAST))
        self.assertEqual(run.call_count, 3)
        # ties break toward the smaller class index
        self.assertEqual(res.condition, 1)

    def test_top_k_restricts_search(self):
        classifier = MagicMock()
        classifier.predict_proba.return_value = torch.tensor([[0.1, 0.3, 0.6]])

        def fake(x_t, gen, disc, cfg, condition):
            return InversionResult(torch.zeros(3, 4), condition, float(condition), [float(condition)])

        with patch("inversion._run_inversion", side_effect=fake) as run:
            res = invert_conditional(self.x_t, self.gen, self.disc, InversionConfig(top_k=2, **FAST), classifier=classifier)
        self.assertEqual([c.kwargs["condition"] for c in run.call_args_list], [1, 2])
        self.assertEqual(res.condition, 1)

    def test_single_class_matches_label(self):
        gen = tiny_generator(num_classes=1)
        cfg = InversionConfig(**FAST)
        searched = invert_conditional(self.x_t, gen, self.disc, cfg)
        labelled = invert_conditional(self.x_t, gen, self.disc, cfg, label=0)
        self.assertTrue(torch.equal(searched.w_plus, labelled.w_plus))

    def test_recovers_generating_class(self):
        gen = tiny_generator(seed=3, num_classes=3)
        cfg = InversionConfig(steps=10, step_size=0.01, mean_latent_samples=256)
        hits = 0
        for seed in range(3):
            w_avg = mean_latent(gen, samples=256, condition=2)
            x_t = synthesize(gen, draw_latent(gen, 100 + seed, condition=2, truncation_psi=0.5, w_avg=w_avg))[0]
            hits += invert_conditional(x_t, gen, self.disc, cfg).condition == 2
        self.assertGreaterEqual(hits, 2)

    def test_label_matches_search_restricted_to_label(self):
        classifier = MagicMock()
        classifier.predict_proba.return_value = torch.tensor([[0.1, 0.2, 0.7]])
        cfg = InversionConfig(top_k=1, **FAST)
        searched = invert_conditional(self.x_t, self.gen, self.disc, cfg, classifier=classifier)
        labelled = invert_conditional(self.x_t, self.gen, self.disc, cfg, label=2)
        self.assertEqual(searched.condition, 2)
        self.assertTrue(torch.equal(searched.w_plus, labelled.w_plus))
        self.assertEqual(searched.loss_trace, labelled.loss_trace)

    def test_unconditional_generator_rejected(self):
        with self.assertRaises(ConfigurationError):
            invert_conditional(self.x_t, tiny_generator(), self.disc, InversionConfig(**FAST))


class InversionResultTests(unittest.TestCase):
    def test_save_load(self):
        res = InversionResult(torch.randn(3, 4), 1, 0.25, [0.5, 0.25])
        with tempfile.TemporaryDirectory() as tmp:
            path = res.save(Path(tmp) / "inv" / "inversion.json")
            back = InversionResult.load(path)
        self.assertTrue(torch.allclose(back.w_plus, res.w_plus))
        self.assertEqual(back.condition, 1)
        self.assertEqual(back.loss_trace, [0.5, 0.25])

    def test_final_loss_must_match_trace(self):
        with self.assertRaises(ContractViolation):
            InversionResult(torch.zeros(3, 4), None, 0.1, [0.5, 0.2])


if __name__ == '__main__':
    unittest.main()
