import tempfile
import unittest
from pathlib import Path

import torch

from sista_common import AlignmentError, ConfigurationError, ContractViolation, UnsupportedFormatError, resolve_device
from stylegen import (
    ActivationTensor,
    ArchitectureDescriptor,
    DiscriminatorDescriptor,
    InterventionPlan,
    RewindDirective,
    StyleLayerSet,
    ZeroDirective,
    build_toy_discriminator,
    build_toy_generator,
    discriminator_features,
    draw_latent,
    feature_l1_distance,
    load_checkpoint,
    map_latent,
    mean_latent,
    percentile_thresholds,
    prune_activations,
    save_checkpoint,
    synthesize,
)

TINY_GEN = ArchitectureDescriptor(resolution=16, channels=(8, 8, 8))
TINY_DISC = DiscriminatorDescriptor(resolution=16, channels=(8, 8), feature_dim=8, taps=(0, 1, 2))


def tiny_generator(seed=0, num_classes=None):
    desc = TINY_GEN if num_classes is None else TINY_GEN.model_copy(update={"num_classes": num_classes})
    return build_toy_generator(seed=seed, descriptor=desc, device="cpu")


class DeviceTests(unittest.TestCase):
    def test_accepts_device_objects_and_names(self):
        self.assertEqual(resolve_device(torch.device("cpu")), torch.device("cpu"))
        self.assertEqual(resolve_device("cpu"), torch.device("cpu"))

    def test_build_with_device_object(self):
        gen = build_toy_generator(seed=0, descriptor=TINY_GEN, device=torch.device("cpu"))
        self.assertEqual(gen.device, torch.device("cpu"))


class StyleLayerSetTests(unittest.TestCase):
    def test_parses_ranges_and_lists(self):
        self.assertEqual(StyleLayerSet.parse("3-8").indices, (3, 4, 5, 6, 7, 8))
        self.assertEqual(StyleLayerSet.parse("1,3").indices, (1, 3))
        self.assertEqual(StyleLayerSet.parse([5, 2]).indices, (2, 5))
        self.assertEqual(len(StyleLayerSet.parse("")), 0)

    def test_rejects_duplicates_and_negatives(self):
        with self.assertRaises(ValueError):
            StyleLayerSet.parse([1, 1])
        with self.assertRaises(ValueError):
            StyleLayerSet.parse([-1])

    def test_out_of_range_for_generator(self):
        gen = tiny_generator()
        with self.assertRaises(ContractViolation):
            StyleLayerSet.parse("2-3").check_within(gen.num_layers)


class LatentTests(unittest.TestCase):
    def test_map_latent_rows_identical(self):
        gen = tiny_generator()
        w = map_latent(torch.randn(TINY_GEN.z_dim), gen)
        self.assertEqual(tuple(w.shape), (3, TINY_GEN.w_dim))
        self.assertTrue(torch.equal(w[0], w[1]) and torch.equal(w[1], w[2]))
        batch = map_latent(torch.randn(4, TINY_GEN.z_dim), gen)
        self.assertEqual(tuple(batch.shape), (4, 3, TINY_GEN.w_dim))

    def test_condition_mismatch(self):
        with self.assertRaises(ConfigurationError):
            map_latent(torch.randn(TINY_GEN.z_dim), tiny_generator(), condition=1)
        with self.assertRaises(ConfigurationError):
            map_latent(torch.randn(TINY_GEN.z_dim), tiny_generator(num_classes=3))
        with self.assertRaises(ConfigurationError):
            map_latent(torch.randn(TINY_GEN.z_dim), tiny_generator(num_classes=3), condition=3)

    def test_wrong_latent_length(self):
        with self.assertRaises(ContractViolation):
            map_latent(torch.randn(TINY_GEN.z_dim + 1), tiny_generator())

    def test_draw_latent_is_seeded(self):
        gen = tiny_generator()
        self.assertTrue(torch.equal(draw_latent(gen, 7), draw_latent(gen, 7)))
        self.assertFalse(torch.equal(draw_latent(gen, 7), draw_latent(gen, 8)))

    def test_mean_latent_is_mapped_sample_mean(self):
        gen = tiny_generator()
        z = torch.randn(2048, TINY_GEN.z_dim, generator=torch.Generator().manual_seed(0))
        mapped = map_latent(z, gen)
        expected = mapped.mean(dim=0)
        self.assertTrue(torch.allclose(mean_latent(gen, samples=2048, seed=0), expected, atol=1e-6))
        other = mean_latent(gen, samples=2048, seed=1)
        bound = 6.0 * mapped[:, 0].std(dim=0) * (2.0 / 2048) ** 0.5 + 1e-6
        self.assertTrue(bool(((other - expected).abs() <= bound).all()))

    def test_truncation_pulls_toward_mean(self):
        gen = tiny_generator()
        w_avg = mean_latent(gen, samples=256)
        far = (draw_latent(gen, 3) - w_avg).norm()
        near = (draw_latent(gen, 3, truncation_psi=0.5, w_avg=w_avg) - w_avg).norm()
        self.assertAlmostEqual(float(near), 0.5 * float(far), places=4)


class SynthesisTests(unittest.TestCase):
    def test_deterministic_and_in_range(self):
        gen = tiny_generator()
        w = draw_latent(gen, 1)
        a, acts = synthesize(gen, w, capture=[0, 2])
        b, _ = synthesize(gen, w)
        self.assertTrue(torch.equal(a, b))
        self.assertEqual(tuple(a.shape), (3, 16, 16))
        self.assertLessEqual(float(a.abs().max()), 1.0)
        self.assertEqual(acts[0].shape, (4, 4, 8))
        self.assertEqual(acts[2].shape, (16, 16, 8))

    def test_empty_plan_matches_plain(self):
        gen = tiny_generator()
        w = draw_latent(gen, 2)
        plan = InterventionPlan(StyleLayerSet.parse("1-2"), {1: None, 2: None})
        self.assertTrue(torch.equal(synthesize(gen, w, plan)[0], synthesize(gen, w)[0]))

    def test_directive_outside_style_layers(self):
        with self.assertRaises(ContractViolation):
            InterventionPlan(StyleLayerSet.parse("2"), {1: ZeroDirective(50)})

    def test_rewind_reference_alignment(self):
        gen = tiny_generator()
        w = draw_latent(gen, 2)
        _, acts = synthesize(gen, w, capture=[1])
        plan = InterventionPlan(StyleLayerSet.parse("1-2"), {2: RewindDirective(20, acts[1])})
        with self.assertRaises(AlignmentError):
            synthesize(gen, w, plan)

    def test_percentile_thresholds_shape(self):
        h = torch.arange(16.0).reshape(1, 1, 4, 4)
        self.assertEqual(tuple(percentile_thresholds(h, 50).shape), (1, 1, 1, 1))
        with self.assertRaises(ContractViolation):
            percentile_thresholds(h, 101)

    def test_zero_at_p0_on_every_layer_is_identity(self):
        gen = tiny_generator()
        w = draw_latent(gen, 5)
        layers = StyleLayerSet.parse("0-2")
        plan = InterventionPlan(layers, {i: ZeroDirective(0) for i in layers.indices})
        self.assertTrue(torch.equal(synthesize(gen, w, plan)[0], synthesize(gen, w)[0]))

    def test_single_layer_plan_matches_resumed_pass(self):
        gen = tiny_generator()
        w = draw_latent(gen, 6)
        for layer in range(gen.num_layers):
            plan = InterventionPlan(StyleLayerSet.parse([layer]), {layer: ZeroDirective(100)})
            planned, _ = synthesize(gen, w, plan)
            with torch.no_grad():
                _, clean = gen.module.synthesis(w.unsqueeze(0), capture=[layer])
                pruned = prune_activations(clean[layer], 100)
                resumed, _ = gen.module.synthesis(w.unsqueeze(0), resume=(layer, pruned))
            self.assertTrue(torch.equal(planned, resumed[0]), f"layer {layer}")

    def test_activation_tensor_layout(self):
        t = torch.randn(1, 5, 3, 2)
        act = ActivationTensor.from_nchw(t, 0)
        self.assertEqual(act.shape, (3, 2, 5))
        self.assertTrue(torch.equal(act.to_nchw(), t))


class DiscriminatorTests(unittest.TestCase):
    def test_frozen_and_feature_distance(self):
        disc = build_toy_discriminator(seed=0, descriptor=TINY_DISC, device="cpu")
        self.assertFalse(any(p.requires_grad for p in disc.module.parameters()))
        x = torch.rand(3, 16, 16) * 2 - 1
        feats = discriminator_features(disc, x)
        self.assertEqual(len(feats), 3)
        self.assertEqual(float(feature_l1_distance(feats, feats)), 0.0)

    def test_input_gradient_matches_finite_differences(self):
        disc = build_toy_discriminator(seed=1, descriptor=TINY_DISC, device="cpu")
        disc.module.double()
        target = [f.detach() for f in discriminator_features(disc, torch.rand(3, 16, 16, dtype=torch.float64) * 2 - 1)]
        x = (torch.rand(3, 16, 16, dtype=torch.float64) * 2 - 1).requires_grad_(True)

        def loss(img):
            return feature_l1_distance(discriminator_features(disc, img), target)

        self.assertTrue(torch.autograd.gradcheck(loss, (x,), eps=1e-6, atol=1e-6, rtol=1e-3))

    def test_weights_unchanged_by_backward(self):
        disc = build_toy_discriminator(seed=2, descriptor=TINY_DISC, device="cpu")
        before = disc.checksum()
        target = [f.detach() for f in discriminator_features(disc, torch.zeros(3, 16, 16))]
        for step in range(3):
            x = (torch.rand(3, 16, 16) * 2 - 1).requires_grad_(True)
            feature_l1_distance(discriminator_features(disc, x), target).backward()
            self.assertIsNotNone(x.grad)
        self.assertEqual(disc.checksum(), before)
        self.assertTrue(all(p.grad is None for p in disc.module.parameters()))

    def test_resolution_check(self):
        disc = build_toy_discriminator(seed=0, descriptor=TINY_DISC, device="cpu")
        with self.assertRaises(ContractViolation):
            discriminator_features(disc, torch.zeros(3, 32, 32))


class CheckpointTests(unittest.TestCase):
    def test_round_trip(self):
        gen = tiny_generator(seed=4, num_classes=2)
        disc = build_toy_discriminator(seed=4, descriptor=TINY_DISC, device="cpu")
        with tempfile.TemporaryDirectory() as tmp:
            g_path = save_checkpoint(gen, Path(tmp) / "g.pt")
            d_path = save_checkpoint(disc, Path(tmp) / "d.pt")
            gen2 = load_checkpoint(g_path, kind="generator")
            disc2 = load_checkpoint(d_path, kind="discriminator")
        self.assertEqual(gen.checksum(), gen2.checksum())
        self.assertEqual(gen2.descriptor, gen.descriptor)
        self.assertEqual(disc.checksum(), disc2.checksum())

    def test_unknown_formats(self):
        with tempfile.TemporaryDirectory() as tmp:
            junk = Path(tmp) / "junk.pt"
            junk.write_bytes(b"not a checkpoint")
            with self.assertRaises(UnsupportedFormatError) as ctx:
                load_checkpoint(junk)
            self.assertIn("toy", str(ctx.exception))
            torch.save({"format": "something-else"}, junk)
            with self.assertRaises(UnsupportedFormatError):
                load_checkpoint(junk)
            with self.assertRaises(UnsupportedFormatError):
                load_checkpoint(junk, adapter="nope")

    def test_round_trip_renders_identical_images(self):
        gen = tiny_generator(seed=5)
        with tempfile.TemporaryDirectory() as tmp:
            gen2 = load_checkpoint(save_checkpoint(gen, Path(tmp) / "g.pt"), kind="generator", device=torch.device("cpu"))
        for seed in range(10):
            w = draw_latent(gen, seed)
            self.assertTrue(torch.equal(synthesize(gen, w)[0], synthesize(gen2, w)[0]))

    def test_wrong_state_dict_is_reported_as_corrupt(self):
        gen = tiny_generator()
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(gen, Path(tmp) / "g.pt")
            payload = torch.load(path, weights_only=True)
            payload["state_dict"].pop("const")
            torch.save(payload, path)
            with self.assertRaises(UnsupportedFormatError) as ctx:
                load_checkpoint(path)
        self.assertIn("corrupt generator payload", str(ctx.exception))

    def test_kind_mismatch(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(tiny_generator(), Path(tmp) / "g.pt")
            with self.assertRaises(UnsupportedFormatError):
                load_checkpoint(path, kind="discriminator")


if __name__ == '__main__':
    unittest.main()
