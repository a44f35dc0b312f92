import math

import numpy as np
import pytest
import torch

from texwarp import dae, gan, warp


@pytest.fixture(scope="module")
def cfg():
    return gan.GanConfig(image_size=64, n_labels=5, label_mode="multi_binary")


@pytest.fixture(scope="module")
def generator(cfg):
    torch.manual_seed(0)
    return gan.Generator(cfg)


@pytest.fixture(scope="module")
def discriminator(cfg):
    torch.manual_seed(0)
    return gan.Discriminator(cfg)


class TestGenerator:
    def test_conditioning_and_output_shape(self, generator):
        # five label channels are appended, so the first conv sees 8
        assert generator.net[0].in_channels == 8
        out = generator(torch.rand(2, 3, 64, 64), torch.rand(2, 5))
        assert out.shape == (2, 3, 64, 64)
        assert out.min() >= 0

    def test_label_count_mismatch(self, generator):
        with pytest.raises(ValueError):
            generator(torch.rand(1, 3, 64, 64), torch.rand(1, 3))

    def test_seeded_golden(self, generator):
        torch.manual_seed(3)
        t = torch.rand(1, 3, 64, 64)
        c = torch.tensor([[1.0, 0.0, 1.0, 0.0, 1.0]])
        with torch.no_grad():
            out = generator(t, c)
        assert float(out.mean()) == pytest.approx(GOLDEN["generator_mean"], rel=1e-5)


class TestDiscriminator:
    def test_heads_shapes(self, discriminator):
        out = discriminator(gan.image_batch(torch.rand(3, 3, 64, 64)))
        assert out.src_logits.shape == (3, 1, 2, 2)
        assert out.cls_logits.shape == (3, 5)

    def test_deterministic(self, discriminator):
        x = torch.rand(1, 3, 64, 64)
        a = discriminator(gan.image_batch(x))
        b = discriminator(gan.image_batch(x))
        assert torch.equal(a.src_logits, b.src_logits)

    def test_rejects_textures_and_raw_tensors(self, discriminator):
        x = torch.rand(1, 3, 64, 64)
        with pytest.raises(TypeError):
            discriminator(gan.texture_batch(x))
        with pytest.raises(TypeError):
            discriminator(x)

    def test_seeded_golden(self, discriminator):
        torch.manual_seed(4)
        with torch.no_grad():
            out = discriminator(gan.image_batch(torch.rand(1, 3, 64, 64)))
        assert float(out.src_logits.sum()) == pytest.approx(
            GOLDEN["disc_src_sum"], rel=1e-4
        )


class TestAdversarialLosses:
    def test_zero_logits(self):
        z = torch.zeros(2, 1, 2, 2)
        d_term, g_term = gan.adversarial_losses(z, z)
        assert d_term.item() == pytest.approx(2 * math.log(2), rel=1e-6)
        assert g_term.item() == pytest.approx(math.log(2), rel=1e-6)

    def test_perfect_discriminator_limit(self):
        d_term, _ = gan.adversarial_losses(
            torch.full((1, 1, 2, 2), 30.0), torch.full((1, 1, 2, 2), -30.0)
        )
        assert d_term.item() < 1e-10

    def test_saturating_switch(self):
        fake = torch.zeros(1, 1, 2, 2)
        _, g_sat = gan.adversarial_losses(fake, fake, saturating=True)
        assert g_sat.item() == pytest.approx(-math.log(2), rel=1e-6)

    def test_finite_over_logit_range(self):
        for v in (-30.0, 0.0, 30.0):
            d_term, g_term = gan.adversarial_losses(
                torch.full((1, 1, 2, 2), v), torch.full((1, 1, 2, 2), -v)
            )
            assert torch.isfinite(d_term) and torch.isfinite(g_term)


class TestClsLoss:
    def test_one_hot_uniform_logits(self):
        loss = gan.cls_loss(torch.zeros(4, 8), torch.eye(8)[:4], "one_hot")
        assert loss.item() == pytest.approx(math.log(8), rel=1e-6)

    def test_multi_binary_zero_logits(self):
        loss = gan.cls_loss(torch.zeros(3, 5), torch.ones(3, 5), "multi_binary")
        assert loss.item() == pytest.approx(5 * math.log(2), rel=1e-6)

    def test_saturated_logits_vanish(self):
        targets = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        logits = (targets * 2 - 1) * 30.0
        assert gan.cls_loss(logits, targets, "multi_binary").item() < 1e-8
        assert gan.cls_loss(logits, targets, "one_hot").item() < 1e-8

    def test_mode_mismatch(self):
        with pytest.raises(ValueError):
            gan.cls_loss(torch.zeros(1, 2), torch.zeros(1, 2), "soft")
        with pytest.raises(ValueError):
            gan.cls_loss(torch.zeros(1, 3), torch.zeros(1, 2), "one_hot")

    def test_cross_entropy_matches_bruteforce(self, rng):
        for _ in range(20):
            logits = torch.from_numpy(rng.normal(size=(4, 6)))
            onehot = torch.from_numpy(np.eye(6)[rng.integers(0, 6, size=4)])
            # elementwise oracle
            probs = torch.exp(logits) / torch.exp(logits).sum(dim=1, keepdim=True)
            expect = -(onehot * probs.log()).sum(dim=1).mean()
            got = gan.cls_loss(logits, onehot, "one_hot")
            assert abs(got.item() - expect.item()) < 1e-9

            targets = torch.from_numpy(rng.integers(0, 2, size=(4, 6)).astype(float))
            p = torch.sigmoid(logits)
            expect = -(targets * p.log() + (1 - targets) * (1 - p).log()).sum(1).mean()
            got = gan.cls_loss(logits, targets, "multi_binary")
            assert abs(got.item() - expect.item()) < 1e-9


class TestReconstructionAndObjectives:
    def test_exact_reconstruction_is_zero(self):
        t = torch.rand(1, 3, 8, 8)
        x = torch.rand(1, 3, 8, 8)
        rec_t, rec_i, rec = gan.reconstruction_losses(t, t, x, x)
        assert rec_t == 0 and rec_i == 0 and rec == 0

    def test_uniform_difference(self):
        t = torch.zeros(1, 3, 8, 8)
        x = torch.zeros(1, 3, 8, 8)
        _, _, rec = gan.reconstruction_losses(t, t + 0.2, x, x + 0.2)
        assert rec.item() == pytest.approx(0.4, rel=1e-6)

    def test_objective_d_composition(self):
        z = torch.zeros(2, 1, 2, 2)
        d_term, _ = gan.adversarial_losses(z, z)
        cls_r = gan.cls_loss(torch.zeros(2, 8), torch.eye(8)[:2], "one_hot")
        total = gan.objective_d(d_term, cls_r, lam_cls=1.0)
        assert total.item() == pytest.approx(2 * math.log(2) + math.log(8), rel=1e-6)

    def test_objective_d_perfect_limit(self):
        d_term, _ = gan.adversarial_losses(
            torch.full((1, 1, 1, 1), 40.0), torch.full((1, 1, 1, 1), -40.0)
        )
        total = gan.objective_d(d_term, torch.zeros(()), 1.0)
        assert total.abs().item() < 1e-10

    def test_objective_g_hand_composition(self):
        total = gan.objective_g(
            torch.tensor(math.log(2)),
            torch.tensor(math.log(8)),
            torch.tensor(0.4),
            torch.tensor(0.0),
            gan.LossWeights(lam_cls=1.0, lam_rec=10.0, lam_ip=0.001),
        )
        assert total.item() == pytest.approx(0.6931 + 2.0794 + 4.0, abs=1e-3)

    def test_objective_g_all_zero(self):
        z = torch.zeros(())
        assert gan.objective_g(z, z, z, z).item() == 0


class TestGradientRouting:
    def test_g_and_d_gradients_are_disjoint(self):
        torch.manual_seed(5)
        cfg = gan.GanConfig(image_size=32, n_labels=2)
        g_net = gan.Generator(cfg)
        d_net = gan.Discriminator(cfg)
        x = torch.rand(2, 3, 32, 32)
        labels = torch.tensor([[1.0, 0.0], [0.0, 1.0]])

        fake = g_net(x, labels)
        out_fake = d_net(gan.image_batch(fake))
        out_real = d_net(gan.image_batch(x))
        _, g_term = gan.adversarial_losses(out_real.src_logits.detach(),
                                           out_fake.src_logits)
        loss_g = gan.objective_g(
            g_term,
            gan.cls_loss(out_fake.cls_logits, labels, "multi_binary"),
            torch.zeros(()), torch.zeros(()),
        )
        g_grads = torch.autograd.grad(
            loss_g, list(g_net.parameters()), retain_graph=True, allow_unused=True
        )
        assert any(g is not None and g.abs().sum() > 0 for g in g_grads)

        d_term, _ = gan.adversarial_losses(out_real.src_logits,
                                           out_fake.src_logits.detach())
        loss_d = gan.objective_d(
            d_term, gan.cls_loss(out_real.cls_logits, labels, "multi_binary")
        )
        d_grads = torch.autograd.grad(
            loss_d, list(d_net.parameters()), retain_graph=True, allow_unused=True
        )
        assert any(g is not None and g.abs().sum() > 0 for g in d_grads)
        # the fake batch is detached for the D update, so no gradient
        # reaches the generator
        g_from_d = torch.autograd.grad(
            loss_d, list(g_net.parameters()), allow_unused=True
        )
        assert all(g is None for g in g_from_d)


class TestTransferAttributes:
    def test_shapes_roundtrip(self):
        torch.manual_seed(6)
        cfg = gan.GanConfig(image_size=32, n_labels=2)
        model = gan.TdbModel(
            dae=dae.Dae(dae.DaeConfig(image_size=32)),
            generator=gan.Generator(cfg),
            discriminator=gan.Discriminator(cfg),
        )
        x = torch.rand(2, 3, 32, 32)
        edited, texture = gan.transfer_attributes(
            model, x, torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        )
        assert edited.shape == x.shape
        assert texture.shape == x.shape
        assert texture.min() >= 0

    def test_no_dae_arm_uses_identity_grid(self):
        torch.manual_seed(7)
        cfg = gan.GanConfig(image_size=32, n_labels=2)
        model = gan.TdbModel(
            dae=None,
            generator=gan.Generator(cfg),
            discriminator=gan.Discriminator(cfg),
            use_dae=False,
        )
        x = torch.rand(2, 3, 32, 32)
        texture, grid = model.factorize(x)
        assert torch.equal(texture, x)
        assert torch.allclose(grid[0], warp.identity_grid(32, 32))


GOLDEN = {
    # regenerated by tools/make_goldens.py
    "generator_mean": 1.0618753,
    "disc_src_sum": 0.0043663,
}
