import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, strategies as st

from tvptst.distributions import GaussianParams, draw_gumbel, kl_gaussian_gaussian
from tvptst.model import DecoderConfig, ModelConfig, ModelOutputs, StageConfig, build_network
from tvptst.objective import (
    Batch,
    COMPONENT_NAMES,
    ObjectiveConfig,
    PRESET_NAMES,
    baseline_objective,
    compute_objective,
    concrete_temperature,
    cosine_loss,
    discriminative_objective,
    gamma2_schedule,
    kl_anneal_schedule,
    loss_weights,
    preset,
    recon_loss,
    tampered_objective,
)


def tiny_config(centers_mode="learnable"):
    return ModelConfig(
        input_dim=4,
        num_classes=3,
        stages=tuple(StageConfig(channels=8, heads=2) for _ in range(2)),
        latent_dim=16,
        decoder=DecoderConfig(channels=16, depth=1, heads=2, max_len=32),
        centers_mode=centers_mode,
    )


def mixed_batch(b=6, t=8, f=4, k=3, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(b, t, f, generator=gen, dtype=dtype)
    labels = torch.arange(b) % k
    mask = torch.arange(b) % 2 == 0
    return Batch(x=x, labels=labels, label_mask=mask)


def run_forward(net, batch, seed=1, per_class=False, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    b = batch.x.shape[0]
    k = net.cfg.num_classes
    y_onehot = F.one_hot(batch.labels.clamp_min(0), k).to(dtype)
    return net(
        batch.x,
        y_onehot=y_onehot,
        label_mask=batch.label_mask,
        eps=torch.randn(b, net.cfg.latent_dim, generator=gen, dtype=dtype),
        gumbel=draw_gumbel((b, k), generator=gen, dtype=dtype),
        temperature=0.8,
        per_class_posteriors=per_class,
    )


class TestReconLoss:
    def test_zero_for_identical_inputs(self):
        x = torch.randn(3, 5, 2)
        assert recon_loss(x, x.clone()).item() == 0.0

    def test_unit_offset_gives_one(self):
        x = torch.zeros(2, 4, 3)
        assert recon_loss(x, x + 1.0).item() == pytest.approx(1.0)

    def test_matches_mean_of_squares(self):
        gen = torch.Generator().manual_seed(2)
        x = torch.randn(2, 3, 4, generator=gen, dtype=torch.float64)
        x_hat = torch.randn(2, 3, 4, generator=gen, dtype=torch.float64)
        expected = float(((x - x_hat) ** 2).sum() / x.numel())
        assert recon_loss(x, x_hat).item() == pytest.approx(expected, rel=1e-12)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            recon_loss(torch.zeros(2, 4, 3), torch.zeros(2, 5, 3))


class TestCosineLoss:
    def test_worked_two_class_example(self):
        # cos with own center 1.0, one negative at 0.5, margin 0.2 -> 0.3
        z = torch.tensor([[1.0, 0.0]])
        centers = torch.tensor([[1.0, 0.0], [0.5, math.sqrt(3) / 2]])
        out = cosine_loss(z, centers, torch.tensor([0]), margin=0.2)
        assert out.item() == pytest.approx(0.3, abs=1e-6)

    def test_center_aligned_orthonormal_is_zero(self):
        centers = torch.eye(3)
        out = cosine_loss(centers.clone(), centers, torch.arange(3), margin=0.0)
        torch.testing.assert_close(out, torch.zeros(3), rtol=0, atol=1e-6)

    def test_orthogonal_latent_scores_one(self):
        centers = torch.eye(3)[:2, :]
        z = torch.tensor([[0.0, 0.0, 1.0]])
        out = cosine_loss(z, centers, torch.tensor([0]), margin=0.0)
        assert out.item() == pytest.approx(1.0, abs=1e-6)

    def test_negatives_averaged_over_k_minus_one(self):
        # z at 45 degrees to both negatives: each contributes cos = 0.5
        z = torch.tensor([[1.0, 1.0, 1.0]]) / math.sqrt(3)
        centers = torch.eye(3)
        out = cosine_loss(z, centers, torch.tensor([0]), margin=0.0)
        cos = 1 / math.sqrt(3)
        assert out.item() == pytest.approx((1 - cos) + cos, abs=1e-6)

    @given(st.integers(min_value=0, max_value=300))
    def test_nonnegative_for_nonnegative_margin(self, seed):
        gen = torch.Generator().manual_seed(seed)
        z = torch.randn(4, 8, generator=gen)
        centers = torch.randn(3, 8, generator=gen)
        y = torch.randint(0, 3, (4,), generator=gen)
        out = cosine_loss(z, centers, y, margin=0.0)
        assert float(out.min()) >= -1e-6

    def test_per_row_targets_gathered_correctly(self):
        gen = torch.Generator().manual_seed(9)
        z = torch.randn(5, 6, generator=gen)
        centers = torch.randn(4, 6, generator=gen)
        y = torch.tensor([2, 0, 3, 1, 2])
        out = cosine_loss(z, centers, y, margin=0.1)
        for i in range(5):
            single = cosine_loss(z[i:i + 1], centers, y[i:i + 1], margin=0.1)
            assert out[i].item() == pytest.approx(single.item(), rel=1e-6)


class TestSchedules:
    def test_gamma2_cosine_endpoints_and_midpoint(self):
        assert gamma2_schedule(0, 100, "cosine") == pytest.approx(0.0)
        assert gamma2_schedule(50, 100, "cosine") == pytest.approx(0.5)
        assert gamma2_schedule(100, 100, "cosine") == pytest.approx(1.0)
        assert gamma2_schedule(250, 100, "cosine") == pytest.approx(1.0)

    def test_gamma2_cosine_nondecreasing(self):
        values = [gamma2_schedule(s, 64, "cosine") for s in range(65)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_gamma2_constant_and_off(self):
        assert gamma2_schedule(13, 100, "constant", constant=0.7) == 0.7
        assert gamma2_schedule(13, 100, "off") == 0.0

    def test_gamma2_unknown_mode(self):
        with pytest.raises(ValueError):
            gamma2_schedule(0, 10, "linear")

    def test_kl_anneal_linear_third(self):
        assert kl_anneal_schedule(0, 90, "linear_third") == pytest.approx(0.0)
        assert kl_anneal_schedule(15, 90, "linear_third") == pytest.approx(0.5)
        assert kl_anneal_schedule(30, 90, "linear_third") == pytest.approx(1.0)
        assert kl_anneal_schedule(89, 90, "linear_third") == pytest.approx(1.0)
        assert kl_anneal_schedule(5, 90, "none") == 1.0
        with pytest.raises(ValueError):
            kl_anneal_schedule(0, 10, "warmup")

    def test_concrete_temperature_decays_exponentially(self):
        assert concrete_temperature(0, 100) == pytest.approx(1.0)
        assert concrete_temperature(100, 100) == pytest.approx(0.5)
        assert concrete_temperature(50, 100) == pytest.approx(math.sqrt(0.5))
        values = [concrete_temperature(s, 40) for s in range(41)]
        assert all(b < a for a, b in zip(values, values[1:]))
        with pytest.raises(ValueError):
            concrete_temperature(0, 10, start=0.0)


class TestLossWeights:
    def test_ptst_mode_is_pure_cross_entropy(self):
        weights = loss_weights(ObjectiveConfig(), 5, 10, mode="ptst")
        assert weights["ce_recognition"] == 1.0
        assert all(v == 0.0 for name, v in weights.items() if name != "ce_recognition")

    def test_preset_vii_midpoint(self):
        cfg = preset("VII")
        w = loss_weights(cfg, 50, 100)
        assert w["recon"] == 1.0 and w["cos_term"] == 1.0 and w["gauss_kl"] == 0.0
        assert w["ce_recognition"] == pytest.approx(0.1)
        assert w["ce_latent"] == pytest.approx(0.1)
        assert w["kl_latent_recognition"] == pytest.approx(0.5)
        assert w["kl_cos_recognition"] == 0.0
        assert w["kl_prior"] == 1.0

    def test_preset_i_drops_latent_supervision(self):
        w = loss_weights(preset("I"), 50, 100)
        assert w["ce_latent"] == 0.0 and w["kl_latent_recognition"] == 0.0
        assert w["ce_recognition"] == pytest.approx(0.1)

    def test_dkl_presets_swap_cos_for_gauss_kl(self):
        cfg = preset("dkl-learnable")
        w0 = loss_weights(cfg, 0, 90)
        w_end = loss_weights(cfg, 60, 90)
        assert w0["cos_term"] == 0.0 and w_end["cos_term"] == 0.0
        assert w0["gauss_kl"] == pytest.approx(0.0)  # annealed from zero
        assert w_end["gauss_kl"] == pytest.approx(1.0)
        fixed = loss_weights(preset("dkl-fixed"), 0, 90)
        assert fixed["gauss_kl"] == 1.0  # no anneal without learnable centers


class TestPresets:
    def test_roman_presets_are_distinct(self):
        configs = [preset(name) for name in ("I", "II", "III", "IV", "V", "VI", "VII")]
        seen = [repr(c) for c in configs]
        assert len(set(seen)) == 7

    def test_table_toggles(self):
        assert preset("I").ce_on_z is False and preset("I").gamma2_mode == "off"
        assert preset("II").ce_on_z is True and preset("II").gamma2_mode == "off"
        assert preset("III").gamma2_mode == "constant"
        assert preset("IV").cos_with_ground_truth is False
        assert preset("V").learnable_centers is False
        assert preset("VI").kl_cos_recognition is True
        vii = preset("VII")
        assert vii.ce_on_z and vii.gamma2_mode == "cosine" and vii.cos_with_ground_truth

    def test_family_presets_and_aliases(self):
        assert preset("dkl-learnable") == preset("dkl-learnable-part")
        assert preset("cos-fixed") == preset("cos-fixed-part")
        assert preset("cos-learnable-full") == preset("VII")
        assert preset("dkl-fixed-full").use_gaussian_kl
        assert not preset("cos-fixed-part").learnable_centers
        part = preset("dkl-learnable-part")
        assert part.use_gaussian_kl and part.kl_anneal == "linear_third"
        assert part.gamma2_mode == "off" and not part.ce_on_z

    def test_unknown_preset_raises(self):
        with pytest.raises(ValueError, match="unknown preset"):
            preset("VIII")

    def test_preset_returns_a_copy(self):
        a = preset("VII")
        a.gamma1 = 9.0
        assert preset("VII").gamma1 == pytest.approx(0.1)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ObjectiveConfig(gamma1=-0.1)
        with pytest.raises(ValueError):
            ObjectiveConfig(gamma2_mode="quadratic")
        with pytest.raises(ValueError):
            ObjectiveConfig(margin=1.5)
        with pytest.raises(ValueError):
            ObjectiveConfig(prior_probs=(0.5, 0.0, 0.5))


class TestLedgerConsistency:
    @pytest.mark.parametrize("name", sorted(PRESET_NAMES))
    def test_total_equals_weighted_component_sum(self, name):
        cfg = preset(name)
        net = build_network(tiny_config(cfg.centers_mode), seed=0).double()
        batch = mixed_batch(dtype=torch.float64)
        total_steps = 20
        for step in (0, 7, 19):
            out = run_forward(net, batch, per_class=cfg.use_gaussian_kl,
                              dtype=torch.float64)
            loss = compute_objective(batch, out, cfg, step, total_steps)
            weights = loss_weights(cfg, step, total_steps)
            comps = loss.to_floats()
            recomputed = sum(weights[n] * comps[n] for n in COMPONENT_NAMES)
            assert abs(comps["total"] - recomputed) <= 1e-6
            assert loss.total.requires_grad

    def test_breakdown_counts_labelled_rows(self):
        cfg = preset("VII")
        net = build_network(tiny_config(), seed=0)
        batch = mixed_batch(b=6)
        loss = compute_objective(batch, run_forward(net, batch), cfg, 0, 10)
        assert loss.n_labelled == 3 and loss.n_unlabelled == 3


class TestTamperedObjective:
    def test_all_components_active_for_preset_vii(self):
        cfg = preset("VII")
        net = build_network(tiny_config(), seed=0)
        batch = mixed_batch()
        loss = tampered_objective(batch, run_forward(net, batch), cfg, 5, 10)
        for name in ("recon", "cos_term", "ce_recognition", "ce_latent",
                     "kl_latent_recognition", "kl_prior"):
            assert float(getattr(loss, name).detach()) > 0.0
        assert float(loss.gauss_kl.detach()) == 0.0

    def test_fully_unlabelled_batch_zeroes_ce_terms(self):
        cfg = preset("VII")
        net = build_network(tiny_config(), seed=0)
        batch = mixed_batch()
        batch = Batch(x=batch.x, labels=torch.full_like(batch.labels, -1),
                      label_mask=torch.zeros_like(batch.label_mask))
        loss = tampered_objective(batch, run_forward(net, batch), cfg, 5, 10)
        assert float(loss.ce_recognition.detach()) == 0.0
        assert float(loss.ce_latent.detach()) == 0.0
        assert loss.n_labelled == 0 and loss.n_unlabelled == 6

    def test_ce_matches_masked_cross_entropy(self):
        cfg = preset("VII")
        net = build_network(tiny_config(), seed=0)
        batch = mixed_batch()
        out = run_forward(net, batch)
        loss = tampered_objective(batch, out, cfg, 5, 10)
        expected = F.cross_entropy(
            out.y_logits[batch.label_mask], batch.labels[batch.label_mask]
        )
        torch.testing.assert_close(loss.ce_recognition, expected)

    def test_uniform_prior_matches_manual_kl(self):
        cfg = preset("VII")
        net = build_network(tiny_config(), seed=0)
        batch = mixed_batch()
        out = run_forward(net, batch)
        loss = tampered_objective(batch, out, cfg, 5, 10)
        probs = torch.softmax(out.y_logits, dim=-1)
        manual = (probs * (probs.clamp_min(1e-30).log() - math.log(1 / 3))).sum(-1).mean()
        torch.testing.assert_close(loss.kl_prior, manual, rtol=1e-5, atol=1e-7)

    def test_prior_probs_length_checked(self):
        cfg = preset("VII")
        cfg.prior_probs = (0.5, 0.5)
        net = build_network(tiny_config(), seed=0)
        batch = mixed_batch()
        with pytest.raises(ValueError, match="prior_probs"):
            tampered_objective(batch, run_forward(net, batch), cfg, 0, 10)

    def test_hidden_label_perturbation_is_invisible(self):
        # flipping the hidden label of an unlabelled record must not change
        # any component bit-for-bit
        cfg = preset("VII")
        net = build_network(tiny_config(), seed=0)
        base = mixed_batch()
        perturbed_labels = base.labels.clone()
        unlabelled = (~base.label_mask).nonzero()[0].item()
        perturbed_labels[unlabelled] = (perturbed_labels[unlabelled] + 1) % 3
        pert = Batch(x=base.x, labels=perturbed_labels, label_mask=base.label_mask)

        loss_a = tampered_objective(base, run_forward(net, base), cfg, 5, 10)
        loss_b = tampered_objective(pert, run_forward(net, pert), cfg, 5, 10)
        for name in COMPONENT_NAMES + ("total",):
            a = float(getattr(loss_a, name).detach())
            b = float(getattr(loss_b, name).detach())
            assert a == b, f"{name} changed under hidden-label perturbation"

    def test_dispatch_guards(self):
        net = build_network(tiny_config(), seed=0)
        batch = mixed_batch()
        out = run_forward(net, batch)
        with pytest.raises(ValueError):
            tampered_objective(batch, out, preset("dkl-fixed"), 0, 10)
        with pytest.raises(ValueError):
            baseline_objective(batch, out, preset("VII"), 0, 10)

    def test_batch_validates_lengths(self):
        with pytest.raises(ValueError):
            Batch(x=torch.zeros(3, 4, 2), labels=torch.zeros(2, dtype=torch.long),
                  label_mask=torch.ones(3, dtype=torch.bool))


class TestBaselineObjective:
    def outputs_with_posteriors(self, mean, log_std, centers, y_logits):
        b, k, _ = mean.shape
        return ModelOutputs(
            y_logits=y_logits,
            pooled=torch.zeros(b, 4),
            class_gauss=GaussianParams(mean, log_std),
            centers=centers,
            x_hat=None,
        )

    def test_standard_normal_vs_orthonormal_centers_gives_half(self):
        # per-component KL(N(0,I) || N(c_k, I)) = ||c_k||^2 / 2 = 0.5
        k, d = 3, 8
        centers = torch.eye(d)[:k]
        mean = torch.zeros(2, k, d)
        log_std = torch.zeros(2, k, d)
        y_logits = torch.zeros(2, k)  # uniform responsibilities
        out = self.outputs_with_posteriors(mean, log_std, centers, y_logits)
        batch = Batch(x=torch.zeros(2, 4, 2), labels=torch.full((2,), -1),
                      label_mask=torch.zeros(2, dtype=torch.bool))
        cfg = preset("dkl-fixed")
        loss = baseline_objective(batch, out, cfg, 0, 10)
        assert loss.gauss_kl.item() == pytest.approx(0.5, abs=1e-6)

    def test_posterior_at_center_gives_zero(self):
        k, d = 3, 8
        centers = torch.eye(d)[:k]
        mean = centers[None].expand(2, k, d).clone()
        log_std = torch.zeros(2, k, d)
        out = self.outputs_with_posteriors(mean, log_std, centers, torch.zeros(2, k))
        batch = Batch(x=torch.zeros(2, 4, 2), labels=torch.full((2,), -1),
                      label_mask=torch.zeros(2, dtype=torch.bool))
        loss = baseline_objective(batch, out, preset("dkl-fixed"), 0, 10)
        assert loss.gauss_kl.item() == pytest.approx(0.0, abs=1e-7)

    def test_matches_per_class_kl_oracle(self):
        gen = torch.Generator().manual_seed(6)
        b, k, d = 4, 3, 5
        mean = torch.randn(b, k, d, generator=gen, dtype=torch.float64)
        log_std = torch.randn(b, k, d, generator=gen, dtype=torch.float64) * 0.3
        centers = torch.randn(k, d, generator=gen, dtype=torch.float64)
        y_logits = torch.randn(b, k, generator=gen, dtype=torch.float64)
        labels = torch.tensor([0, 1, -1, -1])
        mask = torch.tensor([True, True, False, False])
        out = self.outputs_with_posteriors(mean, log_std, centers, y_logits)
        batch = Batch(x=torch.zeros(b, 4, 2, dtype=torch.float64), labels=labels,
                      label_mask=mask)
        loss = baseline_objective(batch, out, preset("dkl-fixed"), 0, 10)

        probs = torch.softmax(y_logits, dim=-1)
        expected = 0.0
        for i in range(b):
            for c in range(k):
                weight = (1.0 if labels[i] == c else 0.0) if mask[i] else probs[i, c].item()
                kl = kl_gaussian_gaussian(
                    GaussianParams(mean[i, c], log_std[i, c]),
                    GaussianParams(centers[c], torch.zeros(d, dtype=torch.float64)),
                ).item()
                expected += weight * kl
        expected /= b
        assert loss.gauss_kl.item() == pytest.approx(expected, rel=1e-9)

    def test_requires_per_class_posteriors(self):
        cfg = preset("dkl-fixed")
        net = build_network(tiny_config("fixed_orthonormal"), seed=0)
        batch = mixed_batch()
        out = run_forward(net, batch, per_class=False)
        with pytest.raises(ValueError, match="per_class"):
            baseline_objective(batch, out, cfg, 0, 10)


class TestDiscriminativeObjective:
    def test_total_is_plain_cross_entropy(self):
        net = build_network(tiny_config(), mode="ptst", seed=0)
        batch = mixed_batch()
        out = net(batch.x)
        loss = discriminative_objective(batch, out)
        expected = F.cross_entropy(out.y_logits[batch.label_mask],
                                   batch.labels[batch.label_mask])
        torch.testing.assert_close(loss.total, expected)
        assert float(loss.recon.detach()) == 0.0

    def test_compute_objective_dispatch(self):
        net = build_network(tiny_config(), mode="ptst", seed=0)
        batch = mixed_batch()
        out = net(batch.x)
        loss = compute_objective(batch, out, ObjectiveConfig(), 0, 10, mode="ptst")
        torch.testing.assert_close(loss.total, loss.ce_recognition)
