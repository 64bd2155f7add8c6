import numpy as np
import pandas as pd
import pytest

from checkpoint import load_tensor_table
from models import build_model, discriminate, encode, generate, reparameterize
from normalization import GroupLayout
from patching import sample_train_patches
from synth_dataset import synth_image
from tensor_engine import Adam, ContractError, Tensor, add, check_gradients
from training import (LOG_COLUMNS, LossWeights, TrainConfig, TrainingDivergedError, combine_components, fit,
                      kl_divergence, loss_adversarial, loss_discriminator, loss_dcp, loss_vae,
                      make_optimizers, reconstruction_error, train_step)

EPS = 1e-4


def scores(value, n=4):
    return Tensor(np.full(n, value))


def tiny_images(n, size=16, seed=0):
    return [synth_image(np.random.default_rng([seed, i]), size) for i in range(n)]


def snapshot(params):
    return [p.data.copy() for p in params]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def test_loss_vae_vanishes_at_perfect_reconstruction(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    zeros = Tensor(np.zeros((2, 5)))
    assert loss_vae(x, x, zeros, zeros).item() == 0.0


def test_kl_of_unit_mean_dimension():
    assert kl_divergence(Tensor([[1.0]]), Tensor([[0.0]])).item() == pytest.approx(0.5)


def test_reconstruction_of_constant_offset(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    assert reconstruction_error(Tensor(x), Tensor(x + 0.1)).item() == pytest.approx(0.01, rel=1e-4)


def test_discriminator_loss_optimum_under_clamping():
    value = loss_discriminator(scores(1 - EPS), scores(EPS), scores(EPS), EPS).item()
    assert value == pytest.approx(3 * np.log(1e-4), abs=2e-2)


def test_discriminator_loss_at_chance():
    assert loss_discriminator(scores(0.5), scores(0.5), scores(0.5), EPS).item() == pytest.approx(-2.0794, abs=1e-4)


def test_discriminator_loss_is_finite_for_saturated_scores():
    value = loss_discriminator(scores(1.0), scores(0.0), scores(0.0), EPS).item()
    assert np.isfinite(value)


@pytest.mark.parametrize("bad", [1.5, -0.1, np.nan])
def test_scores_outside_unit_interval_are_rejected(bad):
    with pytest.raises(ContractError):
        loss_discriminator(scores(bad), scores(0.5), scores(0.5), EPS)
    with pytest.raises(ContractError):
        loss_adversarial(scores(bad), scores(0.5), EPS)


def test_adversarial_loss_examples():
    assert loss_adversarial(scores(1 - EPS), scores(1 - EPS), EPS).item() == pytest.approx(2.0, abs=1e-3)
    assert loss_adversarial(scores(0.5), scores(0.5), EPS).item() == pytest.approx(3.386, abs=1e-3)


def test_non_saturating_variant_drops_the_constant():
    value = loss_adversarial(scores(0.5), scores(0.5), EPS, non_saturating=True).item()
    assert value == pytest.approx(2 * np.log(2.0), abs=1e-5)


def test_combined_loss_weights_components():
    parts = {"recon": Tensor(0.01), "kl": Tensor(0.5), "adv_rec": Tensor(1.0), "adv_gen": Tensor(1.0)}
    assert combine_components(parts, LossWeights()).item() == pytest.approx(0.01205, abs=1e-7)


def test_only_reconstruction_weight_gives_mse(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    x_rec = Tensor(rng.standard_normal((2, 3, 4, 4)))
    mu, logvar = Tensor(rng.standard_normal((2, 5))), Tensor(rng.standard_normal((2, 5)))
    value = loss_dcp(x, x_rec, mu, logvar, scores(0.3, 2), scores(0.7, 2), LossWeights(kl=0, rec=0, gen=0))
    assert value.item() == pytest.approx(reconstruction_error(x, x_rec).item())


def test_negative_loss_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(kl=-1.0)


@pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"prob_clamp": 0.6}, {"batch_images": 0}, {"epochs": -1}])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# train_step
# ---------------------------------------------------------------------------

def test_composed_losses_match_finite_differences(float64, micro_cfg):
    model = build_model(micro_cfg, seed=0)
    rng = np.random.default_rng(5)
    x = Tensor(rng.uniform(-1, 1, size=(8, 3, 8, 8)))
    layout = GroupLayout(group_size=4, group_count=2)
    noise = rng.standard_normal((8, micro_cfg.latent_dim))
    z = Tensor(rng.standard_normal((8, micro_cfg.latent_dim)))

    def objective():
        mu, logvar = encode(model, x)
        x_rec = generate(model, reparameterize(mu, logvar, noise))
        x_fake = generate(model, z)
        d_real, d_rec, d_fake = (discriminate(model, t, layout) for t in (x, x_rec, x_fake))
        return add(loss_dcp(x, x_rec, mu, logvar, d_rec, d_fake), loss_discriminator(d_real, d_rec, d_fake))

    params = model.vae_parameters() + model.disc_parameters()
    assert check_gradients(objective, params, h=1e-6, samples=6, rng=rng) < 1e-3



def test_zero_learning_rate_leaves_parameters_bit_identical(micro_model, micro_train_cfg, rng):
    before = snapshot(micro_model.vae_parameters() + micro_model.disc_parameters())
    batch = sample_train_patches(tiny_images(2), 4, 8, rng)
    vae_opt, disc_opt = Adam(micro_model.vae_parameters(), 0.0), Adam(micro_model.disc_parameters(), 0.0)
    train_step(micro_model, batch, vae_opt, disc_opt, micro_train_cfg, rng=rng)
    after = snapshot(micro_model.vae_parameters() + micro_model.disc_parameters())
    for a, b in zip(before, after):
        np.testing.assert_array_equal(a, b)


def test_vae_update_never_moves_the_discriminator(micro_model, micro_train_cfg, rng):
    disc_before = snapshot(micro_model.disc_parameters())
    vae_before = snapshot(micro_model.vae_parameters())
    vae_opt = Adam(micro_model.vae_parameters(), 1e-3)
    disc_opt = Adam(micro_model.disc_parameters(), 0.0)
    train_step(micro_model, sample_train_patches(tiny_images(2), 4, 8, rng), vae_opt, disc_opt,
               micro_train_cfg, rng=rng)
    for a, b in zip(disc_before, snapshot(micro_model.disc_parameters())):
        np.testing.assert_array_equal(a, b)
    assert any(not np.array_equal(a, b) for a, b in zip(vae_before, snapshot(micro_model.vae_parameters())))


def test_discriminator_update_never_moves_the_vae(micro_model, micro_train_cfg, rng):
    vae_opt, disc_opt = make_optimizers(micro_model, 1e-3)
    after_vae = {}
    vae_step = vae_opt.step

    def step_and_record():
        vae_step()
        after_vae["theta"] = snapshot(micro_model.vae_parameters())
        after_vae["phi"] = snapshot(micro_model.disc_parameters())

    vae_opt.step = step_and_record
    train_step(micro_model, sample_train_patches(tiny_images(2), 4, 8, rng), vae_opt, disc_opt,
               micro_train_cfg, rng=rng)
    for a, b in zip(after_vae["theta"], snapshot(micro_model.vae_parameters())):
        np.testing.assert_array_equal(a, b)
    assert any(not np.array_equal(a, b) for a, b in zip(after_vae["phi"], snapshot(micro_model.disc_parameters())))


def test_every_network_moves_within_fifty_steps(micro_model, micro_train_cfg, rng):
    networks = ("encoder", "generator", "discriminator")
    before = {name: snapshot(micro_model.parameters(name)) for name in networks}
    vae_opt, disc_opt = make_optimizers(micro_model, 1e-3)
    images = tiny_images(2)
    for step in range(50):
        train_step(micro_model, sample_train_patches(images, 4, 8, rng), vae_opt, disc_opt, micro_train_cfg,
                   rng=rng, step=step)
    for name in networks:
        moved = [not np.array_equal(a, b) for a, b in zip(before[name], snapshot(micro_model.parameters(name)))]
        assert any(moved), name


def test_both_optimizers_step_once(micro_model, micro_train_cfg, rng):
    vae_opt, disc_opt = make_optimizers(micro_model, 1e-3)
    report = train_step(micro_model, sample_train_patches(tiny_images(2), 4, 8, rng), vae_opt, disc_opt,
                        micro_train_cfg, rng=rng, step=5)
    assert vae_opt.state.step_count == disc_opt.state.step_count == 1
    assert report.step == 5
    assert set(report.components) == {"recon", "kl", "adv_rec", "adv_gen", "l_dcp"}
    assert 0.0 <= report.d_real <= 1.0 and 0.0 <= report.d_fake <= 1.0
    assert all(p.grad is None for p in micro_model.disc_parameters())


@pytest.mark.parametrize("shared", [False, True])
def test_fixed_seed_gives_identical_reports(micro_cfg, shared):
    cfg = TrainConfig(lr=1e-3, batch_images=2, patches_per_image=4, epochs=1, seed=7, shared_disc_batch=shared)
    images = tiny_images(2)

    def run():
        model = build_model(micro_cfg, seed=0)
        vae_opt, disc_opt = make_optimizers(model, cfg.lr)
        rng = np.random.default_rng(cfg.seed)
        return [train_step(model, sample_train_patches(images, 4, 8, rng), vae_opt, disc_opt, cfg, rng=rng,
                           step=i) for i in range(10)]

    assert run() == run()


def test_nan_parameters_abort_with_step_index(micro_model, micro_train_cfg, rng):
    micro_model.encoder.fc_mu.weight.data[:] = np.nan
    vae_opt, disc_opt = make_optimizers(micro_model, 1e-3)
    with pytest.raises(TrainingDivergedError) as info:
        train_step(micro_model, sample_train_patches(tiny_images(2), 4, 8, rng), vae_opt, disc_opt,
                   micro_train_cfg, rng=rng, step=12)
    assert info.value.step == 12
    assert "mu" in info.value.components
    assert "step 12" in str(info.value)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def test_epoch_step_count(micro_model):
    cfg = TrainConfig(lr=1e-3, batch_images=2, patches_per_image=8, epochs=1)
    _, log = fit(tiny_images(4), micro_model, cfg)
    assert list(log.columns) == LOG_COLUMNS
    assert len(log) == 1
    assert log.loc[0, "step"] == 2


def test_zero_epochs_returns_untouched_model(micro_model, tmp_path):
    before = micro_model.fingerprint()
    cfg = TrainConfig(lr=1e-3, epochs=0)
    model, log = fit(tiny_images(2), micro_model, cfg, log_path=tmp_path / "log.csv",
                     checkpoint_path=tmp_path / "model.dcpk")
    assert model.fingerprint() == before
    assert log.empty
    assert list(pd.read_csv(tmp_path / "log.csv").columns) == LOG_COLUMNS
    assert not (tmp_path / "model.dcpk").exists()


def test_empty_dataset_is_rejected(micro_model, micro_train_cfg):
    with pytest.raises(ValueError):
        fit([], micro_model, micro_train_cfg)


def test_unwritable_log_directory(micro_model, micro_train_cfg, tmp_path):
    with pytest.raises(PermissionError):
        fit(tiny_images(2), micro_model, micro_train_cfg, log_path=tmp_path / "missing" / "log.csv")


def test_fit_writes_log_and_checkpoint(micro_model, tmp_path):
    cfg = TrainConfig(lr=1e-3, batch_images=2, patches_per_image=4, epochs=2, checkpoint_every=1)
    model, log = fit(tiny_images(4), micro_model, cfg, log_path=tmp_path / "log.csv",
                     checkpoint_path=tmp_path / "model.dcpk")
    written = pd.read_csv(tmp_path / "log.csv")
    assert list(written["epoch"]) == [1, 2]
    assert list(written["step"]) == [2, 4]
    table, _ = load_tensor_table(tmp_path / "model.dcpk")
    np.testing.assert_array_equal(table["discriminator.head.weight"],
                                  model.discriminator.head.weight.data)


def test_fit_is_deterministic(micro_cfg):
    cfg = TrainConfig(lr=1e-3, batch_images=2, patches_per_image=4, epochs=2, seed=3)
    images = tiny_images(3)
    first, log_a = fit(images, build_model(micro_cfg, seed=1), cfg)
    second, log_b = fit(images, build_model(micro_cfg, seed=1), cfg)
    pd.testing.assert_frame_equal(log_a, log_b)
    assert first.fingerprint() == second.fingerprint()


def test_full_image_mode_trains_on_resized_images(micro_cfg):
    cfg = TrainConfig(lr=1e-3, batch_images=2, epochs=1, full_image=True)
    _, log = fit(tiny_images(2, size=20), build_model(micro_cfg, seed=0), cfg)
    assert log.loc[0, "step"] == 1
    assert np.isfinite(log.loc[0, "l_dcp"])


@pytest.mark.slow
def test_reconstruction_improves_on_tiny_set(micro_model, rng):
    cfg = TrainConfig(lr=1e-3, batch_images=2, patches_per_image=8, epochs=1)
    images = tiny_images(2)
    vae_opt, disc_opt = make_optimizers(micro_model, cfg.lr)
    recon = []
    for step in range(200):
        report = train_step(micro_model, sample_train_patches(images, 8, 8, rng), vae_opt, disc_opt, cfg,
                            rng=rng, step=step)
        recon.append(report.components["recon"])
    moving = np.convolve(recon, np.ones(20) / 20, mode="valid")
    assert moving[-1] < moving[0]
