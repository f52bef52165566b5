"""Training loop: isolation, descent, determinism, artifacts, reload."""

import numpy as np
import pytest

import capsan.trainer
from capsan import diffcore as dc
from capsan.checkpoint import load_checkpoint, save_checkpoint
from capsan.datasets import ImbalanceSpec, induce_imbalance, make_synthetic
from capsan.diffcore import AdamState
from capsan.errors import BadCheckpoint, ConfigInvalid, NonFiniteLoss, UnknownClass
from capsan.losses import discriminator_loss, generator_loss
from capsan.mixture import ClassGaussian, MixtureConfig, num_to_generate
from capsan.models import ConvDiscriminator, discriminator_forward
from capsan.trainer import (
    CHECKPOINT_NAME,
    LOG_HEADER,
    LOG_NAME,
    MixtureState,
    TrainConfig,
    as_predictor,
    as_sampler,
    build_models,
    estimate_gaussians,
    generate_class_samples,
    load_run,
    train,
    train_discriminator_step,
    train_generator_step,
)

LATENT = 8


def _tiny_cfg(**kw):
    base = dict(iterations=4, batch_size=8, latent_dim=LATENT, class_embed_dim=4,
                fractional_layers=2, base_channels=4, primary_caps=4,
                conv_channels=8, feature_channels=32, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def _tiny_models(cfg=None, seed=0):
    cfg = cfg or _tiny_cfg()
    return build_models(cfg, num_classes=2, image_shape=(1, 16, 16),
                        gen_seed=seed, disc_seed=seed + 1)


def _mix(rng_seed=5):
    gaussians = [
        ClassGaussian(0, np.zeros(LATENT), np.ones(LATENT)),
        ClassGaussian(1, 0.5 * np.ones(LATENT), np.ones(LATENT)),
    ]
    return MixtureState(
        config=MixtureConfig(pi=0.5, minority_class_ids=frozenset({1})),
        gaussians=gaussians,
        priors={0: 0.5, 1: 0.5},
        rng=np.random.default_rng(rng_seed),
    )


class _FixedMixture:
    """Deterministic stand-in: every draw returns the same latents."""

    def __init__(self, z, labels):
        self.z, self.labels = z, labels

    def draw(self, n):
        return self.z[:n].copy(), self.labels[:n].copy()


def _batch(rng_seed=0, n=8):
    rng = np.random.default_rng(rng_seed)
    images = rng.random((n, 1, 16, 16))
    labels = rng.integers(0, 2, size=n)
    return images, labels


def test_config_validation():
    for bad in (
        dict(lr=0.0),
        dict(beta1=1.0),
        dict(batch_size=1),
        dict(phi=1.5),
        dict(pi=-0.1),
        dict(dist_plus=0.0),
        dict(disc_steps=0),
        dict(disc_kind="dense"),
    ):
        with pytest.raises(ConfigInvalid):
            _tiny_cfg(**bad).validate()
    _tiny_cfg().validate()


def test_config_dict_round_trip():
    cfg = _tiny_cfg(lr=1e-3, disc_kind="conv", minority_class=1)
    blob = cfg.to_dict()
    assert "clock" not in blob
    back = TrainConfig.from_dict(blob)
    assert back == cfg
    with pytest.raises(ConfigInvalid):
        TrainConfig.from_dict({"learning_rate": 1e-3})


def test_disc_step_leaves_generator_alone():
    cfg = _tiny_cfg()
    G, D, _ = _tiny_models(cfg)
    g_before = {k: p.data.copy() for k, p in G.named_parameters().items()}
    d_before = {k: p.data.copy() for k, p in D.named_parameters().items()}
    images, labels = _batch()
    opt = AdamState.for_params(D.parameters(), lr=cfg.lr, beta1=cfg.beta1)
    frag = train_discriminator_step(D, G, images, labels, _mix(), opt, cfg)
    for k, p in G.named_parameters().items():
        assert np.array_equal(p.data, g_before[k]), k
    changed = [k for k, p in D.named_parameters().items()
               if not np.array_equal(p.data, d_before[k])]
    assert changed
    for key in ("disc_loss", "margin_real", "margin_fake", "pt_term"):
        assert np.isfinite(frag[key])


def test_gen_step_leaves_discriminator_alone():
    cfg = _tiny_cfg()
    G, D, _ = _tiny_models(cfg)
    d_before = {k: p.data.copy() for k, p in D.named_parameters().items()}
    g_before = {k: p.data.copy() for k, p in G.named_parameters().items()}
    images, _ = _batch()
    opt = AdamState.for_params(G.parameters(), lr=cfg.lr, beta1=cfg.beta1)
    frag = train_generator_step(D, G, images, _mix(), opt, cfg)
    for k, p in D.named_parameters().items():
        assert np.array_equal(p.data, d_before[k]), k
    changed = [k for k, p in G.named_parameters().items()
               if not np.array_equal(p.data, g_before[k])]
    assert changed
    assert np.isfinite(frag["gen_loss"]) and np.isfinite(frag["fm_term"])


def test_zero_lr_steps_change_nothing():
    cfg = _tiny_cfg()
    G, D, _ = _tiny_models(cfg)
    before = {k: p.data.copy() for k, p in
              {**{"G." + k: v for k, v in G.named_parameters().items()},
               **{"D." + k: v for k, v in D.named_parameters().items()}}.items()}
    images, labels = _batch()
    opt_d = AdamState.for_params(D.parameters(), lr=0.0)
    opt_g = AdamState.for_params(G.parameters(), lr=0.0)
    train_discriminator_step(D, G, images, labels, _mix(), opt_d, cfg)
    train_generator_step(D, G, images, _mix(), opt_g, cfg)
    for k, p in G.named_parameters().items():
        assert np.array_equal(p.data, before["G." + k]), k
    for k, p in D.named_parameters().items():
        assert np.array_equal(p.data, before["D." + k]), k


def test_disc_step_loss_matches_recomputation():
    # the reported loss is exactly what the loss functions give on the
    # same draws with the same pre-update weights
    cfg = _tiny_cfg()
    images, labels = _batch(1)
    rng = np.random.default_rng(9)
    z = rng.standard_normal((8, LATENT))
    fake_labels = rng.integers(0, 2, size=8)

    G, D, _ = _tiny_models(cfg)
    opt = AdamState.for_params(D.parameters(), lr=cfg.lr)
    frag = train_discriminator_step(
        D, G, images, labels, _FixedMixture(z, fake_labels), opt, cfg
    )

    G2, D2, _ = _tiny_models(cfg)
    with dc.no_grad():
        fake = G2.forward(z, fake_labels)
    real_out = discriminator_forward(D2, images, update_spectral=True)
    fake_out = discriminator_forward(D2, fake.data)
    want = discriminator_loss(real_out, fake_out, labels).item()
    assert frag["disc_loss"] == want


def test_gen_step_loss_matches_recomputation():
    cfg = _tiny_cfg()
    images, _ = _batch(2)
    rng = np.random.default_rng(10)
    z = rng.standard_normal((8, LATENT))
    fake_labels = rng.integers(0, 2, size=8)

    G, D, _ = _tiny_models(cfg)
    opt = AdamState.for_params(G.parameters(), lr=cfg.lr)
    frag = train_generator_step(D, G, images, _FixedMixture(z, fake_labels), opt, cfg)

    G2, D2, _ = _tiny_models(cfg)
    with dc.no_grad():
        f_real = discriminator_forward(D2, images).features
    fake = G2.forward(z, fake_labels)
    fake_out = discriminator_forward(D2, fake)
    want = generator_loss(f_real, fake_out.features, fake_out.lengths, fake_labels,
                          include_margin=cfg.gen_margin_term).item()
    assert frag["gen_loss"] == want


def _disc_loss_value(D, G, images, labels, z, fake_labels):
    with dc.no_grad():
        fake = G.forward(z, fake_labels)
        real_out = discriminator_forward(D, images)
        fake_out = discriminator_forward(D, fake.data)
        return discriminator_loss(real_out, fake_out, labels).item()


def test_disc_step_descends():
    # a single small Adam step should reduce the loss on the same batch
    # for nearly every seed
    cfg = _tiny_cfg(lr=1e-4)
    wins = 0
    for seed in range(20):
        G, D, _ = _tiny_models(cfg, seed=seed)
        images, labels = _batch(seed)
        rng = np.random.default_rng(100 + seed)
        z = rng.standard_normal((8, LATENT))
        fake_labels = rng.integers(0, 2, size=8)
        before = _disc_loss_value(D, G, images, labels, z, fake_labels)
        opt = AdamState.for_params(D.parameters(), lr=cfg.lr)
        train_discriminator_step(
            D, G, images, labels, _FixedMixture(z, fake_labels), opt, cfg
        )
        after = _disc_loss_value(D, G, images, labels, z, fake_labels)
        wins += after < before
    assert wins >= 18


def test_gen_step_descends():
    cfg = _tiny_cfg(lr=1e-4)
    wins = 0
    for seed in range(20):
        G, D, _ = _tiny_models(cfg, seed=seed + 50)
        images, _ = _batch(seed)
        rng = np.random.default_rng(200 + seed)
        z = rng.standard_normal((8, LATENT))
        fake_labels = rng.integers(0, 2, size=8)

        def value():
            with dc.no_grad():
                f_real = discriminator_forward(D, images).features
                fake = G.forward(z, fake_labels)
                out = discriminator_forward(D, fake.data)
                return generator_loss(f_real, out.features, out.lengths,
                                      fake_labels).item()

        before = value()
        opt = AdamState.for_params(G.parameters(), lr=cfg.lr)
        train_generator_step(D, G, images, _FixedMixture(z, fake_labels), opt, cfg)
        after = value()
        wins += after < before
    assert wins >= 18


def _train_dataset(seed=3):
    ds = make_synthetic(2, 12, 16, seed=seed)
    return induce_imbalance(ds, ImbalanceSpec(target_class=1, keep_rate=0.5, seed=0))


def test_train_runs_and_reports():
    ds = _train_dataset()
    cfg = _tiny_cfg(iterations=3)
    res = train(ds, cfg)
    assert len(res.records) == 3
    assert [r.iteration for r in res.records] == [0, 1, 2]
    assert res.minority_class == 1
    assert res.stats.s_plus == 6 and res.stats.s_minus == 12
    assert not res.stopped_early
    # emission fills the gap: phi=1 -> s_minus - s_plus samples
    assert len(res.generated) == 6
    assert np.all(res.generated.labels == 1)
    assert res.generated.images.shape[1:] == (1, 16, 16)
    assert {g.class_id for g in res.gaussians} == {0, 1}
    for rec in res.records:
        assert np.isfinite([rec.disc_loss, rec.gen_loss, rec.margin_real,
                            rec.margin_fake, rec.pt_term, rec.fm_term]).all()
        assert rec.wall_time_ms == 0.0  # default clock is the zero clock


def test_train_deterministic_artifacts(tmp_path):
    ds = _train_dataset()
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    out_a.mkdir(), out_b.mkdir()
    res_a = train(ds, _tiny_cfg(iterations=3), out_dir=out_a)
    res_b = train(ds, _tiny_cfg(iterations=3), out_dir=out_b)
    assert (out_a / CHECKPOINT_NAME).read_bytes() == (out_b / CHECKPOINT_NAME).read_bytes()
    assert (out_a / LOG_NAME).read_bytes() == (out_b / LOG_NAME).read_bytes()
    assert res_a.records == res_b.records
    assert np.array_equal(res_a.generated.images, res_b.generated.images)


def test_train_seed_changes_outcome():
    ds = _train_dataset()
    res_a = train(ds, _tiny_cfg(iterations=2, seed=0))
    res_b = train(ds, _tiny_cfg(iterations=2, seed=1))
    assert res_a.records != res_b.records


def test_train_zero_iterations():
    ds = _train_dataset()
    res = train(ds, _tiny_cfg(iterations=0))
    assert res.records == []
    # gaussians fitted from the untrained discriminator, emission still runs
    assert len(res.generated) == num_to_generate(res.stats)
    assert np.all(res.generated.labels == 1)


def test_train_log_format(tmp_path):
    ds = _train_dataset()
    train(ds, _tiny_cfg(iterations=2), out_dir=tmp_path)
    lines = (tmp_path / LOG_NAME).read_text().splitlines()
    assert lines[0] == LOG_HEADER
    assert len(lines) == 3
    first = lines[1].split(",")
    assert first[0] == "0"
    assert len(first) == len(LOG_HEADER.split(","))
    float(first[1])  # repr round-trips


def test_train_early_stop():
    ds = _train_dataset()
    cfg = _tiny_cfg(iterations=20, early_stop=True, early_stop_window=3,
                    early_stop_tol=1e9)
    res = train(ds, cfg)
    assert res.stopped_early
    assert len(res.records) == 6  # fires at 2 * window


def test_train_errors():
    ds = _train_dataset()
    single = make_synthetic(1, 8, 16, seed=0)
    with pytest.raises(ConfigInvalid):
        train(single, _tiny_cfg(iterations=1))
    with pytest.raises(UnknownClass):
        train(ds, _tiny_cfg(iterations=1, minority_class=5))


def test_train_nonfinite_abort_writes_artifacts(tmp_path, monkeypatch):
    def poisoned(D, G, images, labels, mix, opt, cfg):
        return {"disc_loss": float("nan"), "margin_real": 0.0,
                "margin_fake": 0.0, "pt_term": 0.0}

    def quiet_gen(D, G, real_images, mix, opt, cfg):
        return {"gen_loss": 0.0, "fm_term": 0.0}

    monkeypatch.setattr(capsan.trainer, "train_discriminator_step", poisoned)
    monkeypatch.setattr(capsan.trainer, "train_generator_step", quiet_gen)
    ds = _train_dataset()
    with pytest.raises(NonFiniteLoss):
        train(ds, _tiny_cfg(iterations=5), out_dir=tmp_path)
    assert (tmp_path / CHECKPOINT_NAME).exists()
    lines = (tmp_path / LOG_NAME).read_text().splitlines()
    assert lines == [LOG_HEADER]  # aborted before the first record landed
    rs = load_run(tmp_path / CHECKPOINT_NAME)
    assert rs.iteration == 0


def test_load_run_round_trip(tmp_path):
    ds = _train_dataset()
    cfg = _tiny_cfg(iterations=2)
    res = train(ds, cfg, out_dir=tmp_path)
    rs = load_run(tmp_path / CHECKPOINT_NAME)
    for k, p in res.generator.named_parameters().items():
        got = rs.generator.named_parameters()[k]
        assert np.array_equal(got.data, p.data), k  # 0 ULP
    for k, p in res.discriminator.named_parameters().items():
        got = rs.discriminator.named_parameters()[k]
        assert np.array_equal(got.data, p.data), k
    for k, state in res.discriminator.spectral.items():
        assert np.array_equal(rs.discriminator.spectral[k].u, state.u)
    assert np.array_equal(rs.projector, res.projector)
    assert rs.minority_class == res.minority_class
    assert rs.iteration == 2
    assert rs.train_config == cfg
    assert rs.stats == res.stats
    assert rs.priors == res.priors
    for got, want in zip(rs.gaussians, res.gaussians):
        assert got.class_id == want.class_id
        assert np.array_equal(got.mu, want.mu)
        assert np.array_equal(got.sigma_diag, want.sigma_diag)
    assert np.array_equal(rs.minority_gaussian().mu, res.gaussians[1].mu)
    with pytest.raises(UnknownClass):
        rs.gaussian_for(9)


def test_load_run_rejects_damage(tmp_path):
    ds = _train_dataset()
    train(ds, _tiny_cfg(iterations=1), out_dir=tmp_path)
    path = tmp_path / CHECKPOINT_NAME
    tensors, config = load_checkpoint(path)

    missing = dict(tensors)
    del missing["G.fc.w"]
    save_checkpoint(tmp_path / "missing.capsan", missing, config)
    with pytest.raises(BadCheckpoint):
        load_run(tmp_path / "missing.capsan")

    wrong = dict(tensors)
    wrong["D.conv1.b"] = np.zeros((7, 1, 1))
    save_checkpoint(tmp_path / "shape.capsan", wrong, config)
    with pytest.raises(BadCheckpoint):
        load_run(tmp_path / "shape.capsan")

    save_checkpoint(tmp_path / "fmt.capsan", tensors, {**config, "format": 2})
    with pytest.raises(BadCheckpoint):
        load_run(tmp_path / "fmt.capsan")


def test_checkpoint_interval(tmp_path):
    ds = _train_dataset()
    seen = []

    def spy(rec, D, G):
        if (tmp_path / CHECKPOINT_NAME).exists():
            seen.append(rec.iteration)

    train(ds, _tiny_cfg(iterations=4, checkpoint_interval=2), out_dir=tmp_path,
          on_iteration=spy)
    # interval checkpoints appear from iteration 2 onward
    assert (tmp_path / CHECKPOINT_NAME).exists()
    assert 0 not in seen and 2 in seen


def test_estimate_gaussians_batch_invariant():
    cfg = _tiny_cfg()
    G, D, dcfg = _tiny_models(cfg)
    ds = _train_dataset()
    rng = np.random.default_rng(0)
    proj = rng.standard_normal((32, LATENT))
    a = estimate_gaussians(D, ds, proj, batch_size=5)
    b = estimate_gaussians(D, ds, proj, batch_size=64)
    for ga, gb in zip(a, b):
        assert ga.class_id == gb.class_id
        assert np.allclose(ga.mu, gb.mu, atol=1e-12)
        assert np.allclose(ga.sigma_diag, gb.sigma_diag, atol=1e-12)
    assert a[0].mu.shape == (LATENT,)


def test_generate_class_samples_counts_and_determinism():
    G, _, _ = _tiny_models()
    g = ClassGaussian(1, np.zeros(LATENT), np.ones(LATENT))
    a = generate_class_samples(G, g, 1, 10, np.random.default_rng(3), 4, 2)
    b = generate_class_samples(G, g, 1, 10, np.random.default_rng(3), 4, 2)
    assert len(a) == 10
    assert np.all(a.labels == 1)
    assert np.array_equal(a.images, b.images)
    empty = generate_class_samples(G, g, 1, 0, np.random.default_rng(3), 4, 2)
    assert len(empty) == 0
    assert empty.images.shape == (0, 1, 16, 16)


def test_build_models_conv_kind():
    G, D, _ = build_models(_tiny_cfg(disc_kind="conv"), 2, (1, 16, 16), 0, 1)
    assert isinstance(D, ConvDiscriminator)


def test_as_predictor_and_sampler():
    cfg = _tiny_cfg()
    G, D, _ = _tiny_models(cfg)
    images, _ = _batch(n=11)
    pred = as_predictor(D, batch_size=4)(images)
    assert pred.shape == (11,)
    assert set(pred.tolist()) <= {0, 1, 2}
    single = as_predictor(D, batch_size=64)(images)
    assert np.array_equal(pred, single)  # chunking does not change results
    z = np.random.default_rng(4).standard_normal((7, LATENT))
    samples = as_sampler(G, 1, batch_size=3)(z)
    assert samples.shape == (7, 1, 16, 16)
    assert as_predictor(D)(np.zeros((0, 1, 16, 16))).shape == (0,)
