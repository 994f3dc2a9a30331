import numpy as np
import pytest

from retarget.mesh import MeshSet
from retarget.rig import build_rig, make_parallel_rigs, pose, sample_expressions
from retarget.vae import (
    TrainConfig,
    VaeError,
    kl_divergence_closed_form,
    load_vae,
    meshset_features,
    save_vae,
    train_avatar_vae,
    train_human_vae,
)


@pytest.fixture(scope="module")
def avatar_rig():
    return build_rig("avatarA")


@pytest.fixture(scope="module")
def small_dataset(avatar_rig):
    samples = sample_expressions(avatar_rig, 40, seed=5)
    ms = MeshSet(
        neutral=avatar_rig.neutral,
        expressions=[s.mesh for s in samples],
        manifest={f"a{i:03d}": {} for i in range(len(samples))},
    )
    return ms, meshset_features(ms)


@pytest.fixture(scope="module")
def quick_model(small_dataset):
    ms, feats = small_dataset
    return train_avatar_vae(ms, TrainConfig(epochs=5, lr=1e-3), seed=0, features=feats)


def test_kl_collapsed_encoder_is_zero():
    assert kl_divergence_closed_form(np.zeros(25), np.zeros(25)) == 0.0


def test_kl_closed_form_simple_values():
    # one dimension, mu=1, sigma=1: KL = 0.5 * mu^2
    assert kl_divergence_closed_form(np.array([1.0]), np.array([0.0])) == pytest.approx(0.5)


def test_kl_closed_form_matches_monte_carlo():
    rng = np.random.default_rng(12)
    for _ in range(20):
        mu = rng.uniform(-1, 1, size=25)
        logvar = rng.uniform(-1, 1, size=25)
        closed = kl_divergence_closed_form(mu, logvar)
        sigma = np.exp(0.5 * logvar)
        z = mu + sigma * rng.normal(size=(100_000, 25))
        log_q = -0.5 * (((z - mu) / sigma) ** 2 + np.log(2 * np.pi) + logvar).sum(axis=1)
        log_p = -0.5 * (z**2 + np.log(2 * np.pi)).sum(axis=1)
        mc = (log_q - log_p).mean()
        assert abs(closed - mc) / abs(closed) < 0.02


def test_encode_deterministic(quick_model, small_dataset):
    _, feats = small_dataset
    from retarget.drfeature import DRFeature

    g = DRFeature(feats[0])
    mu1, lv1 = quick_model.encode(g)
    mu2, lv2 = quick_model.encode(g)
    assert np.array_equal(mu1, mu2) and np.array_equal(lv1, lv2)
    assert mu1.shape == (25,)


def test_fresh_model_zero_input_finite(avatar_rig):
    from retarget.vae import VaeModel

    model = VaeModel(avatar_rig.neutral, TrainConfig(), domain="avatar", seed=1)
    mu, lv = model.encode_batch(np.zeros((1, avatar_rig.neutral.vertex_count, 9), dtype=np.float32))
    assert np.isfinite(mu).all() and np.isfinite(lv).all()


def test_decode_deterministic_and_shape(quick_model):
    z = np.random.default_rng(3).normal(size=25).astype(np.float32)
    a = quick_model.decode(z)
    b = quick_model.decode(z)
    assert np.array_equal(a.values, b.values)
    assert a.vertex_count == quick_model.neutral.vertex_count


def test_decode_rejects_nonfinite(quick_model):
    z = np.full(25, np.nan, dtype=np.float32)
    with pytest.raises(VaeError, match="finite"):
        quick_model.decode(z)


def test_encode_topology_mismatch(quick_model):
    with pytest.raises(VaeError, match="topology"):
        quick_model.encode_batch(np.zeros((1, 10, 9), dtype=np.float32))


def test_overfit_single_sample(avatar_rig):
    samples = sample_expressions(avatar_rig, 1, seed=77)
    ms = MeshSet(neutral=avatar_rig.neutral, expressions=[samples[0].mesh], manifest={"a0": {}})
    feats = meshset_features(ms)
    cfg = TrainConfig(epochs=500, lr=3e-3, lr_decay=0.7, decay_every=30, kld_weight=0.0)
    model = train_avatar_vae(ms, cfg, seed=0, features=feats)
    err = model.reconstruct_error_l1(feats)
    assert err < 1e-3 * model.feature_scale


def test_trained_reconstruction_within_ten_percent():
    # the dedicated reconstruction oracle: inference-path decode recovers
    # the input feature to < 10% of the mean absolute feature magnitude
    rig = build_rig("avatarA")
    samples = sample_expressions(rig, 300, seed=31)
    ms = MeshSet(
        neutral=rig.neutral,
        expressions=[s.mesh for s in samples],
        manifest={f"a{i:03d}": {} for i in range(300)},
    )
    feats = meshset_features(ms)
    cfg = TrainConfig(epochs=120, lr=1.5e-3, kld_weight=1e-4)
    model = train_avatar_vae(ms, cfg, seed=0, features=feats)
    rel = model.reconstruct_error_l1(feats) / np.abs(feats).mean()
    assert rel < 0.1


def test_training_loss_decreases(small_dataset):
    ms, feats = small_dataset
    metrics = []
    train_avatar_vae(ms, TrainConfig(epochs=10, lr=1e-3), seed=0, metrics=metrics, features=feats)
    assert metrics[-1]["rec_loss"] < metrics[0]["rec_loss"]
    assert metrics[0]["lr"] == pytest.approx(1e-3)
    assert metrics[-1]["epoch"] == 10


def test_lr_decay_schedule(small_dataset):
    ms, feats = small_dataset
    metrics = []
    train_avatar_vae(
        ms, TrainConfig(epochs=21, lr=1e-3, lr_decay=0.5, decay_every=10), seed=0, metrics=metrics, features=feats
    )
    assert metrics[0]["lr"] == pytest.approx(1e-3)
    assert metrics[10]["lr"] == pytest.approx(5e-4)
    assert metrics[20]["lr"] == pytest.approx(2.5e-4)


def test_interpolation_smoothness(quick_model, small_dataset):
    _, feats = small_dataset
    mu, _ = quick_model.encode_batch(feats[:2])
    steps = 10
    path = np.stack([(1 - t) * mu[0] + t * mu[1] for t in np.linspace(0, 1, steps + 1)])
    decoded = quick_model.decode_batch(path)
    endpoint = np.abs(decoded[-1] - decoded[0]).sum()
    deltas = [np.abs(decoded[i + 1] - decoded[i]).sum() for i in range(steps)]
    assert max(deltas) < 10 * endpoint / steps + 1e-12


def test_train_config_validation():
    with pytest.raises(VaeError, match="positive"):
        TrainConfig(epochs=0)
    with pytest.raises(VaeError, match="kld_weight"):
        TrainConfig(kld_weight=-1.0)


def test_nan_loss_aborts_with_context(small_dataset):
    ms, feats = small_dataset
    bad = feats.copy()
    bad[0, 0, 0] = np.inf
    with pytest.raises((RuntimeError, ValueError), match="(epoch|gradient)"):
        train_avatar_vae(ms, TrainConfig(epochs=1), seed=0, features=bad)


def test_checkpoint_roundtrip(quick_model, small_dataset, tmp_path):
    _, feats = small_dataset
    path = tmp_path / "avatar.ckpt"
    save_vae(quick_model, path)
    back = load_vae(path)
    mu1, lv1 = quick_model.encode_batch(feats[:3])
    mu2, lv2 = back.encode_batch(feats[:3])
    assert np.array_equal(mu1, mu2)
    assert np.array_equal(lv1, lv2)
    assert back.domain == quick_model.domain
    assert back.feature_scale == pytest.approx(quick_model.feature_scale)
    assert np.abs(back.neutral.vertices - quick_model.neutral.vertices).max() < 1e-6


# -- human (identity-disentangled) model --------------------------------


def _identity_sets(n_ident=3, n_expr=12, seed=0):
    source, _, variants = make_parallel_rigs(seed, n_identity_variants=n_ident)
    weights = [s.weights for s in sample_expressions(source, n_expr, seed + 100)]
    sets = []
    for v in variants[:n_ident]:
        neutral = pose(v, np.zeros(v.controller_count))
        sets.append(
            MeshSet(
                neutral=neutral,
                expressions=[pose(v, w) for w in weights],
                manifest={f"e{i:03d}": {} for i in range(n_expr)},
            )
        )
    return sets


def test_human_vae_misaligned_lists_rejected():
    sets = _identity_sets()
    bad = MeshSet(neutral=sets[0].neutral, expressions=sets[0].expressions[:5], manifest={f"x{i}": {} for i in range(5)})
    with pytest.raises(VaeError, match="misaligned"):
        train_human_vae([sets[0], bad], TrainConfig(epochs=1), seed=0)


def test_human_vae_single_identity_reduces_to_avatar_targets():
    # with one identity the averaged shape is the identity's own shape,
    # so inputs and reconstruction targets coincide
    sets = _identity_sets(n_ident=1, n_expr=6)
    metrics_h = []
    model = train_human_vae(sets, TrainConfig(epochs=3, lr=1e-3), seed=0, metrics=metrics_h)
    feats = meshset_features(sets[0])
    metrics_a = []
    model_a = train_avatar_vae(sets[0], TrainConfig(epochs=3, lr=1e-3), seed=0, metrics=metrics_a, features=feats)
    assert np.allclose(model.feature_scale, model_a.feature_scale)
    for a, b in zip(metrics_h, metrics_a):
        assert a["rec_loss"] == pytest.approx(b["rec_loss"], rel=1e-5)


def test_human_vae_clusters_by_expression():
    sets = _identity_sets(n_ident=3, n_expr=10)
    model = train_human_vae(sets, TrainConfig(epochs=30, lr=1e-3), seed=0)
    codes = []
    for s in sets:
        feats = meshset_features(s)
        mu, _ = model.encode_batch(feats)
        codes.append(mu)
    codes = np.stack(codes)  # (ident, expr, latent)
    n_e = codes.shape[1]
    intra = np.mean(
        [np.linalg.norm(codes[a, e] - codes[b, e]) for e in range(n_e) for a in range(3) for b in range(a + 1, 3)]
    )
    inter = np.mean(
        [
            np.linalg.norm(codes[a, e1] - codes[b, e2])
            for e1 in range(n_e)
            for e2 in range(n_e)
            if e1 != e2
            for a in range(3)
            for b in range(3)
        ]
    )
    assert intra / inter < 0.5
