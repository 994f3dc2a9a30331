"""Acceptance suite: one test per primary criterion, each printing a
PASS/FAIL line with the measured numbers.

Run with `pytest tests/test_acceptance.py -v -s`. The heavy benchmark
fixtures (desk-scale embedding training and the full pipeline) are
shared across criteria.
"""

import copy
import json
import time

import numpy as np
import pytest

from retarget.drfeature import cotangent_weights, dr_decode, dr_encode, polar_decompose, rotation_exp
from retarget.mesh import Mesh, MeshSet
from retarget.pipeline import DEFAULT_CONFIG, run_pipeline
from retarget.rig import build_rig, make_parallel_rigs, pose, sample_expressions
from retarget.vae import TrainConfig, meshset_features, train_avatar_vae, train_human_vae


def report(name: str, passed: bool, detail: str) -> None:
    print(f"{'PASS' if passed else 'FAIL'}: {name} ({detail})")
    assert passed, f"{name}: {detail}"


@pytest.fixture(scope="module")
def benchmark_meshes():
    """50 sampled expressions across the two benchmark characters."""
    source, target, _ = make_parallel_rigs(0)
    out = []
    for rig in (source, target):
        weights = cotangent_weights(rig.neutral)
        for s in sample_expressions(rig, 25, seed=11):
            out.append((rig, weights, s))
    return out


@pytest.fixture(scope="module")
def desk_pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_run")
    t0 = time.time()
    config = copy.deepcopy(DEFAULT_CONFIG)
    report_dict = run_pipeline(config, out)
    return report_dict, time.time() - t0, out


def test_dr_round_trip_accuracy_and_runtime(benchmark_meshes):
    t0 = time.time()
    worst = 0.0
    for rig, weights, s in benchmark_meshes:
        feat = dr_encode(rig.neutral, s.mesh, weights)
        rec = dr_decode(rig.neutral, feat, weights)
        aligned = rec.vertices + (s.mesh.vertices[0] - rec.vertices[0])
        rms = np.sqrt(((aligned - s.mesh.vertices) ** 2).sum(axis=1).mean())
        worst = max(worst, rms / s.mesh.bbox_diagonal())
    elapsed = time.time() - t0
    report(
        "DR round trip over 50 meshes",
        worst < 1e-4 and elapsed < 10.0,
        f"worst RMS/bbox {worst:.2e} < 1e-4, runtime {elapsed:.1f}s < 10s",
    )


def test_dr_translation_and_rotation_behavior():
    rig = build_rig("human")
    # exact translation invariance, on coordinates where the shift is
    # exactly representable
    quant = np.round(rig.neutral.vertices * 65536.0) / 65536.0
    neutral = Mesh(quant, rig.neutral.faces)
    rng = np.random.default_rng(3)
    deformed_v = np.round((quant + rng.normal(size=quant.shape) * 0.01) * 65536.0) / 65536.0
    weights = cotangent_weights(neutral)
    base = dr_encode(neutral, Mesh(deformed_v, neutral.faces), weights)
    shifted = dr_encode(neutral, Mesh(deformed_v + np.array([0.5, -0.25, 2.0]), neutral.faces), weights)
    translation_exact = bool(np.array_equal(base.values, shifted.values))

    # global rotations: scale part invariant, rotation part composes with Q
    weights_rig = cotangent_weights(rig.neutral)
    s = sample_expressions(rig, 1, seed=2)[0]
    ref = dr_encode(rig.neutral, s.mesh, weights_rig)
    worst_s = 0.0
    worst_r = 0.0
    for k in range(20):
        q_rng = np.random.default_rng(100 + k)
        axis = q_rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        Q = rotation_exp(axis * q_rng.uniform(0.05, 3.1))
        rotated = dr_encode(rig.neutral, Mesh(s.mesh.vertices @ Q.T, s.mesh.faces), weights_rig)
        worst_s = max(worst_s, float(np.abs(rotated.scale_parts - ref.scale_parts).max()))
        R_new = rotation_exp(rotated.rotation_logs.astype(np.float64))
        R_old = rotation_exp(ref.rotation_logs.astype(np.float64))
        resid = np.linalg.norm(R_new @ np.swapaxes(R_old, 1, 2) - Q, axis=(1, 2)).max()
        worst_r = max(worst_r, float(resid))
    report(
        "DR translation invariance and rotation behavior",
        translation_exact and worst_s < 1e-6 and worst_r < 1e-5,
        f"translation bitwise-exact {translation_exact}, worst s-part drift {worst_s:.2e} < 1e-6, "
        f"worst rotation residual {worst_r:.2e} < 1e-5 over 20 rotations",
    )


def test_polar_decomposition_bulk():
    rng = np.random.default_rng(7)
    T = rng.normal(size=(10_000, 3, 3))
    U, sig, Vt = np.linalg.svd(T[:100])
    sig[:, 2] *= 1e-8  # force 100 near-singular cases
    T[:100] = U @ (sig[..., None] * Vt)
    R, S = polar_decompose(T)
    recon = float(np.linalg.norm(R @ S - T, axis=(1, 2)).max())
    det_err = float(np.abs(np.linalg.det(R) - 1.0).max())
    report(
        "polar decomposition on 1e4 matrices (100 near-singular)",
        recon < 1e-6 and det_err < 1e-6,
        f"max |RS-T|_F {recon:.2e} < 1e-6, max |det(R)-1| {det_err:.2e}",
    )


def test_deformation_transfer_self_consistency(benchmark_meshes):
    from retarget.transfer import identity_correspondence, transfer

    worst = 0.0
    for rig, _, s in benchmark_meshes:
        corr = identity_correspondence(rig.neutral, rig.neutral)
        out = transfer(rig.neutral, s.mesh, rig.neutral, corr)
        d = out.vertices - s.mesh.vertices
        d -= d.mean(axis=0)
        worst = max(worst, np.sqrt((d**2).sum(axis=1).mean()) / s.mesh.bbox_diagonal())
    rig = benchmark_meshes[0][0]
    corr = identity_correspondence(rig.neutral, rig.neutral)
    neutral_out = transfer(rig.neutral, rig.neutral, rig.neutral, corr)
    neutral_err = float(np.abs(neutral_out.vertices - rig.neutral.vertices).max())
    report(
        "deformation transfer self-consistency on 50 meshes",
        worst < 1e-6 and neutral_err < 1e-6,
        f"worst self-transfer RMS/bbox {worst:.2e} < 1e-6, identity deformation error {neutral_err:.2e}",
    )


def test_gradient_checks_all_layers_and_losses(tetra):
    from retarget.nn.gradcheck import finite_difference_check
    from retarget.nn.layers import ChebConv, Dense, ScaledLaplacian
    from retarget.nn.tensor import (
        Tensor,
        absolute,
        add,
        exp,
        l2norm,
        matmul,
        mul,
        relu,
        square,
        sub,
        tensor_mean,
        tensor_sum,
    )

    lap = ScaledLaplacian(tetra)
    errors = {}
    rng = np.random.default_rng(42)

    dense = Dense(rng, 6, 4, activation="tanh", dtype=np.float64)
    x_d = Tensor(rng.normal(size=(5, 6)))
    errors["fc"] = finite_difference_check(lambda: tensor_mean(square(dense(x_d))), dense.params(), np.random.default_rng(1))

    conv = ChebConv(rng, 2, 3, order=3, activation="tanh", dtype=np.float64)
    x_c = Tensor(rng.normal(size=(4, 2)))
    errors["cheb"] = finite_difference_check(lambda: tensor_mean(square(conv(x_c, lap))), conv.params(), np.random.default_rng(2))

    # L_rec (L1) + L_kld through the reparameterized sample
    enc = Dense(rng, 8, 8, activation="linear", dtype=np.float64)
    dec = Dense(rng, 4, 8, activation="tanh", dtype=np.float64)
    x_v = Tensor(rng.normal(size=(6, 8)))
    target = Tensor(rng.normal(size=(6, 8)))
    eps = Tensor(rng.normal(size=(6, 4)))

    def vae_loss():
        from retarget.nn.tensor import narrow

        h = enc(x_v)
        mu = narrow(h, 1, 0, 4)
        logvar = narrow(h, 1, 4, 4)
        z = add(mu, mul(exp(mul(logvar, 0.5)), eps))
        rec = tensor_mean(absolute(sub(dec(z), target)))
        kld = mul(tensor_sum(sub(add(square(mu), exp(logvar)), add(Tensor(np.float64(1.0)), logvar))), 0.5)
        return add(rec, mul(kld, 1e-3))

    errors["rec+kld"] = finite_difference_check(vae_loss, enc.params() + dec.params(), np.random.default_rng(3))

    w = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
    anchors = Tensor(rng.normal(size=(7, 5)))
    dt = Tensor(rng.normal(size=(7, 5)))
    members = Tensor(rng.normal(size=(7, 5)))
    neg = Tensor(rng.normal(size=(7, 5)))
    errors["L_P"] = finite_difference_check(
        lambda: tensor_mean(l2norm(sub(matmul(anchors, w), dt), axis=1)), [w], np.random.default_rng(4)
    )
    errors["L_G"] = finite_difference_check(
        lambda: tensor_mean(l2norm(sub(matmul(anchors, w), members), axis=1)), [w], np.random.default_rng(5)
    )

    def l_t():
        mapped = matmul(anchors, w)
        dp = l2norm(sub(mapped, members), axis=1)
        dn = l2norm(sub(mapped, neg), axis=1)
        return tensor_mean(relu(add(sub(dp, dn), np.float64(0.2))))

    errors["L_T"] = finite_difference_check(l_t, [w], np.random.default_rng(6))

    worst = max(errors.values())
    report(
        "gradient checks: layers and all losses",
        worst < 1e-4,
        "; ".join(f"{k} {v:.1e}" for k, v in errors.items()) + " all < 1e-4",
    )


def test_kl_closed_form_vs_monte_carlo():
    from retarget.vae import kl_divergence_closed_form

    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(20):
        mu = rng.uniform(-1, 1, size=25)
        logvar = rng.uniform(-1, 1, size=25)
        closed = kl_divergence_closed_form(mu, logvar)
        sigma = np.exp(0.5 * logvar)
        z = mu + sigma * rng.normal(size=(100_000, 25))
        log_q = -0.5 * (((z - mu) / sigma) ** 2 + np.log(2 * np.pi) + logvar).sum(axis=1)
        log_p = -0.5 * (z**2 + np.log(2 * np.pi)).sum(axis=1)
        mc = float((log_q - log_p).mean())
        worst = max(worst, abs(closed - mc) / abs(closed))
    report("KL closed form vs Monte-Carlo (1e5 samples, 20 cases)", worst < 0.02, f"worst relative gap {worst:.3%} < 2%")


def test_avatar_vae_desk_scale_three_seeds():
    rig = build_rig("avatarA")
    samples = sample_expressions(rig, 500, seed=1000)
    ms = MeshSet(
        neutral=rig.neutral,
        expressions=[s.mesh for s in samples],
        manifest={f"a{i:04d}": {} for i in range(500)},
    )
    feats = meshset_features(ms)
    n_train = 450
    train_set = MeshSet(
        neutral=rig.neutral,
        expressions=ms.expressions[:n_train],
        manifest={k: ms.manifest[k] for k in list(ms.manifest)[:n_train]},
    )
    cfg = TrainConfig(epochs=100, batch=30, lr=1e-4, lr_decay=0.6, decay_every=10, latent=25)
    details = []
    ok = True
    for seed in (0, 1, 2):
        metrics = []
        t0 = time.time()
        model = train_avatar_vae(train_set, cfg, seed=seed, metrics=metrics, features=feats[:n_train])
        elapsed = time.time() - t0
        train_l1 = model.reconstruct_error_l1(feats[:n_train])
        hold_l1 = model.reconstruct_error_l1(feats[n_train:])
        decreasing = metrics[-1]["rec_loss"] < metrics[0]["rec_loss"]
        generalizes = hold_l1 <= 1.5 * train_l1
        in_time = elapsed < 300.0
        ok = ok and decreasing and generalizes and in_time
        details.append(
            f"seed {seed}: holdout/train {hold_l1 / train_l1:.2f} <= 1.5, "
            f"rec {metrics[0]['rec_loss']:.3f}->{metrics[-1]['rec_loss']:.3f}, {elapsed:.0f}s < 300s"
        )
    report("avatar VAE desk scale (500 samples, seeds 0/1/2)", ok, "; ".join(details))


def test_disentanglement_five_identities():
    source, _, variants = make_parallel_rigs(0, n_identity_variants=5)
    expr_weights = [s.weights for s in sample_expressions(source, 47, seed=555)]
    sets = []
    for v in variants:
        sets.append(
            MeshSet(
                neutral=pose(v, np.zeros(v.controller_count)),
                expressions=[pose(v, w) for w in expr_weights],
                manifest={f"e{i:04d}": {} for i in range(47)},
            )
        )
    model = train_human_vae(sets, TrainConfig(epochs=40, lr=1e-3), seed=0)
    codes = np.stack([model.encode_batch(meshset_features(s))[0] for s in sets])  # (5, 47, 25)
    n_i, n_e, _ = codes.shape
    intra = np.mean(
        [
            np.linalg.norm(codes[a, e] - codes[b, e])
            for e in range(n_e)
            for a in range(n_i)
            for b in range(a + 1, n_i)
        ]
    )
    inter = np.mean(
        [
            np.linalg.norm(codes[a, e1] - codes[b, e2])
            for e1 in range(0, n_e, 3)
            for e2 in range(n_e)
            if e1 != e2
            for a in range(n_i)
            for b in range(n_i)
        ]
    )
    ratio = intra / inter
    report("identity disentanglement (5 identities x 47 expressions)", ratio < 0.5, f"intra/inter {ratio:.3f} < 0.5")


def test_triplet_margin_semantics():
    from retarget.translate import TrainingTriplet, TranslatorModel, loss_triplet

    rng = np.random.default_rng(9)
    model = TranslatorModel(seed=0)

    def place(anchor, d_pos, d_neg):
        mapped = model(anchor)
        u = np.zeros(25)
        u[0] = 1.0
        v = np.zeros(25)
        v[1] = 1.0
        return TrainingTriplet(anchor, mapped + d_pos * u, mapped + d_neg * v)

    ok = True
    # hinge inactive whenever D_pos + margin <= D_neg
    for _ in range(50):
        anchor = rng.normal(size=25).astype(np.float32)
        d_pos = rng.uniform(0, 1)
        t = place(anchor, d_pos, d_pos + 0.2 + rng.uniform(0, 1))
        ok = ok and loss_triplet(model, [t], margin=0.2) < 1e-6
    # equal distances give exactly the margin
    t_eq = place(rng.normal(size=25).astype(np.float32), 0.4, 0.4)
    eq_val = loss_triplet(model, [t_eq], margin=0.2)
    ok = ok and abs(eq_val - 0.2) < 1e-6
    # evaluator matches the direct formula
    triplets = [TrainingTriplet(rng.normal(size=25), rng.normal(size=25), rng.normal(size=25)) for _ in range(64)]
    mapped = model(np.stack([t.anchor_code for t in triplets]).astype(np.float32)).astype(np.float64)
    oracle = np.mean(
        [
            max(0.0, 0.2 + np.linalg.norm(mapped[i] - triplets[i].positive_code) - np.linalg.norm(mapped[i] - triplets[i].negative_code))
            for i in range(len(triplets))
        ]
    )
    gap = abs(loss_triplet(model, triplets, margin=0.2) - oracle)
    ok = ok and gap < 1e-6
    report("triplet margin semantics", ok, f"hinge-zero cases ok, equal-distance value {eq_val:.6f} = 0.2, oracle gap {gap:.1e} < 1e-6")


def test_tournament_math_and_replay():
    from retarget.tournament import augment, create_tournament, replay_tournament, run_simulated_tournament
    from retarget.translate import CorrespondenceGroup

    rng = np.random.default_rng(31)
    manual_total = augmented_total = 0
    replay_ok = True
    first_counts = None
    for k in range(46):
        g = CorrespondenceGroup(
            group_id=f"t{k:02d}",
            anchor_id=f"h{k}",
            anchor_code=rng.normal(size=25),
            dt_code=rng.normal(size=25),
            member_ids=[f"t{k:02d}_m{i}" for i in range(16)],
            member_codes=rng.normal(size=(16, 25)),
        )
        weights = {mid: rng.uniform(size=10) for mid in g.member_ids}
        anchor_w = rng.uniform(size=10)
        t = create_tournament(g, seed=k)
        records = run_simulated_tournament(t, anchor_w, weights, 0.0, seed=k)
        aug = augment(t)
        if first_counts is None:
            first_counts = (len(t.real_matches), len(aug))
        manual_total += len([r for r in records if r.choice != "draw"])
        augmented_total += len(aug)
        rebuilt = replay_tournament(g, k, records)
        replay_ok = replay_ok and rebuilt.champion == t.champion
        for a, b in zip(t.matches, rebuilt.matches):
            replay_ok = replay_ok and (a.status, a.winner, a.excluded) == (b.status, b.winner, b.excluded)
    ok = first_counts == (15, 17) and manual_total == 690 and augmented_total == 782 and replay_ok
    report(
        "tournament math (16-bracket and 46 groups)",
        ok,
        f"per-group {first_counts[0]} manual + {first_counts[1]} augmented; totals {manual_total}/690 manual, "
        f"{augmented_total}/782 augmented; replay bitwise {replay_ok}",
    )


def test_lec_baseline_recoveries():
    from retarget.translate import lec_fit

    rng = np.random.default_rng(77)
    pairs_id = [(s, s.copy()) for s in rng.normal(size=(47, 25))]
    err_id = float(np.abs(lec_fit(pairs_id, ridge=1e-9) - np.eye(25)).max())
    M0 = rng.normal(size=(25, 25))
    pairs = [(s, M0 @ s) for s in rng.normal(size=(47, 25))]
    err_planted = float(np.abs(lec_fit(pairs, ridge=1e-9) - M0).max())
    report(
        "linear expression cloning recovery (47 pairs)",
        err_id < 1e-5 and err_planted < 1e-5,
        f"identity error {err_id:.1e} < 1e-5, planted-map error {err_planted:.1e} < 1e-5",
    )


def test_end_to_end_benchmark(desk_pipeline):
    report_dict, elapsed, _ = desk_pipeline
    m = report_dict["metrics"]
    errors = m["benchmark_mean_vertex_error"]
    improvement = m["stage3_vs_stage1_improvement_pct"]
    violations = m["triplet_violations"]
    ok = improvement >= 10.0 and violations["stage3"] <= violations["stage2"] and elapsed < 900.0
    report(
        "end-to-end ground-truth benchmark",
        ok,
        f"stage1 {errors['stage1']:.5f} -> stage3 {errors['stage3']:.5f} ({improvement:.1f}% >= 10%), "
        f"violations {violations['stage2']} -> {violations['stage3']} non-increasing, pipeline {elapsed:.0f}s < 900s",
    )


def test_progressive_schedule_logged(desk_pipeline):
    _, _, out = desk_pipeline
    rows = [json.loads(l) for l in (out / "translator" / "log.jsonl").read_text().splitlines()]
    expected = {1: ((1.0, 1e-4, 1e-4), 1e-4), 2: ((1.0, 1.0, 1e-4), 1e-5), 3: ((1.0, 1.0, 10.0), 1e-6)}
    ok = True
    for stage, (alphas, lr) in expected.items():
        stage_rows = [r for r in rows if r["stage"] == stage]
        ok = ok and bool(stage_rows)
        for r in stage_rows:
            ok = ok and (r["alpha_p"], r["alpha_g"], r["alpha_t"]) == alphas and r["lr"] == lr
    report(
        "progressive schedule weights and learning rates",
        ok,
        "stage alphas (1,1e-4,1e-4)/(1,1,1e-4)/(1,1,10) at lrs 1e-4/1e-5/1e-6 as logged",
    )
