"""End-to-end pipeline: synthesize rigs, train embeddings, build
correspondences, annotate (simulated or served), train the translator,
and evaluate against rig ground truth.

Stages cache their outputs under the run directory, keyed by a content
hash of the relevant config subsection plus upstream stage hashes, so a
rerun with an unchanged config skips every stage and reproduces
report.json byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from pathlib import Path

import numpy as np

from retarget.mesh import Mesh, MeshSet, load_meshset, save_meshset
from retarget.rig import (
    Rig,
    build_rig,
    make_parallel_rigs,
    parallel_face_correspondence,
    pose,
    sample_expressions,
)
from retarget.tournament import (
    append_records,
    augment,
    create_tournament,
    export_triplets,
    read_records,
    replay_tournament,
    run_simulated_tournament,
)
from retarget.transfer import save_correspondence, transfer
from retarget.translate import (
    StageConfig,
    StageParams,
    TranslatorModel,
    build_groups,
    count_triplet_violations,
    lec_fit,
    load_groups,
    load_translator,
    retarget as retarget_mesh,
    save_groups,
    save_translator,
    train_translator,
)
from retarget.vae import TrainConfig, load_vae, meshset_features, save_vae, train_avatar_vae, train_human_vae
from retarget.rig import fit_blendshape_weights


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "characters": {"source_profile": "human", "target_profile": "avatarA", "identity_count": 5},
    "data": {
        "avatar_count": 500,
        "ref_count": 46,
        "expression_count": 47,
        "group_size": 16,
        "holdout_fraction": 0.1,
    },
    "vae": {
        "epochs": 100,
        "batch": 30,
        "lr": 1e-3,
        "lr_decay": 0.6,
        "decay_every": 10,
        "kld_weight": 1e-3,
        "latent": 25,
        "hidden": 64,
        "conv_channels": [16, 16],
        "cheb_order": 3,
    },
    "translator": {
        "hidden": [64, 64],
        "margin": 0.2,
        "triplet_batch": 32,
        "stages": [
            {"alpha_p": 1.0, "alpha_g": 1e-4, "alpha_t": 1e-4, "lr": 1e-4, "iterations": 2000},
            {"alpha_p": 1.0, "alpha_g": 1.0, "alpha_t": 1e-4, "lr": 1e-5, "iterations": 2000},
            {"alpha_p": 1.0, "alpha_g": 1.0, "alpha_t": 10.0, "lr": 1e-6, "iterations": 4000},
        ],
    },
    "annotation": {"mode": "simulated", "sigma": 0.0},
}

_REQUIRED_FIELDS = [
    ("seed", int),
    ("characters.source_profile", str),
    ("characters.target_profile", str),
    ("characters.identity_count", int),
    ("data.avatar_count", int),
    ("data.ref_count", int),
    ("data.expression_count", int),
    ("data.group_size", int),
    ("vae.epochs", int),
    ("vae.batch", int),
    ("vae.lr", (int, float)),
    ("translator.stages", list),
    ("annotation.mode", str),
]


def _lookup(config: dict, dotted: str):
    node = config
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"missing config field {dotted!r}")
        node = node[part]
    return node


def validate_config(config: dict) -> dict:
    """Check required fields and types; returns the config unchanged."""
    for dotted, kind in _REQUIRED_FIELDS:
        value = _lookup(config, dotted)
        if not isinstance(value, kind) or isinstance(value, bool):
            raise ConfigError(f"config field {dotted!r} must be {kind}, got {type(value).__name__}")
    if len(config["translator"]["stages"]) != 3:
        raise ConfigError("config field 'translator.stages' must list exactly 3 stages")
    mode = config["annotation"]["mode"]
    if mode not in ("simulated", "served"):
        raise ConfigError(f"config field 'annotation.mode' must be 'simulated' or 'served', got {mode!r}")
    return config


def load_config(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return validate_config(data)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _hash(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def _train_config(vae_cfg: dict) -> TrainConfig:
    return TrainConfig(
        epochs=vae_cfg["epochs"],
        batch=vae_cfg["batch"],
        lr=vae_cfg["lr"],
        lr_decay=vae_cfg.get("lr_decay", 0.6),
        decay_every=vae_cfg.get("decay_every", 10),
        kld_weight=vae_cfg.get("kld_weight", 1e-3),
        latent=vae_cfg.get("latent", 25),
        hidden=vae_cfg.get("hidden", 64),
        conv_channels=tuple(vae_cfg.get("conv_channels", (16, 16))),
        cheb_order=vae_cfg.get("cheb_order", 3),
    )


def _stage_config(tr_cfg: dict) -> StageConfig:
    return StageConfig(
        stages=tuple(
            StageParams(
                alpha_p=s["alpha_p"],
                alpha_g=s["alpha_g"],
                alpha_t=s["alpha_t"],
                lr=s["lr"],
                iterations=s.get("iterations", 2000),
            )
            for s in tr_cfg["stages"]
        ),
        margin=tr_cfg.get("margin", 0.2),
        triplet_batch=tr_cfg.get("triplet_batch", 32),
    )


def _mean_vertex_error(a: Mesh, b: Mesh) -> float:
    return float(np.linalg.norm(a.vertices - b.vertices, axis=1).mean())


class Pipeline:
    def __init__(self, config: dict, out_dir: str | Path):
        self.config = validate_config(config)
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []
        self.stage_hashes: dict[str, str] = {}
        self.skipped: list[str] = []
        # deterministic, cheap: rebuilt each run rather than cached
        self.source, self.target, self.variants = make_parallel_rigs(
            config["seed"], n_identity_variants=config["characters"]["identity_count"]
        )
        if config["characters"]["source_profile"] != "human" or config["characters"]["target_profile"] != "avatarA":
            self.source = build_rig(config["characters"]["source_profile"], config["seed"])
            self.target = build_rig(config["characters"]["target_profile"], config["seed"])

    # -- stage plumbing --------------------------------------------------

    def _declare(self, *paths: Path) -> None:
        for p in paths:
            self.artifacts.append(str(p.relative_to(self.out)))

    def _stage(self, name: str, subset: dict, parents: list[str], compute) -> Path:
        stage_dir = self.out / name
        parent_hashes = [self.stage_hashes[p] for p in parents]
        digest = _hash(_canonical(subset), *parent_hashes)
        meta_path = stage_dir / "stage_meta.json"
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
            if meta.get("hash") == digest and all((stage_dir / a).exists() for a in meta.get("outputs", [])):
                self.stage_hashes[name] = digest
                self.skipped.append(name)
                for a in meta.get("outputs", []):
                    self._declare(stage_dir / a)
                return stage_dir
        if stage_dir.exists():
            shutil.rmtree(stage_dir)
        stage_dir.mkdir(parents=True)
        try:
            outputs = compute(stage_dir)
        except Exception as e:
            raise StageError(name, e) from e
        meta_path.write_text(json.dumps({"hash": digest, "outputs": outputs}, indent=2) + "\n")
        self.stage_hashes[name] = digest
        for a in outputs:
            self._declare(stage_dir / a)
        return stage_dir

    # -- stages -----------------------------------------------------------

    def run(self) -> dict:
        cfg = self.config
        seed = cfg["seed"]

        synth_dir = self._stage("synth", {**cfg["characters"], **cfg["data"], "seed": seed}, [], self._compute_synth)
        vae_dir = self._stage("vae", cfg["vae"], ["synth"], self._compute_vae)
        dt_dir = self._stage("dt", {}, ["synth"], self._compute_dt)
        groups_dir = self._stage("groups", {"group_size": cfg["data"]["group_size"]}, ["synth", "vae", "dt"], self._compute_groups)
        ann_dir = self._stage("annotation", cfg["annotation"], ["synth", "groups"], self._compute_annotation)
        tr_dir = self._stage("translator", cfg["translator"], ["groups", "annotation"], self._compute_translator)
        ev_dir = self._stage("evaluate", {}, ["synth", "vae", "dt", "groups", "annotation", "translator"], self._compute_evaluate)

        metrics = json.loads((ev_dir / "metrics.json").read_text())
        report = {
            "config": cfg,
            "seed": seed,
            "stage_hashes": dict(sorted(self.stage_hashes.items())),
            "metrics": metrics,
            "artifacts": sorted(set(self.artifacts + ["report.json"])),
        }
        report_path = self.out / "report.json"
        report_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
        return report

    # synth: sample datasets and write them as mesh sets + ground-truth weights

    def _compute_synth(self, stage_dir: Path) -> list[str]:
        cfg = self.config
        seed = cfg["seed"]
        outputs = []

        def write_set(rig: Rig, count: int, sample_seed: int, prefix: str, subdir: str) -> list:
            samples = sample_expressions(rig, count, sample_seed)
            ms = MeshSet(
                neutral=rig.neutral,
                expressions=[s.mesh for s in samples],
                manifest={f"{prefix}{i:04d}": {"tags": []} for i in range(count)},
            )
            save_meshset(ms, stage_dir / subdir)
            weights = {f"{prefix}{i:04d}": s.weights.tolist() for i, s in enumerate(samples)}
            (stage_dir / f"{subdir}_weights.json").write_text(json.dumps(weights) + "\n")
            outputs.extend(
                [f"{subdir}/manifest.json", f"{subdir}_weights.json"]
                + [f"{subdir}/neutral.obj"]
                + [f"{subdir}/{mid}.obj" for mid in ms.manifest]
            )
            return samples

        write_set(self.target, cfg["data"]["avatar_count"], seed + 1, "a", "avatar")
        ref_samples = write_set(self.source, cfg["data"]["ref_count"], seed + 2, "h", "refs")

        # identity sets share one expression list (same weights per index)
        expr_weights = [s.weights for s in sample_expressions(self.source, cfg["data"]["expression_count"], seed + 3)]
        for v_idx, variant in enumerate(self.variants):
            ms = MeshSet(
                neutral=pose(variant, np.zeros(variant.controller_count)),
                expressions=[pose(variant, w) for w in expr_weights],
                manifest={f"e{i:04d}": {"tags": []} for i in range(len(expr_weights))},
            )
            sub = f"identity_{v_idx}"
            save_meshset(ms, stage_dir / sub)
            outputs.extend([f"{sub}/manifest.json", f"{sub}/neutral.obj"] + [f"{sub}/{mid}.obj" for mid in ms.manifest])
        return outputs

    def _synth_dir(self) -> Path:
        return self.out / "synth"

    def _load_weights(self, name: str) -> dict[str, np.ndarray]:
        data = json.loads((self._synth_dir() / f"{name}_weights.json").read_text())
        return {k: np.array(v) for k, v in data.items()}

    # vae: train both embeddings, record holdout metrics

    def _compute_vae(self, stage_dir: Path) -> list[str]:
        cfg = self.config
        seed = cfg["seed"]
        tc = _train_config(cfg["vae"])
        holdout = cfg["data"].get("holdout_fraction", 0.1)

        avatar_set = load_meshset(self._synth_dir() / "avatar")
        features = meshset_features(avatar_set)
        n_hold = max(1, int(len(features) * holdout))
        train_set = MeshSet(
            neutral=avatar_set.neutral,
            expressions=avatar_set.expressions[: len(features) - n_hold],
            manifest={k: avatar_set.manifest[k] for k in list(avatar_set.manifest)[: len(features) - n_hold]},
        )
        metrics: list = []
        avatar_vae = train_avatar_vae(train_set, tc, seed, metrics=metrics, features=features[: len(features) - n_hold])
        save_vae(avatar_vae, stage_dir / "avatar.ckpt")
        with open(stage_dir / "avatar_metrics.jsonl", "w") as fh:
            for row in metrics:
                fh.write(json.dumps(row) + "\n")
        np.save(stage_dir / "avatar_features.npy", features)

        train_err = avatar_vae.reconstruct_error_l1(features[: len(features) - n_hold])
        hold_err = avatar_vae.reconstruct_error_l1(features[len(features) - n_hold :])

        identity_sets = [
            load_meshset(self._synth_dir() / f"identity_{i}") for i in range(cfg["characters"]["identity_count"])
        ]
        h_metrics: list = []
        human_vae = train_human_vae(identity_sets, tc, seed, metrics=h_metrics)
        save_vae(human_vae, stage_dir / "human.ckpt")
        with open(stage_dir / "human_metrics.jsonl", "w") as fh:
            for row in h_metrics:
                fh.write(json.dumps(row) + "\n")

        summary = {
            "avatar": {
                "train_l1": train_err,
                "holdout_l1": hold_err,
                "feature_scale": avatar_vae.feature_scale,
                "rec_first_epoch": metrics[0]["rec_loss"],
                "rec_last_epoch": metrics[-1]["rec_loss"],
            },
            "human": {
                "feature_scale": human_vae.feature_scale,
                "rec_first_epoch": h_metrics[0]["rec_loss"],
                "rec_last_epoch": h_metrics[-1]["rec_loss"],
            },
        }
        (stage_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
        return ["avatar.ckpt", "human.ckpt", "avatar_metrics.jsonl", "human_metrics.jsonl", "avatar_features.npy", "summary.json"]

    # dt: deformation transfer of every reference onto the target character

    def _compute_dt(self, stage_dir: Path) -> list[str]:
        refs = load_meshset(self._synth_dir() / "refs")
        corr = parallel_face_correspondence(self.source, self.target)
        save_correspondence(corr, stage_dir / "correspondence.json")
        transferred = [
            transfer(self.source.neutral, mesh, self.target.neutral, corr) for mesh in refs.expressions
        ]
        ms = MeshSet(
            neutral=self.target.neutral,
            expressions=transferred,
            manifest={f"dt{i:04d}": {"tags": []} for i in range(len(transferred))},
        )
        save_meshset(ms, stage_dir / "meshes")
        return (
            ["correspondence.json", "meshes/manifest.json", "meshes/neutral.obj"]
            + [f"meshes/{mid}.obj" for mid in ms.manifest]
        )

    # groups: retrieval in feature space + code bookkeeping

    def _compute_groups(self, stage_dir: Path) -> list[str]:
        cfg = self.config
        avatar_vae = load_vae(self.out / "vae" / "avatar.ckpt")
        human_vae = load_vae(self.out / "vae" / "human.ckpt")
        refs = load_meshset(self._synth_dir() / "refs")
        avatar_set = load_meshset(self._synth_dir() / "avatar")
        dt_results = load_meshset(self.out / "dt" / "meshes")
        avatar_features = np.load(self.out / "vae" / "avatar_features.npy")
        groups = build_groups(
            refs,
            human_vae,
            avatar_vae,
            avatar_set,
            dt_results,
            P=cfg["data"]["group_size"],
            avatar_features=avatar_features,
        )
        save_groups(groups, stage_dir / "groups.json")
        return ["groups.json"]

    # annotation: campaign directory + simulated tournaments (or a served shell)

    def _compute_annotation(self, stage_dir: Path) -> list[str]:
        cfg = self.config
        seed = cfg["seed"]
        groups = load_groups(self.out / "groups" / "groups.json")
        campaign = stage_dir / "campaign"
        campaign.mkdir()
        shutil.copyfile(self.out / "groups" / "groups.json", campaign / "groups.json")

        mesh_index = {}
        refs_manifest = json.loads((self._synth_dir() / "refs" / "manifest.json").read_text())
        for entry in refs_manifest["expressions"]:
            mesh_index[entry["id"]] = f"../../synth/refs/{entry['path']}"
        avatar_manifest = json.loads((self._synth_dir() / "avatar" / "manifest.json").read_text())
        for entry in avatar_manifest["expressions"]:
            mesh_index[entry["id"]] = f"../../synth/avatar/{entry['path']}"
        (campaign / "mesh_index.json").write_text(json.dumps({"meshes": mesh_index}, sort_keys=True) + "\n")
        (campaign / "campaign.json").write_text(
            json.dumps({"groups": "groups.json", "mesh_index": "mesh_index.json", "annotations": "annotations.jsonl", "seed": seed}, indent=2)
            + "\n"
        )

        outputs = ["campaign/groups.json", "campaign/mesh_index.json", "campaign/campaign.json"]
        log_path = campaign / "annotations.jsonl"
        if cfg["annotation"]["mode"] == "simulated":
            sigma = float(cfg["annotation"].get("sigma", 0.0))
            avatar_weights = self._load_weights("avatar")
            ref_weights = self._load_weights("refs")
            all_records = []
            counts = {"excluded": 0}
            for g in groups:
                t = create_tournament(g, seed)
                recs = run_simulated_tournament(t, ref_weights[g.anchor_id], avatar_weights, sigma, seed)
                all_records.extend(recs)
                all_records.extend(augment(t, timestamp=0.0))
                counts["excluded"] += sum(1 for m in t.matches if m.excluded)
            append_records(log_path, all_records)
            (stage_dir / "summary.json").write_text(json.dumps(counts, sort_keys=True) + "\n")
            outputs += ["campaign/annotations.jsonl", "summary.json"]
        else:
            log_path.touch()
            outputs += ["campaign/annotations.jsonl"]
        return outputs

    # translator: three-stage progressive training

    def _compute_translator(self, stage_dir: Path) -> list[str]:
        cfg = self.config
        seed = cfg["seed"]
        groups = load_groups(self.out / "groups" / "groups.json")
        records = read_records(self.out / "annotation" / "campaign" / "annotations.jsonl")

        avatar_codes = {}
        for g in groups:
            for mid, code in zip(g.member_ids, g.member_codes):
                avatar_codes[mid] = code
        anchor_codes = {g.anchor_id: g.anchor_code for g in groups}
        triplets, counts = export_triplets(records, avatar_codes, anchor_codebook=anchor_codes)

        sc = _stage_config(cfg["translator"])
        log: list = []
        snapshots: dict[int, TranslatorModel] = {}
        model = train_translator(
            groups,
            triplets,
            sc,
            seed,
            hidden=tuple(cfg["translator"].get("hidden", (64, 64))),
            log=log,
            on_stage_end=lambda i, m: snapshots.update({i: m}),
        )
        for i, snap in snapshots.items():
            save_translator(snap, stage_dir / f"stage{i}.ckpt", extra_meta={"stage": i})
        save_translator(model, stage_dir / "translator.ckpt", extra_meta={"stage": 3})
        with open(stage_dir / "log.jsonl", "w") as fh:
            for row in log:
                fh.write(json.dumps(row) + "\n")
        (stage_dir / "triplet_counts.json").write_text(json.dumps(counts, sort_keys=True) + "\n")
        return ["translator.ckpt", "stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "log.jsonl", "triplet_counts.json"]

    # evaluate: ground-truth benchmark and baselines

    def _compute_evaluate(self, stage_dir: Path) -> list[str]:
        cfg = self.config
        avatar_vae = load_vae(self.out / "vae" / "avatar.ckpt")
        human_vae = load_vae(self.out / "vae" / "human.ckpt")
        refs = load_meshset(self._synth_dir() / "refs")
        dt_results = load_meshset(self.out / "dt" / "meshes")
        groups = load_groups(self.out / "groups" / "groups.json")
        records = read_records(self.out / "annotation" / "campaign" / "annotations.jsonl")
        ref_weights = self._load_weights("refs")
        vae_summary = json.loads((self.out / "vae" / "summary.json").read_text())
        triplet_counts = json.loads((self.out / "translator" / "triplet_counts.json").read_text())

        gt = {rid: pose(self.target, ref_weights[rid]) for rid in refs.ids()}

        dt_error = float(
            np.mean([_mean_vertex_error(dt_results.expressions[i], gt[rid]) for i, rid in enumerate(refs.ids())])
        )
        bs_error = float(
            np.mean(
                [
                    _mean_vertex_error(pose(self.target, fit_blendshape_weights(self.source, refs.expressions[i])), gt[rid])
                    for i, rid in enumerate(refs.ids())
                ]
            )
        )

        avatar_codes = {}
        for g in groups:
            for mid, code in zip(g.member_ids, g.member_codes):
                avatar_codes[mid] = code
        anchor_codes = {g.anchor_id: g.anchor_code for g in groups}
        triplets, _ = export_triplets(records, avatar_codes, anchor_codebook=anchor_codes)

        # linear baseline fitted on (anchor, champion) code pairs
        champion_pairs = []
        for g in groups:
            t = replay_tournament(g, cfg["seed"], [r for r in records if r.group_id == g.group_id])
            if t.champion is not None:
                champion_pairs.append((anchor_codes[g.anchor_id], avatar_codes[t.champion]))
        lec_map = lec_fit(champion_pairs, ridge=1e-6) if champion_pairs else None

        stage_models = {i: load_translator(self.out / "translator" / f"stage{i}.ckpt") for i in (1, 2, 3)}
        margin = cfg["translator"].get("margin", 0.2)

        errors: dict[str, float] = {"dt": dt_error, "bs": bs_error}
        violations: dict[str, int] = {}
        for label, translator in [("stage1", stage_models[1]), ("stage2", stage_models[2]), ("stage3", stage_models[3])] + (
            [("lec", lec_map)] if lec_map is not None else []
        ):
            errs = []
            for i, rid in enumerate(refs.ids()):
                out_mesh = retarget_mesh(refs.expressions[i], human_vae, translator, avatar_vae, human_neutral=refs.neutral)
                errs.append(_mean_vertex_error(out_mesh, gt[rid]))
            errors[label] = float(np.mean(errs))
            if isinstance(translator, TranslatorModel):
                violations[label] = count_triplet_violations(translator, triplets, margin)

        improvement = (errors["stage1"] - errors["stage3"]) / errors["stage1"] * 100.0 if errors["stage1"] else 0.0
        metrics = {
            "benchmark_mean_vertex_error": errors,
            "stage3_vs_stage1_improvement_pct": improvement,
            "triplet_violations": violations,
            "triplet_counts": triplet_counts,
            "vae": vae_summary,
            "reference_scale": {
                "target_bbox_diagonal": self.target.neutral.bbox_diagonal(),
                "mean_gt_displacement": float(
                    np.mean(
                        [
                            np.linalg.norm(gt[rid].vertices - self.target.neutral.vertices, axis=1).mean()
                            for rid in refs.ids()
                        ]
                    )
                ),
            },
        }
        (stage_dir / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
        return ["metrics.json"]


def run_pipeline(config: dict, out_dir: str | Path) -> dict:
    """Execute all stages in dependency order; returns the report dict."""
    return Pipeline(config, out_dir).run()
