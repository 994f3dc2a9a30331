"""Command-line interface.

Exit codes: 0 success, 2 configuration/usage error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def _cmd_synth(args) -> int:
    from retarget.mesh import MeshSet, save_meshset
    from retarget.rig import build_rig, sample_expressions

    rig = build_rig(args.character, args.seed)
    samples = sample_expressions(rig, args.count, args.seed)
    prefix = "h" if args.character == "human" else "a"
    ms = MeshSet(
        neutral=rig.neutral,
        expressions=[s.mesh for s in samples],
        manifest={f"{prefix}{i:04d}": {"tags": []} for i in range(args.count)},
    )
    out = Path(args.out)
    save_meshset(ms, out)
    weights = {f"{prefix}{i:04d}": s.weights.tolist() for i, s in enumerate(samples)}
    (out / "weights.json").write_text(json.dumps(weights) + "\n")
    print(f"wrote {args.count} expressions to {out}")
    return 0


def _cmd_dt(args) -> int:
    from retarget.mesh import load_obj, save_obj
    from retarget.transfer import load_correspondence, transfer

    src_neutral = load_obj(args.src_neutral)
    src_deformed = load_obj(args.src_deformed)
    tgt_neutral = load_obj(args.tgt_neutral)
    corr = load_correspondence(args.corr)
    result = transfer(src_neutral, src_deformed, tgt_neutral, corr)
    save_obj(result, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_train_vae(args) -> int:
    from retarget.mesh import load_meshset
    from retarget.vae import TrainConfig, save_vae, train_avatar_vae, train_human_vae

    cfg = TrainConfig(
        epochs=args.epochs,
        batch=args.batch,
        lr=args.lr,
        lr_decay=args.lr_decay,
        decay_every=args.decay_every,
        kld_weight=args.kld_weight,
        latent=args.latent,
    )
    metrics: list = []
    if args.domain == "avatar":
        dataset = load_meshset(Path(args.data))
        model = train_avatar_vae(dataset, cfg, args.seed, metrics=metrics)
    else:
        root = Path(args.data)
        identity_dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "manifest.json").exists())
        if not identity_dirs:
            print(f"error: no identity mesh sets under {root}", file=sys.stderr)
            return 2
        sets = [load_meshset(p) for p in identity_dirs]
        model = train_human_vae(sets, cfg, args.seed, metrics=metrics)
    save_vae(model, args.out)
    metrics_path = Path(args.metrics) if args.metrics else Path(args.out).with_suffix(".metrics.jsonl")
    with open(metrics_path, "w") as fh:
        for row in metrics:
            fh.write(json.dumps(row) + "\n")
    print(f"wrote {args.out} and {metrics_path}")
    return 0


def _cmd_tournament(args) -> int:
    from retarget.tournament import append_records, augment, create_tournament, run_simulated_tournament
    from retarget.translate import load_groups

    groups = load_groups(args.groups)
    avatar_weights = {k: np.array(v) for k, v in json.loads(Path(args.avatar_weights).read_text()).items()}
    anchor_weights = {k: np.array(v) for k, v in json.loads(Path(args.anchor_weights).read_text()).items()}
    records = []
    for g in groups:
        t = create_tournament(g, args.seed)
        records.extend(run_simulated_tournament(t, anchor_weights[g.anchor_id], avatar_weights, args.simulate, args.seed))
        records.extend(augment(t, timestamp=0.0))
    out = Path(args.out)
    if out.exists():
        out.unlink()
    append_records(out, records)
    manual = sum(1 for r in records if r.origin == "manual")
    print(f"wrote {len(records)} records ({manual} manual, {len(records) - manual} augmented) to {out}")
    return 0


def _cmd_train_translator(args) -> int:
    from retarget.tournament import export_triplets, read_records
    from retarget.translate import load_groups, save_translator, stage_config_from_json, StageConfig, train_translator

    groups = load_groups(args.groups)
    records = read_records(args.annotations)
    codes = {}
    for g in groups:
        for mid, code in zip(g.member_ids, g.member_codes):
            codes[mid] = code
    anchors = {g.anchor_id: g.anchor_code for g in groups}
    triplets, counts = export_triplets(records, codes, anchor_codebook=anchors)
    sc = stage_config_from_json(args.stages) if args.stages else StageConfig()
    log: list = []
    out = Path(args.out)
    model = train_translator(
        groups,
        triplets,
        sc,
        args.seed,
        log=log,
        on_stage_end=lambda i, m: save_translator(m, out.parent / f"{out.stem}.stage{i}{out.suffix}"),
    )
    save_translator(model, out)
    with open(out.with_suffix(".log.jsonl"), "w") as fh:
        for row in log:
            fh.write(json.dumps(row) + "\n")
    print(f"trained on {len(groups)} groups, {counts} triplets; wrote {out}")
    return 0


def _cmd_infer(args) -> int:
    from retarget.mesh import load_obj, save_obj
    from retarget.translate import load_translator, retarget
    from retarget.vae import load_vae

    models = Path(args.models)
    human_vae = load_vae(models / "human.ckpt")
    avatar_vae = load_vae(models / "avatar.ckpt")
    translator = load_translator(models / "translator.ckpt")
    human_mesh = load_obj(args.input)
    human_neutral = load_obj(args.human_neutral) if args.human_neutral else None
    out = retarget(human_mesh, human_vae, translator, avatar_vae, human_neutral=human_neutral)
    save_obj(out, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from retarget.service import Campaign, make_app

    campaign = Campaign(args.campaign)
    ui = Path(args.ui) if args.ui else None
    app = make_app(campaign, ui_dir=ui)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def _cmd_run(args) -> int:
    from retarget.pipeline import load_config, run_pipeline

    config = load_config(args.config)
    report = run_pipeline(config, args.out)
    print(json.dumps(report["metrics"]["benchmark_mean_vertex_error"], indent=2, sort_keys=True))
    print(f"report: {Path(args.out) / 'report.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retarget", description="Facial expression retargeting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic character expression dataset")
    p.add_argument("--character", required=True, choices=["human", "avatarA", "avatarB"], help="rig profile to sample")
    p.add_argument("--count", type=int, default=2000, help="number of expressions (default 2000)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--out", required=True, help="output directory (mesh set + weights.json)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("dt", help="deformation transfer of one expression onto a target mesh")
    p.add_argument("--src-neutral", required=True, help="source neutral OBJ")
    p.add_argument("--src-deformed", required=True, help="source deformed OBJ")
    p.add_argument("--tgt-neutral", required=True, help="target neutral OBJ")
    p.add_argument("--corr", required=True, help="face correspondence JSON")
    p.add_argument("--out", required=True, help="output OBJ path")
    p.set_defaults(func=_cmd_dt)

    p = sub.add_parser("train-vae", help="train an expression embedding")
    p.add_argument("--domain", required=True, choices=["human", "avatar"], help="embedding domain")
    p.add_argument("--data", required=True, help="mesh-set dir (avatar) or dir of identity mesh sets (human)")
    p.add_argument("--out", required=True, help="checkpoint output path (.ckpt)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-decay", type=float, default=0.6)
    p.add_argument("--decay-every", type=int, default=10)
    p.add_argument("--kld-weight", type=float, default=1e-3)
    p.add_argument("--latent", type=int, default=25)
    p.add_argument("--metrics", help="metrics JSONL path (default: alongside checkpoint)")
    p.set_defaults(func=_cmd_train_vae)

    p = sub.add_parser("tournament", help="run simulated tournament annotation over groups")
    p.add_argument("--groups", required=True, help="groups.json from the correspondence stage")
    p.add_argument("--simulate", type=float, default=0.0, metavar="SIGMA", help="annotator noise (0 = exact oracle)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--avatar-weights", required=True, help="ground-truth controller weights of the avatar dataset")
    p.add_argument("--anchor-weights", required=True, help="ground-truth controller weights of the references")
    p.add_argument("--out", required=True, help="annotations JSONL output")
    p.set_defaults(func=_cmd_tournament)

    p = sub.add_parser("train-translator", help="train the latent translation network")
    p.add_argument("--groups", required=True)
    p.add_argument("--annotations", required=True, help="annotations JSONL")
    p.add_argument("--stages", help="stage schedule JSON (defaults to the built-in 3-stage schedule)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train_translator)

    p = sub.add_parser("infer", help="retarget one human expression mesh to the avatar")
    p.add_argument("--input", required=True, help="human expression OBJ")
    p.add_argument("--out", required=True, help="avatar output OBJ")
    p.add_argument("--models", required=True, help="directory with human.ckpt, avatar.ckpt, translator.ckpt")
    p.add_argument("--human-neutral", help="neutral OBJ of the input identity (defaults to the model's)")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("serve", help="serve the annotation API and meshes")
    p.add_argument("--campaign", required=True, help="campaign directory")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--ui", help="static UI directory to mount at /")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True, help="pipeline JSON config")
    p.add_argument("--out", required=True, help="run directory for artifacts and report.json")
    p.set_defaults(func=_cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    from retarget.pipeline import ConfigError, StageError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
