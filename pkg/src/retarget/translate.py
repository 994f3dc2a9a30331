"""Cross-domain latent translation.

Builds one correspondence group per human reference (the deformation
transfer result's code plus the nearest avatar dataset expressions in
feature space), trains the translation MLP under paired, group, and
triplet losses with a three-stage progressive schedule, provides the
linear expression-cloning baseline, and runs end-to-end retargeting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from retarget.drfeature import cotangent_weights, dr_encode
from retarget.mesh import Mesh, MeshSet
from retarget.nn.checkpoint import load_checkpoint, save_checkpoint
from retarget.nn.layers import Dense
from retarget.nn.optim import Adam
from retarget.nn.tensor import Tensor, add, l2norm, mul, relu, sub, tensor_mean
from retarget.rig import philox_rng
from retarget.vae import LATENT_DIM, VaeModel, decode_to_mesh

DEFAULT_GROUP_SIZE = 16
DEFAULT_MARGIN = 0.2

_STREAM_INIT = 0x7A15
_STREAM_TRIPLET_BATCH = 0x7B3D


class TranslateError(ValueError):
    pass


@dataclass
class CorrespondenceGroup:
    """One human reference with its geometric matches in the avatar domain."""

    group_id: str
    anchor_id: str
    anchor_code: np.ndarray  # encoding of the human reference
    dt_code: np.ndarray  # encoding of its deformation-transfer result
    member_ids: list[str]  # avatar dataset ids, nearest first
    member_codes: np.ndarray  # (P, latent)

    def __post_init__(self):
        self.anchor_code = np.asarray(self.anchor_code, dtype=np.float32)
        self.dt_code = np.asarray(self.dt_code, dtype=np.float32)
        self.member_codes = np.asarray(self.member_codes, dtype=np.float32)
        if len(self.member_ids) != len(self.member_codes):
            raise TranslateError("member id/code count mismatch")


@dataclass
class TrainingTriplet:
    anchor_code: np.ndarray
    positive_code: np.ndarray
    negative_code: np.ndarray


@dataclass(frozen=True)
class StageParams:
    alpha_p: float
    alpha_g: float
    alpha_t: float
    lr: float
    iterations: int = 2000

    def __post_init__(self):
        if min(self.alpha_p, self.alpha_g, self.alpha_t) < 0:
            raise TranslateError("stage loss weights must be nonnegative")
        if self.lr <= 0 or self.iterations <= 0:
            raise TranslateError("stage lr and iterations must be positive")


@dataclass
class StageConfig:
    """Progressive schedule: point-to-point, then group, then triplet emphasis."""

    stages: tuple[StageParams, StageParams, StageParams] = (
        StageParams(alpha_p=1.0, alpha_g=1e-4, alpha_t=1e-4, lr=1e-4, iterations=2000),
        StageParams(alpha_p=1.0, alpha_g=1.0, alpha_t=1e-4, lr=1e-5, iterations=2000),
        StageParams(alpha_p=1.0, alpha_g=1.0, alpha_t=10.0, lr=1e-6, iterations=4000),
    )
    margin: float = DEFAULT_MARGIN
    triplet_batch: int = 32

    def __post_init__(self):
        if len(self.stages) != 3:
            raise TranslateError("the schedule has exactly three stages")
        if self.margin < 0:
            raise TranslateError("margin must be nonnegative")


def stage_config_from_json(path: str | Path) -> StageConfig:
    data = json.loads(Path(path).read_text())
    stages = tuple(
        StageParams(
            alpha_p=s["alpha_p"],
            alpha_g=s["alpha_g"],
            alpha_t=s["alpha_t"],
            lr=s["lr"],
            iterations=s.get("iterations", 2000),
        )
        for s in data["stages"]
    )
    return StageConfig(stages=stages, margin=data.get("margin", DEFAULT_MARGIN), triplet_batch=data.get("triplet_batch", 32))


class TranslatorModel:
    """MLP mapping human expression codes to avatar expression codes."""

    def __init__(self, seed: int, latent: int = LATENT_DIM, hidden: tuple[int, ...] = (64, 64)):
        rng = philox_rng(seed, _STREAM_INIT)
        dims = (latent, *hidden, latent)
        self.layers = [
            Dense(rng, dims[i], dims[i + 1], "tanh" if i + 2 < len(dims) else "linear")
            for i in range(len(dims) - 1)
        ]
        self.latent = latent
        self.hidden = tuple(hidden)
        self.seed = seed

    def params(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.layers:
            h = layer(h)
        return h

    def __call__(self, codes: np.ndarray) -> np.ndarray:
        arr = np.asarray(codes, dtype=np.float32)
        single = arr.ndim == 1
        out = self.forward(Tensor(arr[None] if single else arr)).data
        return out[0] if single else out

    def copy(self) -> "TranslatorModel":
        clone = TranslatorModel(self.seed, self.latent, self.hidden)
        for mine, theirs in zip(self.params(), clone.params()):
            theirs.data = mine.data.copy()
        return clone


def save_translator(model: TranslatorModel, path: str | Path, extra_meta: dict | None = None) -> None:
    meta = {"kind": "translator", "latent": model.latent, "hidden": list(model.hidden), "seed": model.seed}
    if extra_meta:
        meta.update(extra_meta)
    arrays = {}
    for i, layer in enumerate(model.layers):
        arrays[f"layer{i}.weight"] = layer.weight.data
        arrays[f"layer{i}.bias"] = layer.bias.data
    save_checkpoint(path, meta, arrays)


def load_translator(path: str | Path) -> TranslatorModel:
    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "translator":
        raise TranslateError(f"{path} is not a translator checkpoint")
    model = TranslatorModel(meta["seed"], meta["latent"], tuple(meta["hidden"]))
    for i, layer in enumerate(model.layers):
        layer.weight.data = arrays[f"layer{i}.weight"].astype(np.float32)
        layer.bias.data = arrays[f"layer{i}.bias"].astype(np.float32)
    return model


# -- correspondence construction ---------------------------------------


def nearest_members(query_feature: np.ndarray, dataset_features: np.ndarray, count: int) -> np.ndarray:
    """Indices of the `count` dataset rows closest to the query in L2, ties by index."""
    if count > len(dataset_features):
        raise TranslateError(f"requested {count} neighbors from {len(dataset_features)} candidates")
    q = query_feature.reshape(1, -1).astype(np.float64)
    d = dataset_features.reshape(len(dataset_features), -1).astype(np.float64)
    dist_sq = ((d - q) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(d)), dist_sq))
    return order[:count]


def build_groups(
    human_refs: MeshSet,
    human_vae: VaeModel,
    avatar_vae: VaeModel,
    avatar_set: MeshSet,
    dt_results: MeshSet,
    P: int = DEFAULT_GROUP_SIZE,
    avatar_features: np.ndarray | None = None,
    human_features: np.ndarray | None = None,
) -> list[CorrespondenceGroup]:
    """One group per human reference.

    Group k holds the code of reference k, the code of its deformation
    transfer result, and the P avatar dataset members nearest to that
    result in the raw feature space (L2 over all vertices).
    """
    if len(dt_results) != len(human_refs):
        raise TranslateError("need one deformation-transfer result per human reference")
    if avatar_features is None:
        avatar_features = np.stack(
            [dr_encode(avatar_set.neutral, m, avatar_vae.edge_weights).values for m in avatar_set.expressions]
        )
    if human_features is None:
        # encode references against their own neutral's weights: the model
        # may have been trained on an identity-averaged neutral whose
        # cotangents differ slightly
        ref_weights = cotangent_weights(human_refs.neutral)
        human_features = np.stack(
            [dr_encode(human_refs.neutral, m, ref_weights).values for m in human_refs.expressions]
        )

    anchor_codes, _ = human_vae.encode_batch(human_features)
    dt_features = np.stack(
        [dr_encode(dt_results.neutral, m, avatar_vae.edge_weights).values for m in dt_results.expressions]
    )
    dt_codes, _ = avatar_vae.encode_batch(dt_features)
    member_codes_all, _ = avatar_vae.encode_batch(avatar_features)

    avatar_ids = avatar_set.ids()
    groups = []
    for k, ref_id in enumerate(human_refs.ids()):
        idx = nearest_members(dt_features[k], avatar_features, P)
        groups.append(
            CorrespondenceGroup(
                group_id=f"g{k:03d}",
                anchor_id=ref_id,
                anchor_code=anchor_codes[k],
                dt_code=dt_codes[k],
                member_ids=[avatar_ids[i] for i in idx],
                member_codes=member_codes_all[idx],
            )
        )
    return groups


def save_groups(groups: list[CorrespondenceGroup], path: str | Path) -> None:
    payload = [
        {
            "group_id": g.group_id,
            "anchor_id": g.anchor_id,
            "anchor_code": [float(x) for x in g.anchor_code],
            "dt_code": [float(x) for x in g.dt_code],
            "member_ids": list(g.member_ids),
            "member_codes": [[float(x) for x in row] for row in g.member_codes],
        }
        for g in groups
    ]
    Path(path).write_text(json.dumps({"groups": payload}) + "\n")


def load_groups(path: str | Path) -> list[CorrespondenceGroup]:
    data = json.loads(Path(path).read_text())
    return [
        CorrespondenceGroup(
            group_id=g["group_id"],
            anchor_id=g["anchor_id"],
            anchor_code=np.array(g["anchor_code"], dtype=np.float32),
            dt_code=np.array(g["dt_code"], dtype=np.float32),
            member_ids=list(g["member_ids"]),
            member_codes=np.array(g["member_codes"], dtype=np.float32),
        )
        for g in data["groups"]
    ]


# -- losses -------------------------------------------------------------


def _group_arrays(groups: list[CorrespondenceGroup]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    anchors = np.stack([g.anchor_code for g in groups])
    dt = np.stack([g.dt_code for g in groups])
    members = np.stack([g.member_codes for g in groups])  # (K, P, L)
    return anchors, dt, members


def _loss_paired_graph(model: TranslatorModel, anchors: np.ndarray, dt: np.ndarray) -> Tensor:
    mapped = model.forward(Tensor(anchors))
    return tensor_mean(l2norm(sub(mapped, Tensor(dt)), axis=1))


def _loss_group_graph(model: TranslatorModel, anchors: np.ndarray, members: np.ndarray) -> Tensor:
    K, P, L = members.shape
    mapped = model.forward(Tensor(anchors))  # (K, L)
    tiled = reshape_repeat(mapped, P)  # (K*P, L) with each row repeated P times
    flat = Tensor(members.reshape(K * P, L))
    return tensor_mean(l2norm(sub(tiled, flat), axis=1))


def reshape_repeat(mapped: Tensor, repeat: int) -> Tensor:
    """Repeat each row `repeat` times, differentiable: (K, L) -> (K*repeat, L)."""
    K, L = mapped.shape
    out_data = np.repeat(mapped.data, repeat, axis=0)

    def backward(g):
        mapped._accumulate(g.reshape(K, repeat, L).sum(axis=1))

    return Tensor(out_data, parents=(mapped,), backward=backward)


def _loss_triplet_graph(
    model: TranslatorModel,
    anchors: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    margin: float,
) -> Tensor:
    mapped = model.forward(Tensor(anchors))
    d_pos = l2norm(sub(mapped, Tensor(positives)), axis=1)
    d_neg = l2norm(sub(mapped, Tensor(negatives)), axis=1)
    hinge = relu(add(sub(d_pos, d_neg), np.float32(margin)))
    return tensor_mean(hinge)


def loss_paired(model: TranslatorModel, groups: list[CorrespondenceGroup]) -> float:
    """Mean L2 distance between mapped anchors and their transfer-result codes."""
    if not groups:
        raise TranslateError("no groups")
    anchors, dt, _ = _group_arrays(groups)
    return float(_loss_paired_graph(model, anchors, dt).data)


def loss_group(model: TranslatorModel, groups: list[CorrespondenceGroup]) -> float:
    """Mean L2 distance between mapped anchors and every member of their group."""
    if not groups:
        raise TranslateError("no groups")
    anchors, _, members = _group_arrays(groups)
    return float(_loss_group_graph(model, anchors, members).data)


def loss_triplet(model: TranslatorModel, triplets: list[TrainingTriplet], margin: float = DEFAULT_MARGIN) -> float:
    """Mean hinge over annotated triplets: max(0, margin + D_pos - D_neg)."""
    if not triplets:
        return 0.0
    anchors = np.stack([t.anchor_code for t in triplets]).astype(np.float32)
    pos = np.stack([t.positive_code for t in triplets]).astype(np.float32)
    neg = np.stack([t.negative_code for t in triplets]).astype(np.float32)
    return float(_loss_triplet_graph(model, anchors, pos, neg, margin).data)


def count_triplet_violations(model: TranslatorModel, triplets: list[TrainingTriplet], margin: float = DEFAULT_MARGIN) -> int:
    """Number of triplets whose hinge is strictly positive under the model."""
    if not triplets:
        return 0
    anchors = np.stack([t.anchor_code for t in triplets]).astype(np.float32)
    mapped = model(anchors)
    d_pos = np.linalg.norm(mapped - np.stack([t.positive_code for t in triplets]), axis=1)
    d_neg = np.linalg.norm(mapped - np.stack([t.negative_code for t in triplets]), axis=1)
    return int((margin + d_pos - d_neg > 0).sum())


# -- training -----------------------------------------------------------


def train_translator(
    groups: list[CorrespondenceGroup],
    triplets: list[TrainingTriplet],
    stages: StageConfig,
    seed: int,
    hidden: tuple[int, ...] = (64, 64),
    log: list | None = None,
    on_stage_end=None,
) -> TranslatorModel:
    """Run the three-stage progressive schedule.

    Group losses are evaluated full-batch over all anchors; the triplet
    term is minibatched. When a stage's triplet weight is zero (or no
    triplets exist) the triplet term is skipped entirely, including its
    random batch draws, so runs with and without triplet data are
    bit-identical under zero weight.
    """
    if not groups:
        raise TranslateError("cannot train without correspondence groups")
    model = TranslatorModel(seed, hidden=hidden)
    anchors, dt, members = _group_arrays(groups)

    trip_arrays = None
    if triplets:
        trip_arrays = (
            np.stack([t.anchor_code for t in triplets]).astype(np.float32),
            np.stack([t.positive_code for t in triplets]).astype(np.float32),
            np.stack([t.negative_code for t in triplets]).astype(np.float32),
        )

    step = 0
    for stage_idx, stage in enumerate(stages.stages):
        opt = Adam(model.params(), lr=stage.lr)
        for it in range(stage.iterations):
            lp = _loss_paired_graph(model, anchors, dt)
            lg = _loss_group_graph(model, anchors, members)
            use_triplets = stage.alpha_t != 0.0 and trip_arrays is not None
            if use_triplets:
                ta, tp, tn = trip_arrays
                batch = min(stages.triplet_batch, len(ta))
                idx = philox_rng(seed, _STREAM_TRIPLET_BATCH, step).choice(len(ta), size=batch, replace=False)
                lt = _loss_triplet_graph(model, ta[idx], tp[idx], tn[idx], stages.margin)
            else:
                lt = Tensor(np.float32(0.0))
            total = add(add(mul(lp, stage.alpha_p), mul(lg, stage.alpha_g)), mul(lt, stage.alpha_t))
            if not np.isfinite(total.data):
                raise RuntimeError(f"non-finite translator loss at stage {stage_idx + 1}, iteration {it}")
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
            if log is not None:
                log.append(
                    {
                        "stage": stage_idx + 1,
                        "iteration": it,
                        "lr": stage.lr,
                        "alpha_p": stage.alpha_p,
                        "alpha_g": stage.alpha_g,
                        "alpha_t": stage.alpha_t,
                        "loss_p": float(lp.data),
                        "loss_g": float(lg.data),
                        "loss_t": float(lt.data),
                        "total": float(total.data),
                    }
                )
        if on_stage_end is not None:
            on_stage_end(stage_idx + 1, model.copy())
    return model


# -- linear baseline ----------------------------------------------------


def lec_fit(pairs: list[tuple[np.ndarray, np.ndarray]], ridge: float = 1e-9) -> np.ndarray:
    """Linear expression cloning: ridge least-squares map between code spaces.

    Returns M minimizing sum ||M s_k - t_k||^2 + ridge ||M||_F^2.
    """
    if not pairs:
        raise TranslateError("need at least one pair")
    if ridge < 0:
        raise TranslateError("ridge must be >= 0")
    S = np.stack([np.asarray(s, dtype=np.float64) for s, _ in pairs], axis=1)  # (L, K)
    T = np.stack([np.asarray(t, dtype=np.float64) for _, t in pairs], axis=1)
    L = S.shape[0]
    gram = S @ S.T
    if ridge == 0.0 and np.linalg.matrix_rank(gram) < L:
        raise TranslateError("singular system: pairs do not span the code space and ridge is 0")
    return np.linalg.solve(gram + ridge * np.eye(L), S @ T.T).T


# -- end-to-end inference ----------------------------------------------


def retarget(
    human_mesh: Mesh,
    human_vae: VaeModel,
    translator,
    avatar_vae: VaeModel,
    avatar_neutral: Mesh | None = None,
    human_neutral: Mesh | None = None,
    anchor: int = 0,
) -> Mesh:
    """Full pipeline: encode the human mesh, translate the code, decode
    and reconstruct on the avatar topology.

    `translator` is either a TranslatorModel or a linear map matrix from
    lec_fit. Deterministic: encoding uses the posterior mean.
    """
    stage = "feature encoding"
    try:
        ref = human_neutral if human_neutral is not None else human_vae.neutral
        weights = human_vae.edge_weights if human_neutral is None else None
        g = dr_encode(ref, human_mesh, weights)
        stage = "human encoding"
        mu, _ = human_vae.encode(g)
        stage = "code translation"
        if isinstance(translator, TranslatorModel):
            code = translator(mu)
        else:
            code = np.asarray(translator, dtype=np.float64) @ mu.astype(np.float64)
        stage = "avatar decoding"
        target_neutral = avatar_neutral if avatar_neutral is not None else avatar_vae.neutral
        return decode_to_mesh(avatar_vae, code.astype(np.float32), neutral=None if avatar_neutral is None else target_neutral, anchor=anchor)
    except Exception as e:
        raise RuntimeError(f"retarget failed at stage '{stage}': {e}") from e
