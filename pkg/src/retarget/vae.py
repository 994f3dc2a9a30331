"""Expression VAEs: one per avatar character, one identity-disentangled
human model.

Both operate on per-vertex deformation features. The avatar model
reconstructs its input; the human model reconstructs the feature of the
identity-averaged shape, which removes identity from the code: different
people making the same expression map to (nearly) the same latent
vector.

Inputs are divided by a dataset-level scale (mean absolute feature
value) before entering the network and outputs are multiplied back, so
training behaves identically across mesh sizes and deformation
magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from retarget.drfeature import DRFeature, EdgeWeights, cotangent_weights, dr_decode, dr_encode
from retarget.mesh import Mesh, MeshError, MeshSet
from retarget.nn.checkpoint import load_checkpoint, save_checkpoint
from retarget.nn.layers import ChebConv, Dense, ScaledLaplacian
from retarget.nn.optim import Adam
from retarget.nn.tensor import (
    Tensor,
    absolute,
    add,
    exp,
    mul,
    narrow,
    reshape,
    square,
    sub,
    tensor_mean,
    tensor_sum,
    transpose01,
)
from retarget.rig import philox_rng

LATENT_DIM = 25

_STREAM_INIT = 0x11A7
_STREAM_SHUFFLE = 0x5FF1E
_STREAM_NOISE = 0x4015E


class VaeError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 30
    lr: float = 1e-4
    lr_decay: float = 0.6
    decay_every: int = 10
    kld_weight: float = 1e-3
    latent: int = LATENT_DIM
    hidden: int = 64
    conv_channels: tuple[int, int] = (16, 16)
    cheb_order: int = 3

    def __post_init__(self):
        for name in ("epochs", "batch", "lr", "lr_decay", "decay_every", "latent", "hidden", "cheb_order"):
            if getattr(self, name) <= 0:
                raise VaeError(f"TrainConfig.{name} must be positive")
        if self.kld_weight < 0:
            raise VaeError("TrainConfig.kld_weight must be >= 0")


def kl_divergence_closed_form(mu: np.ndarray, logvar: np.ndarray) -> float:
    """KL between the diagonal Gaussian (mu, exp(logvar)) and the unit Gaussian."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return float(0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar))


class VaeModel:
    """Graph-conv encoder/decoder pair with a Gaussian latent bottleneck."""

    def __init__(self, neutral: Mesh, cfg: TrainConfig, domain: str, seed: int, feature_scale: float = 1.0):
        self.neutral = neutral
        self.domain = domain
        self.cfg = cfg
        self.seed = seed
        self.epoch = 0
        self.feature_scale = float(feature_scale)
        self.lap = ScaledLaplacian(neutral)
        self.edge_weights: EdgeWeights = cotangent_weights(neutral)

        V = neutral.vertex_count
        c1, c2 = cfg.conv_channels
        rng = philox_rng(seed, _STREAM_INIT)
        self.enc_conv = [
            ChebConv(rng, 9, c1, cfg.cheb_order, "tanh"),
            ChebConv(rng, c1, c2, cfg.cheb_order, "tanh"),
        ]
        self.enc_fc = [
            Dense(rng, V * c2, cfg.hidden, "tanh"),
            Dense(rng, cfg.hidden, 2 * cfg.latent, "linear"),
        ]
        self.dec_fc = [
            Dense(rng, cfg.latent, cfg.hidden, "tanh"),
            Dense(rng, cfg.hidden, V * c2, "tanh"),
        ]
        self.dec_conv = [
            ChebConv(rng, c2, c1, cfg.cheb_order, "tanh"),
            ChebConv(rng, c1, 9, cfg.cheb_order, "linear"),
        ]
        # Start the posterior sharp (sigma ~ 0.14): a unit-variance init
        # drowns the code signal in sampling noise for the first epochs.
        self.enc_fc[1].bias.data[cfg.latent :] = -4.0

    @property
    def latent_dim(self) -> int:
        return self.cfg.latent

    def params(self) -> list[Tensor]:
        out = []
        for layer in (*self.enc_conv, *self.enc_fc, *self.dec_fc, *self.dec_conv):
            out.extend(layer.params())
        return out

    def param_dict(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        groups = [("enc_conv", self.enc_conv), ("enc_fc", self.enc_fc), ("dec_fc", self.dec_fc), ("dec_conv", self.dec_conv)]
        for prefix, layers in groups:
            for li, layer in enumerate(layers):
                if isinstance(layer, ChebConv):
                    for k, th in enumerate(layer.theta):
                        named[f"{prefix}{li}.theta{k}"] = th
                    named[f"{prefix}{li}.bias"] = layer.bias
                else:
                    named[f"{prefix}{li}.weight"] = layer.weight
                    named[f"{prefix}{li}.bias"] = layer.bias
        return named

    # -- forward passes ------------------------------------------------

    def _encode_graph(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Input is vertex-major (V, B, 9)."""
        B = x.shape[1]
        c2 = self.cfg.conv_channels[1]
        h = self.enc_conv[0](x, self.lap)
        h = self.enc_conv[1](h, self.lap)
        h = reshape(transpose01(h), (B, self.neutral.vertex_count * c2))
        h = self.enc_fc[0](h)
        h = self.enc_fc[1](h)
        mu = narrow(h, 1, 0, self.cfg.latent)
        logvar = narrow(h, 1, self.cfg.latent, self.cfg.latent)
        return mu, logvar

    def _decode_graph(self, z: Tensor) -> Tensor:
        """Output is vertex-major (V, B, 9)."""
        B = z.shape[0]
        c2 = self.cfg.conv_channels[1]
        h = self.dec_fc[0](z)
        h = self.dec_fc[1](h)
        h = transpose01(reshape(h, (B, self.neutral.vertex_count, c2)))
        h = self.dec_conv[0](h, self.lap)
        return self.dec_conv[1](h, self.lap)

    # -- public numpy API ----------------------------------------------

    def _check_feature(self, values: np.ndarray) -> np.ndarray:
        arr = np.asarray(values, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.shape[1] != self.neutral.vertex_count or arr.shape[2] != 9:
            raise VaeError(
                f"feature shape {arr.shape[1:]} does not match model topology "
                f"({self.neutral.vertex_count} vertices)"
            )
        return arr

    def encode_batch(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = self._check_feature(features) / np.float32(self.feature_scale)
        mu, logvar = self._encode_graph(Tensor(np.ascontiguousarray(x.transpose(1, 0, 2))))
        return mu.data, logvar.data

    def encode(self, g: DRFeature) -> tuple[np.ndarray, np.ndarray]:
        """Posterior parameters for one feature; the mean is the inference code."""
        mu, logvar = self.encode_batch(g.values[None])
        return mu[0], logvar[0]

    def decode_batch(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float32)
        if z.ndim == 1:
            z = z[None]
        if not np.isfinite(z).all():
            raise VaeError("latent code must be finite")
        if z.shape[1] != self.cfg.latent:
            raise VaeError(f"latent dim {z.shape[1]} != {self.cfg.latent}")
        out = self._decode_graph(Tensor(z))
        return out.data.transpose(1, 0, 2) * np.float32(self.feature_scale)

    def decode(self, z: np.ndarray) -> DRFeature:
        return DRFeature(self.decode_batch(z)[0])

    def reconstruct_error_l1(self, features: np.ndarray) -> float:
        """Mean absolute reconstruction error of inference-path codes, raw units."""
        mu, _ = self.encode_batch(features)
        recon = self.decode_batch(mu)
        return float(np.abs(recon - self._check_feature(features)).mean())


def vae_losses(model: VaeModel, x: np.ndarray, target: np.ndarray, eps: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """Training-path losses on scaled batch-major features: (total, reconstruction, KL)."""
    x = np.ascontiguousarray(x.transpose(1, 0, 2))
    target = np.ascontiguousarray(target.transpose(1, 0, 2))
    xs = Tensor(x)
    mu, logvar = model._encode_graph(xs)
    sigma = exp(mul(logvar, 0.5))
    z = add(mu, mul(sigma, Tensor(eps.astype(np.float32))))
    recon = model._decode_graph(z)
    rec = tensor_mean(absolute(sub(recon, Tensor(target))))
    kld_per = mul(tensor_sum(sub(add(square(mu), exp(logvar)), add(Tensor(np.float32(1.0)), logvar)), axis=1), 0.5)
    kld = tensor_mean(kld_per)
    total = add(rec, mul(kld, model.cfg.kld_weight))
    return total, rec, kld


def _train(
    model: VaeModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    seed: int,
    metrics: list | None,
) -> VaeModel:
    n = len(inputs)
    if n < 1:
        raise VaeError("need at least one training sample")
    batch = min(cfg.batch, n)
    opt = Adam(model.params(), lr=cfg.lr)
    step = 0
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every)
        order = philox_rng(seed, _STREAM_SHUFFLE, epoch).permutation(n)
        rec_sum = kld_sum = 0.0
        n_batches = 0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            eps = philox_rng(seed, _STREAM_NOISE, step).normal(size=(len(idx), cfg.latent))
            total, rec, kld = vae_losses(model, inputs[idx], targets[idx], eps)
            if not np.isfinite(total.data):
                raise RuntimeError(f"non-finite VAE loss at epoch {epoch}, batch {n_batches}")
            opt.zero_grad()
            total.backward()
            opt.step()
            rec_sum += rec.item()
            kld_sum += kld.item()
            n_batches += 1
            step += 1
        model.epoch = epoch + 1
        if metrics is not None:
            metrics.append(
                {
                    "epoch": epoch + 1,
                    "rec_loss": rec_sum / n_batches,
                    "kld_loss": kld_sum / n_batches,
                    "lr": opt.lr,
                }
            )
    return model


def meshset_features(dataset: MeshSet, weights: EdgeWeights | None = None) -> np.ndarray:
    """Stack deformation features of every expression against the set's neutral."""
    if weights is None:
        weights = cotangent_weights(dataset.neutral)
    return np.stack([dr_encode(dataset.neutral, m, weights).values for m in dataset.expressions])


def feature_scale_for(features: np.ndarray) -> float:
    """Normalization scale: half the 99.9th percentile of absolute values.

    Deformation features are heavy-tailed (a few strongly deforming
    vertices dominate); scaling by the tail instead of the mean keeps
    the informative entries inside the tanh layers' linear range.
    """
    scale = float(np.percentile(np.abs(features), 99.9)) / 2.0
    return max(scale, 1e-8)


def train_avatar_vae(
    dataset: MeshSet,
    cfg: TrainConfig,
    seed: int,
    metrics: list | None = None,
    domain: str = "avatar",
    features: np.ndarray | None = None,
) -> VaeModel:
    """Train a per-character expression VAE that reconstructs its input feature."""
    if features is None:
        features = meshset_features(dataset)
    if len(features) < 1:
        raise VaeError("empty dataset")
    scale = feature_scale_for(features)
    model = VaeModel(dataset.neutral, cfg, domain=domain, seed=seed, feature_scale=scale)
    scaled = (features / scale).astype(np.float32)
    return _train(model, scaled, scaled, cfg, seed, metrics)


def train_human_vae(
    identity_sets: list[MeshSet],
    cfg: TrainConfig,
    seed: int,
    metrics: list | None = None,
) -> VaeModel:
    """Train the identity-disentangled human VAE.

    Every identity set must list the same expressions in the same order.
    The input is each identity's own feature; the reconstruction target
    is the feature of the vertex-averaged shape over identities, encoded
    against the averaged neutral.
    """
    if not identity_sets:
        raise VaeError("need at least one identity set")
    ref_ids = identity_sets[0].ids()
    for s in identity_sets[1:]:
        if s.ids() != ref_ids:
            raise VaeError("identity sets have misaligned expression lists")
        if s.neutral.vertex_count != identity_sets[0].neutral.vertex_count:
            raise MeshError("identity sets must share topology")

    avg_neutral = Mesh(
        np.mean([s.neutral.vertices for s in identity_sets], axis=0),
        identity_sets[0].neutral.faces,
        name="identity-average",
    )
    weights_avg = cotangent_weights(avg_neutral)

    inputs = []
    targets = []
    for e_idx in range(len(ref_ids)):
        avg_mesh = Mesh(
            np.mean([s.expressions[e_idx].vertices for s in identity_sets], axis=0),
            avg_neutral.faces,
        )
        g_ref = dr_encode(avg_neutral, avg_mesh, weights_avg).values
        for s in identity_sets:
            g_self = dr_encode(s.neutral, s.expressions[e_idx], cotangent_weights(s.neutral)).values
            inputs.append(g_self)
            targets.append(g_ref)
    inputs = np.stack(inputs)
    targets = np.stack(targets)

    scale = feature_scale_for(inputs)
    model = VaeModel(avg_neutral, cfg, domain="human", seed=seed, feature_scale=scale)
    return _train(model, (inputs / scale).astype(np.float32), (targets / scale).astype(np.float32), cfg, seed, metrics)


# -- retargeting-time feature helpers ---------------------------------


def encode_mesh(model: VaeModel, mesh: Mesh, neutral: Mesh | None = None) -> np.ndarray:
    """Inference code of a mesh: feature against the model (or given) neutral, then mu."""
    ref = model.neutral if neutral is None else neutral
    weights = model.edge_weights if neutral is None else cotangent_weights(ref)
    g = dr_encode(ref, mesh, weights)
    mu, _ = model.encode(g)
    return mu


def decode_to_mesh(model: VaeModel, z: np.ndarray, neutral: Mesh | None = None, anchor: int = 0) -> Mesh:
    """Decode a latent code and reconstruct vertices against the given neutral."""
    ref = model.neutral if neutral is None else neutral
    weights = model.edge_weights if neutral is None else cotangent_weights(ref)
    return dr_decode(ref, model.decode(z), weights, anchor=anchor)


# -- persistence -------------------------------------------------------


def save_vae(model: VaeModel, path: str | Path) -> None:
    meta = {
        "kind": "vae",
        "domain": model.domain,
        "seed": model.seed,
        "epoch": model.epoch,
        "feature_scale": model.feature_scale,
        "config": {
            "epochs": model.cfg.epochs,
            "batch": model.cfg.batch,
            "lr": model.cfg.lr,
            "lr_decay": model.cfg.lr_decay,
            "decay_every": model.cfg.decay_every,
            "kld_weight": model.cfg.kld_weight,
            "latent": model.cfg.latent,
            "hidden": model.cfg.hidden,
            "conv_channels": list(model.cfg.conv_channels),
            "cheb_order": model.cfg.cheb_order,
        },
        "topology": {"faces": model.neutral.faces.tolist(), "name": model.neutral.name},
    }
    arrays = {"neutral.vertices": model.neutral.vertices}
    for name, t in model.param_dict().items():
        arrays[f"param.{name}"] = t.data
    save_checkpoint(path, meta, arrays)


def load_vae(path: str | Path) -> VaeModel:
    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "vae":
        raise VaeError(f"{path} is not a VAE checkpoint")
    c = meta["config"]
    cfg = TrainConfig(
        epochs=c["epochs"],
        batch=c["batch"],
        lr=c["lr"],
        lr_decay=c["lr_decay"],
        decay_every=c["decay_every"],
        kld_weight=c["kld_weight"],
        latent=c["latent"],
        hidden=c["hidden"],
        conv_channels=tuple(c["conv_channels"]),
        cheb_order=c["cheb_order"],
    )
    neutral = Mesh(
        arrays["neutral.vertices"].astype(np.float64),
        np.array(meta["topology"]["faces"], dtype=np.int64),
        name=meta["topology"].get("name", ""),
    )
    model = VaeModel(neutral, cfg, domain=meta["domain"], seed=meta["seed"], feature_scale=meta["feature_scale"])
    model.epoch = meta["epoch"]
    for name, t in model.param_dict().items():
        t.data = arrays[f"param.{name}"].astype(np.float32)
    return model
