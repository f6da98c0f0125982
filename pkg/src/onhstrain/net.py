"""Compact PointNet binary classifier with in-module backprop.

Shared per-point dense+relu layers, a global coordinate-wise max pool,
and a small dense head produce one pre-sigmoid logit per cloud.  All
arithmetic is float64 so finite-difference gradient checks are tight.
Reverse mode is written out by hand because both training and the
input-gradient saliency need it; the max pool routes gradient to the
first argmax point per channel.

Input features per point: x, y, z (BMO-radius units), 5-way tissue
one-hot, thickness / BMO radius, and strain in percent (dropped when a
model is configured without the strain channel).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import OnhPointCloud, augment

STRAIN_SCALE = 100.0  # strain enters the feature vector as percent
N_FEATURES_WITH_STRAIN = 10
N_FEATURES_WITHOUT_STRAIN = 9


@dataclass
class ModelConfig:
    in_features: int = N_FEATURES_WITH_STRAIN
    point_mlp_widths: tuple[int, ...] = (32, 64, 256)
    head_widths: tuple[int, ...] = (64, 1)
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        self.point_mlp_widths = tuple(int(w) for w in self.point_mlp_widths)
        self.head_widths = tuple(int(w) for w in self.head_widths)
        if self.head_widths[-1] != 1:
            raise ValueError("final head width must be 1")
        if any(w < 1 for w in self.point_mlp_widths + self.head_widths):
            raise ValueError("all layer widths must be >= 1")
        if self.activation != "relu":
            raise ValueError("only the relu rectifier is supported")
        if self.in_features not in (N_FEATURES_WITH_STRAIN, N_FEATURES_WITHOUT_STRAIN):
            raise ValueError("in_features must be 10 (with strain) or 9 (without)")

    @property
    def uses_strain(self) -> bool:
        return self.in_features == N_FEATURES_WITH_STRAIN


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    learning_rate: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    use_strain: bool = True
    augment_n_out: int = 3000

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ModelParams:
    config: ModelConfig
    point_layers: list  # [(W (out, in), b (out,)), ...]
    head_layers: list

    def all_layers(self):
        return self.point_layers + self.head_layers


def init_params(cfg: ModelConfig) -> ModelParams:
    """Uniform init scaled by fan-in, seeded."""
    rng = np.random.default_rng(cfg.seed)

    def layer(n_in, n_out):
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        b = rng.uniform(-bound, bound, size=n_out)
        return [w, b]

    point_layers = []
    n_in = cfg.in_features
    for w_out in cfg.point_mlp_widths:
        point_layers.append(layer(n_in, w_out))
        n_in = w_out
    head_layers = []
    for w_out in cfg.head_widths:
        head_layers.append(layer(n_in, w_out))
        n_in = w_out
    return ModelParams(cfg, point_layers, head_layers)


def features(cloud: OnhPointCloud, use_strain: bool) -> np.ndarray:
    """(N, F) model input matrix for one cloud."""
    cols = [cloud.points, cloud.tissue, (cloud.thickness_um / cloud.bmo_radius_um)[:, None]]
    if use_strain:
        if cloud.strain is None:
            raise ValueError("cloud has no strain channel; attach_strain first")
        cols.append((STRAIN_SCALE * cloud.strain)[:, None])
    return np.concatenate(cols, axis=1)


def _features_for(params: ModelParams, cloud: OnhPointCloud) -> np.ndarray:
    x = features(cloud, params.config.uses_strain)
    if x.shape[1] != params.config.in_features:
        raise ValueError(f"feature count {x.shape[1]} != configured {params.config.in_features}")
    return x


def _forward_batch(params: ModelParams, x: np.ndarray):
    """x: (B, N, F) -> (logits (B,), cache)."""
    b, n, f = x.shape
    h = x.reshape(b * n, f)
    point_acts = [h]
    for w, bias in params.point_layers:
        z = h @ w.T + bias
        h = np.maximum(z, 0.0)
        point_acts.append(h)
    c = h.shape[1]
    per_point = h.reshape(b, n, c)
    arg = per_point.argmax(axis=1)  # (B, C), first index on ties
    pooled = np.take_along_axis(per_point, arg[:, None, :], axis=1)[:, 0, :]

    head_acts = [pooled]
    g = pooled
    for i, (w, bias) in enumerate(params.head_layers):
        z = g @ w.T + bias
        g = z if i == len(params.head_layers) - 1 else np.maximum(z, 0.0)
        head_acts.append(g)
    logits = g[:, 0]
    cache = {"x_shape": (b, n, f), "point_acts": point_acts, "arg": arg, "head_acts": head_acts}
    return logits, cache


def _backward_batch(params: ModelParams, cache, dlogits: np.ndarray):
    """Exact reverse pass; returns (grads per layer, input grads (B, N, F))."""
    b, n, f = cache["x_shape"]
    head_acts = cache["head_acts"]
    point_acts = cache["point_acts"]
    arg = cache["arg"]

    head_grads = [None] * len(params.head_layers)
    d = dlogits[:, None]  # (B, 1)
    for i in range(len(params.head_layers) - 1, -1, -1):
        w, _ = params.head_layers[i]
        a_prev = head_acts[i]
        if i != len(params.head_layers) - 1:
            d = d * (head_acts[i + 1] > 0)
        head_grads[i] = [d.T @ a_prev, d.sum(axis=0)]
        d = d @ w

    # Max pool: gradient lands on the argmax point of each channel only.
    c = d.shape[1]
    dpp = np.zeros((b, n, c))
    np.put_along_axis(dpp, arg[:, None, :], d[:, None, :], axis=1)
    d = dpp.reshape(b * n, c)

    point_grads = [None] * len(params.point_layers)
    for i in range(len(params.point_layers) - 1, -1, -1):
        w, _ = params.point_layers[i]
        d = d * (point_acts[i + 1] > 0)
        point_grads[i] = [d.T @ point_acts[i], d.sum(axis=0)]
        d = d @ w
    return point_grads, head_grads, d.reshape(b, n, f)


def forward(params: ModelParams, cloud: OnhPointCloud):
    """Single-cloud forward pass -> (logit, cache)."""
    x = _features_for(params, cloud)
    logits, cache = _forward_batch(params, x[None])
    return float(logits[0]), cache


def bce_loss(logit: float, label: int) -> float:
    """Numerically stable binary cross-entropy on a pre-sigmoid logit."""
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    z = float(logit)
    return max(z, 0.0) - z * label + np.log1p(np.exp(-abs(z)))


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def backward(params: ModelParams, cloud: OnhPointCloud, label: int):
    """Gradients of the BCE loss w.r.t. every parameter and input feature.

    Returns (point_layer_grads, head_layer_grads, input_grads (N, F)).
    """
    x = _features_for(params, cloud)
    logits, cache = _forward_batch(params, x[None])
    dlogit = _sigmoid(logits) - label
    pg, hg, dx = _backward_batch(params, cache, dlogit)
    return pg, hg, dx[0]


def input_gradient(params: ModelParams, cloud: OnhPointCloud) -> np.ndarray:
    """(N, F) gradient of the raw logit w.r.t. the input features (saliency)."""
    x = _features_for(params, cloud)
    _, cache = _forward_batch(params, x[None])
    _, _, dx = _backward_batch(params, cache, np.ones(1))
    return dx[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _mean_weighted_loss(params, clouds, labels, weights, chunk=32):
    total = 0.0
    for start in range(0, len(clouds), chunk):
        xs = np.stack([_features_for(params, c) for c in clouds[start : start + chunk]])
        logits, _ = _forward_batch(params, xs)
        y = labels[start : start + chunk]
        w = weights[start : start + chunk]
        losses = np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
        total += float(np.sum(w * losses))
    return total / len(clouds)


def train_model(
    dataset: list[OnhPointCloud], mcfg: ModelConfig, tcfg: TrainConfig
) -> tuple[ModelParams, list[float]]:
    """Momentum-SGD training loop; deterministic per (data, seeds).

    Per epoch: seeded shuffle, fresh augmentation per sample, batched
    forward/backward, one parameter update per mini-batch.  Class
    imbalance is handled by inverse-frequency sample weights.  History
    records the weighted mean loss on the raw (un-augmented) training
    clouds at the end of each epoch; the final-epoch weights are
    returned as-is, no early stopping.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    labels = np.array([c.label for c in dataset], dtype=np.float64)
    if any(c.label not in (0, 1) for c in dataset):
        raise ValueError("every cloud needs a binary label")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(dataset):
        raise ValueError("training data must contain both classes")
    if mcfg.uses_strain != tcfg.use_strain:
        raise ValueError("ModelConfig.in_features disagrees with TrainConfig.use_strain")

    n = len(dataset)
    class_w = {1: n / (2.0 * n_pos), 0: n / (2.0 * (n - n_pos))}
    weights = np.array([class_w[int(y)] for y in labels])

    params = init_params(mcfg)
    shuffle_rng, aug_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(tcfg.seed).spawn(2)]
    velocity = [[np.zeros_like(w), np.zeros_like(b)] for w, b in params.all_layers()]

    history = []
    for _ in range(tcfg.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, tcfg.batch_size):
            idx = order[start : start + tcfg.batch_size]
            batch = [augment(dataset[i], aug_rng, n_out=tcfg.augment_n_out) for i in idx]
            xs = np.stack([_features_for(params, c) for c in batch])
            logits, cache = _forward_batch(params, xs)
            dlogits = weights[idx] * (_sigmoid(logits) - labels[idx]) / len(idx)
            pg, hg, _ = _backward_batch(params, cache, dlogits)
            for layer, grad, vel in zip(params.all_layers(), pg + hg, velocity):
                for k in range(2):
                    vel[k] = tcfg.momentum * vel[k] + grad[k]
                    layer[k] -= tcfg.learning_rate * vel[k]
        history.append(_mean_weighted_loss(params, dataset, labels, weights))
    return params, history


def predict_proba(params: ModelParams, cloud: OnhPointCloud) -> float:
    logit, _ = forward(params, cloud)
    return float(_sigmoid(np.array([logit]))[0])


# ---------------------------------------------------------------------------
# Checkpoints: JSON header + little-endian float64 weight blob
# ---------------------------------------------------------------------------

def save_model(stem, params: ModelParams, epoch: int) -> None:
    stem = Path(stem)
    cfg = params.config
    header = {
        "in_features": cfg.in_features,
        "point_mlp_widths": list(cfg.point_mlp_widths),
        "head_widths": list(cfg.head_widths),
        "activation": cfg.activation,
        "seed": cfg.seed,
        "epoch": epoch,
    }
    stem.with_suffix(".json").write_text(json.dumps(header, sort_keys=True) + "\n")
    blob = np.concatenate([a.ravel() for w, b in params.all_layers() for a in (w, b)])
    stem.with_suffix(".bin").write_bytes(blob.astype("<f8").tobytes())


def load_model(stem) -> ModelParams:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    cfg = ModelConfig(
        in_features=header["in_features"],
        point_mlp_widths=tuple(header["point_mlp_widths"]),
        head_widths=tuple(header["head_widths"]),
        activation=header["activation"],
        seed=header["seed"],
    )
    params = init_params(cfg)
    flat = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    pos = 0
    for layer in params.all_layers():
        for k in range(2):
            size = layer[k].size
            layer[k] = flat[pos : pos + size].reshape(layer[k].shape).copy()
            pos += size
    if pos != flat.size:
        raise ValueError("checkpoint blob size does not match the config")
    return params


def save_history_csv(path, history: list[float]) -> None:
    lines = ["epoch,loss"] + [f"{i + 1},{v!r}" for i, v in enumerate(history)]
    Path(path).write_text("\n".join(lines) + "\n")
