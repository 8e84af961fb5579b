"""Few-shot classifier: encoder, support aggregation, posterior heads, decoders.

A support set is encoded, pooled into one representation per class, and two
small heads map each representation to the mean and variance of a diagonal
Gaussian over that class's weight vector. Classifier weights are drawn by
reparameterization so gradients reach the heads, and a decoder turns drawn
weights plus a query feature into class logits.

Aggregation comes in two flavors: "prototype" pools raw features per class;
"labelled_r" first passes each (feature, one-hot label) pair through a
learned map, then pools.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ContractError, FormatError, ShapeError

SIGMA_MIN_SQ = 1e-6

ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}
AGGREGATIONS = ("prototype", "labelled_r")
DECODERS = ("linear", "mlp")
POOLINGS = ("mean", "sum")


@dataclass
class MlpParams:
    """Weight and bias tensors of one multilayer perceptron."""

    weights: list
    biases: list

    def layer_count(self) -> int:
        return len(self.weights)


@dataclass
class GaussianPosterior:
    """Per-class diagonal Gaussian over classifier weights: (C, d) mu and sigma2."""

    mu: Tensor
    sigma2: Tensor


def _init_mlp(rng: np.random.Generator, dims: list) -> MlpParams:
    # Uniform [-s, s] with s = sqrt(6 / (fan_in + fan_out)); zero biases.
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(Tensor(rng.uniform(-s, s, size=(fan_in, fan_out)), requires_grad=True))
        biases.append(Tensor(np.zeros((1, fan_out)), requires_grad=True))
    return MlpParams(weights, biases)


def _mlp_forward(p: MlpParams, x, activation, activate_last: bool) -> Tensor:
    h = as_tensor(x)
    last = p.layer_count() - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = ad.broadcast_add_row(ad.matmul(h, w), b)
        if i < last or activate_last:
            h = activation(h)
    return h


@dataclass
class ModelParams:
    """All trainable tensors plus the structural choices they were built for."""

    input_dim: int
    feature_dim: int
    num_ways: int
    activation: str
    aggregation: str
    pooling: str
    decoder: str
    encoder: MlpParams
    mean_head: MlpParams
    var_head: MlpParams
    r_net: Optional[MlpParams] = None
    decoder_net: Optional[MlpParams] = None

    def _nets(self):
        nets = [("encoder", self.encoder), ("mean_head", self.mean_head), ("var_head", self.var_head)]
        if self.r_net is not None:
            nets.append(("r_net", self.r_net))
        if self.decoder_net is not None:
            nets.append(("decoder_net", self.decoder_net))
        return nets

    def named_parameters(self) -> list:
        """(name, tensor) pairs in a fixed order."""
        out = []
        for net_name, net in self._nets():
            for i, (w, b) in enumerate(zip(net.weights, net.biases)):
                out.append((f"{net_name}.w{i}", w))
                out.append((f"{net_name}.b{i}", b))
        return out

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())


def init_model(
    rng: np.random.Generator,
    input_dim: int,
    feature_dim: int,
    num_ways: int,
    encoder_widths=(64, 64),
    activation: str = "tanh",
    aggregation: str = "prototype",
    pooling: str = "mean",
    decoder: str = "linear",
    mean_head_widths=(),
    var_head_widths=(),
    r_widths=(),
    decoder_widths=(32,),
) -> ModelParams:
    """Build freshly initialized parameters for one model configuration."""
    if activation not in ACTIVATIONS:
        raise ContractError(f"activation must be one of {tuple(ACTIVATIONS)}, got {activation!r}")
    if aggregation not in AGGREGATIONS:
        raise ContractError(f"aggregation must be one of {AGGREGATIONS}, got {aggregation!r}")
    if pooling not in POOLINGS:
        raise ContractError(f"pooling must be one of {POOLINGS}, got {pooling!r}")
    if decoder not in DECODERS:
        raise ContractError(f"decoder must be one of {DECODERS}, got {decoder!r}")

    d = feature_dim
    encoder = _init_mlp(rng, [input_dim, *encoder_widths, d])
    mean_head = _init_mlp(rng, [d, *mean_head_widths, d])
    var_head = _init_mlp(rng, [d, *var_head_widths, d])
    r_net = _init_mlp(rng, [d + num_ways, *r_widths, d]) if aggregation == "labelled_r" else None
    decoder_net = _init_mlp(rng, [2 * d, *decoder_widths, 1]) if decoder == "mlp" else None
    return ModelParams(
        input_dim=input_dim,
        feature_dim=d,
        num_ways=num_ways,
        activation=activation,
        aggregation=aggregation,
        pooling=pooling,
        decoder=decoder,
        encoder=encoder,
        mean_head=mean_head,
        var_head=var_head,
        r_net=r_net,
        decoder_net=decoder_net,
    )


def encode(params: ModelParams, x) -> Tensor:
    """Map an (n, input_dim) batch to (n, feature_dim) features.

    Every layer, including the last, is passed through the activation, so a
    zero-weight encoder yields all-zero features under tanh.
    """
    x = as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] != params.input_dim:
        raise ShapeError(f"encode: expected (n, {params.input_dim}) inputs, got {x.data.shape}")
    return _mlp_forward(params.encoder, x, ACTIVATIONS[params.activation], activate_last=True)


def pool_prototype(features, mode: str = "mean") -> Tensor:
    """Pool one class's (k, d) features into a (1, d) class representation."""
    if mode not in POOLINGS:
        raise ContractError(f"pooling mode must be one of {POOLINGS}, got {mode!r}")
    features = as_tensor(features)
    if features.data.ndim != 2 or features.data.shape[0] < 1:
        raise ContractError(f"pool_prototype: need a non-empty (k, d) block, got {features.data.shape}")
    k = features.data.shape[0]
    weight = 1.0 / k if mode == "mean" else 1.0
    pooler = Tensor(np.full((1, k), weight))
    return ad.matmul(pooler, features)


def _pooling_matrix(labels: np.ndarray, num_ways: int, mode: str) -> np.ndarray:
    counts = np.bincount(labels, minlength=num_ways)
    missing = [int(c) for c in range(num_ways) if counts[c] == 0]
    if missing:
        raise ContractError(f"support set has no examples for class(es) {missing}")
    p = np.zeros((num_ways, labels.size))
    for i, c in enumerate(labels):
        p[c, i] = 1.0 / counts[c] if mode == "mean" else 1.0
    return p


def aggregate_context(params: ModelParams, support_x, support_y) -> Tensor:
    """Per-class (C, d) representation of a labeled support set."""
    labels = np.asarray(support_y, dtype=np.int64)
    h = encode(params, support_x)
    if params.aggregation == "labelled_r":
        onehot = Tensor(np.eye(params.num_ways)[labels])
        z = ad.concat(h, onehot)
        # Hidden layers are activated; the final layer stays linear so the
        # map can reduce exactly to the raw features.
        h = _mlp_forward(params.r_net, z, ACTIVATIONS[params.activation], activate_last=False)
    pool = Tensor(_pooling_matrix(labels, params.num_ways, params.pooling))
    return ad.matmul(pool, h)


def amortize(params: ModelParams, rep) -> GaussianPosterior:
    """Map class representations to per-class Gaussian posterior parameters.

    The variance is softplus(raw) + SIGMA_MIN_SQ, positive by construction.
    """
    rep = as_tensor(rep)
    act = ACTIVATIONS[params.activation]
    mu = _mlp_forward(params.mean_head, rep, act, activate_last=False)
    raw = _mlp_forward(params.var_head, rep, act, activate_last=False)
    sigma2 = ad.add(ad.softplus(raw), ad.full_like(raw, SIGMA_MIN_SQ))
    return GaussianPosterior(mu=mu, sigma2=sigma2)


def sample_weights(post: GaussianPosterior, num_samples: int, rng: np.random.Generator) -> list:
    """Draw reparameterized weight samples: a list of (C, d) tensors.

    Each draw is mu + sqrt(sigma2) * eps with eps standard normal, so
    gradients flow into the posterior parameters while the noise stays
    fixed by the generator state.
    """
    if num_samples < 1:
        raise ContractError(f"sample_weights: need at least one sample, got {num_samples}")
    sigma = ad.sqrt_pos(post.sigma2)
    shape = post.mu.data.shape
    return [
        ad.add(post.mu, ad.mul(sigma, Tensor(rng.standard_normal(shape))))
        for _ in range(num_samples)
    ]


def decode_logits(params: ModelParams, phi, h_query) -> Tensor:
    """Class logits for queries given one weight draw.

    phi is (C, d); h_query is (n, d) (a single (d,) query is promoted).
    Linear mode returns inner products phi_c . h; mlp mode scores each
    (phi_c, h) pair with a shared network. Output is (n, C).
    """
    phi = as_tensor(phi)
    h = as_tensor(h_query)
    if h.data.ndim == 1:
        h = as_tensor(h.data.reshape(1, -1))
    if phi.data.ndim != 2 or h.data.ndim != 2 or phi.data.shape[1] != h.data.shape[1]:
        raise ShapeError(f"decode_logits: phi {phi.data.shape} incompatible with queries {h.data.shape}")
    if params.decoder == "linear":
        return ad.matmul(h, ad.transpose(phi))
    n = h.data.shape[0]
    num_ways = phi.data.shape[0]
    ones_col = Tensor(np.ones((n, 1)))
    act = ACTIVATIONS[params.activation]
    cols = []
    for c in range(num_ways):
        select = Tensor(np.eye(num_ways)[c : c + 1])
        phi_c = ad.matmul(ones_col, ad.matmul(select, phi))
        z = ad.concat(phi_c, h)
        cols.append(_mlp_forward(params.decoder_net, z, act, activate_last=False))
    return ad.concat(*cols)


# Checkpoint files are JSON: structural fields, the full experiment config,
# the seed and step, and every tensor as {shape, flat data}.

CHECKPOINT_FORMAT = "fewbayes-checkpoint"
CHECKPOINT_VERSION = 1


def _mlp_to_blob(p: MlpParams) -> dict:
    return {
        "weights": [{"shape": list(w.data.shape), "data": w.data.reshape(-1).tolist()} for w in p.weights],
        "biases": [{"shape": list(b.data.shape), "data": b.data.reshape(-1).tolist()} for b in p.biases],
    }


def _mlp_from_blob(blob: dict) -> MlpParams:
    def rebuild(entry):
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        return Tensor(arr, requires_grad=True)

    return MlpParams([rebuild(e) for e in blob["weights"]], [rebuild(e) for e in blob["biases"]])


def save_checkpoint(path: str, params: ModelParams, config: dict, seed: int, step: int):
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "seed": int(seed),
        "step": int(step),
        "structure": {
            "input_dim": params.input_dim,
            "feature_dim": params.feature_dim,
            "num_ways": params.num_ways,
            "activation": params.activation,
            "aggregation": params.aggregation,
            "pooling": params.pooling,
            "decoder": params.decoder,
        },
        "params": {name: _mlp_to_blob(net) for name, net in params._nets()},
    }
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str):
    """Read a checkpoint; returns (params, config, seed, step)."""
    if not os.path.exists(path):
        raise FormatError(f"checkpoint not found: {path}")
    try:
        with open(path) as fh:
            blob = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"checkpoint {path} is not valid JSON: {e}") from e
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"checkpoint {path}: unexpected format field {blob.get('format')!r}")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint {path}: unsupported version {blob.get('version')!r}")
    try:
        s = blob["structure"]
        nets = blob["params"]
        params = ModelParams(
            input_dim=int(s["input_dim"]),
            feature_dim=int(s["feature_dim"]),
            num_ways=int(s["num_ways"]),
            activation=s["activation"],
            aggregation=s["aggregation"],
            pooling=s["pooling"],
            decoder=s["decoder"],
            encoder=_mlp_from_blob(nets["encoder"]),
            mean_head=_mlp_from_blob(nets["mean_head"]),
            var_head=_mlp_from_blob(nets["var_head"]),
            r_net=_mlp_from_blob(nets["r_net"]) if "r_net" in nets else None,
            decoder_net=_mlp_from_blob(nets["decoder_net"]) if "decoder_net" in nets else None,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"checkpoint {path}: missing or malformed field: {e}") from e
    return params, blob.get("config", {}), int(blob["seed"]), int(blob["step"])
