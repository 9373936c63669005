"""The GCNet network.

Pipeline per conversation: availability-masked concatenated features ->
Bi-LSTM encoder -> two relation-typed graph branches (speaker pairs and
past/present/future) over a shared window-limited edge set -> concatenated
fusion through a second Bi-LSTM -> softmax classification head plus one
linear reconstruction head per modality.

Ablation variants zero-fill the removed graph branch so the fusion encoder
keeps the same width and parameter count across variants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Rng, Tensor
from .convgraph import NUM_TEMPORAL_TYPES, TypedGraph
from .dataio import MODALITIES

VARIANTS = ("full", "no_sgnn", "no_tgnn", "coupled", "no_reconstruction")


@dataclass
class GCNetConfig:
    latent_dim: int = 100            # each Bi-LSTM direction gets half
    window: int = 2
    modality_dims: dict = None
    num_classes: int = 4
    num_speakers: int = 2
    dropout: float = 0.5
    variant: str = "full"

    def __post_init__(self):
        if self.modality_dims is None:
            self.modality_dims = {m: 16 for m in MODALITIES}
        self.validate()

    def validate(self):
        if self.latent_dim < 4 or self.latent_dim % 2 != 0:
            raise ValueError(f"latent_dim must be even and >= 4, got {self.latent_dim}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def input_dim(self) -> int:
        return sum(self.modality_dims[m] for m in MODALITIES)

    def to_record(self):
        return {"latent_dim": self.latent_dim, "window": self.window,
                "modality_dims": dict(self.modality_dims),
                "num_classes": self.num_classes, "num_speakers": self.num_speakers,
                "dropout": self.dropout, "variant": self.variant}

    @classmethod
    def from_record(cls, rec):
        rec = dict(rec)
        rec["modality_dims"] = {m: int(d) for m, d in rec["modality_dims"].items()}
        return cls(**rec)


@dataclass
class ForwardOutput:
    node_repr: Tensor       # L x D initial representations
    speaker_repr: Tensor    # L x D speaker-branch output (zeros when ablated)
    temporal_repr: Tensor   # L x D temporal-branch output (zeros when ablated)
    fused: Tensor           # L x D fusion encoder output
    logits: Tensor          # L x c pre-softmax scores
    probs: Tensor           # L x c row-stochastic
    reconstructions: dict   # modality -> L x d_m


# ---------------------------------------------------------------------------
# parameters

# fused LSTM gate layout along columns: input, forget, candidate, output
_GATE_ORDER = "ifgo"


def _glorot(rng: Rng, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.generator.uniform(-bound, bound, size=(rows, cols))


def _lstm_params(params, rng: Rng, prefix: str, input_dim: int, hidden: int):
    for direction in ("fwd", "bwd"):
        sub = rng.derive(f"{prefix}.{direction}")
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0  # forget-gate bias
        params[f"{prefix}.{direction}.W"] = Param(
            f"{prefix}.{direction}.W", _glorot(sub.derive("W"), input_dim, 4 * hidden))
        params[f"{prefix}.{direction}.U"] = Param(
            f"{prefix}.{direction}.U", _glorot(sub.derive("U"), hidden, 4 * hidden))
        params[f"{prefix}.{direction}.b"] = Param(f"{prefix}.{direction}.b", bias)


def init_params(config: GCNetConfig, seed: int) -> dict:
    """Glorot-uniform weights, zero biases except LSTM forget gates at 1."""
    rng = Rng(seed)
    dim = config.latent_dim
    params: dict[str, Param] = {}
    _lstm_params(params, rng, "enc1", config.input_dim, dim // 2)
    _lstm_params(params, rng, "enc2", 3 * dim, dim // 2)

    if config.variant == "coupled":
        count = NUM_TEMPORAL_TYPES * config.num_speakers ** 2
        for r in range(count):
            params[f"stgnn.W{r}"] = Param(
                f"stgnn.W{r}", _glorot(rng.derive(f"stgnn.{r}"), dim, dim))
    else:
        for r in range(config.num_speakers ** 2):
            params[f"sgnn.W{r}"] = Param(
                f"sgnn.W{r}", _glorot(rng.derive(f"sgnn.{r}"), dim, dim))
        for r in range(NUM_TEMPORAL_TYPES):
            params[f"tgnn.W{r}"] = Param(
                f"tgnn.W{r}", _glorot(rng.derive(f"tgnn.{r}"), dim, dim))

    params["cls.W"] = Param("cls.W", _glorot(rng.derive("cls"), dim, config.num_classes))
    params["cls.b"] = Param("cls.b", np.zeros(config.num_classes))
    for m in MODALITIES:
        params[f"rec.{m}.W"] = Param(
            f"rec.{m}.W", _glorot(rng.derive(f"rec.{m}"), dim, config.modality_dims[m]))
        params[f"rec.{m}.b"] = Param(f"rec.{m}.b", np.zeros(config.modality_dims[m]))
    return params


# ---------------------------------------------------------------------------
# layers


def _lstm_direction(x: Tensor, weight: Param, recurrent: Param, bias: Param,
                    reverse: bool):
    length = x.shape[0]
    hidden = recurrent.shape[0]
    projected = ad.add_bias(ad.matmul(x, weight), bias)
    h = Tensor(np.zeros((1, hidden)))
    c = Tensor(np.zeros((1, hidden)))
    steps = []
    order = range(length - 1, -1, -1) if reverse else range(length)
    for t in order:
        gates = ad.add(ad.slice_rows(projected, t, t + 1), ad.matmul(h, recurrent))
        i = ad.sigmoid(ad.slice_cols(gates, 0, hidden))
        f = ad.sigmoid(ad.slice_cols(gates, hidden, 2 * hidden))
        g = ad.tanh(ad.slice_cols(gates, 2 * hidden, 3 * hidden))
        o = ad.sigmoid(ad.slice_cols(gates, 3 * hidden, 4 * hidden))
        c = ad.add(ad.hadamard(f, c), ad.hadamard(i, g))
        h = ad.hadamard(o, ad.tanh(c))
        steps.append(h)
    if reverse:
        steps.reverse()
    return ad.concat_rows(steps)


def bilstm(x: Tensor, params: dict, prefix: str) -> Tensor:
    """Forward and backward hidden sequences, concatenated along columns."""
    if x.shape[1] != params[f"{prefix}.fwd.W"].shape[0]:
        raise ad.ShapeError(
            f"bilstm input width {x.shape[1]} does not match "
            f"{prefix} weights {params[f'{prefix}.fwd.W'].shape}")
    fwd = _lstm_direction(x, params[f"{prefix}.fwd.W"], params[f"{prefix}.fwd.U"],
                          params[f"{prefix}.fwd.b"], reverse=False)
    bwd = _lstm_direction(x, params[f"{prefix}.bwd.W"], params[f"{prefix}.bwd.U"],
                          params[f"{prefix}.bwd.b"], reverse=True)
    return ad.concat_last([fwd, bwd])


def rgcn_forward(hidden: Tensor, graph: TypedGraph, family: str,
                 weights: dict) -> Tensor:
    """Relation-conditioned aggregation: relu of the sum over relations of
    the per-relation neighbor mean projected by that relation's matrix.

    `weights` maps relation id -> Param (D x D). Empty relations contribute
    nothing. Representations are rows, so projection is mean_row @ W_r.
    """
    if graph.length != hidden.shape[0]:
        raise ad.ShapeError(
            f"graph has {graph.length} nodes but hidden has {hidden.shape[0]} rows")
    table = graph.neighbors_by_relation(family)
    if set(table) != set(weights):
        raise ValueError(
            f"relation mismatch: graph family {family!r} has {len(table)} relations, "
            f"got {len(weights)} weight matrices")
    total = None
    for r, per_node in table.items():
        averaging = np.zeros((graph.length, graph.length))
        for i, sources in enumerate(per_node):
            if sources:
                averaging[i, sources] = 1.0 / len(sources)
        if not averaging.any():
            continue
        term = ad.matmul(ad.matmul(Tensor(averaging), hidden), weights[r])
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = Tensor(np.zeros(hidden.shape))
    return ad.relu(total)


def masked_input(features: dict, availability: dict) -> np.ndarray:
    """Concatenate per-modality features with missing blocks set to exact zeros."""
    blocks = []
    for m in MODALITIES:
        bits = np.asarray(availability[m], dtype=np.float64)[:, None]
        blocks.append(np.asarray(features[m], dtype=np.float64) * bits)
    return np.concatenate(blocks, axis=1)


def forward(conversation, mask, graph: TypedGraph, config: GCNetConfig,
            params: dict, training: bool = False, rng: Rng | None = None) -> ForwardOutput:
    """Run the whole network on one conversation.

    `conversation` needs `.features` (modality -> (L, d_m)); `mask` needs
    `.bits` (modality -> availability bits). Dropout is applied to both
    encoder outputs only when training.
    """
    if training and config.dropout > 0 and rng is None:
        raise ValueError("training with dropout requires an rng")
    x = Tensor(masked_input(conversation.features, mask.bits))
    h = bilstm(x, params, "enc1")
    # graph branches read the raw encoder output; dropout regularizes the
    # skip copy entering the fusion encoder
    h_skip = ad.dropout(h, config.dropout, training, rng)

    zeros = Tensor(np.zeros(h.shape))
    if config.variant == "no_sgnn":
        speaker_out = zeros
    elif config.variant == "coupled":
        count = NUM_TEMPORAL_TYPES * config.num_speakers ** 2
        speaker_out = rgcn_forward(h, graph, "coupled",
                                   {r: params[f"stgnn.W{r}"] for r in range(count)})
    else:
        speaker_out = rgcn_forward(
            h, graph, "speaker",
            {r: params[f"sgnn.W{r}"] for r in range(config.num_speakers ** 2)})
    if config.variant in ("no_tgnn", "coupled"):
        temporal_out = zeros
    else:
        temporal_out = rgcn_forward(
            h, graph, "temporal",
            {r: params[f"tgnn.W{r}"] for r in range(NUM_TEMPORAL_TYPES)})

    fused_in = ad.concat_last([h_skip, speaker_out, temporal_out])
    q = bilstm(fused_in, params, "enc2")
    q = ad.dropout(q, config.dropout, training, rng)

    logits = ad.add_bias(ad.matmul(q, params["cls.W"]), params["cls.b"])
    probs = ad.softmax_rows(logits)
    recon = {m: ad.add_bias(ad.matmul(q, params[f"rec.{m}.W"]), params[f"rec.{m}.b"])
             for m in MODALITIES}
    return ForwardOutput(node_repr=h, speaker_repr=speaker_out,
                         temporal_repr=temporal_out, fused=q,
                         logits=logits, probs=probs, reconstructions=recon)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, config: GCNetConfig, params: dict) -> None:
    payload = {"config": config.to_record(),
               "params": {name: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
                          for name, p in sorted(params.items())}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    config = GCNetConfig.from_record(payload["config"])
    expected = {name: p.shape for name, p in init_params(config, seed=0).items()}
    params = {}
    for name, rec in payload["params"].items():
        shape = tuple(rec["shape"])
        if name not in expected or expected[name] != shape:
            raise ValueError(f"checkpoint parameter {name} has shape {shape}, "
                             f"expected {expected.get(name)}")
        params[name] = Param(name, np.asarray(rec["data"]).reshape(shape))
    missing = set(expected) - set(params)
    if missing:
        raise ValueError(f"checkpoint is missing parameters: {sorted(missing)}")
    return config, params
