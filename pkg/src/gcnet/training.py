"""Joint classification + reconstruction loss, Adam, and the training loop.

Losses are normalized per conversation (1/L over valid utterances) and then
averaged over the batch, so conversations of different lengths carry equal
weight. Padding slots are excluded everywhere through validity bits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import evaluation
from .autodiff import Rng, Tensor, derive_seed
from .convgraph import build_graph
from .dataio import MODALITIES


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 1e-5
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    missing_rate: float = 0.0
    lower_bound: bool = False   # train only on utterances with every modality present

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be > 0 and weight_decay >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    moments: dict = field(default_factory=dict)  # name -> (m, v)


@dataclass
class EpochStats:
    epoch: int
    loss_total: float
    loss_cls: float
    loss_rec: float
    val_waf: float
    val_mse: dict
    realized_rate: float


# ---------------------------------------------------------------------------
# losses


def classification_loss(logits: Tensor, labels, validity) -> Tensor:
    """Mean negative log-likelihood over valid utterances, from logits via
    a stabilized log-sum-exp."""
    validity = np.asarray(validity, dtype=np.float64)
    num_valid = validity.sum()
    if num_valid == 0:
        raise ValueError("classification_loss: zero valid utterances")
    nll = ad.sub(ad.logsumexp_rows(logits), ad.take_per_row(logits, labels))
    masked = ad.hadamard(nll, Tensor(validity[:, None]))
    return ad.scale(ad.sum_all(masked), 1.0 / num_valid)


def reconstruction_loss(reconstructions: dict, features: dict, bits: dict,
                        validity) -> Tensor:
    """Squared error at missing positions only, 1/(d_m * L) per modality,
    summed over modalities. Exactly zero when nothing is missing."""
    validity = np.asarray(validity, dtype=np.float64)
    num_valid = validity.sum()
    if num_valid == 0:
        raise ValueError("reconstruction_loss: zero valid utterances")
    total = None
    for m in MODALITIES:
        miss = (1.0 - np.asarray(bits[m], dtype=np.float64)) * validity
        if not miss.any():
            continue
        d_m = reconstructions[m].shape[1]
        diff = ad.sub(reconstructions[m], Tensor(np.asarray(features[m], dtype=np.float64)))
        masked = ad.hadamard(diff, Tensor(np.repeat(miss[:, None], d_m, axis=1)))
        term = ad.scale(ad.sum_all(ad.hadamard(masked, masked)), 1.0 / (d_m * num_valid))
        total = term if total is None else ad.add(total, term)
    return total if total is not None else Tensor(np.asarray(0.0))


def joint_loss(cls_loss: Tensor, rec_loss: Tensor, variant: str) -> Tensor:
    if variant == "no_reconstruction":
        return cls_loss
    return ad.add(cls_loss, rec_loss)


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params: dict, state: AdamState, learning_rate: float,
              weight_decay: float) -> None:
    """Classic Adam with the L2 term folded into the gradient before the
    moment updates. Parameters with no gradient this step use zero."""
    state.step += 1
    t = state.step
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay:
            g = g + weight_decay * p.data
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[name]
        m[:] = state.beta1 * m + (1 - state.beta1) * g
        v[:] = state.beta2 * v + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p.data -= learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# training loop


def _complete_bits(mask, length):
    """1 where every modality is present (lower-bound training granularity)."""
    return np.array([int(all(mask.bits[m][i] for m in MODALITIES))
                     for i in range(length)], dtype=np.int64)


def conversation_loss(conv, mask, graph, model_config, params, training,
                      rng, lower_bound=False):
    """Joint loss for one conversation; returns (loss, cls value, rec value)."""
    from . import model as model_mod
    out = model_mod.forward(conv, mask, graph, model_config, params,
                            training=training, rng=rng)
    validity = np.ones(conv.length, dtype=np.int64)
    if lower_bound:
        validity = _complete_bits(mask, conv.length)
        if validity.sum() == 0:
            return None
    cls = classification_loss(out.logits, conv.labels, validity)
    rec = reconstruction_loss(out.reconstructions, conv.features, mask.bits, validity)
    return joint_loss(cls, rec, model_config.variant), float(cls.data), float(rec.data)


def train(model_config, datasets: dict, masks: dict, train_config: TrainConfig):
    """Train on datasets['train'], select the epoch with the best validation
    weighted F1, and return (best params, per-epoch history)."""
    from . import model as model_mod
    from .dataio import realized_missing_rate

    train_set, val_set = datasets["train"], datasets["val"]
    train_masks, val_masks = masks["train"], masks["val"]
    params = model_mod.init_params(model_config, derive_seed(train_config.seed, "init"))
    graphs = [build_graph(c.speakers, model_config.window, model_config.num_speakers)
              for c in train_set.conversations]

    usable = list(range(len(train_set.conversations)))
    if train_config.lower_bound:
        usable = [i for i in usable
                  if _complete_bits(train_masks[i], train_set.conversations[i].length).sum() > 0]
        if not usable:
            raise ValueError(
                "lower_bound training has no utterances with all modalities present "
                f"(missing rate {train_config.missing_rate})")

    state = AdamState()
    shuffle_rng = Rng(derive_seed(train_config.seed, "shuffle"))
    dropout_rng = Rng(derive_seed(train_config.seed, "dropout"))
    realized = realized_missing_rate(train_masks)

    history = []
    best_waf, best_params = -1.0, None
    for epoch in range(1, train_config.epochs + 1):
        order = list(usable)
        shuffle_rng.generator.shuffle(order)
        sums = np.zeros(3)  # total, cls, rec
        count = 0
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start:start + train_config.batch_size]
            losses = []
            for idx in batch:
                result = conversation_loss(
                    train_set.conversations[idx], train_masks[idx], graphs[idx],
                    model_config, params, training=True, rng=dropout_rng,
                    lower_bound=train_config.lower_bound)
                if result is None:
                    continue
                loss, cls_val, rec_val = result
                losses.append(loss)
                sums += (float(loss.data), cls_val, rec_val)
                count += 1
            if not losses:
                continue
            total = losses[0]
            for extra in losses[1:]:
                total = ad.add(total, extra)
            total = ad.scale(total, 1.0 / len(losses))
            for p in params.values():
                p.zero_grad()
            ad.backward(total)
            adam_step(params, state, train_config.learning_rate,
                      train_config.weight_decay)

        val_result = evaluation.evaluate(model_config, params, val_set, val_masks)
        history.append(EpochStats(
            epoch=epoch,
            loss_total=sums[0] / max(count, 1),
            loss_cls=sums[1] / max(count, 1),
            loss_rec=sums[2] / max(count, 1),
            val_waf=val_result.metrics.waf,
            val_mse=val_result.imputation_mse,
            realized_rate=realized))
        if val_result.metrics.waf > best_waf:  # ties keep the earlier epoch
            best_waf = val_result.metrics.waf
            best_params = {name: p.data.copy() for name, p in params.items()}

    from .autodiff import Param
    best = {name: Param(name, value) for name, value in best_params.items()}
    return best, history


def save_history(history, path) -> None:
    mse_keys = sorted({m for row in history for m in row.val_mse})
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_total", "loss_cls", "loss_rec", "val_waf"]
                        + [f"val_mse_{m}" for m in mse_keys] + ["realized_eta"])
        for row in history:
            writer.writerow([row.epoch, repr(row.loss_total), repr(row.loss_cls),
                             repr(row.loss_rec), repr(row.val_waf)]
                            + [("" if row.val_mse.get(m) is None else repr(row.val_mse[m]))
                               for m in mse_keys]
                            + [repr(row.realized_rate)])
