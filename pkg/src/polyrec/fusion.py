"""Multimodal fusion regressors: early fusion, gated late fusion, and MMoE.

All three map an input built from the language and/or graph embedding to one
prediction per task (Tg, Tm, Eg). Training works in standardized label space;
``predict`` and ``evaluate_r2`` return raw units.
"""
import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .dataset import GRAPH_DIM, LANG_DIM, TASKS, DatasetError, TaskStats, destandardize, standardize
from .neuralcore import (
    AdamW,
    PlateauScheduler,
    adamw_step,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    mlp_init,
    save_checkpoint,
)

log = logging.getLogger(__name__)

ARCHITECTURES = ("early", "gated_late", "mmoe")
MODALITIES = ("lang", "graph", "both")
N_TASKS = len(TASKS)


class UnsupportedArchitecture(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-5
    weight_decay: float = 1e-3
    epochs: int = 100
    dropout: float = 0.4
    seed: int = 0
    sched_factor: float = 0.5
    sched_patience: int = 5
    min_lr: float = 1e-7

    def validate(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass
class FusionModel:
    architecture: str
    modality: str
    nets: dict
    n_experts: int = 0
    lang_dim: int = LANG_DIM
    graph_dim: int = GRAPH_DIM
    stats: TaskStats | None = None

    @property
    def input_dim(self):
        return {"lang": self.lang_dim, "graph": self.graph_dim,
                "both": self.lang_dim + self.graph_dim}[self.modality]

    def params(self):
        return [p for net in self.nets.values() for p in net.params()]

    def copy(self):
        return FusionModel(self.architecture, self.modality,
                           {k: v.copy() for k, v in self.nets.items()},
                           self.n_experts, self.lang_dim, self.graph_dim, self.stats)

    def descriptor(self):
        return {
            "architecture": self.architecture,
            "modality": self.modality,
            "n_experts": self.n_experts,
            "lang_dim": self.lang_dim,
            "graph_dim": self.graph_dim,
            "tasks": list(TASKS),
            "stats": None if self.stats is None else self.stats.to_dict(),
        }


def _check_modality(modality):
    if modality not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")


def _in_dim(modality, lang_dim, graph_dim):
    return {"lang": lang_dim, "graph": graph_dim, "both": lang_dim + graph_dim}[modality]


def build_early_fusion(modality="both", seed=0, hidden=(256, 128),
                       lang_dim=LANG_DIM, graph_dim=GRAPH_DIM):
    """One shared MLP ``[in, *hidden, 3]`` over the selected modalities."""
    _check_modality(modality)
    rng = np.random.default_rng(seed)
    trunk = mlp_init([_in_dim(modality, lang_dim, graph_dim), *hidden, N_TASKS], rng)
    return FusionModel("early", modality, {"trunk": trunk}, 0, lang_dim, graph_dim)


def build_gated_late(modality="both", seed=0, expert_hidden=(256, 128), gate_hidden=(128,),
                     lang_dim=LANG_DIM, graph_dim=GRAPH_DIM):
    """Per-modality expert MLPs mixed per task by a sigmoid gate over both inputs."""
    _check_modality(modality)
    if modality != "both":
        raise UnsupportedArchitecture("gated late fusion needs both modalities")
    rng = np.random.default_rng(seed)
    nets = {
        "expert_lang": mlp_init([lang_dim, *expert_hidden, N_TASKS], rng),
        "expert_graph": mlp_init([graph_dim, *expert_hidden, N_TASKS], rng),
        "gate": mlp_init([lang_dim + graph_dim, *gate_hidden, N_TASKS], rng),
    }
    return FusionModel("gated_late", modality, nets, 0, lang_dim, graph_dim)


def build_mmoe(modality="both", seed=0, n_experts=4, expert_hidden=(256, 256), expert_out=256,
               gate_hidden=(256,), tower_hidden=(128,), zero_gate_output=False,
               lang_dim=LANG_DIM, graph_dim=GRAPH_DIM):
    """Shared experts, one softmax gate and one tower per task.

    ``zero_gate_output`` zeroes the gates' last layer so every task starts with
    uniform expert weights.
    """
    _check_modality(modality)
    if n_experts < 1:
        raise ValueError(f"n_experts must be >= 1, got {n_experts}")
    rng = np.random.default_rng(seed)
    d_in = _in_dim(modality, lang_dim, graph_dim)
    nets = {}
    for i in range(n_experts):
        nets[f"expert{i}"] = mlp_init([d_in, *expert_hidden, expert_out], rng)
    for k in range(N_TASKS):
        gate = mlp_init([d_in, *gate_hidden, n_experts], rng)
        if zero_gate_output:
            gate.weights[-1][:] = 0.0
        nets[f"gate{k}"] = gate
    for k in range(N_TASKS):
        nets[f"tower{k}"] = mlp_init([expert_out, *tower_hidden, 1], rng)
    return FusionModel("mmoe", modality, nets, n_experts, lang_dim, graph_dim)


def build_model(architecture, modality="both", seed=0, **kwargs):
    builders = {"early": build_early_fusion, "gated_late": build_gated_late, "mmoe": build_mmoe}
    if architecture not in builders:
        raise UnsupportedArchitecture(f"unknown architecture {architecture!r}")
    return builders[architecture](modality=modality, seed=seed, **kwargs)


def model_input(model, lang, graph):
    """Assemble the model's input from per-modality matrices (or vectors)."""
    if model.modality == "lang":
        return np.asarray(lang, dtype=np.float64)
    if model.modality == "graph":
        return np.asarray(graph, dtype=np.float64)
    return np.concatenate([np.asarray(lang, dtype=np.float64),
                           np.asarray(graph, dtype=np.float64)], axis=-1)


def dataset_input(model, dataset, indices=None):
    if not dataset.has_embeddings:
        raise DatasetError("dataset has no embeddings attached")
    if (dataset.lang.shape[1], dataset.graph.shape[1]) != (model.lang_dim, model.graph_dim):
        raise DatasetError(
            f"embedding dims ({dataset.lang.shape[1]}, {dataset.graph.shape[1]}) do not match "
            f"model dims ({model.lang_dim}, {model.graph_dim})")
    if indices is None:
        return model_input(model, dataset.lang, dataset.graph)
    return model_input(model, dataset.lang[indices], dataset.graph[indices])


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def forward(model, x, training=False, dropout=0.0, rng=None, gate_override=None):
    """Batch forward pass returning ``(y, gates, cache)``.

    ``y`` is (B, 3). ``gates`` is None for early fusion, (B, 3) sigmoid values for
    gated late fusion, and (B, 3, n_experts) softmax weights for MMoE.
    ``gate_override`` replaces the gate network's output (no backward then).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"input has shape {x.shape}, expected (*, {model.input_dim})")
    nets = model.nets
    fw = dict(dropout=dropout, training=training, rng=rng)
    cache = {"override": gate_override is not None}

    if model.architecture == "early":
        y, cache["trunk"] = mlp_forward(nets["trunk"], x, **fw)
        return y, None, cache

    if model.architecture == "gated_late":
        L = model.lang_dim
        a, cache["expert_lang"] = mlp_forward(nets["expert_lang"], x[:, :L], **fw)
        b, cache["expert_graph"] = mlp_forward(nets["expert_graph"], x[:, L:], **fw)
        if gate_override is None:
            logits, cache["gate"] = mlp_forward(nets["gate"], x, **fw)
            g = _sigmoid(logits)
        else:
            g = np.broadcast_to(np.asarray(gate_override, dtype=np.float64), a.shape)
        cache.update(a=a, b=b, g=g)
        return g * a + (1.0 - g) * b, g, cache

    if model.architecture == "mmoe":
        n = model.n_experts
        experts = []
        for i in range(n):
            e, cache[f"expert{i}"] = mlp_forward(nets[f"expert{i}"], x, **fw)
            experts.append(e)
        E = np.stack(experts)  # (n, B, d)
        B = x.shape[0]
        gates = np.empty((B, N_TASKS, n))
        y = np.empty((B, N_TASKS))
        for k in range(N_TASKS):
            if gate_override is None:
                logits, cache[f"gate{k}"] = mlp_forward(nets[f"gate{k}"], x, **fw)
                G = _softmax(logits)
            else:
                G = np.broadcast_to(np.asarray(gate_override, dtype=np.float64), (B, N_TASKS, n))[:, k, :]
            gates[:, k, :] = G
            mix = np.einsum("bn,nbd->bd", G, E)
            out, cache[f"tower{k}"] = mlp_forward(nets[f"tower{k}"], mix, **fw)
            y[:, k] = out[:, 0]
        cache.update(E=E, gates=gates)
        return y, gates, cache

    raise UnsupportedArchitecture(f"unknown architecture {model.architecture!r}")


def fusion_forward(model, x, training=False, dropout=0.0, rng=None, gate_override=None):
    """Predict standardized properties; returns ``(y, gates)``. Accepts one vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    y, gates, _ = forward(model, x[None, :] if single else x, training, dropout, rng, gate_override)
    if single:
        return y[0], None if gates is None else gates[0]
    return y, gates


def backward(model, cache, grad_y):
    """Gradients of the loss w.r.t. ``model.params()``, in the same order."""
    if cache["override"]:
        raise ValueError("cannot backpropagate through an overridden gate")
    nets = model.nets
    grads = {}
    if model.architecture == "early":
        grads["trunk"], _ = mlp_backward(nets["trunk"], cache["trunk"], grad_y, need_input_grad=False)

    elif model.architecture == "gated_late":
        a, b, g = cache["a"], cache["b"], cache["g"]
        grads["expert_lang"], _ = mlp_backward(
            nets["expert_lang"], cache["expert_lang"], grad_y * g, need_input_grad=False)
        grads["expert_graph"], _ = mlp_backward(
            nets["expert_graph"], cache["expert_graph"], grad_y * (1.0 - g), need_input_grad=False)
        dlogit = grad_y * (a - b) * g * (1.0 - g)
        grads["gate"], _ = mlp_backward(nets["gate"], cache["gate"], dlogit, need_input_grad=False)

    elif model.architecture == "mmoe":
        E, gates = cache["E"], cache["gates"]
        dE = np.zeros_like(E)
        for k in range(N_TASKS):
            G = gates[:, k, :]
            grads[f"tower{k}"], dmix = mlp_backward(
                nets[f"tower{k}"], cache[f"tower{k}"], grad_y[:, k:k + 1])
            dE += np.einsum("bn,bd->nbd", G, dmix)
            dG = np.einsum("bd,nbd->bn", dmix, E)
            dlogit = G * (dG - np.sum(G * dG, axis=1, keepdims=True))
            grads[f"gate{k}"], _ = mlp_backward(
                nets[f"gate{k}"], cache[f"gate{k}"], dlogit, need_input_grad=False)
        for i in range(model.n_experts):
            grads[f"expert{i}"], _ = mlp_backward(
                nets[f"expert{i}"], cache[f"expert{i}"], dE[i], need_input_grad=False)
    else:
        raise UnsupportedArchitecture(f"unknown architecture {model.architecture!r}")
    return [g for name in nets for g in grads[name]]


def masked_mse_grad(preds, labels, mask):
    """``(loss, d loss / d preds)`` averaged over present entries only."""
    preds = np.ascontiguousarray(preds, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    if preds.shape != labels.shape or preds.shape != mask.shape or preds.ndim != 2:
        raise ValueError(
            f"shapes differ: preds {preds.shape}, labels {labels.shape}, mask {mask.shape}")
    return kernels.masked_mse_grad(preds, labels, mask)


def masked_mse(preds, labels, mask):
    return masked_mse_grad(preds, labels, mask)[0]


def predict_standardized(model, x, batch_size=2048):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty((x.shape[0], N_TASKS))
    for s in range(0, x.shape[0], batch_size):
        out[s:s + batch_size] = forward(model, x[s:s + batch_size])[0]
    return out


def predict(model, dataset, indices=None):
    """Raw-unit predictions (Tg K, Tm K, Eg eV) for the given records."""
    if model.stats is None:
        raise ValueError("model has no task statistics; train it first")
    return destandardize(predict_standardized(model, dataset_input(model, dataset, indices)), model.stats)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def _eval_loss(model, x, z, mask):
    preds = predict_standardized(model, x)
    return masked_mse(preds, np.nan_to_num(z), mask)


def train(model, dataset, assignment, config, stats=None):
    """Minibatch AdamW on the masked loss with plateau LR decay.

    Returns ``(best_model, history)`` where ``best_model`` is a copy holding the
    parameters with the lowest validation loss seen; ``model`` is not modified.
    """
    config.validate()
    stats = stats if stats is not None else model.stats
    if stats is None:
        raise ValueError("train needs task statistics")
    work = model.copy()
    work.stats = stats

    train_idx = assignment.indices("train")
    val_idx = assignment.indices("val")
    mask = dataset.mask
    train_idx = train_idx[mask[train_idx].any(axis=1)]
    if train_idx.size == 0:
        raise DatasetError("training split has no labelled records")
    if not mask[val_idx].any():
        raise DatasetError("validation split has no labels")

    x_all = dataset_input(work, dataset)
    z_all = np.nan_to_num(standardize(dataset.labels, stats))
    x_val, z_val, m_val = x_all[val_idx], z_all[val_idx], mask[val_idx]

    rng = np.random.default_rng(config.seed)
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    sched = PlateauScheduler(config.lr, config.sched_factor, config.sched_patience, config.min_lr)
    params = work.params()
    best_val, best_params = math.inf, [p.copy() for p in params]
    history = []

    for epoch in range(1, config.epochs + 1):
        lr_used = opt.lr
        order = rng.permutation(train_idx)
        total, count = 0.0, 0
        for s in range(0, order.size, config.batch_size):
            b = order[s:s + config.batch_size]
            mb = mask[b]
            n_present = int(mb.sum())
            if n_present == 0:
                continue
            y, _, cache = forward(work, x_all[b], training=True, dropout=config.dropout, rng=rng)
            loss, gy = masked_mse_grad(y, z_all[b], mb)
            adamw_step(params, backward(work, cache, gy), opt)
            total += loss * n_present
            count += n_present
        train_loss = total / count
        val_loss = _eval_loss(work, x_val, z_val, m_val)
        if val_loss < best_val:
            best_val = val_loss
            best_params = [p.copy() for p in params]
        sched.step(val_loss)
        opt.lr = sched.lr
        history.append(EpochRecord(epoch, train_loss, val_loss, lr_used))
        log.debug("epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss, val_loss, lr_used)

    for p, best in zip(params, best_params):
        p[...] = best
    return work, history


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])


def r2_scores(y_true, y_pred, mask):
    """Per-task R^2 over present entries; NaN where fewer than 2 labels exist."""
    out = np.full(y_true.shape[1], math.nan)
    for k in range(y_true.shape[1]):
        m = mask[:, k]
        if m.sum() < 2:
            continue
        y, p = y_true[m, k], y_pred[m, k]
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        if ss_tot == 0.0:
            continue
        out[k] = 1.0 - float(np.sum((y - p) ** 2)) / ss_tot
    return out


def evaluate_r2(model, dataset, assignment, split="test"):
    """Per-task R^2 in raw units on one split; NaN marks an undefined task."""
    idx = assignment.indices(split)
    if idx.size == 0:
        return np.full(N_TASKS, math.nan)
    preds = predict(model, dataset, idx)
    return r2_scores(dataset.labels[idx], preds, dataset.mask[idx])


def expert_utilization(model, dataset, assignment=None, split="test", batch_size=2048):
    """Mean MMoE gate weight per (task, expert) over a split, shape (3, n_experts)."""
    if model.architecture != "mmoe":
        raise UnsupportedArchitecture("expert utilization needs an MMoE model")
    idx = np.arange(len(dataset)) if assignment is None else assignment.indices(split)
    if idx.size == 0:
        raise DatasetError(f"split {split!r} is empty")
    x = dataset_input(model, dataset, idx)
    total = np.zeros((N_TASKS, model.n_experts))
    for s in range(0, x.shape[0], batch_size):
        _, gates, _ = forward(model, x[s:s + batch_size])
        total += gates.sum(axis=0)
    return total / idx.size


def save_model(path, model):
    save_checkpoint(path, model.architecture, model.nets, model.descriptor())


def load_model(path):
    arch, nets, desc = load_checkpoint(path)
    if arch not in ARCHITECTURES or desc.get("architecture") != arch:
        raise UnsupportedArchitecture(f"{path}: checkpoint architecture {arch!r} not recognised")
    stats = None if desc.get("stats") is None else TaskStats.from_dict(desc["stats"])
    model = FusionModel(arch, desc["modality"], nets, desc["n_experts"],
                        desc["lang_dim"], desc["graph_dim"], stats)
    return model
