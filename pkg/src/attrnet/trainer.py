"""Momentum SGD training, the MCNN -> AUX two-stage schedule, evaluation,
and checkpoint serialization."""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .data import iterate_batches, preprocess_batch, compute_mean
from .errors import CheckpointError, ConfigError, DataError, DivergenceError
from .metrics import MetricsReport, accuracy, majority_baseline, sigmoid_ce, threshold
from .topology import (AUX_NODE, Network, NetworkTopology, attach_aux, build_independent,
                       build_mcnn, init_params, no_freeze)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MTCKPT1\n"


@dataclass
class HyperParams:
    batch_size: int = 100
    epochs: int = 22
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_step_epoch: Optional[int] = 15
    lr_gamma: float = 0.1
    seed: int = 0
    precision: str = "float32"
    # AUX stage; None falls back to the stage-1 value
    aux_epochs: Optional[int] = None
    aux_lr: Optional[float] = None
    aux_weight_decay: Optional[float] = None
    eval_batch_size: int = 500

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    def lr_at(self, epoch, base=None):
        base = self.lr if base is None else base
        if self.lr_step_epoch is not None and epoch >= self.lr_step_epoch:
            return base * self.lr_gamma
        return base

    def aux_stage(self):
        return dataclasses.replace(
            self,
            epochs=self.aux_epochs or self.epochs,
            lr=self.lr if self.aux_lr is None else self.aux_lr,
            weight_decay=self.weight_decay if self.aux_weight_decay is None else self.aux_weight_decay,
        )

    def to_dict(self):
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class SGD:
    """Momentum SGD with L2 weight decay: ``v = mu*v + lr*(g + wd*p); p -= v``."""

    def __init__(self, params, momentum=0.9, weight_decay=0.0, freeze=None):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.freeze = freeze or {}
        self.velocity = {k: np.zeros_like(v) for k, v in params.items() if not self.freeze.get(k, False)}

    def step(self, grads, lr):
        for name, v in self.velocity.items():
            p = self.params[name]
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            v *= self.momentum
            v += lr * g
            p -= v


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    topology: NetworkTopology
    params: "OrderedDict[str, np.ndarray]"
    freeze: Dict[str, bool] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    mean: Optional[np.ndarray] = None

    def tensors(self):
        out = OrderedDict(self.params)
        if self.mean is not None:
            out["__mean__"] = self.mean
        return out

    def save(self, path):
        entries, offset, blobs = [], 0, []
        for name, arr in self.tensors().items():
            dtype = "<f8" if arr.dtype == np.float64 else "<f4"
            raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {
            "format": 1,
            "topology": self.topology.config(),
            "freeze": self.freeze,
            "metadata": self.metadata,
            "tensors": entries,
        }
        text = json.dumps(header, sort_keys=True, indent=1).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(text)))
            fh.write(text)
            for raw in blobs:
                fh.write(raw)

    @classmethod
    def load(cls, path, expected_topology=None):
        with open(path, "rb") as fh:
            buf = fh.read()
        if not buf.startswith(CHECKPOINT_MAGIC):
            raise CheckpointError(f"{path}: not a checkpoint file")
        pos = len(CHECKPOINT_MAGIC)
        if len(buf) < pos + 8:
            raise CheckpointError(f"{path}: truncated header")
        (hlen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        try:
            header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from None
        blob = memoryview(buf)[pos + hlen:]
        try:
            topology = NetworkTopology.from_config(header["topology"])
        except Exception as exc:
            raise CheckpointError(f"{path}: invalid embedded topology ({exc})") from None
        if expected_topology is not None and expected_topology.config() != topology.config():
            raise CheckpointError(f"{path}: checkpoint topology does not match the requested configuration")

        shapes = topology.param_shapes()
        params, mean = OrderedDict(), None
        for e in header["tensors"]:
            name = e["name"]
            end = e["offset"] + e["nbytes"]
            if end > len(blob):
                raise CheckpointError(f"{path}: truncated data, cannot read tensor {name!r}")
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            if count * np.dtype(e["dtype"]).itemsize != e["nbytes"]:
                raise CheckpointError(f"{path}: tensor {name!r} size does not match its shape")
            arr = np.frombuffer(blob[e["offset"]:end], dtype=e["dtype"]).reshape(e["shape"]).copy()
            arr = arr.astype(arr.dtype.newbyteorder("="))
            if name == "__mean__":
                mean = arr
                continue
            if name not in shapes:
                raise CheckpointError(f"{path}: unexpected tensor {name!r}")
            if tuple(arr.shape) != shapes[name]:
                raise CheckpointError(
                    f"{path}: tensor {name!r} has shape {tuple(arr.shape)}, topology expects {shapes[name]}")
            params[name] = arr
        missing = [n for n in shapes if n not in params]
        if missing:
            raise CheckpointError(f"{path}: missing tensor {missing[0]!r}")
        return cls(topology, params, {k: bool(v) for k, v in header["freeze"].items()},
                   header["metadata"], mean)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_curve: List[float]
    seconds: float


def label_columns(topology, dataset):
    if tuple(dataset.vocab.names) != tuple(topology.vocab.names):
        raise CheckpointError("dataset vocabulary does not match the network vocabulary")
    return np.array([dataset.vocab.index[a] for a in topology.output_attrs])


def _crop(topology):
    return tuple(topology.input_shape[1:])


def _aux_only(topology, freeze):
    return topology.has_aux and all(
        freeze.get(name, False) for name in topology.param_shapes() if not name.startswith(AUX_NODE + "."))


def base_scores(topology, params, images, mean, batch_size=500, mode="eval", rng=None):
    """Scores of the network below AUX (or the whole network if it has none)."""
    net = Network(topology, params)
    crop = _crop(topology)
    out = []
    for start in range(0, len(images), batch_size):
        x = preprocess_batch(images[start:start + batch_size], mean, crop, rng, mode)
        if topology.has_aux:
            x = _forward_below_aux(net, x)
        else:
            x = net.forward(x.astype(T.get_dtype(), copy=False), "eval")
        out.append(x)
    return np.concatenate(out) if out else np.zeros((0, len(topology.output_map)), dtype=T.get_dtype())


def _forward_below_aux(net, x):
    topo = net.topology
    acts = {}
    for node in topo.nodes.values():
        if node.name == AUX_NODE:
            continue
        inp = x if node.parent is None else acts[node.parent]
        acts[node.name] = net.layers[node.name].forward(inp, "eval")
    return np.stack([acts[n][:, u] for n, u in topo.output_map], axis=1)


def predict_scores(topology, params, images, mean, batch_size=500):
    net = Network(topology, params)
    crop = _crop(topology)
    out = []
    for start in range(0, len(images), batch_size):
        x = preprocess_batch(images[start:start + batch_size], mean, crop, None, "eval")
        out.append(net.forward(x.astype(T.get_dtype(), copy=False), "eval"))
    return np.concatenate(out)


def eval_loss(topology, params, dataset, mean, split="train", batch_size=500):
    idx = dataset.indices(split)
    scores = predict_scores(topology, params, dataset.images[idx], mean, batch_size)
    cols = label_columns(topology, dataset)
    labels = dataset.labels.rows(idx)
    loss, _ = sigmoid_ce(scores, type(labels)(labels.values[:, cols], labels.mask[:, cols]))
    return loss


def train(topology, dataset, hyper, freeze=None, params=None, mean=None, stage="train"):
    """Mini-batch momentum SGD on the unfrozen parameters.

    Returns a :class:`TrainResult` whose ``loss_curve`` holds the per-epoch
    mean of train-mode batch losses. When everything below AUX is frozen,
    the frozen base runs once per image in eval mode and only AUX is
    optimized over the cached scores.
    """
    start_time = time.perf_counter()
    with T.precision(hyper.precision):
        dtype = T.get_dtype()
        train_idx = dataset.indices("train")
        if train_idx.size == 0:
            raise DataError("training split is empty")
        freeze = dict(freeze or no_freeze(topology))
        if params is None:
            params = init_params(topology, hyper.seed)
        params = OrderedDict((k, np.array(v, dtype=dtype, copy=True)) for k, v in params.items())
        if mean is None:
            mean = compute_mean(dataset, "train")
        mean = np.asarray(mean, dtype=dtype)
        cols = label_columns(topology, dataset)
        labels = dataset.labels
        crop = _crop(topology)
        trainable = [k for k in params if not freeze.get(k, False)]
        opt = SGD(params, hyper.momentum, hyper.weight_decay, freeze)
        net = Network(topology, params)

        aux_only = _aux_only(topology, freeze)
        cached = None
        if aux_only:
            deterministic = crop == tuple(dataset.images.shape[2:])
            if deterministic:
                cached = base_scores(topology, params, dataset.images[train_idx], mean, hyper.eval_batch_size)
                pos = {int(i): k for k, i in enumerate(train_idx)}
            aux_layer = net.layers[AUX_NODE]

        curve = []
        for epoch in range(hyper.epochs):
            lr = hyper.lr_at(epoch)
            drop_rng = np.random.default_rng([hyper.seed, epoch, 1])
            crop_rng = np.random.default_rng([hyper.seed, epoch, 2])
            losses, sizes = [], []
            for b, idx in enumerate(iterate_batches(train_idx, hyper.batch_size, epoch, hyper.seed)):
                y = labels.rows(idx)
                y = type(y)(y.values[:, cols], y.mask[:, cols])
                if aux_only:
                    if cached is not None:
                        s = cached[[pos[int(i)] for i in idx]]
                    else:
                        s = base_scores(topology, params, dataset.images[idx], mean,
                                        hyper.eval_batch_size, "train", crop_rng)
                    if topology.arch.aux_input == "sigmoid":
                        s_in = 0.5 * (1.0 + np.tanh(0.5 * s))
                    else:
                        s_in = s
                    scores = aux_layer.forward(s_in, "train")
                else:
                    x = preprocess_batch(dataset.images[idx], mean, crop, crop_rng, "train").astype(dtype, copy=False)
                    scores = net.forward(x, "train", drop_rng)
                loss, grad = sigmoid_ce(scores, y)
                if not np.isfinite(loss):
                    raise DivergenceError(epoch, b, loss)
                losses.append(loss)
                sizes.append(len(idx))
                if not trainable:
                    continue
                if aux_only:
                    aux_layer.backward(grad, need_input_grad=False)
                    grads = {f"{AUX_NODE}.W": aux_layer.grads["W"]}
                else:
                    grads = net.backward(grad, freeze)
                opt.step(grads, lr)
            epoch_loss = float(np.average(losses, weights=sizes))
            curve.append(epoch_loss)
            log.info("%s epoch %d/%d loss %.6f lr %g", stage, epoch + 1, hyper.epochs, epoch_loss, lr)

        metadata = {
            "epochs": hyper.epochs,
            "loss_history": curve,
            "seed": hyper.seed,
            "hyper": hyper.to_dict(),
            "stage": stage,
        }
        ckpt = Checkpoint(topology, params, freeze, metadata, mean)
    return TrainResult(ckpt, curve, time.perf_counter() - start_time)


@dataclass
class TwoStageResult:
    checkpoint: Checkpoint
    stage1: TrainResult
    stage2: TrainResult
    stage1_final_eval_loss: float
    stage2_initial_eval_loss: float
    stage2_final_eval_loss: float


def train_two_stage(dataset, hyper, arch=None, groups=None, vocab=None):
    """Train MCNN, then attach an identity AUX and train it with MCNN frozen."""
    vocab = vocab or dataset.vocab
    mcnn = build_mcnn(vocab, groups, arch)
    stage1 = train(mcnn, dataset, hyper, stage="mcnn")
    p1 = stage1.checkpoint.params
    mean = stage1.checkpoint.mean

    aux_topo, freeze = attach_aux(mcnn)
    with T.precision(hyper.precision):
        params = OrderedDict((k, v.copy()) for k, v in p1.items())
        params.update({k: v for k, v in init_params(aux_topo, hyper.seed).items() if k.startswith(AUX_NODE + ".")})
        final1 = eval_loss(mcnn, p1, dataset, mean)
        initial2 = eval_loss(aux_topo, params, dataset, mean)
    h2 = hyper.aux_stage()
    stage2 = train(aux_topo, dataset, h2, freeze=freeze, params=params, mean=mean, stage="aux")
    ckpt = stage2.checkpoint
    ckpt.metadata["loss_history_stage1"] = stage1.loss_curve
    with T.precision(hyper.precision):
        final2 = eval_loss(aux_topo, ckpt.params, dataset, mean)
    return TwoStageResult(ckpt, stage1, stage2, final1, initial2, final2)


def evaluate(checkpoint, dataset, split="test", batch_size=500):
    """Eval-mode accuracy per output attribute, majority baseline and loss."""
    topo = checkpoint.topology
    cols = label_columns(topo, dataset)
    idx = dataset.indices(split)
    if idx.size == 0:
        raise DataError(f"split {split!r} is empty")
    mean = checkpoint.mean if checkpoint.mean is not None else compute_mean(dataset, "train")
    dtype = checkpoint.params[next(iter(checkpoint.params))].dtype
    with T.precision("float64" if dtype == np.float64 else "float32"):
        scores = predict_scores(topo, checkpoint.params, dataset.images[idx], mean.astype(dtype), batch_size)
    labels = dataset.labels.rows(idx)
    labels = type(labels)(labels.values[:, cols], labels.mask[:, cols])
    loss, _ = sigmoid_ce(scores.astype(np.float64), labels)
    acc = accuracy(threshold(scores), labels)
    train_idx = dataset.indices("train")
    if train_idx.size:
        tl = dataset.labels.rows(train_idx)
        base = majority_baseline(type(tl)(tl.values[:, cols], tl.mask[:, cols]), labels)
    else:
        base = np.full(len(cols), np.nan)
    return MetricsReport(list(topo.output_attrs), acc, base, loss)


def build_topology(variant, vocab, groups, arch, attribute=None):
    if variant == "independent":
        return build_independent(vocab, attribute, arch, groups)
    topo = build_mcnn(vocab, groups, arch)
    if variant == "mcnn_aux":
        topo, _ = attach_aux(topo)
    return topo
