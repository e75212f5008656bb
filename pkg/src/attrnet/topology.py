"""Attribute vocabulary, attribute groups and the three network variants.

A :class:`NetworkTopology` is a tree of named layer nodes. The shared trunk
(Conv1, Conv2) fans out into Conv3 branches, each branch feeds the FC stacks
of the groups it serves, and every group ends in an output layer with one
unit per attribute. The MCNN-AUX variant adds a bias-free 40x40 linear layer
over the concatenated scores.

Parameters live in a flat dict keyed ``"<node>.<name>"`` (``"conv1.W"``).
"""

from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ContractError, DimensionError
from .layers import (LRN, Conv, Dropout, FullyConnected, MaxPool, ReLU, build_layer,
                     spec_from_dict, spec_to_dict)

OWN_BRANCH_GROUPS = ("Gender", "Nose", "Mouth", "Eyes", "Face")
REST_BRANCH = "Rest"
VARIANTS = ("independent", "mcnn", "mcnn_aux")


# ---------------------------------------------------------------------------
# Vocabulary and groups
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttributeVocab:
    names: Tuple[str, ...]
    index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) != 40:
            raise ConfigError(f"attribute vocabulary must have 40 entries, got {len(names)}")
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ConfigError(f"duplicate attribute names: {dupes}")
        object.__setattr__(self, "index", {n: i for i, n in enumerate(names)})

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self.index

    @classmethod
    def celeba(cls):
        text = resources.files("attrnet.resources").joinpath("celeba_attributes.txt").read_text()
        return cls(tuple(text.split()))


@dataclass(frozen=True)
class GroupSpec:
    """Ordered attribute groups plus the Conv3 branch each group hangs off.

    Groups named in ``OWN_BRANCH_GROUPS`` get their own Conv3 unless
    ``branches`` says otherwise; all remaining groups share ``Conv3Rest``.
    """

    groups: Tuple[Tuple[str, Tuple[str, ...]], ...]
    branches: Tuple[Tuple[str, Tuple[str, ...]], ...] = ()

    def __post_init__(self):
        groups = tuple((g, tuple(attrs)) for g, attrs in self.groups)
        object.__setattr__(self, "groups", groups)
        names = [g for g, _ in groups]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate group names in {names}")
        if not self.branches:
            own = [(g, (g,)) for g in names if g in OWN_BRANCH_GROUPS]
            rest = tuple(g for g in names if g not in OWN_BRANCH_GROUPS)
            branches = own + ([(REST_BRANCH, rest)] if rest else [])
        else:
            branches = [(b, tuple(gs)) for b, gs in self.branches]
        served = [g for _, gs in branches for g in gs]
        if sorted(served) != sorted(names):
            raise ConfigError(f"branches {branches} must serve each group exactly once")
        object.__setattr__(self, "branches", tuple(branches))

    @property
    def group_map(self):
        return OrderedDict(self.groups)

    def branch_of(self, group):
        for b, gs in self.branches:
            if group in gs:
                return b
        raise KeyError(group)

    def validate(self, vocab):
        seen: Dict[str, str] = {}
        duplicated, unknown = [], []
        for g, attrs in self.groups:
            for a in attrs:
                if a not in vocab:
                    unknown.append(a)
                elif a in seen:
                    duplicated.append(a)
                seen.setdefault(a, g)
        missing = [a for a in vocab.names if a not in seen]
        if missing or duplicated or unknown:
            raise ConfigError(
                f"groups do not partition the vocabulary: missing={missing}, "
                f"duplicated={sorted(set(duplicated))}, unknown={unknown}"
            )

    @classmethod
    def parse(cls, text, source="<groups>"):
        groups = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'GroupName: attr, ...'")
            name, rest = line.split(":", 1)
            attrs = tuple(a.strip() for a in rest.split(",") if a.strip())
            if not name.strip() or not attrs:
                raise ConfigError(f"{source}:{lineno}: empty group name or attribute list")
            groups.append((name.strip(), attrs))
        return cls(tuple(groups))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.parse(fh.read(), source=str(path))

    @classmethod
    def celeba(cls):
        text = resources.files("attrnet.resources").joinpath("celeba_groups.txt").read_text()
        return cls.parse(text, source="celeba_groups.txt")

    def dumps(self):
        return "".join(f"{g}: {', '.join(attrs)}\n" for g, attrs in self.groups)


# ---------------------------------------------------------------------------
# Architecture configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvStage:
    filters: int
    kernel: int
    stride: int
    pad: int
    pool_kernel: int
    pool_stride: int


@dataclass(frozen=True)
class ArchConfig:
    input_shape: Tuple[int, int, int]
    conv1: ConvStage
    conv2: ConvStage
    conv3: ConvStage
    fc_units: int = 512
    dropout: float = 0.5
    lrn: LRN = LRN(5, 1e-4, 0.75, 2.0)
    # "scores": AUX reads raw scores; "sigmoid": AUX reads sigmoid(scores)
    aux_input: str = "scores"

    @classmethod
    def paper(cls):
        return cls(
            input_shape=(3, 227, 227),
            conv1=ConvStage(75, 7, 4, 0, 3, 2),
            conv2=ConvStage(200, 5, 1, 2, 3, 2),
            conv3=ConvStage(300, 3, 1, 1, 5, 5),
            fc_units=512,
        )

    @classmethod
    def tiny(cls):
        return cls(
            input_shape=(3, 16, 16),
            conv1=ConvStage(8, 3, 1, 1, 2, 2),
            conv2=ConvStage(16, 3, 1, 1, 2, 2),
            conv3=ConvStage(24, 3, 1, 1, 2, 2),
            fc_units=32,
            # 32-unit heads are too narrow for 0.5 dropout; see README.
            dropout=0.0,
        )

    @classmethod
    def preset(cls, name):
        if name == "paper":
            return cls.paper()
        if name == "tiny":
            return cls.tiny()
        raise ConfigError(f"unknown scale {name!r}; expected 'paper' or 'tiny'")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["lrn"] = spec_to_dict(self.lrn)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("conv1", "conv2", "conv3"):
            d[key] = ConvStage(**d[key])
        d["lrn"] = spec_from_dict(d["lrn"])
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    name: str
    spec: object
    parent: Optional[str]
    in_shape: Tuple[int, ...]
    out_shape: Tuple[int, ...]


@dataclass
class NetworkTopology:
    variant: str
    arch: ArchConfig
    vocab: AttributeVocab
    groups: GroupSpec
    nodes: "OrderedDict[str, Node]"
    # score column -> (output node, unit)
    output_map: List[Tuple[str, int]]
    # attribute name for each score column
    output_attrs: List[str]
    attribute: Optional[str] = None

    @property
    def input_shape(self):
        return self.arch.input_shape

    @property
    def has_aux(self):
        return self.variant == "mcnn_aux"

    def children(self, name):
        return [n.name for n in self.nodes.values() if n.parent == name]

    def param_shapes(self):
        shapes = OrderedDict()
        for node in self.nodes.values():
            for pname, shape in node.spec.param_shapes(node.in_shape).items():
                shapes[f"{node.name}.{pname}"] = tuple(shape)
        return shapes

    def path_to(self, name):
        path = []
        while name is not None:
            path.append(name)
            name = self.nodes[name].parent
        return path[::-1]

    def config(self):
        """JSON-serializable description sufficient to rebuild this topology."""
        return {
            "variant": self.variant,
            "arch": self.arch.to_dict(),
            "vocab": list(self.vocab.names),
            "groups": [[g, list(a)] for g, a in self.groups.groups],
            "branches": [[b, list(g)] for b, g in self.groups.branches],
            "attribute": self.attribute,
        }

    @classmethod
    def from_config(cls, cfg):
        vocab = AttributeVocab(tuple(cfg["vocab"]))
        groups = GroupSpec(tuple((g, tuple(a)) for g, a in cfg["groups"]),
                           tuple((b, tuple(g)) for b, g in cfg["branches"]))
        arch = ArchConfig.from_dict(cfg["arch"])
        variant = cfg["variant"]
        if variant == "independent":
            return build_independent(vocab, cfg["attribute"], arch, groups)
        topo = build_mcnn(vocab, groups, arch)
        if variant == "mcnn_aux":
            topo, _ = attach_aux(topo)
        elif variant != "mcnn":
            raise ConfigError(f"unknown variant {variant!r}")
        return topo


class _Builder:
    def __init__(self, input_shape):
        self.nodes = OrderedDict()
        self.input_shape = tuple(input_shape)

    def add(self, name, spec, parent):
        in_shape = self.input_shape if parent is None else self.nodes[parent].out_shape
        out_shape = spec.output_shape(in_shape)
        self.nodes[name] = Node(name, spec, parent, tuple(in_shape), tuple(out_shape))
        return name

    def conv_block(self, stage, suffix, parent, lrn):
        last = self.add(f"conv{suffix}", Conv(stage.filters, stage.kernel, stage.stride, stage.pad), parent)
        last = self.add(f"relu{suffix}", ReLU(), last)
        last = self.add(f"pool{suffix}", MaxPool(stage.pool_kernel, stage.pool_stride), last)
        return self.add(f"norm{suffix}", lrn, last)

    def fc_block(self, arch, suffix, parent, n_out):
        last = parent
        for k in (1, 2):
            last = self.add(f"fc{k}{suffix}", FullyConnected(arch.fc_units), last)
            last = self.add(f"relu_fc{k}{suffix}", ReLU(), last)
            last = self.add(f"drop_fc{k}{suffix}", Dropout(arch.dropout), last)
        return self.add(f"out{suffix}", FullyConnected(n_out), last)


def _trunk(b, arch):
    last = b.conv_block(arch.conv1, "1", None, arch.lrn)
    return b.conv_block(arch.conv2, "2", last, arch.lrn)


def build_mcnn(vocab=None, groups=None, arch=None):
    """Shared Conv1/Conv2 trunk, one Conv3 per branch, one FC stack per group."""
    vocab = vocab or AttributeVocab.celeba()
    groups = groups or GroupSpec.celeba()
    arch = arch or ArchConfig.paper()
    groups.validate(vocab)
    b = _Builder(arch.input_shape)
    trunk = _trunk(b, arch)
    branch_out = {}
    for branch, _ in groups.branches:
        branch_out[branch] = b.conv_block(arch.conv3, f"3_{branch}", trunk, arch.lrn)
    placement = {}
    for g, attrs in groups.groups:
        out = b.fc_block(arch, f"_{g}", branch_out[groups.branch_of(g)], len(attrs))
        for unit, a in enumerate(attrs):
            placement[a] = (out, unit)
    output_map = [placement[a] for a in vocab.names]
    return NetworkTopology("mcnn", arch, vocab, groups, b.nodes, output_map, list(vocab.names))


def build_independent(vocab, attr, arch=None, groups=None):
    """Single-path network with the layer sizes of one MCNN branch and one output."""
    vocab = vocab or AttributeVocab.celeba()
    groups = groups or GroupSpec.celeba()
    arch = arch or ArchConfig.paper()
    if attr not in vocab:
        raise ConfigError(f"unknown attribute {attr!r}")
    b = _Builder(arch.input_shape)
    last = _trunk(b, arch)
    last = b.conv_block(arch.conv3, "3", last, arch.lrn)
    out = b.fc_block(arch, "", last, 1)
    return NetworkTopology("independent", arch, vocab, groups, b.nodes, [(out, 0)], [attr], attribute=attr)


AUX_NODE = "aux"


def attach_aux(topology):
    """Add the AUX layer over all 40 scores; returns (topology, freeze mask)."""
    if topology.variant != "mcnn":
        raise ContractError(f"attach_aux needs an mcnn topology, got {topology.variant!r}")
    n = len(topology.output_map)
    nodes = OrderedDict(topology.nodes)
    nodes[AUX_NODE] = Node(AUX_NODE, FullyConnected(n, bias=False), None, (n,), (n,))
    aux = dataclasses.replace(topology, variant="mcnn_aux", nodes=nodes,
                              output_map=list(topology.output_map),
                              output_attrs=list(topology.output_attrs))
    return aux, aux_stage_freeze_mask(aux)


def aux_stage_freeze_mask(topology):
    """Freeze mask for AUX-only training: True means frozen."""
    return {name: not name.startswith(AUX_NODE + ".") for name in topology.param_shapes()}


def no_freeze(topology):
    return {name: False for name in topology.param_shapes()}


def count_params(topology):
    """(total, per-layer counts) from the layer shapes alone."""
    per_layer = OrderedDict()
    for node in topology.nodes.values():
        shapes = node.spec.param_shapes(node.in_shape)
        if shapes:
            per_layer[node.name] = int(sum(int(np.prod(s)) for s in shapes.values()))
    return sum(per_layer.values()), per_layer


def init_params(topology, seed=0):
    """Xavier-uniform weights, zero biases, identity AUX."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in topology.param_shapes().items():
        if name == f"{AUX_NODE}.W":
            params[name] = np.eye(shape[0], dtype=T.get_dtype())
        elif name.endswith(".b"):
            params[name] = T.rand_init(shape, "zeros")
        else:
            params[name] = T.rand_init(shape, "xavier_uniform", rng)
    return params


def aux_matrix(params):
    """AUX weights as rows = AUX units, columns = MCNN score units."""
    return params[f"{AUX_NODE}.W"].T


def check_params(topology, params):
    shapes = topology.param_shapes()
    for name, shape in shapes.items():
        if name not in params:
            raise CheckpointError(f"missing parameter tensor {name!r}")
        if tuple(params[name].shape) != shape:
            raise CheckpointError(f"parameter {name!r} has shape {tuple(params[name].shape)}, expected {shape}")
    extra = sorted(set(params) - set(shapes))
    if extra:
        raise CheckpointError(f"unexpected parameter tensors {extra}")


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Network:
    """Runtime for a topology over a parameter dict.

    Holds per-layer forward caches, so one instance serves one
    forward/backward sequence at a time.
    """

    def __init__(self, topology, params):
        check_params(topology, params)
        self.topology = topology
        self.params = params
        self.layers = OrderedDict()
        for node in topology.nodes.values():
            names = node.spec.param_shapes(node.in_shape)
            own = {p: params[f"{node.name}.{p}"] for p in names}
            self.layers[node.name] = build_layer(node.spec, node.in_shape, own)
        self._out_nodes = list(OrderedDict.fromkeys(n for n, _ in topology.output_map))
        self._pre_aux = None
        self._forwarded = False

    def forward(self, batch, mode="eval", rng=None):
        topo = self.topology
        if tuple(batch.shape[1:]) != tuple(topo.input_shape):
            raise DimensionError(f"batch shape {batch.shape} does not match input {topo.input_shape}")
        acts = {}
        for node in topo.nodes.values():
            if node.name == AUX_NODE:
                continue
            x = batch if node.parent is None else acts[node.parent]
            acts[node.name] = self.layers[node.name].forward(x, mode, rng)
        scores = np.stack([acts[n][:, u] for n, u in topo.output_map], axis=1)
        self._forwarded = True
        if topo.has_aux:
            aux_in = _sigmoid(scores) if topo.arch.aux_input == "sigmoid" else scores
            self._pre_aux = aux_in
            return self.layers[AUX_NODE].forward(aux_in, mode, rng)
        return scores

    def backward(self, grad_scores, freeze=None):
        """Gradients for every parameter; frozen tensors get zero-filled arrays."""
        if not self._forwarded:
            raise ContractError("Network.backward called without a cached forward pass")
        topo = self.topology
        freeze = freeze or {}
        grads = OrderedDict((name, np.zeros_like(p)) for name, p in self.params.items())

        g = grad_scores
        if topo.has_aux:
            g = self.layers[AUX_NODE].backward(g)
            grads[f"{AUX_NODE}.W"] = self.layers[AUX_NODE].grads["W"]
            if topo.arch.aux_input == "sigmoid":
                s = self._pre_aux
                g = g * s * (1.0 - s)

        # backprop only where some trainable parameter lies upstream
        trainable = {n for n in topo.nodes if any(
            not freeze.get(f"{n}.{p}", False) for p in topo.nodes[n].spec.param_shapes(topo.nodes[n].in_shape))}
        needs = {}
        for node in topo.nodes.values():
            needs[node.name] = node.name in trainable or (node.parent is not None and needs[node.parent])

        pending = {}
        for col, (n, u) in enumerate(topo.output_map):
            if n not in pending:
                shape = (g.shape[0],) + topo.nodes[n].out_shape
                pending[n] = np.zeros(shape, dtype=g.dtype)
            pending[n][:, u] += g[:, col]

        for node in reversed(list(topo.nodes.values())):
            if node.name == AUX_NODE or node.name not in pending or not needs[node.name]:
                continue
            gy = pending.pop(node.name)
            layer = self.layers[node.name]
            gx = layer.backward(gy, need_input_grad=node.parent is not None)
            for pname, gp in layer.grads.items():
                grads[f"{node.name}.{pname}"] = gp
            if node.parent is not None:
                if node.parent in pending:
                    pending[node.parent] = pending[node.parent] + gx
                else:
                    pending[node.parent] = gx

        for name, frozen in freeze.items():
            if frozen and name in grads:
                grads[name] = np.zeros_like(self.params[name])
        return grads


def forward_full(topology, params, batch, mode="eval", rng=None):
    """Scores ``[N, outputs]`` plus the runtime cache needed by :func:`backward_full`."""
    net = Network(topology, params)
    return net.forward(batch, mode, rng), net


def backward_full(topology, params, cache, grad_scores, freeze=None):
    if cache is None:
        raise ContractError("backward_full requires the cache returned by forward_full")
    if cache.topology is not topology or cache.params is not params:
        raise ContractError("cache was produced for a different topology or parameter set")
    return cache.backward(grad_scores, freeze)
