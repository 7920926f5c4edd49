"""Desk-scale architectures, soft-mask attachment and cost accounting.

An :class:`ArchitectureSpec` is a flat list of JSON-friendly layer dicts::

    {"kind": "conv", "out": 20, "k": 5, "pad": 0}
    {"kind": "linear", "out": 500}
    {"kind": "relu"} / {"kind": "maxpool"} / {"kind": "flatten"}
    {"kind": "residual-block", "mid": 8}
    {"kind": "inception-module", "branches": [{"type": "1x1", "out": 4}, ...]}

Any weight-bearing unit may carry ``"in_keep"``: the list of input channels
it reads. That is how input-only channel pruning is represented when the
producing channel also feeds other consumers (residual streams, inception
inputs).

Weight units are addressed by a key: ``"3"`` for a top-level conv/linear at
layer 3, ``"3.conv1"``/``"3.conv2"`` inside a residual block and
``"3.branch0"`` inside an inception module. Parameters are named
``<key>.weight`` and ``<key>.bias``.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor

SCHEMA_VERSION = 1
KINDS = ("conv", "linear", "relu", "maxpool", "flatten", "residual-block", "inception-module")
STRUCTURE_KINDS = ("channel", "block", "branch")
BRANCH_TYPES = ("1x1", "3x3", "proj-pool")


class ArchitectureError(ValueError):
    pass


@dataclass
class ArchitectureSpec:
    input_shape: tuple[int, int, int]
    classes: int
    layers: list[dict]
    name: str = "custom"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.layers = [dict(layer) for layer in self.layers]
        if self.classes <= 0:
            raise ArchitectureError("class count must be positive")
        shapes = infer_shapes(self)
        if shapes[-1] != (self.classes,):
            raise ArchitectureError(f"final layer emits {shapes[-1]}, expected ({self.classes},) logits")

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "name": self.name,
                "input_shape": list(self.input_shape), "classes": self.classes,
                "layers": copy.deepcopy(self.layers)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> ArchitectureSpec:
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ArchitectureError(f"unsupported architecture schema version {d.get('schema_version')!r}")
        return cls(tuple(d["input_shape"]), int(d["classes"]), d["layers"], d.get("name", "custom"))

    @classmethod
    def from_json(cls, text: str) -> ArchitectureSpec:
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------- builders


def build_lenet(filters=(20, 50, 500), classes: int = 10) -> ArchitectureSpec:
    f1, f2, f3 = filters
    if min(f1, f2, f3, classes) <= 0:
        raise ArchitectureError("all LeNet widths must be positive")
    layers = [
        {"kind": "conv", "out": f1, "k": 5, "pad": 0},
        {"kind": "maxpool"},
        {"kind": "conv", "out": f2, "k": 5, "pad": 0},
        {"kind": "maxpool"},
        {"kind": "flatten"},
        {"kind": "linear", "out": f3},
        {"kind": "relu"},
        {"kind": "linear", "out": classes},
    ]
    return ArchitectureSpec((1, 28, 28), classes, layers, "lenet")


def build_minires(blocks: int, width: int = 8, classes: int = 10,
                  input_shape=(1, 28, 28)) -> ArchitectureSpec:
    """Stem 3x3 conv, ``blocks`` identity-shortcut residual blocks, pooled linear head."""
    if blocks < 1:
        raise ArchitectureError("MiniRes needs at least one block")
    layers = [{"kind": "conv", "out": width, "k": 3, "pad": 0}, {"kind": "relu"}]
    layers += [{"kind": "residual-block", "mid": width} for _ in range(blocks)]
    layers += [{"kind": "maxpool"}, {"kind": "flatten"}, {"kind": "linear", "out": classes}]
    return ArchitectureSpec(tuple(input_shape), classes, layers, "minires")


def build_miniinception(modules: int, branches_per_module: int, width: int = 4, stem: int = 8,
                        classes: int = 10, input_shape=(1, 28, 28)) -> ArchitectureSpec:
    """Stem conv + pool, then inception modules whose branches cycle through
    1x1, padded 3x3 and 1x1-projection-then-3x3-max-pool variants."""
    if branches_per_module < 2:
        raise ArchitectureError("an inception module needs at least two branches")
    if modules < 1:
        raise ArchitectureError("MiniInception needs at least one module")
    layers = [{"kind": "conv", "out": stem, "k": 3, "pad": 0}, {"kind": "relu"}, {"kind": "maxpool"}]
    for _ in range(modules):
        layers.append({"kind": "inception-module",
                       "branches": [{"type": BRANCH_TYPES[c % 3], "out": width}
                                    for c in range(branches_per_module)]})
    layers += [{"kind": "flatten"}, {"kind": "linear", "out": classes}]
    return ArchitectureSpec(tuple(input_shape), classes, layers, "miniinception")


# ---------------------------------------------------------------- static structure


@dataclass
class Unit:
    """A conv or linear weight unit and how it is wired."""
    key: str
    layer: int
    kind: str                 # "conv" or "linear"
    out: int
    in_channels: int          # effective channels after the in_keep gather
    source_channels: int      # channels of the incoming stream
    in_keep: list | None
    k: int = 1
    pad: int = 0
    group: int = 1            # input features per channel (linear after flatten)
    in_hw: tuple = (1, 1)     # spatial extent of the (padded) input, conv only
    sole_consumer: bool = True

    @property
    def weight_shape(self):
        if self.kind == "conv":
            return (self.out, self.in_channels, self.k, self.k)
        return (self.out, self.in_channels * self.group)


def _branch_kernel(btype: str) -> tuple[int, int]:
    if btype == "1x1" or btype == "proj-pool":
        return 1, 0
    if btype == "3x3":
        return 3, 1
    raise ArchitectureError(f"unknown branch type {btype!r}")


def _check_keep(keep, channels, where):
    if keep is None:
        return channels
    if not keep or len(set(keep)) != len(keep) or min(keep) < 0 or max(keep) >= channels:
        raise ArchitectureError(f"{where}: in_keep {keep} invalid for {channels} input channels")
    return len(keep)


def _analyse(spec: ArchitectureSpec):
    """Shape inference; returns (per-layer output shapes, units)."""
    shape = tuple(spec.input_shape)
    shapes, units = [], []
    flat_from = None   # (C, H*W) when the current 1-d stream came out of a flatten
    for i, layer in enumerate(spec.layers):
        kind = layer.get("kind")
        if kind not in KINDS:
            raise ArchitectureError(f"layer {i}: unknown kind {kind!r}")
        where = f"layer {i} ({kind})"
        if kind == "conv":
            if len(shape) != 3:
                raise ArchitectureError(f"{where}: needs a C×H×W input, got {shape}")
            C, H, W = shape
            k, pad, out = int(layer["k"]), int(layer.get("pad", 0)), int(layer["out"])
            cin = _check_keep(layer.get("in_keep"), C, where)
            Hp, Wp = H + 2 * pad, W + 2 * pad
            if k > Hp or k > Wp or out <= 0:
                raise ArchitectureError(f"{where}: kernel {k} does not fit input {Hp}x{Wp} or out={out}")
            units.append(Unit(str(i), i, "conv", out, cin, C, layer.get("in_keep"), k, pad, 1, (Hp, Wp)))
            shape = (out, Hp - k + 1, Wp - k + 1)
            flat_from = None
        elif kind == "linear":
            if len(shape) != 1:
                raise ArchitectureError(f"{where}: needs a flat input, got {shape}; add a flatten layer")
            out = int(layer["out"])
            if out <= 0:
                raise ArchitectureError(f"{where}: out must be positive")
            if flat_from is not None:
                channels, group = flat_from
            else:
                channels, group = shape[0], 1
            cin = _check_keep(layer.get("in_keep"), channels, where)
            units.append(Unit(str(i), i, "linear", out, cin, channels, layer.get("in_keep"), group=group))
            shape = (out,)
            flat_from = None
        elif kind == "relu":
            pass
        elif kind == "maxpool":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ArchitectureError(f"{where}: needs even spatial extents, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif kind == "flatten":
            if len(shape) == 3:
                flat_from = (shape[0], shape[1] * shape[2])
                shape = (shape[0] * shape[1] * shape[2],)
        elif kind == "residual-block":
            if len(shape) != 3:
                raise ArchitectureError(f"{where}: needs a C×H×W input, got {shape}")
            C, H, W = shape
            mid = int(layer["mid"])
            if mid <= 0:
                raise ArchitectureError(f"{where}: mid width must be positive")
            cin = _check_keep(layer.get("in_keep"), C, where)
            units.append(Unit(f"{i}.conv1", i, "conv", mid, cin, C, layer.get("in_keep"), 3, 1, 1,
                              (H + 2, W + 2), sole_consumer=False))
            units.append(Unit(f"{i}.conv2", i, "conv", C, mid, mid, None, 3, 1, 1, (H + 2, W + 2)))
            flat_from = None
        elif kind == "inception-module":
            if len(shape) != 3:
                raise ArchitectureError(f"{where}: needs a C×H×W input, got {shape}")
            C, H, W = shape
            branches = layer.get("branches") or []
            if len(branches) < 1:
                raise ArchitectureError(f"{where}: has no branches")
            total = 0
            for c, br in enumerate(branches):
                k, pad = _branch_kernel(br.get("type"))
                out = int(br["out"])
                if out <= 0:
                    raise ArchitectureError(f"{where} branch {c}: out must be positive")
                cin = _check_keep(br.get("in_keep"), C, f"{where} branch {c}")
                units.append(Unit(f"{i}.branch{c}", i, "conv", out, cin, C, br.get("in_keep"), k, pad, 1,
                                  (H + 2 * pad, W + 2 * pad), sole_consumer=False))
                total += out
            shape = (total, H, W)
            flat_from = None
        shapes.append(shape)
    return shapes, units


def infer_shapes(spec: ArchitectureSpec) -> list[tuple]:
    return _analyse(spec)[0]


def weight_units(spec: ArchitectureSpec) -> list[Unit]:
    return _analyse(spec)[1]


def init_params(spec: ArchitectureSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases."""
    params = {}
    for u in weight_units(spec):
        shape = u.weight_shape
        fan_in = int(np.prod(shape[1:]))
        params[f"{u.key}.weight"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        params[f"{u.key}.bias"] = np.zeros(u.out)
    return params


def describe_widths(spec: ArchitectureSpec) -> str:
    """Table-style width string, e.g. ``20-50-500`` for LeNet."""
    parts = []
    for layer in spec.layers:
        kind = layer["kind"]
        if kind in ("conv", "linear"):
            parts.append(str(layer["out"]))
        elif kind == "residual-block":
            parts.append(f"R{layer['mid']}")
        elif kind == "inception-module":
            parts.append("I(" + "+".join(str(b["out"]) for b in layer["branches"]) + ")")
    return "-".join(parts[:-1]) if len(parts) > 1 else "-".join(parts)


# ---------------------------------------------------------------- costs


@dataclass
class CostReport:
    flops: int
    params: int
    layers: list[dict] = field(default_factory=list)

    def to_dict(self):
        return {"flops": self.flops, "params": self.params, "weights": self.weights,
                "biases": self.biases, "layers": self.layers}

    @property
    def weights(self) -> int:
        return sum(entry["weights"] for entry in self.layers)

    @property
    def biases(self) -> int:
        return sum(entry["biases"] for entry in self.layers)


def count_cost(spec: ArchitectureSpec) -> CostReport:
    """Multiply-accumulate count and weight+bias count; pool/ReLU are free."""
    rows = []
    for u in weight_units(spec):
        if u.kind == "conv":
            oh, ow = u.in_hw[0] - u.k + 1, u.in_hw[1] - u.k + 1
            macs = oh * ow * u.out * u.k * u.k * u.in_channels
            weights = u.out * u.in_channels * u.k * u.k
        else:
            macs = u.in_channels * u.group * u.out
            weights = macs
        rows.append({"unit": u.key, "kind": u.kind, "flops": macs, "weights": weights,
                     "biases": u.out, "params": weights + u.out})
    return CostReport(sum(r["flops"] for r in rows), sum(r["params"] for r in rows), rows)


# ---------------------------------------------------------------- soft masks


@dataclass(frozen=True)
class MaskEntry:
    kind: str     # channel | block | branch
    host: str     # unit key for channels, layer index for blocks/branches
    index: int    # channel / branch index; 0 for blocks

    def to_dict(self):
        return {"kind": self.kind, "host": self.host, "index": self.index}


@dataclass
class SoftMask:
    values: Tensor
    entries: list[MaskEntry]

    def __post_init__(self):
        if self.values.shape != (len(self.entries),):
            raise ArchitectureError("mask length does not match its attachment records")
        if len(set(self.entries)) != len(self.entries):
            raise ArchitectureError("two mask entries attached to the same structure")
        self.channel_slices: dict[str, tuple[int, int]] = {}
        self.block_index: dict[int, int] = {}
        self.branch_index: dict[tuple[int, int], int] = {}
        for pos, e in enumerate(self.entries):
            if e.kind == "channel":
                a, b = self.channel_slices.get(e.host, (pos, pos))
                if b != pos:
                    raise ArchitectureError(f"channel entries of {e.host} are not contiguous")
                self.channel_slices[e.host] = (a, pos + 1)
            elif e.kind == "block":
                self.block_index[int(e.host)] = pos
            elif e.kind == "branch":
                self.branch_index[(int(e.host), e.index)] = pos
            else:
                raise ArchitectureError(f"unknown structure kind {e.kind!r}")

    def __len__(self):
        return len(self.entries)

    def numpy(self) -> np.ndarray:
        return self.values.data


def enumerate_structures(spec: ArchitectureSpec) -> dict[str, list[MaskEntry]]:
    """All prunable structures per kind. The first weight unit is never masked."""
    found = {k: [] for k in STRUCTURE_KINDS}
    units = weight_units(spec)
    first = units[0].key if units else None
    for u in units:
        if u.key == first:
            continue
        found["channel"] += [MaskEntry("channel", u.key, c) for c in range(u.in_channels)]
    for i, layer in enumerate(spec.layers):
        if layer["kind"] == "residual-block":
            found["block"].append(MaskEntry("block", str(i), 0))
        elif layer["kind"] == "inception-module":
            found["branch"] += [MaskEntry("branch", str(i), c) for c in range(len(layer["branches"]))]
    return found


@dataclass
class MaskedNetwork:
    spec: ArchitectureSpec
    params: dict[str, Tensor]
    mask: SoftMask | None = None
    dropout_rate: float = 0.0

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def weight_sq_norm(self) -> float:
        return float(sum(np.vdot(p.data, p.data) for p in self.params.values()))

    def clone(self) -> MaskedNetwork:
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k, check=False)
                  for k, v in self.params.items()}
        mask = None
        if self.mask is not None:
            mask = SoftMask(Tensor(self.mask.values.data.copy(), requires_grad=self.mask.values.requires_grad,
                                   name="mask", check=False), list(self.mask.entries))
        return MaskedNetwork(self.spec, params, mask, self.dropout_rate)


def make_network(spec: ArchitectureSpec, weights: dict[str, np.ndarray], trainable: bool = True,
                 dropout_rate: float = 0.0) -> MaskedNetwork:
    expected = {f"{u.key}.{p}": (u.weight_shape if p == "weight" else (u.out,))
                for u in weight_units(spec) for p in ("weight", "bias")}
    if set(expected) != set(weights):
        raise ArchitectureError(f"weights {sorted(set(weights) ^ set(expected))} do not match the architecture")
    for name, shp in expected.items():
        if tuple(weights[name].shape) != tuple(shp):
            raise ArchitectureError(f"{name}: shape {weights[name].shape}, architecture needs {shp}")
    # canonical key order, so reductions over params do not depend on how weights were stored
    params = {k: Tensor(np.array(weights[k], dtype=float), requires_grad=trainable, name=k) for k in expected}
    return MaskedNetwork(spec, params, None, dropout_rate)


def attach_masks(spec: ArchitectureSpec, kinds, init_rng: np.random.Generator,
                 baseline: dict[str, np.ndarray] | None = None, dropout_rate: float = 0.1,
                 weight_rng: np.random.Generator | None = None) -> MaskedNetwork:
    """Register one N(0,1) mask entry per structure of the requested kinds.

    Weights are copied from ``baseline`` when given, otherwise freshly
    initialised from ``weight_rng`` (or ``init_rng``).
    """
    kinds = list(dict.fromkeys(kinds))
    available = enumerate_structures(spec)
    present = [k for k in STRUCTURE_KINDS if available[k]]
    entries = []
    for kind in kinds:
        if kind not in available or not available[kind]:
            raise ArchitectureError(f"no {kind!r} structures in {spec.name}; available kinds: {present}")
        entries += available[kind]
    # block and branch entries first, then channels in unit order
    entries.sort(key=lambda e: STRUCTURE_KINDS.index(e.kind) if e.kind != "channel" else 99)
    weights = baseline if baseline is not None else init_params(spec, weight_rng or init_rng)
    net = make_network(spec, {k: np.array(v, dtype=float, copy=True) for k, v in weights.items()},
                       dropout_rate=dropout_rate)
    values = Tensor(init_rng.standard_normal(len(entries)), requires_grad=True, name="mask")
    net.mask = SoftMask(values, entries)
    return net


# ---------------------------------------------------------------- forward


class _Ctx:
    __slots__ = ("params", "mask", "noise", "rate", "rng")

    def __init__(self, params, mask, noise, rate, rng):
        self.params, self.mask, self.noise, self.rate, self.rng = params, mask, noise, rate, rng

    def act(self, h: Tensor) -> Tensor:
        return nx.dropout_noise(nx.relu(h), self.rate, self.noise, self.rng)

    def scale(self, h: Tensor, pos: int) -> Tensor:
        if self.mask is None:
            return h
        return h * self.mask.values[pos:pos + 1]

    def unit_input(self, h: Tensor, key: str, in_keep, group: int = 1) -> Tensor:
        if in_keep is not None:
            if h.data.ndim == 2 and group > 1:
                n = h.shape[0]
                h = nx.reshape(nx.take(nx.reshape(h, (n, -1, group)), in_keep, axis=1), (n, -1))
            else:
                h = nx.take(h, in_keep, axis=1)
        if self.mask is None or key not in self.mask.channel_slices:
            return h
        a, b = self.mask.channel_slices[key]
        m = self.mask.values[a:b]
        if h.data.ndim == 4:
            return h * nx.reshape(m, (1, b - a, 1, 1))
        if group > 1:
            n = h.shape[0]
            return nx.reshape(nx.reshape(h, (n, b - a, group)) * nx.reshape(m, (1, b - a, 1)), (n, -1))
        return h * nx.reshape(m, (1, b - a))

    def conv(self, h, key, in_keep, pad):
        h = nx.pad2d(self.unit_input(h, key, in_keep), pad)
        return nx.conv2d(h, self.params[f"{key}.weight"], self.params[f"{key}.bias"])


def _run(spec: ArchitectureSpec, ctx: _Ctx, x: Tensor) -> Tensor:
    h = x
    flat_group = 1
    for i, layer in enumerate(spec.layers):
        kind = layer["kind"]
        if kind == "conv":
            h = ctx.conv(h, str(i), layer.get("in_keep"), int(layer.get("pad", 0)))
            flat_group = 1
        elif kind == "linear":
            h = ctx.unit_input(h, str(i), layer.get("in_keep"), flat_group)
            h = nx.linear(h, ctx.params[f"{i}.weight"], ctx.params[f"{i}.bias"])
            flat_group = 1
        elif kind == "relu":
            h = ctx.act(h)
        elif kind == "maxpool":
            h = nx.maxpool2(h)
        elif kind == "flatten":
            if h.data.ndim == 4:
                flat_group = h.shape[2] * h.shape[3]
                h = nx.flatten(h)
        elif kind == "residual-block":
            a = ctx.act(ctx.conv(h, f"{i}.conv1", layer.get("in_keep"), 1))
            a = ctx.conv(a, f"{i}.conv2", None, 1)
            if ctx.mask is not None and i in ctx.mask.block_index:
                a = ctx.scale(a, ctx.mask.block_index[i])
            h = h + a
        elif kind == "inception-module":
            outs = []
            for c, br in enumerate(layer["branches"]):
                k, pad = _branch_kernel(br["type"])
                a = ctx.conv(h, f"{i}.branch{c}", br.get("in_keep"), pad)
                if br["type"] == "proj-pool":
                    a = nx.maxpool3_same(a)
                a = ctx.act(a)
                if ctx.mask is not None and (i, c) in ctx.mask.branch_index:
                    a = ctx.scale(a, ctx.mask.branch_index[(i, c)])
                outs.append(a)
            h = nx.concat(outs, axis=1)
    return h


def _check_input(spec, x):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise nx.ShapeError(f"input shape {x.shape} does not match N×{spec.input_shape}")
    return x


def forward(spec: ArchitectureSpec, params: dict[str, Tensor], x) -> Tensor:
    """Plain (unmasked, noise-free) forward pass returning logits."""
    return _run(spec, _Ctx(params, None, False, 0.0, None), _check_input(spec, x))


def forward_masked(net: MaskedNetwork, x, noise_active: bool = False,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Logits of the masked network; dropout after every ReLU when ``noise_active``."""
    if noise_active and net.dropout_rate > 0 and rng is None:
        raise ValueError("noise_active needs an rng")
    ctx = _Ctx(net.params, net.mask, noise_active, net.dropout_rate, rng)
    return _run(net.spec, ctx, _check_input(net.spec, x))


def predict(net: MaskedNetwork, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    """Noise-free logits as a numpy array, evaluated without a graph."""
    outs = []
    with nx.no_grad():
        for start in range(0, len(x), batch_size):
            outs.append(forward_masked(net, Tensor(x[start:start + batch_size], check=False)).data)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, net.spec.classes))
