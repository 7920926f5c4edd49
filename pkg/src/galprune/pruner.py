"""Turn a masked network into a smaller plain one, then fine-tune and evaluate it.

Compaction tracks every channel of every activation stream by an identity
``(producer, row)``. Removing a structure deletes identities. Each consumer
keeps only the columns whose identity survives, and each producer keeps only
the rows some consumer still reads. Surviving mask values are folded into
weights, so the result runs without any mask.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .networks import (ArchitectureSpec, CostReport, MaskedNetwork, MaskEntry, Unit, count_cost,
                       forward_masked, make_network, predict, weight_units)
from .numerics import Tensor

REPORT_SCHEMA_VERSION = 1
SGD_THRESHOLD = 1e-4


class CompactionError(ValueError):
    """Compaction would produce a degenerate or unrepresentable network."""


@dataclass(frozen=True)
class Structure:
    position: int      # index into the mask vector
    entry: MaskEntry
    value: float

    def to_dict(self):
        return {"position": self.position, **self.entry.to_dict(), "mask_value": self.value}


def extract_prunable(net: MaskedNetwork, threshold: float = 0.0) -> list[Structure]:
    """Structures whose mask satisfies ``|m_i| <= threshold`` (exact zeros by default)."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    if net.mask is None:
        return []
    m = net.mask.values.data
    return [Structure(i, e, float(m[i])) for i, e in enumerate(net.mask.entries) if abs(m[i]) <= threshold]


# ---------------------------------------------------------------- compaction


@dataclass
class CompactModel:
    spec: ArchitectureSpec
    weights: dict[str, np.ndarray]
    removed: list[Structure] = field(default_factory=list)

    def network(self, trainable: bool = True) -> MaskedNetwork:
        return make_network(self.spec, self.weights, trainable=trainable)


def _stream_walk(spec: ArchitectureSpec, units: dict[str, Unit]):
    """Follow channel identities through the source network.

    Returns, per unit key, the identities of its effective input channels and
    of its output rows.
    """
    stream = [("input", c) for c in range(spec.input_shape[0])]
    unit_in, unit_out = {}, {}

    def consume(key):
        u = units[key]
        unit_in[key] = list(stream) if u.in_keep is None else [stream[k] for k in u.in_keep]
        unit_out[key] = [(key, r) for r in range(u.out)]
        return unit_out[key]

    for i, layer in enumerate(spec.layers):
        kind = layer["kind"]
        if kind in ("conv", "linear"):
            stream = consume(str(i))
        elif kind == "residual-block":
            saved = stream
            stream = consume(f"{i}.conv1")
            consume(f"{i}.conv2")
            stream = saved
        elif kind == "inception-module":
            stream = [ident for c in range(len(layer["branches"])) for ident in consume(f"{i}.branch{c}")]
    return unit_in, unit_out


def compact(net: MaskedNetwork, structures: list[Structure] | None = None) -> CompactModel:
    """Delete the listed structures and fold every surviving mask value into the weights.

    Listed structures with a non-zero mask value (sub-threshold removals) are
    zeroed first. A layer that would be left with no channels, or a module
    with no branches, raises :class:`CompactionError` naming the layer.
    """
    spec = net.spec
    units = {u.key: u for u in weight_units(spec)}
    W = {k: np.array(p.data, dtype=float, copy=True) for k, p in net.params.items()}
    structures = list(structures or [])
    entries = net.mask.entries if net.mask is not None else []
    m = net.mask.values.data.copy() if net.mask is not None else np.zeros(0)
    for s in structures:
        if s.position >= len(entries) or entries[s.position] != s.entry:
            raise CompactionError(f"structure {s.entry} is not attached at mask position {s.position}")
        m[s.position] = 0.0

    removed_blocks = {int(s.entry.host) for s in structures if s.entry.kind == "block"}
    removed_branches = {(int(s.entry.host), s.entry.index) for s in structures if s.entry.kind == "branch"}
    zero_cols: dict[str, set] = {}
    for s in structures:
        if s.entry.kind == "channel":
            zero_cols.setdefault(s.entry.host, set()).add(s.entry.index)

    # identities as in the source network
    unit_in, unit_out = _stream_walk(spec, units)

    # fold surviving scales
    neg_branch_scale = {}
    for pos, e in enumerate(entries):
        v = m[pos]
        if e.kind == "channel":
            u = units[e.host]
            w = W[f"{u.key}.weight"]
            if u.kind == "conv":
                w[:, e.index] *= v
            else:
                w[:, e.index * u.group:(e.index + 1) * u.group] *= v
        elif e.kind == "block" and int(e.host) not in removed_blocks:
            W[f"{e.host}.conv2.weight"] *= v
            W[f"{e.host}.conv2.bias"] *= v
        elif e.kind == "branch" and (int(e.host), e.index) not in removed_branches:
            key = f"{e.host}.branch{e.index}"
            if v > 0:
                # relu and max pooling commute with a positive scale
                W[f"{key}.weight"] *= v
                W[f"{key}.bias"] *= v
            else:
                for ident in unit_out[key]:
                    neg_branch_scale[ident] = v
    if neg_branch_scale:
        _fold_negative_branch_scales(spec, units, unit_in, W, neg_branch_scale)

    # which output rows each producer keeps: a row dies when its only reader zeroed it
    kept_rows = {k: list(range(u.out)) for k, u in units.items()}
    dead_ids = set()
    for key, cols in zero_cols.items():
        if units[key].in_keep is not None:
            continue
        producer = _sole_producer(spec, units, key)
        if producer is None:
            continue
        for c in cols:
            ident = unit_in[key][c]
            if ident[0] == producer or (producer == "inception" and ".branch" in ident[0]):
                dead_ids.add(ident)
    for key in kept_rows:
        kept_rows[key] = [r for r in kept_rows[key] if (key, r) not in dead_ids]

    # structural deletions and degenerate checks
    for i in removed_blocks:
        if spec.layers[i]["kind"] != "residual-block":
            raise CompactionError(f"layer {i} is not a residual block")
    for i, layer in enumerate(spec.layers):
        if layer["kind"] == "inception-module":
            branches = [c for c in range(len(layer["branches"]))
                        if (i, c) not in removed_branches and kept_rows[f"{i}.branch{c}"]]
            if not branches:
                raise CompactionError(f"layer {i} (inception-module): every branch would be removed")
            for c in range(len(layer["branches"])):
                if not kept_rows[f"{i}.branch{c}"]:
                    removed_branches.add((i, c))
            _check_branch_consumer(spec, i, removed_branches)
    for key, rows in kept_rows.items():
        if not rows and units[key].layer not in removed_blocks and not _is_removed_branch(key, removed_branches):
            raise CompactionError(f"layer {units[key].layer} ({key}): all output channels would be removed")

    # assemble the new spec and weights
    layer_map, new_layers, new_weights = {}, [], {}
    for i, layer in enumerate(spec.layers):
        if i in removed_blocks:
            continue
        layer_map[i] = len(new_layers)
        new_layers.append(dict(layer))
    stream = [("input", c) for c in range(spec.input_shape[0])]

    def rebuild(key, new_key, layer_dict):
        u = units[key]
        src = unit_in[key]
        present = set(stream)
        zeroed = zero_cols.get(key, set())
        keep_cols = [c for c, ident in enumerate(src) if c not in zeroed and ident in present]
        if not keep_cols:
            raise CompactionError(f"layer {u.layer} ({key}): every input channel would be removed")
        for c, ident in enumerate(src):
            if c in keep_cols:
                continue
            if c not in zeroed and not _is_zero_identity(ident, removed_branches):
                raise CompactionError(f"layer {u.layer} ({key}): input channel {c} vanished without a zero mask")
        pos = {ident: j for j, ident in enumerate(stream)}
        keep = [pos[src[c]] for c in keep_cols]
        layer_dict.pop("in_keep", None)
        if keep != list(range(len(stream))):
            layer_dict["in_keep"] = keep
        rows = kept_rows[key]
        w, b = W[f"{key}.weight"], W[f"{key}.bias"]
        if u.kind == "conv":
            w = w[rows][:, keep_cols]
        else:
            cols = np.concatenate([np.arange(c * u.group, (c + 1) * u.group) for c in keep_cols])
            w = w[rows][:, cols]
        new_weights[f"{new_key}.weight"] = np.ascontiguousarray(w)
        new_weights[f"{new_key}.bias"] = b[rows].copy()
        return [(key, r) for r in rows]

    for i, layer in enumerate(spec.layers):
        if i in removed_blocks:
            continue
        nl = new_layers[layer_map[i]]
        kind = layer["kind"]
        if kind in ("conv", "linear"):
            stream = rebuild(str(i), str(layer_map[i]), nl)
            nl["out"] = len(stream)
        elif kind == "residual-block":
            saved = stream
            inner = rebuild(f"{i}.conv1", f"{layer_map[i]}.conv1", nl)
            nl["mid"] = len(inner)
            stream = inner
            rebuild(f"{i}.conv2", f"{layer_map[i]}.conv2", {})
            stream = saved
        elif kind == "inception-module":
            outs, branches = [], []
            for c, br in enumerate(layer["branches"]):
                if (i, c) in removed_branches:
                    continue
                nb = dict(br)
                outs += rebuild(f"{i}.branch{c}", f"{layer_map[i]}.branch{len(branches)}", nb)
                nb["out"] = len(kept_rows[f"{i}.branch{c}"])
                branches.append(nb)
            nl["branches"] = branches
            stream = outs
    new_spec = ArchitectureSpec(spec.input_shape, spec.classes, new_layers, spec.name)
    return CompactModel(new_spec, new_weights, structures)


def _is_removed_branch(key: str, removed_branches) -> bool:
    if ".branch" not in key:
        return False
    layer, c = key.split(".branch")
    return (int(layer), int(c)) in removed_branches


def _is_zero_identity(ident, removed_branches) -> bool:
    return _is_removed_branch(ident[0], removed_branches)


def _sole_producer(spec: ArchitectureSpec, units: dict[str, Unit], key: str) -> str | None:
    """Unit whose output rows feed ``key`` and nothing else, or None."""
    u = units[key]
    if key.endswith(".conv2"):
        return f"{u.layer}.conv1"
    if "." in key:          # block conv1 and branch convs read a shared stream
        return None
    for j in range(u.layer - 1, -1, -1):
        kind = spec.layers[j]["kind"]
        if kind in ("relu", "maxpool", "flatten"):
            continue
        if kind in ("conv", "linear"):
            return str(j)
        if kind == "inception-module":
            return "inception"   # resolved per identity by the caller
        return None          # residual stream
    return None


def _fold_negative_branch_scales(spec, units, unit_in, W, scale):
    """Fold negative branch masks into the columns of the units that read them.

    Only a flatten may sit between the module and its readers; anything else
    does not commute with a negative scale.
    """
    readers = [k for k in unit_in if any(ident in scale for ident in unit_in[k])]
    for key in readers:
        u = units[key]
        if "." not in key:
            between = {spec.layers[j]["kind"] for j in range(_module_before(spec, u.layer) + 1, u.layer)}
            if between - {"flatten"}:
                raise CompactionError(f"layer {u.layer} ({key}): cannot fold a negative branch mask "
                                      f"through {sorted(between - {'flatten'})}")
        elif ".conv1" in key:
            raise CompactionError(f"layer {u.layer}: cannot fold a negative branch mask into a residual stream")
        w = W[f"{key}.weight"]
        for c, ident in enumerate(unit_in[key]):
            if ident in scale:
                if u.kind == "conv":
                    w[:, c] *= scale[ident]
                else:
                    w[:, c * u.group:(c + 1) * u.group] *= scale[ident]


def _module_before(spec, layer: int) -> int:
    for j in range(layer - 1, -1, -1):
        if spec.layers[j]["kind"] == "inception-module":
            return j
    return -1


def _check_branch_consumer(spec, i, removed_branches):
    """A removed branch leaves zeros behind; that is only free if no residual add follows."""
    if not any(layer == i for layer, _ in removed_branches):
        return
    for j in range(i + 1, len(spec.layers)):
        kind = spec.layers[j]["kind"]
        if kind in ("relu", "maxpool", "flatten"):
            continue
        if kind == "residual-block":
            raise CompactionError(f"layer {i} (inception-module): removing a branch that feeds a residual stream")
        return


def prune(net: MaskedNetwork, threshold: float = 0.0) -> CompactModel:
    return compact(net, extract_prunable(net, threshold))


# ---------------------------------------------------------------- supervised stages


def evaluate(net: MaskedNetwork, images: np.ndarray, labels: np.ndarray, batch_size: int = 1000) -> float:
    """Top-1 error in percent; argmax ties go to the lowest class index."""
    if len(images) != len(labels):
        raise ValueError("image and label counts differ")
    if len(images) == 0:
        return 0.0
    pred = predict(net, images, batch_size).argmax(axis=1)
    return 100.0 * float(np.mean(pred != np.asarray(labels)))


def error_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    return 100.0 * float(np.mean(np.asarray(logits).argmax(axis=1) != np.asarray(labels)))


@dataclass
class FinetuneConfig:
    epochs: int = 10
    lr: float = 0.01
    lr_decay: float = 0.1
    lr_decay_epochs: float = 40.0
    momentum: float = 0.9
    weight_decay: float = 0.0002
    batch_size: int = 128
    seed: int = 0


def train_classifier(net: MaskedNetwork, images: np.ndarray, labels: np.ndarray, config: FinetuneConfig,
                     eval_data: tuple[np.ndarray, np.ndarray] | None = None, log=None) -> list[dict]:
    """Cross-entropy training with momentum SGD; returns one history row per epoch."""
    if net.mask is not None:
        raise ValueError("train the compact network; masks are not supported here")
    velocities = {k: np.zeros_like(p.data) for k, p in net.params.items()}
    n_batches = len(images) // config.batch_size
    history = []
    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay ** math.floor(epoch / config.lr_decay_epochs)
        perm = np.random.default_rng([config.seed, 31337, epoch]).permutation(len(images))
        total = 0.0
        for b in range(n_batches):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            logits = forward_masked(net, Tensor(images[idx], check=False))
            loss = nx.cross_entropy(logits, labels[idx])
            nx.backward(loss, net.params)
            for k, p in net.params.items():
                nx.sgd_momentum_step(p, velocities[k], lr, config.momentum, config.weight_decay)
            total += float(loss.data)
        row = {"epoch": epoch + 1, "loss": total / max(n_batches, 1), "lr": lr}
        if not math.isfinite(row["loss"]):
            raise FloatingPointError(f"non-finite training loss in epoch {epoch + 1}")
        if eval_data is not None:
            row["error"] = evaluate(net, *eval_data)
        history.append(row)
        if log is not None:
            log(row)
    return history


def finetune(model: CompactModel | MaskedNetwork, images, labels, config: FinetuneConfig,
             eval_data=None, log=None) -> tuple[MaskedNetwork, list[dict]]:
    """Label-based fine-tuning of a compact network (the only stage that reads labels)."""
    net = model.network() if isinstance(model, CompactModel) else model
    return net, train_classifier(net, images, labels, config, eval_data, log)


# ---------------------------------------------------------------- reporting


def equivalence_residual(net: MaskedNetwork, model: CompactModel, probes: np.ndarray) -> float:
    """max |logit difference| between the masked and compact networks on ``probes``."""
    masked = net.clone()
    if masked.mask is not None and model.removed:
        for s in model.removed:
            masked.mask.values.data[s.position] = 0.0
    a = predict(masked, probes)
    b = predict(model.network(trainable=False), probes)
    return float(np.max(np.abs(a - b))) if len(probes) else 0.0


def _reduction(before: int, after: int) -> float:
    return 100.0 * (1.0 - after / before) if before else 0.0


def format_millions(value: int, reference: int) -> str:
    return f"{value / 1e6:.2f}M({_reduction(reference, value):.1f}%)"


@dataclass
class PruneReport:
    removed: list[dict]
    pre_cost: CostReport
    post_cost: CostReport
    lam: float | None = None
    threshold: float = 0.0
    pre_error: float | None = None
    post_error: float | None = None
    masked_error: float | None = None
    equivalence_residual: float | None = None
    widths: str = ""

    @property
    def flops_reduction(self) -> float:
        return _reduction(self.pre_cost.flops, self.post_cost.flops)

    @property
    def params_reduction(self) -> float:
        return _reduction(self.pre_cost.params, self.post_cost.params)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "lam": self.lam,
            "threshold": self.threshold,
            "removed": self.removed,
            "pre_cost": self.pre_cost.to_dict(),
            "post_cost": self.post_cost.to_dict(),
            "flops_reduction": self.flops_reduction,
            "params_reduction": self.params_reduction,
            "pre_error": self.pre_error,
            "masked_error": self.masked_error,
            "post_error": self.post_error,
            "equivalence_residual": self.equivalence_residual,
            "widths": self.widths,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> PruneReport:
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {d.get('schema_version')!r}")

        def cost(c):
            return CostReport(c["flops"], c["params"], c["layers"])
        return cls(d["removed"], cost(d["pre_cost"]), cost(d["post_cost"]), d.get("lam"), d.get("threshold", 0.0),
                   d.get("pre_error"), d.get("post_error"), d.get("masked_error"),
                   d.get("equivalence_residual"), d.get("widths", ""))


def build_report(net: MaskedNetwork, model: CompactModel, lam: float | None = None, threshold: float = 0.0,
                 probes: np.ndarray | None = None) -> PruneReport:
    from .networks import describe_widths
    residual = equivalence_residual(net, model, probes) if probes is not None else None
    return PruneReport([s.to_dict() for s in model.removed], count_cost(net.spec), count_cost(model.spec),
                       lam, threshold, equivalence_residual=residual, widths=describe_widths(model.spec))
