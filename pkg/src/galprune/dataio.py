"""IDX dataset parsing, the binary checkpoint container and run configuration files."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .fista import FistaState, MaskOptimizer
from .gal import ConfigError, Discriminator, GALState, TrainConfig
from .networks import ArchitectureSpec, MaskedNetwork, MaskEntry, SoftMask, make_network
from .numerics import Tensor
from .pruner import FinetuneConfig

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataError(Exception):
    """Problem with an input dataset file."""


class MissingDataError(DataError):
    pass


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


# ---------------------------------------------------------------- IDX


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingDataError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: wrong magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise TruncatedFileError(f"{path}: expected {need} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx_images(path) -> np.ndarray:
    """Images as float64 N×1×H×W with bytes scaled to [0, 1]."""
    raw = _read_idx(path, IMAGE_MAGIC, 3)
    return (raw.astype(np.float64) / 255.0)[:, None, :, :]


def load_idx_labels(path) -> np.ndarray:
    return _read_idx(path, LABEL_MAGIC, 1).astype(np.int64)


def load_mnist_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels")
    return images, labels


def write_idx(path, array: np.ndarray, magic: int) -> None:
    """Write a uint8 array in IDX layout (used for test fixtures and subsets)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def default_data_dir() -> str:
    return os.environ.get("GALPRUNE_MNIST", "data/mnist")


def load_mnist_split(data_dir, split: str, limit: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    img, lab = MNIST_FILES[split]
    images, labels = load_mnist_idx(Path(data_dir) / img, Path(data_dir) / lab)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return images, labels


# ---------------------------------------------------------------- checkpoint container

CKPT_MAGIC = b"GALCKPT\x00"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_array(a: np.ndarray) -> bytes:
    a = np.asarray(a, dtype="<f8")
    return struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape) + a.tobytes(order="C")


def _unpack_array(buf: bytes) -> np.ndarray:
    ndim = buf[0]
    shape = struct.unpack_from(f"<{ndim}Q", buf, 1)
    offset = 1 + 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(buf) - offset != 8 * count:
        raise CheckpointError("array section has the wrong length")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """magic | u32 version | u32 sections | per section: u16 name length, name, u64 payload length, payload."""
    sections = [("meta", json.dumps(meta, sort_keys=True).encode())]
    sections += [(f"array:{k}", _pack_array(v)) for k, v in sorted(arrays.items())]
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(sections))]
    for name, payload in sections:
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<Q", len(payload)), payload]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise MissingDataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", raw, 8)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos, meta, arrays = 16, None, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            (plen,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            payload = raw[pos:pos + plen]
            if len(payload) != plen:
                raise CheckpointError(f"{path}: truncated section {name!r}")
            pos += plen
            if name == "meta":
                meta = json.loads(payload)
            elif name.startswith("array:"):
                arrays[name[6:]] = _unpack_array(payload)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if meta is None:
        raise CheckpointError(f"{path}: missing meta section")
    return meta, arrays


@dataclass
class Checkpoint:
    """Everything needed to rebuild a network and, for GAL runs, resume training."""
    spec: ArchitectureSpec
    params: dict[str, np.ndarray]
    stage: str = "baseline"                 # baseline | gal | compact | finetuned
    mask: np.ndarray | None = None
    mask_entries: list[MaskEntry] | None = None
    dropout_rate: float = 0.0
    iteration: int = 0
    arrays: dict[str, np.ndarray] = field(default_factory=dict)   # optimizer/discriminator/baseline state
    meta: dict = field(default_factory=dict)

    def network(self, trainable: bool = True) -> MaskedNetwork:
        net = make_network(self.spec, self.params, trainable=trainable, dropout_rate=self.dropout_rate)
        if self.mask is not None:
            net.mask = SoftMask(Tensor(self.mask.copy(), requires_grad=trainable, name="mask"), list(self.mask_entries))
        return net

    def save(self, path) -> None:
        meta = {"stage": self.stage, "architecture": self.spec.to_dict(), "dropout_rate": self.dropout_rate,
                "iteration": self.iteration, "mask_entries": None, "extra": self.meta}
        arrays = {f"param:{k}": v for k, v in self.params.items()}
        arrays.update({f"state:{k}": v for k, v in self.arrays.items()})
        if self.mask is not None:
            meta["mask_entries"] = [e.to_dict() for e in self.mask_entries]
            arrays["mask"] = self.mask
        write_container(path, meta, arrays)

    @classmethod
    def load(cls, path) -> Checkpoint:
        meta, arrays = read_container(path)
        try:
            spec = ArchitectureSpec.from_dict(meta["architecture"])
            entries = meta.get("mask_entries")
            return cls(
                spec=spec,
                params={k[6:]: v for k, v in arrays.items() if k.startswith("param:")},
                stage=meta["stage"],
                mask=arrays.get("mask"),
                mask_entries=[MaskEntry(e["kind"], e["host"], e["index"]) for e in entries] if entries else None,
                dropout_rate=meta["dropout_rate"],
                iteration=meta["iteration"],
                arrays={k[6:]: v for k, v in arrays.items() if k.startswith("state:")},
                meta=meta.get("extra", {}),
            )
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing field {exc}") from exc

    @classmethod
    def from_network(cls, net: MaskedNetwork, stage: str, **meta) -> Checkpoint:
        mask = net.mask.values.data.copy() if net.mask is not None else None
        entries = list(net.mask.entries) if net.mask is not None else None
        return cls(net.spec, {k: p.data.copy() for k, p in net.params.items()}, stage, mask, entries,
                   net.dropout_rate, meta=dict(meta))


def gal_checkpoint(baseline: MaskedNetwork, net: MaskedNetwork, D: Discriminator, state: GALState,
                   config: TrainConfig, **extra) -> Checkpoint:
    """Snapshot of a GAL run that :func:`restore_gal` resumes bitwise."""
    ck = Checkpoint.from_network(net, "gal")
    ck.iteration = state.iteration
    ck.arrays.update({f"baseline:{k}": p.data for k, p in baseline.params.items()})
    ck.arrays.update({f"velocity:{k}": v for k, v in state.velocities.items()})
    ck.arrays.update({f"disc:{k}": v for k, v in D.state_arrays().items()})
    opt = state.mask_opt
    opt_meta = {"kind": opt.kind}
    if opt.kind == "fista":
        ck.arrays["fista_m_prev"] = opt.fista.m_prev
        opt_meta.update(alpha=opt.fista.alpha, k=opt.fista.k)
    else:
        ck.arrays["mask_velocity"] = opt.velocity
    ck.meta = {"train_config": config.to_dict(), "mask_optimizer": opt_meta,
               "rng_state": state.rng.bit_generator.state, "history": state.history,
               "disc_widths": list(D.widths), **extra}
    return ck


def restore_gal(ck: Checkpoint) -> tuple[MaskedNetwork, MaskedNetwork, Discriminator, GALState, TrainConfig]:
    if ck.stage != "gal":
        raise CheckpointError(f"expected a GAL checkpoint, found stage {ck.stage!r}")
    config = TrainConfig.from_dict(ck.meta["train_config"])
    net = ck.network()
    baseline = make_network(ck.spec, {k[9:]: v for k, v in ck.arrays.items() if k.startswith("baseline:")},
                            trainable=False)
    widths = ck.meta["disc_widths"]
    D = Discriminator(widths[0], widths=tuple(widths[1:-1]), init="zeros")
    D.load_arrays({k[5:]: v for k, v in ck.arrays.items() if k.startswith("disc:")})
    om = ck.meta["mask_optimizer"]
    if om["kind"] == "fista":
        opt = MaskOptimizer("fista", fista=FistaState(om["alpha"], ck.arrays["fista_m_prev"].copy(), om["k"]))
    else:
        opt = MaskOptimizer("sgd", velocity=ck.arrays["mask_velocity"].copy())
    rng = np.random.default_rng()
    rng.bit_generator.state = ck.meta["rng_state"]
    state = GALState(ck.iteration, {k[9:]: v.copy() for k, v in ck.arrays.items() if k.startswith("velocity:")},
                     opt, rng, list(ck.meta.get("history", [])))
    return baseline, net, D, state, config


# ---------------------------------------------------------------- run configuration


ARCHITECTURES = ("lenet", "minires", "miniinception")


@dataclass
class RunConfig:
    """File form of a full pipeline run; every default is filled in."""
    architecture: str = "lenet"
    widths: list = field(default_factory=lambda: [20, 50, 500])   # lenet filters / [blocks, width] / [modules, branches, width, stem]
    structures: list = field(default_factory=lambda: ["channel"])
    data_dir: str | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    threshold: float = 0.0
    seed: int = 0
    out: str = "runs/default"
    gal: TrainConfig = field(default_factory=TrainConfig)
    pretrain: FinetuneConfig = field(default_factory=lambda: FinetuneConfig(epochs=10, lr=0.01))
    finetune: FinetuneConfig = field(default_factory=lambda: FinetuneConfig(epochs=10, lr=0.001))

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.threshold < 0:
            raise ConfigError("threshold must be non-negative")

    def resolved_data_dir(self) -> str:
        return self.data_dir or default_data_dir()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "gal" in d:
            d["gal"] = TrainConfig.from_dict(d["gal"])
        for key in ("pretrain", "finetune"):
            if key in d:
                sub = d[key]
                bad = set(sub) - {f.name for f in fields(FinetuneConfig)}
                if bad:
                    raise ConfigError(f"unknown {key} keys: {sorted(bad)}")
                base = asdict(getattr(cls(), key))
                base.update(sub)
                d[key] = FinetuneConfig(**base)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    def build_spec(self) -> ArchitectureSpec:
        from . import networks as nw
        w = list(self.widths)
        try:
            if self.architecture == "lenet":
                return nw.build_lenet(tuple(w))
            if self.architecture == "minires":
                return nw.build_minires(*w)
            return nw.build_miniinception(*w)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad widths {w} for {self.architecture}: {exc}") from exc
