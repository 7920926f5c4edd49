"""Generator/discriminator game for learning a sparse soft mask without labels.

The generator is the masked network, initialised from the baseline. The
discriminator sees baseline logits as "real" and generator logits as "fake".
Each iteration takes one discriminator ascent step and one generator step:
weights by momentum SGD, the mask by FISTA (or SGD for the ablation).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable

import numpy as np

from . import numerics as nx
from .fista import MaskOptimizer, solve_mask_subproblem
from .networks import MaskedNetwork, forward_masked, predict
from .numerics import Tensor

EPS = 1e-7
D_REGULARIZERS = ("neg-l1", "neg-l2", "adversarial", "none")
MASK_OPTIMIZERS = ("fista", "sgd")
G_UPDATES = ("alternating", "joint")

METRIC_COLUMNS = ("iteration", "epoch", "adversarial", "data", "mask_l1", "weight_l2", "d_reg",
                  "d_accuracy", "exact_zero_count", "eta")


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    """A loss went non-finite; ``state`` carries the diagnostic snapshot."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass
class TrainConfig:
    lam: float = 0.05
    lr: float = 0.001
    lr_decay: float = 0.1
    lr_decay_epochs: float = 40.0
    weight_decay: float = 0.0002
    momentum: float = 0.9
    batch_size: int = 128
    d_steps: int = 1
    g_steps: int = 1
    epochs: float = 30.0
    max_iterations: int | None = None
    dropout: float = 0.1
    d_regularizer: str = "adversarial"
    d_reg_coef: float = 1.0
    d_lr: float | None = None
    mask_optimizer: str = "fista"
    g_update: str = "alternating"
    use_gan: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.d_steps < 1 or self.g_steps < 1:
            raise ConfigError("d_steps and g_steps must be >= 1")
        if self.lr <= 0 or self.batch_size <= 0 or (self.d_lr is not None and self.d_lr <= 0):
            raise ConfigError("learning rates and batch size must be positive")
        if not 0 < self.lr_decay <= 1 or self.lr_decay_epochs <= 0:
            raise ConfigError("lr_decay must lie in (0, 1] and lr_decay_epochs be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.d_regularizer not in D_REGULARIZERS:
            raise ConfigError(f"d_regularizer must be one of {D_REGULARIZERS}")
        if self.mask_optimizer not in MASK_OPTIMIZERS:
            raise ConfigError(f"mask_optimizer must be one of {MASK_OPTIMIZERS}")
        if self.g_update not in G_UPDATES:
            raise ConfigError(f"g_update must be one of {G_UPDATES}")
        if self.epochs < 0 or (self.max_iterations is not None and self.max_iterations < 0):
            raise ConfigError("epochs / max_iterations must be non-negative")

    def eta(self, epoch: float) -> float:
        """Step-decay schedule: lr * decay^floor(epoch / interval)."""
        return self.lr * self.lr_decay ** math.floor(epoch / self.lr_decay_epochs)

    def total_iterations(self, batches_per_epoch: int) -> int:
        if self.max_iterations is not None:
            return self.max_iterations
        return int(round(self.epochs * batches_per_epoch))

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    adversarial: float = 0.0
    data: float = 0.0
    mask_l1: float = 0.0
    weight_l2: float = 0.0
    d_regularizer: float = 0.0

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())


# ---------------------------------------------------------------- discriminator


class Discriminator:
    """Fully-connected in -> 128 -> 256 -> 128 -> 1 with ReLUs and a sigmoid output."""

    def __init__(self, in_features: int, rng: np.random.Generator | None = None,
                 widths: tuple[int, ...] = (128, 256, 128), init: str = "normal"):
        self.widths = (in_features, *widths, 1)
        self.params: dict[str, Tensor] = {}
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            if init == "zeros":
                w = np.zeros((b, a))
            elif init == "normal":
                w = rng.normal(0.0, math.sqrt(2.0 / a), size=(b, a))
            else:
                raise ValueError(f"unknown init {init!r}")
            self.params[f"fc{i}.weight"] = Tensor(w, requires_grad=True, name=f"fc{i}.weight")
            self.params[f"fc{i}.bias"] = Tensor(np.zeros(b), requires_grad=True, name=f"fc{i}.bias")

    @property
    def in_features(self) -> int:
        return self.widths[0]

    def weights(self) -> list[Tensor]:
        return [p for k, p in self.params.items() if k.endswith(".weight")]

    def __call__(self, features) -> Tensor:
        h = features if isinstance(features, Tensor) else Tensor(features, check=False)
        if h.data.ndim != 2 or h.shape[1] != self.in_features:
            raise nx.ShapeError(f"discriminator expects N×{self.in_features} features, got {h.shape}")
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            h = nx.linear(h, self.params[f"fc{i}.weight"], self.params[f"fc{i}.bias"])
            if i < n_layers - 1:
                h = nx.relu(h)
        return nx.reshape(nx.sigmoid(h), (-1,))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.params[k].data = np.array(v, dtype=float)


# ---------------------------------------------------------------- loss terms


def _probs(p) -> Tensor:
    return nx.clip(p if isinstance(p, Tensor) else Tensor(p, check=False), EPS, 1.0 - EPS)


def adversarial_loss(d_real, d_fake) -> Tensor:
    """mean(log D(real)) + mean(log(1 - D(fake))), probabilities clamped to [eps, 1-eps]."""
    d_real, d_fake = _probs(d_real), _probs(d_fake)
    if d_real.shape != d_fake.shape:
        raise nx.ShapeError(f"batch sizes differ: {d_real.shape} vs {d_fake.shape}")
    return nx.mean(nx.log(d_real)) + nx.mean(nx.log(1.0 - d_fake))


def data_loss(fb, fg) -> Tensor:
    """(1/2n) * sum over the batch of ||fb - fg||^2."""
    fb = fb if isinstance(fb, Tensor) else Tensor(fb, check=False)
    fg = fg if isinstance(fg, Tensor) else Tensor(fg, check=False)
    if fb.shape != fg.shape:
        raise nx.ShapeError(f"feature shapes differ: {fb.shape} vs {fg.shape}")
    n = fb.shape[0]
    return nx.tsum(nx.square(fb - fg)) * (1.0 / (2 * n))


def d_regularizer(kind: str, d_fake, weights: Iterable[Tensor]) -> Tensor:
    """Term added to the discriminator's maximisation objective.

    neg-l1: -sum|w|;  neg-l2: -0.5 * sum w^2;  adversarial: mean(log D(fake)).
    """
    if kind == "neg-l1":
        return -sum((nx.tsum(nx.tabs(w)) for w in weights), Tensor(0.0))
    if kind == "neg-l2":
        return -0.5 * sum((nx.tsum(nx.square(w)) for w in weights), Tensor(0.0))
    if kind == "adversarial":
        return nx.mean(nx.log(_probs(d_fake)))
    if kind == "none":
        return Tensor(0.0)
    raise ConfigError(f"unknown discriminator regularizer {kind!r}; expected one of {D_REGULARIZERS}")


def discriminator_objective(D: Discriminator, fb, fg, config: TrainConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Objective the discriminator ascends; returns (total, adversarial, regularizer)."""
    d_fake = D(fg)
    adv = adversarial_loss(D(fb), d_fake)
    reg = d_regularizer(config.d_regularizer, d_fake, D.weights())
    return adv + config.d_reg_coef * reg, adv, reg


def discriminator_accuracy(D: Discriminator, fb, fg) -> float:
    with nx.no_grad():
        real, fake = D(fb).data, D(fg).data
    return float(((real > 0.5).sum() + (fake < 0.5).sum()) / (real.size + fake.size))


def discriminator_step(D: Discriminator, fb, fg, config: TrainConfig, lr: float) -> tuple[LossBreakdown, float]:
    """One plain-SGD ascent step on the discriminator objective; the generator is untouched."""
    total, adv, reg = discriminator_objective(D, fb, fg, config)
    acc = discriminator_accuracy(D, fb, fg)
    nx.backward(-total, D.params)
    for p in D.params.values():
        p.data -= lr * p.grad
    return LossBreakdown(adversarial=float(adv.data), d_regularizer=float(reg.data)), acc


def generator_smooth_objective(net: MaskedNetwork, D: Discriminator | None, fb, x, config: TrainConfig,
                               rng: np.random.Generator | None, noise: bool = True) -> tuple[Tensor, dict]:
    """H + 0.5*wd*||W_G||^2 for the generator step, excluding lam*||m||_1.

    H = mean(log(1 - D(f_g(x, z)))) + data loss. The weight-decay term enters
    the returned value as a constant; its gradient is applied by the weight
    optimizer.
    """
    fg = forward_masked(net, x, noise_active=noise, rng=rng)
    dl = data_loss(fb, fg)
    if D is not None and config.use_gan:
        adv = nx.mean(nx.log(1.0 - _probs(D(fg))))
        h = adv + dl
    else:
        adv = Tensor(0.0)
        h = dl
    wl2 = 0.5 * config.weight_decay * net.weight_sq_norm()
    return h + wl2, {"adversarial": float(adv.data), "data": float(dl.data), "weight_l2": wl2}


# ---------------------------------------------------------------- data stream


class ImageStream:
    """Shuffled mini-batches of images addressed by global iteration.

    Batch ``t`` is a pure function of (seed, t), so a resumed run sees the
    same data order. The trailing partial batch of each epoch is dropped.
    """

    def __init__(self, images: np.ndarray, batch_size: int, seed: int = 0):
        if len(images) < batch_size:
            raise ValueError(f"need at least {batch_size} images, got {len(images)}")
        self.images = images
        self.batch_size = batch_size
        self.seed = seed
        self.batches_per_epoch = len(images) // batch_size
        self._perm_epoch = -1
        self._perm = None

    def indices(self, t: int) -> np.ndarray:
        epoch, b = divmod(t, self.batches_per_epoch)
        if epoch != self._perm_epoch:
            self._perm = np.random.default_rng([self.seed, 7919, epoch]).permutation(len(self.images))
            self._perm_epoch = epoch
        return self._perm[b * self.batch_size:(b + 1) * self.batch_size]


# ---------------------------------------------------------------- training loop


@dataclass
class GALState:
    iteration: int
    velocities: dict[str, np.ndarray]
    mask_opt: MaskOptimizer
    rng: np.random.Generator
    history: list[dict] = field(default_factory=list)


def init_state(net: MaskedNetwork, config: TrainConfig) -> GALState:
    return GALState(
        iteration=0,
        velocities={k: np.zeros_like(p.data) for k, p in net.params.items()},
        mask_opt=MaskOptimizer.create(config.mask_optimizer, net.mask.values.data),
        rng=np.random.default_rng([config.seed, 104729]),
    )


def make_discriminator(in_features: int, config: TrainConfig) -> Discriminator:
    return Discriminator(in_features, np.random.default_rng([config.seed, 15485863]))


@dataclass
class GALResult:
    net: MaskedNetwork
    D: Discriminator
    state: GALState

    @property
    def history(self):
        return self.state.history

    @property
    def mask(self) -> np.ndarray:
        return self.net.mask.values.data


def _set_trainable(tensors, flag: bool):
    for t in tensors:
        t.requires_grad = flag


def _generator_step(net, D, fb, x, config, state, eta):
    weights = list(net.params.values())
    mask = net.mask.values
    m = mask.data.copy()
    opt = state.mask_opt

    if config.g_update == "joint":
        y = opt.lookahead(m)
        mask.data = y.copy()
        _set_trainable(weights, True)
        mask.requires_grad = True
        obj, parts = generator_smooth_objective(net, D, fb, x, config, state.rng)
        nx.backward(obj, net.params)
        grad_y = mask.grad.copy()
        for k, p in net.params.items():
            nx.sgd_momentum_step(p, state.velocities[k], eta, config.momentum, config.weight_decay)
        grad_at = lambda point: grad_y  # noqa: E731 - evaluated at the same look-ahead point
    else:
        # weights with the mask fixed
        mask.requires_grad = False
        obj, parts = generator_smooth_objective(net, D, fb, x, config, state.rng)
        nx.backward(obj, net.params)
        for k, p in net.params.items():
            nx.sgd_momentum_step(p, state.velocities[k], eta, config.momentum, config.weight_decay)

        # mask with the weights fixed
        def grad_at(point):
            mask.data = np.array(point, dtype=float)
            mask.requires_grad = True
            _set_trainable(weights, False)
            try:
                o, _ = generator_smooth_objective(net, D, fb, x, config, state.rng)
                nx.backward(o)
            finally:
                _set_trainable(weights, True)
            return mask.grad.copy()

    m_new = solve_mask_subproblem(opt, m, grad_at, config.lam, eta, config.momentum)
    mask.data = m_new
    mask.requires_grad = True
    mask.grad = None
    return parts


def train_gal(baseline: MaskedNetwork, net: MaskedNetwork, D: Discriminator, stream: ImageStream,
              config: TrainConfig, state: GALState | None = None, stop_at: int | None = None,
              baseline_features: np.ndarray | None = None,
              callback: Callable[[dict], None] | None = None) -> GALResult:
    """Alternate discriminator and generator updates for the configured number of iterations.

    Only images are consumed; no class labels are read anywhere on this path.
    ``stop_at`` halts early at that iteration (used for checkpointing).
    """
    if net.mask is None:
        raise ValueError("the generator has no soft mask attached")
    if D.in_features != baseline.spec.classes:
        raise nx.ShapeError("discriminator width does not match the baseline logits")
    state = state or init_state(net, config)
    total = config.total_iterations(stream.batches_per_epoch)
    end = total if stop_at is None else min(total, stop_at)
    if baseline_features is None:
        baseline_features = predict(baseline, stream.images)

    while state.iteration < end:
        t = state.iteration
        epoch = t / stream.batches_per_epoch
        eta = config.eta(epoch)
        d_lr = eta if config.d_lr is None else config.d_lr * (eta / config.lr)
        idx = stream.indices(t)
        x = Tensor(stream.images[idx], check=False)
        fb = baseline_features[idx]

        dparts, acc = LossBreakdown(), 0.0
        if config.use_gan:
            for _ in range(config.d_steps):
                with nx.no_grad():
                    fg = forward_masked(net, x, noise_active=False).data
                dparts, acc = discriminator_step(D, fb, fg, config, d_lr)
        for _ in range(config.g_steps):
            gparts = _generator_step(net, D if config.use_gan else None, fb, x, config, state, eta)

        m = net.mask.values.data
        row = {
            "iteration": t + 1,
            "epoch": epoch,
            "adversarial": dparts.adversarial,
            "data": gparts["data"],
            "mask_l1": config.lam * float(np.abs(m).sum()),
            "weight_l2": gparts["weight_l2"],
            "d_reg": dparts.d_regularizer,
            "d_accuracy": acc,
            "exact_zero_count": int(np.count_nonzero(m == 0.0)),
            "eta": eta,
        }
        if not all(math.isfinite(row[k]) for k in ("adversarial", "data", "mask_l1", "weight_l2", "d_reg")) \
                or not np.all(np.isfinite(m)):
            raise TrainingDiverged(f"non-finite loss at iteration {t + 1}", {"row": row, "mask": m.copy()})
        state.history.append(row)
        state.iteration = t + 1
        if callback is not None:
            callback(row)
    return GALResult(net, D, state)
