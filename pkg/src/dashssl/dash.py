"""Dynamic-threshold semi-supervised training.

The trainer runs a supervised warm-up stage followed by a selection
stage in which unlabeled examples whose pseudo-label loss falls below a
geometrically decaying threshold contribute to a truncated gradient.
Fixed-confidence-threshold baselines share the same loop skeleton so
runs are directly comparable.
"""

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import augment as aug
from . import models
from .data import PROV_UNLABELED_Q, DatasetBundle, examples_xy
from .errors import CapExceededError, ConfigError, DivergenceError, InfeasibleConstantsError
from .models import Model, ParamVector

MODE_THEORY = "theory"
MODE_PRACTICE = "practice"
MODES = (MODE_THEORY, MODE_PRACTICE)

GRAD_UNLABELED_ONLY = "unlabeled-only"
GRAD_WITH_LABELED = "with-labeled"
GRADIENT_FORMS = (GRAD_UNLABELED_ONLY, GRAD_WITH_LABELED)

LR_CONSTANT = "constant"
LR_COSINE = "cosine"
LR_SCHEDULES = (LR_CONSTANT, LR_COSINE)

ALGO_DASH = "dash"
ALGO_FIXMATCH = "fixmatch"
ALGO_PL = "pl"
ALGO_DASH_PL = "dash-pl"
ALGORITHMS = (ALGO_DASH, ALGO_FIXMATCH, ALGO_PL, ALGO_DASH_PL)

DEFAULT_N_CAP = 2 ** 20

METRICS_COLUMNS = ["step", "epoch", "rho_t", "n_sampled", "n_selected",
                   "n_sel_correct", "n_sel_wrong", "n_sel_P", "n_sel_Q",
                   "labeled_loss", "unlabeled_loss", "test_error", "lr"]


@dataclass
class ThresholdSchedule:
    """Geometric threshold decay rho_t = max(C * gamma^-k * rho_hat, floor).

    Before activation_epoch the threshold is infinite.  The decay count k
    is the number of completed decay periods after activation: one per
    step when decay_every_epochs is None, otherwise one per that many
    epochs.
    """

    C: float
    gamma: float
    rho_hat: Optional[float] = None
    floor: float = 0.0
    activation_epoch: int = 0
    decay_every_epochs: Optional[int] = None
    steps_per_epoch: int = 1

    def __post_init__(self):
        if not self.C > 1.0:
            raise ValueError("C must be > 1")
        if not self.gamma > 1.0:
            raise ValueError("gamma must be > 1")
        if self.rho_hat is not None and not self.rho_hat > 0.0:
            raise ValueError("rho_hat must be > 0 when given")
        if self.floor < 0.0:
            raise ValueError("floor must be >= 0")
        if self.activation_epoch < 0:
            raise ValueError("activation_epoch must be >= 0")
        if self.decay_every_epochs is not None and self.decay_every_epochs < 1:
            raise ValueError("decay_every_epochs must be >= 1 when given")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")


def threshold(t: int, schedule: ThresholdSchedule) -> float:
    """Threshold at 1-based step t."""
    if t < 1:
        raise ValueError("step index t must be >= 1")
    epoch = (t - 1) // schedule.steps_per_epoch
    if epoch < schedule.activation_epoch:
        return math.inf
    if schedule.rho_hat is None:
        raise ValueError("schedule has no rho_hat; estimate or set one first")
    if schedule.decay_every_epochs is None:
        k = (t - 1) - schedule.activation_epoch * schedule.steps_per_epoch
    else:
        k = (epoch - schedule.activation_epoch) // schedule.decay_every_epochs
    return max(schedule.C * schedule.gamma ** (-k) * schedule.rho_hat,
               schedule.floor)


def select(losses: np.ndarray, rho: float) -> np.ndarray:
    """Boolean selection mask; the boundary loss == rho is included."""
    return np.asarray(losses, dtype=np.float64) <= rho


def truncated_gradient(model: Model,
                       batch: Sequence[Tuple[np.ndarray, np.ndarray]],
                       rho_t: float
                       ) -> Tuple[ParamVector, np.ndarray, np.ndarray]:
    """Mean gradient over the below-threshold subset of a pseudo-labeled batch.

    batch holds (view, target-distribution) pairs.  Returns (gradient,
    selection mask, per-example losses); with nothing selected the
    gradient is the zero vector.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
    T = np.stack([np.asarray(t, dtype=np.float64) for _, t in batch])
    losses = models.batch_losses(model, X, T)
    mask = select(losses, rho_t)
    if not mask.any():
        zero = ParamVector(np.zeros(model.params.size), dict(model.params.layout))
        return zero, mask, losses
    pairs = [(X[i], T[i]) for i in np.flatnonzero(mask)]
    _, grad = models.loss_and_grad(model, pairs)
    return grad, mask, losses


def truncated_gradient_with_labeled(model: Model,
                                    batch: Sequence[Tuple[np.ndarray, np.ndarray]],
                                    labeled: Sequence[Tuple[np.ndarray, np.ndarray]],
                                    rho_t: float
                                    ) -> Tuple[ParamVector, np.ndarray, np.ndarray]:
    """Truncated gradient pooled with the labeled set.

    The numerator sums gradients over selected unlabeled examples and all
    labeled examples; the denominator is N_l + (number selected).
    Requires the unlabeled draw to outnumber the labeled set.
    """
    n_t = len(batch)
    n_l = len(labeled)
    if n_l and n_t <= n_l:
        raise ConfigError(
            f"with-labeled gradient needs n_t > N_l (got n_t={n_t}, N_l={n_l})")
    X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
    T = np.stack([np.asarray(t, dtype=np.float64) for _, t in batch])
    losses = models.batch_losses(model, X, T)
    mask = select(losses, rho_t)
    n_sel = int(mask.sum())
    total = np.zeros(model.params.size)
    if n_sel:
        pairs = [(X[i], T[i]) for i in np.flatnonzero(mask)]
        _, g_u = models.loss_and_grad(model, pairs)
        total += g_u.values * n_sel
    if n_l:
        _, g_s = models.loss_and_grad(model, list(labeled))
        total += g_s.values * n_l
    denom = n_l + n_sel
    if denom == 0:
        grad = ParamVector(total, dict(model.params.layout))
    else:
        grad = ParamVector(total / denom, dict(model.params.layout))
    return grad, mask, losses


def estimate_rho_hat_practical(model: Model, labeled) -> float:
    """Mean supervised loss over the labeled set, no augmentation."""
    pairs = _labeled_pairs(model, labeled)
    if not pairs:
        raise ValueError("cannot estimate rho_hat from an empty labeled set")
    return models.mean_loss(model, pairs)


def rho_hat_theoretical(a: float, G: float, delta: float, mu: float,
                        m: int, a0: float, b0: float) -> float:
    """Target loss level max(a, 4G^2 (1 + delta*b0*m) / (delta*mu*a0*m))."""
    if a0 <= 0.0:
        raise InfeasibleConstantsError(f"a0 = {a0!r} must be positive")
    if min(a, G, delta, mu, m) <= 0 or b0 < 0:
        raise ValueError("a, G, delta, mu, m must be positive and b0 >= 0")
    return max(a, 4.0 * G * G * (1.0 + delta * b0 * m) / (delta * mu * a0 * m))


@dataclass
class DashConfig:
    mode: str = MODE_PRACTICE
    algorithm: str = ALGO_DASH
    schedule: ThresholdSchedule = field(
        default_factory=lambda: ThresholdSchedule(C=1.0001, gamma=1.27, floor=0.05,
                                                  activation_epoch=10,
                                                  decay_every_epochs=9))
    # warm-up stage
    T0: int = 0
    m0: int = 64
    eta0: float = 0.1
    # selection stage
    T: int = 0
    m: int = 64
    eta: float = 0.1
    lambda_u: float = 1.0
    gradient_form: str = GRAD_UNLABELED_ONLY
    sharpen_temperature: float = 0.5
    lr_schedule: str = LR_CONSTANT
    weight_decay: float = 0.0
    momentum: float = 0.0
    tau: float = 0.95
    seed: int = 0
    n_cap: int = DEFAULT_N_CAP
    smoothness: Optional[float] = None
    augment: aug.AugmentPolicy = field(default_factory=aug.AugmentPolicy)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.gradient_form not in GRADIENT_FORMS:
            raise ValueError(f"unknown gradient_form {self.gradient_form!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.T0 < 0 or self.T < 0:
            raise ValueError("T0 and T must be >= 0")
        if self.m0 < 1 or self.m < 1:
            raise ValueError("m0 and m must be >= 1")
        if self.eta0 <= 0 or self.eta <= 0:
            raise ValueError("learning rates must be > 0")
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be >= 0")
        if self.sharpen_temperature <= 0:
            raise ValueError("sharpen_temperature must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.n_cap < 1:
            raise ValueError("n_cap must be >= 1")
        if self.m > self.n_cap:
            raise ValueError("m exceeds n_cap")
        if self.smoothness is not None and self.mode == MODE_THEORY:
            if self.eta0 * self.smoothness > 1.0 or self.eta * self.smoothness > 1.0:
                raise ValueError(
                    "theory mode requires eta0 * L <= 1 and eta * L <= 1")


@dataclass
class SelectionStats:
    step: int
    epoch: int
    rho_t: float
    n_sampled: int
    n_selected: int
    n_sel_correct: int
    n_sel_wrong: int
    n_sel_P: int
    n_sel_Q: int
    labeled_loss: float
    unlabeled_loss: float
    test_error: float
    lr: float

    def __post_init__(self):
        if self.n_selected != self.n_sel_P + self.n_sel_Q:
            raise ValueError("selection counts must satisfy n_selected = P + Q")
        if self.n_selected != self.n_sel_correct + self.n_sel_wrong:
            raise ValueError("selection counts must satisfy n_selected = correct + wrong")
        if self.n_selected > self.n_sampled:
            raise ValueError("cannot select more than was sampled")

    def row(self) -> List[str]:
        return [str(self.step), str(self.epoch), repr(float(self.rho_t)),
                str(self.n_sampled), str(self.n_selected),
                str(self.n_sel_correct), str(self.n_sel_wrong),
                str(self.n_sel_P), str(self.n_sel_Q),
                repr(float(self.labeled_loss)), repr(float(self.unlabeled_loss)),
                repr(float(self.test_error)), repr(float(self.lr))]


def _labeled_pairs(model: Model, labeled) -> List[Tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for ex in labeled:
        if ex.true_label is None:
            raise ValueError("labeled example without a label")
        pairs.append((ex.x, models.one_hot(ex.true_label, model.num_classes)))
    return pairs


def warmup(model: Model, labeled, config: DashConfig,
           rng: np.random.Generator) -> Model:
    """Supervised SGD for T0 steps with batch size m0 and rate eta0.

    Practice mode applies weak augmentation to the inputs; theory mode
    uses them as-is.  The input model is not mutated.
    """
    model = model.copy()
    if config.T0 == 0:
        return model
    if not labeled:
        raise ValueError("warm-up needs a labeled set")
    Xl = np.stack([ex.x for ex in labeled])
    Tl = np.stack([models.one_hot(ex.true_label, model.num_classes)
                   for ex in labeled])
    for step in range(1, config.T0 + 1):
        idx = rng.integers(0, Xl.shape[0], size=config.m0)
        Xb = Xl[idx]
        if config.mode == MODE_PRACTICE:
            Xb = aug.weak_augment_batch(Xb, config.augment, rng)
        loss, grad = models.loss_and_grad(model, [(Xb[i], Tl[idx[i]])
                                                  for i in range(len(idx))])
        if not math.isfinite(loss):
            raise DivergenceError(step, "non-finite warm-up loss")
        model.params.values -= config.eta0 * grad.values
        if not np.all(np.isfinite(model.params.values)):
            raise DivergenceError(step, "non-finite parameters during warm-up")
    return model


def _learning_rate(config: DashConfig, t: int) -> float:
    if config.lr_schedule == LR_CONSTANT:
        return config.eta
    total = max(config.T, 1)
    return config.eta * math.cos(7.0 * math.pi * (t - 1) / (16.0 * total))


def _theory_batch_size(config: DashConfig, t: int) -> int:
    n_t = int(math.floor(config.m * config.schedule.gamma ** (t - 1) + 1e-9))
    if n_t > config.n_cap:
        raise CapExceededError(t, n_t, config.n_cap)
    return max(1, n_t)


def dash_train(bundle: DatasetBundle, config: DashConfig, model: Model
               ) -> Tuple[Model, List[SelectionStats], Dict[str, float]]:
    """Run warm-up plus T selection-stage steps; returns (model, stats, log).

    RNG draws per step happen in a fixed order (unlabeled indices, weak
    noise, strong noise and mask, labeled indices) so reruns with the
    same config are bit-identical.
    """
    bundle.validate()
    model = model.copy()
    if model.input_dim != bundle.input_dim or model.num_classes != bundle.num_classes:
        raise ValueError("model shape does not match bundle")
    rng = np.random.default_rng(config.seed)
    dynamic = config.algorithm in (ALGO_DASH, ALGO_DASH_PL)
    augmented = config.algorithm in (ALGO_DASH, ALGO_FIXMATCH)
    practice = config.mode == MODE_PRACTICE

    Xu, yu = examples_xy(bundle.unlabeled)
    is_q = np.array([ex.provenance == PROV_UNLABELED_Q for ex in bundle.unlabeled])
    labeled_pairs = _labeled_pairs(model, bundle.labeled)
    Xl = np.stack([p[0] for p in labeled_pairs])
    Tl = np.stack([p[1] for p in labeled_pairs])
    if bundle.test:
        Xt, yt = examples_xy(bundle.test)
    else:
        Xt, yt = None, None
    n_l = len(labeled_pairs)
    k = model.num_classes

    steps_per_epoch = max(1, math.ceil(len(bundle.unlabeled) / config.m)) \
        if practice else 1
    schedule = replace(config.schedule, steps_per_epoch=steps_per_epoch)

    model = warmup(model, bundle.labeled, config, rng)
    if dynamic and schedule.rho_hat is None:
        schedule = replace(schedule,
                           rho_hat=estimate_rho_hat_practical(model, bundle.labeled))

    fixed_level = -math.log(config.tau)
    velocity = np.zeros(model.params.size)
    stats: List[SelectionStats] = []

    for t in range(1, config.T + 1):
        lr = _learning_rate(config, t)
        n_t = _theory_batch_size(config, t) if config.mode == MODE_THEORY else config.m
        idx = rng.integers(0, Xu.shape[0], size=n_t)
        Xb, yb, qb = Xu[idx], yu[idx], is_q[idx]

        if augmented:
            weak = aug.weak_augment_batch(Xb, config.augment, rng)
            loss_view = aug.strong_augment_batch(Xb, config.augment, rng)
        else:
            weak = Xb
            loss_view = Xb

        H = models.softmax(models.forward_batch(model, weak))
        conf = H.max(axis=1)
        hard = np.argmax(H, axis=1)

        rho_t = threshold(t, schedule) if dynamic else fixed_level
        soft = (config.algorithm == ALGO_DASH and practice
                and rho_t > schedule.floor)
        if soft:
            powered = H ** (1.0 / config.sharpen_temperature)
            targets = powered / powered.sum(axis=1, keepdims=True)
        else:
            targets = np.eye(k)[hard]

        pairs = [(loss_view[i], targets[i]) for i in range(n_t)]
        if dynamic:
            if config.gradient_form == GRAD_WITH_LABELED:
                grad, mask, losses = truncated_gradient_with_labeled(
                    model, pairs, labeled_pairs, rho_t)
            else:
                grad, mask, losses = truncated_gradient(model, pairs, rho_t)
        else:
            losses = models.batch_losses(model, loss_view, targets)
            mask = conf >= config.tau
            if mask.any():
                sel = [(loss_view[i], targets[i]) for i in np.flatnonzero(mask)]
                _, grad = models.loss_and_grad(model, sel)
            else:
                grad = ParamVector(np.zeros(model.params.size),
                                   dict(model.params.layout))
        n_sel = int(mask.sum())

        skip_update = False
        if config.gradient_form == GRAD_WITH_LABELED and dynamic:
            g = grad.values
        elif practice or not dynamic:
            lidx = (np.arange(n_l) if n_l <= config.m
                    else rng.choice(n_l, size=config.m, replace=False))
            _, g_s = models.loss_and_grad(model, [(Xl[i], Tl[i]) for i in lidx])
            g = g_s.values + config.lambda_u * grad.values
        else:
            # pure selection-stage update: skip entirely when nothing passes
            g = grad.values
            skip_update = n_sel == 0

        if not skip_update:
            if config.weight_decay:
                g = g + config.weight_decay * model.params.values
            velocity = config.momentum * velocity + g
            model.params.values -= lr * velocity

        if not np.all(np.isfinite(model.params.values)):
            raise DivergenceError(t, "non-finite parameters")
        finite_losses = losses[np.isfinite(losses)]
        if finite_losses.size < losses.size and not math.isinf(rho_t):
            raise DivergenceError(t, "non-finite unlabeled loss")

        labeled_loss = models.mean_loss(model, labeled_pairs)
        if not math.isfinite(labeled_loss):
            raise DivergenceError(t, "non-finite labeled loss")
        unlabeled_loss = float(losses[mask].mean()) if n_sel else 0.0
        test_error = models.error_rate(model, Xt, yt) if Xt is not None else float("nan")
        correct = int(np.sum(mask & (hard == yb)))
        stats.append(SelectionStats(
            step=t, epoch=(t - 1) // steps_per_epoch, rho_t=rho_t,
            n_sampled=n_t, n_selected=n_sel,
            n_sel_correct=correct, n_sel_wrong=n_sel - correct,
            n_sel_P=int(np.sum(mask & ~qb)), n_sel_Q=int(np.sum(mask & qb)),
            labeled_loss=labeled_loss, unlabeled_loss=unlabeled_loss,
            test_error=test_error, lr=lr))

    log = {
        "rho_hat": float(schedule.rho_hat) if schedule.rho_hat is not None else float("nan"),
        "steps": int(config.T),
        "steps_per_epoch": int(steps_per_epoch),
        "final_test_error": stats[-1].test_error if stats else float("nan"),
        "final_labeled_loss": stats[-1].labeled_loss if stats else float("nan"),
    }
    return model, stats, log


# ---------------------------------------------------------------------------
# metrics CSV

def write_metrics_csv(stats: Sequence[SelectionStats], path: str) -> None:
    lines = [",".join(METRICS_COLUMNS)]
    lines.extend(",".join(s.row()) for s in stats)
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_metrics_csv(path: str) -> Dict[str, np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != METRICS_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {header!r}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    cols: Dict[str, np.ndarray] = {}
    int_cols = {"step", "epoch", "n_sampled", "n_selected", "n_sel_correct",
                "n_sel_wrong", "n_sel_P", "n_sel_Q"}
    for j, name in enumerate(METRICS_COLUMNS):
        raw = [r[j] for r in rows]
        cols[name] = (np.array([int(v) for v in raw], dtype=np.int64)
                      if name in int_cols else np.array([float(v) for v in raw]))
    return cols


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"DASHMODL"


def save_checkpoint(params: ParamVector, path: str) -> None:
    """16-byte header (magic + little-endian uint64 size) + float64 payload."""
    values = np.asarray(params.values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", values.size))
        fh.write(values.tobytes())


def load_checkpoint(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    (size,) = struct.unpack("<Q", blob[8:16])
    if len(blob) != 16 + 8 * size:
        raise ValueError(f"{path}: truncated checkpoint (expected {size} parameters)")
    return np.frombuffer(blob[16:], dtype="<f8").astype(np.float64)
