"""ELBO / cross-entropy training with Adam, augmentation and checkpoint-by-NLL."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import tensor as T
from .errors import ConfigError, DomainError, NumericError, TrainingDiverged
from .inference import sample_stacks
from .metrics import STRUCTURES, dice, nll
from .preprocess import Normalizer, normalize_and_crop  # noqa: F401  (re-exported)
from .tensor import Tensor
from .unet import Model, ModelConfig, build_unet, to_channels_last

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 10.0
    epochs: int = 40
    lr_initial: float = 1e-4
    lr_after: float = 1e-5
    lr_switch_epoch: int = 25
    batch_size: int = 8
    seed: int = 0
    rotation_deg: tuple[float, float] = (-60.0, 60.0)
    translation_px: tuple[float, float] = (-8.0, 8.0)
    scale: tuple[float, float] = (0.7, 1.3)
    augment: bool = True
    samples_for_validation: int = 8
    norm_mode: str = "variance"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"KL weight must be >= 0, got {self.lam}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not (self.lr_initial > 0 and self.lr_after > 0):
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.samples_for_validation < 1:
            raise ConfigError("batch_size and samples_for_validation must be >= 1")
        for name in ("rotation_deg", "translation_px", "scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range ({lo}, {hi}) is not ordered")
        if self.scale[0] <= 0:
            raise ConfigError("scale range must be positive")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch."""
        return self.lr_initial if epoch <= self.lr_switch_epoch else self.lr_after


def elbo_terms(probs: Tensor, labels: np.ndarray, kl_total: Tensor | None, lam: float,
               minibatches_per_epoch: int) -> tuple[Tensor, Tensor, Tensor | None]:
    """(loss, ce, scaled_kl) with ``loss = ce + lam * scaled_kl``.

    ``scaled_kl = kl_total / (minibatches_per_epoch * pixels_per_batch)`` puts the
    KL on the same per-pixel scale as the mean cross entropy.
    """
    if lam < 0:
        raise DomainError(f"KL weight must be >= 0, got {lam}")
    ce = T.cross_entropy(probs, labels)
    if kl_total is None or lam == 0:
        return ce, ce, None
    if kl_total.item() < 0:
        raise DomainError("kl_total must be nonnegative")
    scaled = T.mul(kl_total, 1.0 / (minibatches_per_epoch * np.asarray(labels).size))
    return T.add(ce, T.mul(scaled, float(lam))), ce, scaled


def elbo_loss(probs: Tensor, labels: np.ndarray, kl_total, lam: float, minibatches_per_epoch: int) -> Tensor:
    if not isinstance(kl_total, Tensor) and kl_total is not None:
        kl_total = Tensor(np.asarray(kl_total, dtype=np.float64))
    return elbo_terms(probs, labels, kl_total, lam, minibatches_per_epoch)[0]


def affine_params(rng: np.random.Generator, cfg: TrainConfig) -> tuple[float, float, float, float]:
    angle = rng.uniform(*cfg.rotation_deg)
    ty = rng.uniform(*cfg.translation_px)
    tx = rng.uniform(*cfg.translation_px)
    s = rng.uniform(*cfg.scale)
    return angle, ty, tx, s


def apply_affine(image: np.ndarray, mask: np.ndarray, angle_deg: float, ty: float, tx: float,
                 scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Rotate/scale about the image center, then translate. Bilinear image, nearest mask."""
    h, w = image.shape
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    th = math.radians(angle_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    inv = rot.T / scale
    offset = c - inv @ (c + np.array([ty, tx]))
    img = ndimage.affine_transform(image.astype(np.float64), inv, offset=offset, order=1,
                                   mode="constant", cval=0.0)
    msk = ndimage.affine_transform(mask, inv, offset=offset, order=0, mode="constant", cval=0)
    return img.astype(image.dtype), msk.astype(mask.dtype)


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            cfg: TrainConfig = TrainConfig()) -> tuple[np.ndarray, np.ndarray]:
    return apply_affine(image, mask, *affine_params(rng, cfg))


class Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class TrainedModel:
    model: Model
    normalizer: Normalizer
    history: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def select_checkpoint(val_nll: list[float]) -> int:
    """1-based epoch of the global minimum (earliest on ties)."""
    if not val_nll:
        raise ConfigError("no validation history to select from")
    return int(np.argmin(np.asarray(val_nll, dtype=np.float64))) + 1


def validate(model: Model, normalizer: Normalizer, images: np.ndarray, masks: np.ndarray, samples: int,
             seed: int) -> dict:
    T_ = 1 if model.cfg.variant == "plain" else samples
    stacks = sample_stacks(TrainedModel(model, normalizer), images, T_, seed)
    nlls, dices = [], {k: [] for k in STRUCTURES}
    for st, m in zip(stacks, masks):
        nlls.append(nll(st.mean, m))
        pred = st.mean.argmax(axis=0)
        for name, cls in STRUCTURES.items():
            dices[name].append(dice(pred == cls, m == cls))
    out = {"val_nll": float(np.mean(nlls))}
    for name in STRUCTURES:
        out[f"val_dice_{name}"] = float(np.mean(dices[name]))
    return out


def train(model: Model, train_set, val_set, cfg: TrainConfig, normalizer: Normalizer | None = None,
          log_every: int = 0) -> TrainedModel:
    """Train ``model`` in place and return it loaded with the best-validation-NLL weights.

    ``train_set``/``val_set`` expose ``images`` (N, H, W) in [0, 1] and ``masks``
    (N, H, W). Without a validation set the final weights are kept.
    """
    if val_set is not None and hasattr(train_set, "subject_ids") and hasattr(val_set, "subject_ids"):
        if set(np.asarray(train_set.subject_ids).tolist()) & set(np.asarray(val_set.subject_ids).tolist()):
            raise ConfigError("training and validation sets share subjects")
    images = np.asarray(train_set.images, dtype=np.float32)
    masks = np.asarray(train_set.masks)
    if normalizer is None:
        normalizer = Normalizer.fit(images, cfg.norm_mode)
    n = len(images)
    bs = min(cfg.batch_size, n)
    per_epoch = math.ceil(n / bs)
    data_rng = np.random.default_rng([cfg.seed, 1])
    noise_rng = np.random.default_rng([cfg.seed, 2])
    params = model.parameters()
    opt = Adam(params, cfg.lr_initial)
    result = TrainedModel(model, normalizer)
    best_state, best_nll = None, math.inf

    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cfg.lr_at(epoch)
        order = data_rng.permutation(n)
        ce_sum = kl_sum = loss_sum = 0.0
        for b in range(per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            xb, yb = images[idx], masks[idx]
            if cfg.augment:
                pairs = [augment(x, y, data_rng, cfg) for x, y in zip(xb, yb)]
                xb = np.stack([p[0] for p in pairs])
                yb = np.stack([p[1] for p in pairs])
            x = Tensor(to_channels_last(normalizer(xb)))
            try:
                probs, kl = model(x, sample=True, rng=noise_rng)
            except NumericError as exc:
                nan = float("nan")
                raise TrainingDiverged(epoch, b, {"loss": nan, "ce": nan, "kl_scaled": nan}) from exc
            loss, ce, scaled = elbo_terms(probs, yb, kl, cfg.lam, per_epoch)
            terms = {"loss": loss.item(), "ce": ce.item(), "kl_scaled": scaled.item() if scaled is not None else 0.0}
            if not all(math.isfinite(v) for v in terms.values()):
                raise TrainingDiverged(epoch, b, terms)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            result.steps.append({"epoch": epoch, "batch": b, **terms})
            ce_sum += terms["ce"]
            kl_sum += terms["kl_scaled"]
            loss_sum += terms["loss"]
        row = {"epoch": epoch, "train_loss": loss_sum / per_epoch, "train_ce": ce_sum / per_epoch,
               "train_kl": kl_sum / per_epoch}
        if val_set is not None:
            row.update(validate(model, normalizer, np.asarray(val_set.images), np.asarray(val_set.masks),
                                cfg.samples_for_validation, seed=cfg.seed * 1000 + epoch))
            if row["val_nll"] < best_nll:
                best_nll = row["val_nll"]
                best_state = model.state_dict()
                result.best_epoch = epoch
        result.history.append(row)
        if log_every and epoch % log_every == 0:
            log.info("epoch %d %s", epoch, {k: round(v, 5) for k, v in row.items() if k != "epoch"})
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        result.best_epoch = cfg.epochs
    return result


def fit(model_cfg: ModelConfig, train_set, val_set, cfg: TrainConfig, log_every: int = 0) -> TrainedModel:
    """Build a model from ``cfg.seed`` and train it."""
    model = build_unet(model_cfg, np.random.default_rng([cfg.seed, 0]))
    return train(model, train_set, val_set, cfg, log_every=log_every)


def _fit_member(args):
    return fit(*args)


def train_ensemble(model_cfg: ModelConfig, train_set, val_set, cfg: TrainConfig, seeds: list[int],
                   member_count: int | None = None, jobs: int = 1,
                   allow_duplicate_seeds: bool = False) -> list[TrainedModel]:
    """Independently trained plain models, one per seed."""
    seeds = [int(s) for s in seeds]
    if member_count is not None and member_count != len(seeds):
        raise ConfigError(f"member_count {member_count} != {len(seeds)} seeds")
    if len(set(seeds)) != len(seeds) and not allow_duplicate_seeds:
        raise ConfigError(f"ensemble seeds must be distinct, got {seeds}")
    plain = replace(model_cfg, variant="plain")
    tasks = [(plain, train_set, val_set, replace(cfg, seed=s)) for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_fit_member, tasks))
    return [_fit_member(t) for t in tasks]
