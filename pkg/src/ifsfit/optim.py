"""Training loop: Expectation/Fixed objectives, Adam, step decay, parameter noise and clamping."""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteGradient, NonFiniteTrajectory
from .grad import ImageLoss, MSELoss, evaluate_batch
from .ifs import (
    TWO_PI,
    FractalSystem,
    probabilities_from_weights,
    sample_index_batch,
    sample_start_points,
    transform_from_matrix,
)
from .render import Canvas, RenderConfig

log = logging.getLogger(__name__)

EVAL_CHUNK = 100


class Objective(str, enum.Enum):
    EXPECTATION = "expectation"
    FIXED = "fixed"


@dataclass(frozen=True)
class OptimizerConfig:
    objective: Objective = Objective.EXPECTATION
    batch_size: int = 50
    steps: int = 1000
    lr: float = 0.05
    lr_decay: float = 0.5
    decay_every: int = 250
    noise_std: float = 0.1
    noise_every: int = 5
    noise_enabled: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    t_len: int = 300
    seed: int = 0
    render: RenderConfig = field(default_factory=RenderConfig)
    # "adam" or "sgd" (SGD with momentum, kept only for the optimizer comparison)
    optimizer: str = "adam"
    momentum: float = 0.9
    # False optimises the raw 2x2 matrix entries instead of the factored form
    reparameterize: bool = True
    # backpropagate through the fit-to-canvas bounding box (False: stop-gradient)
    frame_grad: bool = True

    def __post_init__(self):
        object.__setattr__(self, "objective", Objective(self.objective))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.decay_every < 1 or self.noise_every < 1:
            raise ValueError("decay_every and noise_every must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.t_len < 1:
            raise ValueError("t_len must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, step: int) -> float:
        return self.lr * self.lr_decay ** (step // self.decay_every)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "render"}
        out["objective"] = self.objective.value
        out["render"] = {
            "h": self.render.h, "w": self.render.w, "tau": self.render.tau,
            "clamp": self.render.clamp, "truncation_radius": self.render.truncation_radius,
        }
        return out


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(params, grad, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    state.step_count += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.step_count)
    v_hat = state.v / (1.0 - beta2 ** state.step_count)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class FitResult:
    learned: FractalSystem
    loss_curve: list
    best_loss: float
    grad_norms: list = field(default_factory=list)
    lr_curve: list = field(default_factory=list)
    noise_applied: list = field(default_factory=list)
    # final (N, 6) parameter array, in raw-matrix layout when reparameterize=False
    final_params: Optional[np.ndarray] = None

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "lr", "noise_applied"])
            for i, loss in enumerate(self.loss_curve):
                writer.writerow([i, repr(float(loss)), repr(float(self.lr_curve[i])), int(self.noise_applied[i])])


def _clamp_sigma_columns(params: np.ndarray) -> np.ndarray:
    params[:, 2:4] = np.clip(params[:, 2:4], 0.0, 1.0)
    return params


def clamp_sigmas(s: FractalSystem) -> FractalSystem:
    return FractalSystem.from_arrays(_clamp_sigma_columns(s.params), s.flips)


def inject_noise(s: FractalSystem, std: float, rng: np.random.Generator) -> FractalSystem:
    if std < 0:
        raise ValueError("std must be >= 0")
    params = s.params + rng.normal(0.0, std, size=(s.n, 6)) if std > 0 else s.params
    return FractalSystem.from_arrays(_clamp_sigma_columns(params), s.flips)


def _raw_params(s: FractalSystem) -> np.ndarray:
    return np.column_stack([s.matrices().reshape(-1, 4), s.translations()])


def _system_from(params, flips, reparameterize: bool) -> FractalSystem:
    if reparameterize:
        return FractalSystem.from_arrays(params, flips)
    return FractalSystem(tuple(transform_from_matrix(p[:4].reshape(2, 2), p[4:6]) for p in params))


def _probabilities(params, reparameterize: bool) -> np.ndarray:
    if reparameterize:
        w = params[:, 2] * params[:, 3]
    else:
        w = params[:, 0] * params[:, 3] - params[:, 1] * params[:, 2]
    if not np.sum(np.abs(w)) > 0:
        # every transform collapsed to rank < 2; sample uniformly until noise revives one
        w = np.ones_like(w)
    return probabilities_from_weights(w)


def fit(init: FractalSystem, target, cfg: OptimizerConfig, *, sequences=None, start_points=None,
        loss: Optional[ImageLoss] = None,
        callback: Optional[Callable[[int, FractalSystem], None]] = None) -> FitResult:
    """Learn a system whose renders match ``target``.

    In Fixed mode the sequence set (and each sequence's start point) is drawn once from
    ``init`` unless ``sequences``/``start_points`` are given explicitly; Expectation mode
    draws a fresh batch from the current system at every step. Raises
    :class:`NonFiniteGradient` carrying the last finite system if the pass blows up.
    """
    loss = loss or MSELoss()
    target = np.asarray(target.pixels if isinstance(target, Canvas) else target, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    reparam = cfg.reparameterize
    flips = init.flips
    params = init.params if reparam else _raw_params(init)
    state = AdamState.zeros_like(params)

    fixed_z = fixed_v0 = None
    if cfg.objective is Objective.FIXED:
        if sequences is not None:
            fixed_z = np.atleast_2d(np.asarray([np.asarray(getattr(q, "indices", q)) for q in sequences]))
        else:
            fixed_z = sample_index_batch(_probabilities(params, reparam), cfg.batch_size, cfg.t_len, rng)
        if start_points is not None:
            fixed_v0 = np.atleast_2d(np.asarray(start_points, dtype=float))
        else:
            fixed_v0 = sample_start_points(rng, len(fixed_z))

    result = FitResult(learned=init, loss_curve=[], best_loss=math.inf)

    def abort(step, err):
        raise NonFiniteGradient(
            f"non-finite values at step {step}: {err}",
            last_system=_system_from(params, flips, reparam), step=step,
            loss_curve=result.loss_curve, grad_norms=result.grad_norms,
        ) from err

    for step in range(cfg.steps):
        try:
            if fixed_z is None:
                z = sample_index_batch(_probabilities(params, reparam), cfg.batch_size, cfg.t_len, rng)
                v0 = sample_start_points(rng, cfg.batch_size)
            else:
                z, v0 = fixed_z, fixed_v0
            out = evaluate_batch(params, flips, z, v0, target, cfg.render, loss, raw=not reparam,
                                 frame_grad=cfg.frame_grad)
        except (NonFiniteGradient, NonFiniteTrajectory) as err:
            abort(step, err)
        lr = cfg.lr_at(step)
        result.loss_curve.append(out.loss)
        result.grad_norms.append(float(np.linalg.norm(out.grad)))
        result.lr_curve.append(lr)

        if cfg.optimizer == "adam":
            new = adam_step(params, out.grad, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        else:
            state.step_count += 1
            state.m = cfg.momentum * state.m + out.grad
            new = params - lr * state.m
        # no kick after the final update: nothing would remain to optimise it away
        noisy = (cfg.noise_enabled and cfg.noise_std > 0 and (step + 1) % cfg.noise_every == 0
                 and step < cfg.steps - 1)
        if noisy:
            new = new + rng.normal(0.0, cfg.noise_std, size=new.shape)
        if reparam:
            _clamp_sigma_columns(new)
            new[:, 0:2] = np.mod(new[:, 0:2], TWO_PI)
        if not np.isfinite(new).all():
            abort(step, FloatingPointError("parameter update is not finite"))
        params = new
        result.noise_applied.append(noisy)
        if callback is not None:
            callback(step, _system_from(params, flips, reparam))

    result.learned = _system_from(params, flips, reparam)
    result.final_params = params
    result.best_loss = min(result.loss_curve) if result.loss_curve else math.inf
    return result


def sample_min_mse(s: FractalSystem, target, n_samples: int, cfg: OptimizerConfig,
                   rng: Optional[np.random.Generator] = None,
                   loss: Optional[ImageLoss] = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses of ``n_samples`` fresh renders and the best-scoring image.

    Each sample draws its index sequence and then its start point from ``rng`` in turn,
    so the first k samples of a longer run coincide with a run of k samples.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    loss = loss or MSELoss()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    target = np.asarray(target.pixels if isinstance(target, Canvas) else target, dtype=float)
    p = _probabilities(s.params, True)
    z = np.empty((n_samples, cfg.t_len), dtype=np.int64)
    v0 = np.empty((n_samples, 2))
    for i in range(n_samples):
        z[i] = rng.choice(len(p), size=cfg.t_len, p=p)
        v0[i] = rng.uniform(-1.0, 1.0, size=2)
    losses, best_img, best = [], None, math.inf
    params, flips = s.params, s.flips
    for lo in range(0, n_samples, EVAL_CHUNK):
        out = evaluate_batch(params, flips, z[lo:lo + EVAL_CHUNK], v0[lo:lo + EVAL_CHUNK], target,
                             cfg.render, loss, need_grad=False)
        losses.append(out.losses)
        i = int(np.argmin(out.losses))
        if out.losses[i] < best:
            best, best_img = float(out.losses[i]), out.pixels[i]
    return np.concatenate(losses), best_img


def evaluate_min_mse(s: FractalSystem, target, n_samples: int, cfg: OptimizerConfig,
                     rng: Optional[np.random.Generator] = None) -> float:
    return float(sample_min_mse(s, target, n_samples, cfg, rng)[0].min())
