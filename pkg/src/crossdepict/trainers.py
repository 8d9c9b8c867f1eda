"""Training procedures: aggregated SGD, frozen-head SGD, MLDG and MetaReg.

All four share :func:`sgd_step` (momentum + weight decay, exponential step
schedule) and the same checkpoint/validation bookkeeping, so their curves are
directly comparable and reductions (MLDG with ``beta=0``, MetaReg's final phase
with ``phi=0``) reproduce the baseline bit for bit under paired rng streams.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import (ParamSet, Tape, Tensor, grad, hessian_vector_product, leaves_for,
                       softmax_cross_entropy, tsum, value_and_grad)
from .data import Batch, ScenarioSplit, split_meta
from .model import Model, classify, network_logits

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class AuditError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 45000
    batch_size: int = 64
    lr: float = 5e-4
    decay: float = 0.96
    decay_period: int = 15000
    momentum: float = 0.9
    weight_decay: float = 5e-5
    seed: int = 0
    eval_interval: int = 1000

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("iterations >= 0, batch_size >= 1 and eval_interval >= 1 required")
        if self.lr < 0 or not 0 < self.decay <= 1 or self.decay_period < 1:
            raise ValueError("lr must be >= 0, decay in (0, 1], decay_period >= 1")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be nonnegative")


PROFILES = {
    "paper": dict(iterations=45000, decay_period=15000, eval_interval=1000),
    # 3k steps at 5e-4 leave the fixed head far from converged; desk runs use 10x
    "desk": dict(iterations=3000, decay_period=1000, eval_interval=250, lr=5e-3),
}


def profile_config(profile: str = "desk", **overrides) -> TrainConfig:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    return TrainConfig(**{**PROFILES[profile], **overrides})


@dataclass(frozen=True)
class MLDGConfig:
    alpha: float = 5e-4
    beta: float = 1.0
    mode: str = "exact"  # or "first-order"
    # outer rate gamma follows the TrainConfig schedule unless this is set
    constant_gamma: Optional[float] = None

    def __post_init__(self):
        if self.alpha <= 0 or self.beta < 0:
            raise ValueError("MLDG needs alpha > 0 and beta >= 0")
        if self.mode not in ("exact", "first-order"):
            raise ValueError(f"unknown MLDG gradient mode {self.mode!r}")


@dataclass(frozen=True)
class MetaRegConfig:
    alpha1: float = 5e-3
    alpha2: float = 5e-3
    inner_steps: int = 3
    phase1_iterations: int = 500
    phase2_iterations: int = 300
    mode: str = "exact"
    phi_init: float = 0.0
    # project the penalty weights onto phi >= 0 after each meta update
    nonnegative: bool = True

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("MetaReg needs at least one inner step")
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ValueError("MetaReg rates must be positive")
        if self.mode not in ("exact", "first-order"):
            raise ValueError(f"unknown MetaReg gradient mode {self.mode!r}")


@dataclass
class SGDState:
    velocity: ParamSet
    step: int = 0

    @classmethod
    def zeros(cls, params, names) -> "SGDState":
        return cls(ParamSet((k, np.zeros_like(params[k])) for k in names))


@dataclass
class Checkpoint:
    step: int
    val_accuracy: float
    params: ParamSet
    digest: str


@dataclass
class TrainResult:
    model: Model
    losses: np.ndarray
    lrs: np.ndarray
    checkpoints: list
    method: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def val_curve(self) -> list:
        return [(c.step, c.val_accuracy) for c in self.checkpoints]


def lr_schedule(t: int, config: TrainConfig) -> float:
    """Base rate times decay ** floor(t / period)."""
    if t < 0:
        raise ValueError("step must be nonnegative")
    return config.lr * config.decay ** (t // config.decay_period)


def sgd_step(params: ParamSet, grads, state: SGDState, config: TrainConfig,
             trainable: Sequence[str], lr: Optional[float] = None):
    """``v <- mu v + (g + lambda theta)``, ``theta <- theta - lr(t) v`` on trainable names only."""
    rate = lr_schedule(state.step, config) if lr is None else lr
    mu, wd = config.momentum, config.weight_decay
    new_p, new_v = {}, {}
    for k in trainable:
        p, g, v = params[k], np.asarray(grads[k]), state.velocity[k]
        if g.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"sgd_step: {k!r} has parameter {p.shape}, gradient {g.shape}, "
                             f"velocity {v.shape}")
        v = mu * v
        v += g
        if wd:
            v += wd * p
        new_v[k] = v
        new_p[k] = p - rate * v
    params = params.replace(**new_p)
    state = SGDState(state.velocity.replace(**new_v), state.step + 1)
    return params, state


# ---------------------------------------------------------------------------
# shared loop


def model_loss(model: Model) -> Callable:
    """``loss(params, batch)``; parameters missing from ``params`` come from ``model``."""
    base = dict(model.params().items())
    spec = model.spec

    def loss(params, batch: Batch) -> Tensor:
        values = {**base, **dict(params)}
        return softmax_cross_entropy(network_logits(spec, values, batch.x), batch.y)

    return loss


def accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("accuracy of an empty example set")
    pred = classify(network_logits(model.spec, model.params(), x))
    return 100.0 * float(np.mean(pred == y))


def _sgd_update_inplace(params: dict, grads, velocity: dict, config: TrainConfig,
                        trainable: Sequence[str], rate: float):
    # same arithmetic, in the same order, as sgd_step; avoids large temporaries
    mu, wd = config.momentum, config.weight_decay
    for k in trainable:
        p, v = params[k], velocity[k]
        v *= mu
        v += grads[k]
        if wd:
            v += wd * p
        p -= rate * v


def _train_loop(model: Model, scenario: ScenarioSplit, config: TrainConfig, method: str,
                draw: Callable, grad_fn: Callable, trainable: Sequence[str],
                lr_fn: Optional[Callable] = None) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    work = {k: np.array(v, dtype=np.float64) for k, v in model.params().items()}
    params = ParamSet(work)
    velocity = {k: np.zeros_like(work[k]) for k in trainable}
    xv, yv = scenario.validation()
    losses, lrs, checkpoints = [], [], []
    for t in range(config.iterations):
        batch = draw(config.batch_size, rng)
        loss, grads = grad_fn(params, batch)
        if not np.isfinite(loss):
            raise TrainingError(f"{method}: non-finite loss at step {t}")
        rate = lr_schedule(t, config) if lr_fn is None else lr_fn(t)
        _sgd_update_inplace(work, grads, velocity, config, trainable, rate)
        losses.append(loss)
        lrs.append(rate)
        if (t + 1) % config.eval_interval == 0 or t + 1 == config.iterations:
            snap = model.with_params(params)
            checkpoints.append(Checkpoint(t + 1, accuracy(snap, xv, yv), snap.params(), snap.digest()))
    final = model.with_params(params)
    return TrainResult(final, np.asarray(losses), np.asarray(lrs), checkpoints, method)


def _frozen_audit(model: Model, result: TrainResult):
    if model.head.frozen and result.model.head.tobytes() != model.head.tobytes():
        raise AuditError("frozen head changed during training")
    for c in result.checkpoints:
        if model.head.frozen and (c.params["head.W"].tobytes() != model.head.W.tobytes()
                                  or c.params["head.b"].tobytes() != model.head.bias.tobytes()):
            raise AuditError(f"frozen head differs in checkpoint at step {c.step}")


def _plain_grad_fn(loss_fn, trainable):
    def grad_fn(params, batch):
        return value_and_grad(lambda p: loss_fn(p, batch), params.subset(trainable))

    return grad_fn


def train_baseline(model: Model, scenario: ScenarioSplit, config: TrainConfig,
                   draw: Optional[Callable] = None) -> TrainResult:
    """Standard SGD on batches sampled from the aggregate of training domains.

    ``draw(n_b, rng) -> Batch`` replaces the aggregate sampler, which is how
    paired-trajectory checks feed identical batches to two trainers.
    """
    draw = draw or scenario.sampler(scenario.train_domains)
    trainable = model.trainable_names()
    result = _train_loop(model, scenario, config, "baseline", draw,
                         _plain_grad_fn(model_loss(model), trainable), trainable)
    _frozen_audit(model, result)
    return result


def train_fixed_head(model: Model, scenario: ScenarioSplit, config: TrainConfig,
                     draw: Optional[Callable] = None) -> TrainResult:
    if not model.head.frozen:
        raise TrainingError("train_fixed_head needs a fixed-random or fixed-orthogonal head")
    result = train_baseline(model, scenario, config, draw)
    result.method = f"{model.head.mode}-head"
    return result


# ---------------------------------------------------------------------------
# MLDG


def _mldg_value_and_grad(loss_fn, theta: ParamSet, batch_a: Batch, batch_b: Batch,
                         cfg: MLDGConfig):
    if len(batch_a) == 0 or len(batch_b) == 0:
        raise TrainingError("MLDG needs non-empty meta-train and meta-test batches")
    if cfg.beta == 0:
        return value_and_grad(lambda p: loss_fn(p, batch_a), theta)
    tape = Tape()
    leaves = leaves_for(tape, theta)
    F = loss_fn(leaves, batch_a)
    gF = grad(F, leaves, create_graph=cfg.mode == "exact")
    gF_val = gF.arrays()
    theta_virtual = ParamSet((k, theta[k] - cfg.alpha * gF_val[k]) for k in theta)
    _, gG = value_and_grad(lambda p: loss_fn(p, batch_b), theta_virtual)
    if cfg.mode == "exact":
        dot = None
        for k in theta:
            term = tsum(gF[k] * tape.const(gG[k]))
            dot = term if dot is None else dot + term
        hv = grad(dot, leaves).arrays()
        total = ParamSet((k, gF_val[k] + cfg.beta * (gG[k] - cfg.alpha * hv[k])) for k in theta)
    else:
        total = ParamSet((k, gF_val[k] + cfg.beta * gG[k]) for k in theta)
    return F.item(), total


def mldg_meta_gradient(loss_fn, theta: ParamSet, batch_a: Batch, batch_b: Batch,
                       cfg: MLDGConfig) -> ParamSet:
    """Gradient of ``F(theta) + beta * G(theta - alpha * grad F(theta))``.

    Exact mode: ``grad F + beta * (grad G(theta') - alpha * H_F grad G(theta'))``
    with the Hessian-vector product taken by double backward through F.
    First-order mode drops the Hessian term.
    """
    return _mldg_value_and_grad(loss_fn, theta, batch_a, batch_b, cfg)[1]


def mldg_batches(scenario: ScenarioSplit, n_b: int, rng: np.random.Generator):
    """One MLDG iteration's draws: the meta split, then meta-train, then meta-test batch."""
    meta_train, meta_test = split_meta(scenario.train_domains, rng, "mldg")
    batch_a = scenario.sampler(meta_train)(n_b, rng)
    batch_b = scenario.sampler(meta_test)(n_b, rng)
    return batch_a, batch_b


def train_mldg(model: Model, scenario: ScenarioSplit, config: TrainConfig,
               cfg: MLDGConfig = MLDGConfig()) -> TrainResult:
    if len(scenario.train_domains) < 2:
        raise TrainingError("MLDG needs at least 2 training domains")
    trainable = model.trainable_names()
    loss_fn = model_loss(model)
    samplers = {}

    def draw(n_b, rng):
        meta_train, meta_test = split_meta(scenario.train_domains, rng, "mldg")
        for key in (meta_train, meta_test):
            if key not in samplers:
                samplers[key] = scenario.sampler(key)
        return samplers[meta_train](n_b, rng), samplers[meta_test](n_b, rng)

    def grad_fn(params, batches):
        return _mldg_value_and_grad(loss_fn, params.subset(trainable), *batches, cfg)

    lr_fn = None if cfg.constant_gamma is None else (lambda t: cfg.constant_gamma)
    result = _train_loop(model, scenario, config, "mldg", draw, grad_fn, trainable, lr_fn)
    _frozen_audit(model, result)
    return result


# ---------------------------------------------------------------------------
# MetaReg


def l1_penalty(phi: ParamSet, theta) -> float:
    return float(sum(np.sum(phi[k] * np.abs(theta[k])) for k in phi))


def metareg_phase1_step(psi: ParamSet, thetas: list, batches: Sequence[Batch], alpha1: float,
                        loss_fn) -> tuple:
    """One supervised pass over the domains in order.

    Each domain's loss updates the shared ``psi`` and its own classifier;
    ``psi`` therefore takes one plain gradient step per domain, sequentially.
    """
    if len(batches) != len(thetas):
        raise TrainingError(f"{len(batches)} batches for {len(thetas)} domain classifiers")
    thetas = list(thetas)
    for i, batch in enumerate(batches):
        joint = ParamSet(list(psi.items()) + list(thetas[i].items()))
        _, g = value_and_grad(lambda p: loss_fn(p, batch), joint)
        psi = ParamSet((k, psi[k] - alpha1 * g[k]) for k in psi)
        thetas[i] = ParamSet((k, v - alpha1 * g[k]) for k, v in thetas[i].items())
    return psi, thetas


class UnrollSensitivity:
    """Jacobian ``J = d beta^l / d phi`` of the inner loop, kept implicit.

    ``J^i = (I - alpha2 H_L(beta^{i-1})) J^{i-1} - alpha2 diag(sign(beta^{i-1}))``,
    ``J^0 = 0``. :meth:`vjp` returns ``J^T u`` by running that recursion
    backwards (one Hessian-vector product per inner step); :meth:`to_dense`
    builds ``J`` itself column by column and is only meant for small problems.
    """

    def __init__(self, iterates: list, batches: list, alpha2: float, psi: ParamSet, loss_fn,
                 mode: str = "exact"):
        if not iterates:
            raise TrainingError("sensitivity needs at least one inner step")
        self.iterates = iterates  # beta^0 .. beta^{l-1}
        self.batches = batches
        self.alpha2 = alpha2
        self.psi = psi
        self.loss_fn = loss_fn
        self.mode = mode

    @property
    def names(self) -> tuple:
        return self.iterates[0].names

    @property
    def steps(self) -> int:
        return len(self.iterates)

    def _task_loss(self, batch):
        psi, loss_fn = self.psi, self.loss_fn
        return lambda beta: loss_fn(ParamSet(list(psi.items()) + list(beta.items())), batch)

    def _hvp(self, i: int, u: ParamSet) -> ParamSet:
        return hessian_vector_product(self._task_loss(self.batches[i]), self.iterates[i], u)

    def vjp(self, u) -> ParamSet:
        u = ParamSet((k, np.asarray(u[k], dtype=np.float64)) for k in self.names)
        acc = {k: np.zeros_like(v) for k, v in u.items()}
        a2 = self.alpha2
        for i in range(self.steps - 1, -1, -1):
            beta = self.iterates[i]
            for k in self.names:
                acc[k] = acc[k] - a2 * np.sign(beta[k]) * u[k]
            if i > 0 and self.mode == "exact":
                hu = self._hvp(i, u)
                u = ParamSet((k, u[k] - a2 * hu[k]) for k in self.names)
        return ParamSet((k, acc[k]) for k in self.names)

    def to_dense(self) -> np.ndarray:
        P = self.iterates[0].size()
        a2 = self.alpha2
        J = np.zeros((P, P))
        for i, beta in enumerate(self.iterates):
            if self.mode == "exact":
                HJ = np.column_stack([
                    self._hvp(i, beta.unflatten(J[:, c])).flatten() for c in range(P)
                ]) if P else J
                J = J - a2 * HJ
            J = J - a2 * np.diag(np.sign(beta.flatten()))
        return J


def metareg_inner_unroll(theta_a: ParamSet, phi: ParamSet, psi: ParamSet, batches: Sequence[Batch],
                         alpha2: float, loss_fn, mode: str = "exact"):
    """``l`` regularized steps from ``theta_a``; returns ``(beta^l, sensitivity)``.

    ``beta^i = beta^{i-1} - alpha2 * (grad L(psi, beta^{i-1}) + phi * sign(beta^{i-1}))``,
    the penalty being the weighted L1 norm ``sum phi_j |theta_j|``.
    """
    if len(batches) < 1:
        raise TrainingError("inner unroll needs at least one batch")
    if set(phi.names) != set(theta_a.names):
        raise TrainingError("phi and task parameters name different tensors")
    beta = ParamSet((k, np.asarray(v, dtype=np.float64)) for k, v in theta_a.items())
    iterates = []
    for batch in batches:
        iterates.append(beta)
        _, g = value_and_grad(
            lambda b: loss_fn(ParamSet(list(psi.items()) + list(b.items())), batch), beta)
        beta = ParamSet((k, beta[k] - alpha2 * (g[k] + phi[k] * np.sign(beta[k]))) for k in beta)
    return beta, UnrollSensitivity(iterates, list(batches), alpha2, psi, loss_fn, mode)


def metareg_meta_update(phi: ParamSet, batch_b: Batch, psi: ParamSet, beta_l: ParamSet,
                        sensitivity: UnrollSensitivity, alpha2: float, loss_fn) -> ParamSet:
    """``phi <- phi - alpha2 * J^T grad_beta L_b(psi, beta^l)``."""
    if not isinstance(sensitivity, UnrollSensitivity) or sensitivity.steps < 1:
        raise TrainingError("meta update needs the sensitivity of a completed unroll")
    for k in phi:
        if k not in sensitivity.names or np.shape(phi[k]) != np.shape(sensitivity.iterates[0][k]):
            raise TrainingError(f"phi entry {k!r} does not match the unrolled parameters")
    _, u = value_and_grad(
        lambda b: loss_fn(ParamSet(list(psi.items()) + list(b.items())), batch_b), beta_l)
    g_phi = sensitivity.vjp(u)
    return ParamSet((k, phi[k] - alpha2 * g_phi[k]) for k in phi)


def metareg_final_train(phi: ParamSet, model: Model, scenario: ScenarioSplit, config: TrainConfig,
                        draw: Optional[Callable] = None) -> TrainResult:
    """Aggregate training of ``model`` with the fixed penalty ``sum phi |theta_task|`` added."""
    draw = draw or scenario.sampler(scenario.train_domains)
    trainable = model.trainable_names()
    loss_fn = model_loss(model)
    missing = [k for k in phi if k not in trainable]
    if missing:
        raise TrainingError(f"regularized parameters are not trainable: {missing}")

    def grad_fn(params, batch):
        loss, g = value_and_grad(lambda p: loss_fn(p, batch), params.subset(trainable))
        loss = loss + l1_penalty(phi, params)
        g = g.replace(**{k: g[k] + phi[k] * np.sign(params[k]) for k in phi})
        return loss, g

    result = _train_loop(model, scenario, config, "metareg", draw, grad_fn, trainable)
    _frozen_audit(model, result)
    return result


def train_metareg(model: Model, scenario: ScenarioSplit, config: TrainConfig,
                  cfg: MetaRegConfig = MetaRegConfig()) -> TrainResult:
    """Supervised warm-up, regularizer meta-learning, then final training from scratch.

    The feature part (``psi``) learned in the first two phases is kept; the
    task network restarts from ``model``'s initial values for the final phase.
    """
    domains = scenario.train_domains
    if len(domains) < 2:
        raise TrainingError("MetaReg needs at least 2 training domains")
    task = tuple(k for k in model.task_names if k in model.trainable_names())
    if not task:
        raise TrainingError("MetaReg needs trainable task-network parameters")
    params = model.params()
    psi = params.subset([k for k in model.trainable_names() if k not in task])
    theta0 = params.subset(task)
    thetas = [theta0.map(np.copy) for _ in domains]
    phi = theta0.map(lambda v: np.full_like(v, cfg.phi_init))
    loss_fn = model_loss(model)
    samplers = [scenario.sampler((d,)) for d in domains]
    rng = np.random.default_rng([config.seed, 1])
    n_b = config.batch_size
    meta_losses = []

    def supervised(psi, thetas):
        batches = [s(n_b, rng) for s in samplers]
        return metareg_phase1_step(psi, thetas, batches, cfg.alpha1, loss_fn)

    for _ in range(cfg.phase1_iterations):
        psi, thetas = supervised(psi, thetas)
    for _ in range(cfg.phase2_iterations):
        psi, thetas = supervised(psi, thetas)
        (a,), (b,) = split_meta(range(len(domains)), rng, "metareg")
        inner = [samplers[a](n_b, rng) for _ in range(cfg.inner_steps)]
        beta_l, sens = metareg_inner_unroll(thetas[a], phi, psi, inner, cfg.alpha2, loss_fn, cfg.mode)
        batch_b = samplers[b](n_b, rng)
        meta_losses.append(loss_fn(ParamSet(list(psi.items()) + list(beta_l.items())), batch_b).item())
        phi = metareg_meta_update(phi, batch_b, psi, beta_l, sens, cfg.alpha2, loss_fn)
        if cfg.nonnegative:
            phi = phi.map(lambda v: np.maximum(v, 0.0))
    start = model.with_params(psi)
    result = metareg_final_train(phi, start, scenario, config)
    result.extra.update(phi=phi, meta_test_losses=np.asarray(meta_losses))
    return result


# ---------------------------------------------------------------------------
# per-run log


def write_log(result: TrainResult, path) -> Path:
    """Tab-separated ``step, lr, loss, val_accuracy`` rows; accuracy empty between checkpoints."""
    path = Path(path)
    val = {c.step: c.val_accuracy for c in result.checkpoints}
    with open(path, "w") as fh:
        fh.write("step\tlr\tloss\tval_accuracy\n")
        for t, (lr, loss) in enumerate(zip(result.lrs, result.losses), 1):
            acc = repr(float(val[t])) if t in val else ""
            fh.write(f"{t}\t{float(lr)!r}\t{float(loss)!r}\t{acc}\n")
    return path
