"""White-box PGD and black-box SPSA attacks under the L-infinity threat model.

All radii and step sizes are in normalized [0, 1] pixel units.  Every
random draw is derived per (seed, restart, example) so results do not
depend on batch composition or execution order.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import forward_logits

UNTARGETED = "untargeted"
RANDOM_TARGET = "random_target"
LEAST_LIKELY = "least_likely"
TARGET_MODES = (UNTARGETED, RANDOM_TARGET, LEAST_LIKELY)


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    step: float
    iters: int
    restarts: int = 1
    target_mode: str = UNTARGETED
    random_init: bool = None  # default: True iff restarts > 1
    base_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.iters > 0 and self.step <= 0:
            raise ValueError("step must be positive when iters > 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"unknown target mode {self.target_mode!r}")
        if self.random_init is None:
            object.__setattr__(self, "random_init", self.restarts > 1)


@dataclass(frozen=True)
class SpsaConfig:
    epsilon: float
    iters: int
    samples_per_step: int
    perturbation_size: float = 0.01
    learning_rate: float = 0.01
    base_seed: int = 0

    def __post_init__(self):
        if self.samples_per_step < 2 or self.samples_per_step % 2:
            raise ValueError("samples_per_step must be even and >= 2")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    final_loss: np.ndarray      # per example; attack objective value
    success: np.ndarray         # per example bool
    restart_index: np.ndarray   # restart achieving the kept optimum
    predictions: np.ndarray


def ce_per_example(logits, labels):
    """Stable per-example cross-entropy from raw logit values."""
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    return lse - logits[np.arange(len(labels)), labels]


def select_target(mode, logits, labels, seed, example_ids=None):
    """Resolve attack target labels for a batch.

    ``random_target`` draws uniformly over the non-true classes, seeded per
    example so the choice is independent of batching.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if mode == UNTARGETED:
        return labels.copy()
    if mode == LEAST_LIKELY:
        return np.asarray(logits).argmin(axis=1)
    if mode == RANDOM_TARGET:
        n_classes = np.asarray(logits).shape[1]
        if example_ids is None:
            example_ids = np.arange(len(labels))
        targets = np.empty_like(labels)
        for i, ex in enumerate(example_ids):
            rng = np.random.default_rng(
                np.random.SeedSequence([int(seed), int(ex)]))
            draw = rng.integers(0, n_classes - 1)
            targets[i] = draw + (draw >= labels[i])
        return targets
    raise ValueError(f"unknown target mode {mode!r}")


def _init_noise(shape, epsilon, seed, restart_index, example_ids):
    """Per-example uniform draw from the epsilon ball."""
    noise = np.empty(shape, dtype=np.float32)
    for i, ex in enumerate(example_ids):
        rng = np.random.default_rng(np.random.SeedSequence(
            [int(seed), int(restart_index), int(ex)]))
        noise[i] = rng.uniform(-epsilon, epsilon,
                               size=shape[1:]).astype(np.float32)
    return noise


def _batch_input_grad(model, x, labels):
    xt = T.Tensor(x, requires_grad=True)
    logits = forward_logits(model, xt)
    loss = T.tsum(T.sub(T.logsumexp(logits, axis=1),
                        T.gather_rows(logits, labels)))
    if not np.isfinite(loss.data):
        raise AttackError("non-finite loss during PGD iteration")
    T.backward(loss)
    return xt.grad, logits.data


def _finalize(model, x0, x_adv, y, targets, targeted, epsilon):
    logits = forward_logits(model, x_adv).data
    preds = logits.argmax(axis=1)
    if targeted:
        loss = ce_per_example(logits, targets)
        success = preds == targets
    else:
        loss = ce_per_example(logits, y)
        success = preds != y
    assert np.abs(x_adv - x0).max() <= epsilon + 1e-6
    return loss, success, preds


def pgd(model, x, y, config, restart_index=0, example_ids=None):
    """One PGD run: signed-gradient ascent projected to the epsilon ball."""
    x0 = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if example_ids is None:
        example_ids = np.arange(len(y))
    eps = np.float32(config.epsilon)
    lo, hi = np.clip(x0 - eps, 0.0, 1.0), np.clip(x0 + eps, 0.0, 1.0)

    targeted = config.target_mode != UNTARGETED
    if targeted:
        clean_logits = forward_logits(model, x0).data
        targets = select_target(config.target_mode, clean_logits, y,
                                config.base_seed, example_ids)
    else:
        targets = y

    x_adv = x0
    if config.random_init and config.epsilon > 0:
        noise = _init_noise(x0.shape, config.epsilon, config.base_seed,
                            restart_index, example_ids)
        x_adv = np.clip(x0 + noise, lo, hi)

    step = np.float32(config.step)
    for _ in range(config.iters):
        grad, _ = _batch_input_grad(model, x_adv, targets)
        direction = np.sign(grad, dtype=np.float32)
        if targeted:
            x_adv = x_adv - step * direction
        else:
            x_adv = x_adv + step * direction
        x_adv = np.clip(x_adv, lo, hi)

    loss, success, preds = _finalize(model, x0, x_adv, y, targets, targeted,
                                     config.epsilon)
    return AttackResult(x_adv, loss, success,
                        np.full(len(y), restart_index), preds)


def _better(targeted, new_loss, new_success, old_loss, old_success):
    """Per-example 'most harmful' rule: success first, then objective."""
    if targeted:
        loss_wins = new_loss < old_loss
    else:
        loss_wins = new_loss > old_loss
    return (new_success & ~old_success) | ((new_success == old_success) & loss_wins)


def pgd_restarts(model, x, y, config, example_ids=None):
    """PGD over restarts, keeping the most harmful restart per example."""
    x0 = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if example_ids is None:
        example_ids = np.arange(len(y))
    targeted = config.target_mode != UNTARGETED
    best = None
    for r in range(config.restarts):
        run = pgd(model, x0, y, config, restart_index=r,
                  example_ids=example_ids)
        if best is None:
            best = run
            continue
        take = _better(targeted, run.final_loss, run.success,
                       best.final_loss, best.success)
        best.x_adv[take] = run.x_adv[take]
        best.final_loss[take] = run.final_loss[take]
        best.success[take] = run.success[take]
        best.restart_index[take] = r
        best.predictions[take] = run.predictions[take]
    return best


def spsa_gradient_estimate(loss_fn, x, samples, delta, rng):
    """Antithetic SPSA estimate of the gradient of ``loss_fn`` at ``x``.

    ``loss_fn`` maps a stack of inputs to per-input scalar losses; only
    forward evaluations are used.
    """
    pairs = samples // 2
    ghat = np.zeros_like(x, dtype=np.float64)
    for _ in range(pairs):
        v = rng.choice(np.array([-1.0, 1.0], dtype=np.float32), size=x.shape)
        up, down = loss_fn(np.stack([x + delta * v, x - delta * v]))
        ghat += (float(up) - float(down)) / (2.0 * delta) * v
    return (ghat / pairs).astype(np.float32)


def spsa(model, x, y, config, example_ids=None):
    """Gradient-free attack: SPSA estimates plus signed ascent steps."""
    x0 = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if example_ids is None:
        example_ids = np.arange(len(y))
    eps = np.float32(config.epsilon)
    lo, hi = np.clip(x0 - eps, 0.0, 1.0), np.clip(x0 + eps, 0.0, 1.0)
    delta = np.float32(config.perturbation_size)
    lr = np.float32(config.learning_rate)
    pairs = config.samples_per_step // 2

    x_adv = x0.copy()
    for it in range(config.iters):
        ghat = np.zeros_like(x0, dtype=np.float64)
        for i, ex in enumerate(example_ids):
            rng = np.random.default_rng(np.random.SeedSequence(
                [int(config.base_seed), int(it), int(ex)]))
            v = rng.choice(np.array([-1.0, 1.0], dtype=np.float32),
                           size=(pairs,) + x0.shape[1:])
            probes = np.concatenate([x_adv[i] + delta * v,
                                     x_adv[i] - delta * v])
            logits = forward_logits(model, probes).data
            if not np.isfinite(logits).all():
                raise AttackError(
                    f"non-finite loss during SPSA iteration for example {ex}")
            losses = ce_per_example(logits, np.full(2 * pairs, y[i]))
            diffs = (losses[:pairs] - losses[pairs:]) / (2.0 * delta)
            diffs = diffs.reshape((-1,) + (1,) * (x0.ndim - 1))
            ghat[i] = (diffs * v).mean(axis=0)
        x_adv = np.clip(x_adv + lr * np.sign(ghat).astype(np.float32), lo, hi)

    logits = forward_logits(model, x_adv).data
    preds = logits.argmax(axis=1)
    loss = ce_per_example(logits, y)
    return AttackResult(x_adv, loss, preds != y, np.zeros(len(y), dtype=int),
                        preds)
