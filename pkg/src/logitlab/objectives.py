"""Training losses: cross-entropy plus the logit regularization penalties.

CLP pairs the two halves of a shuffled clean minibatch; ALP pairs each
example's clean and adversarial logits; LSQ penalizes the squared logit
norm.  Mixed-minibatch adversarial training composes with any of them
through :func:`training_loss`.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attacks import AttackConfig
from .models import forward_logits

OBJECTIVE_KINDS = ("plain", "clp", "lsq", "alp")


def default_inner_attack():
    # the classic MNIST-scale training attack: step 2.55/255, 40 iterations
    return AttackConfig(epsilon=0.3, step=0.01, iters=40, restarts=1,
                        random_init=True)


@dataclass(frozen=True)
class TrainObjective:
    kind: str = "plain"
    lam: float = 0.0
    adv_fraction: float = 0.0
    noise_sigma: float = 0.0
    inner_attack: AttackConfig = None

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.lam < 0 or self.noise_sigma < 0:
            raise ValueError("lambda and sigma must be non-negative")
        if self.adv_fraction not in (0.0, 0.5, 1.0):
            raise ValueError(
                f"adv_fraction must be 0, 0.5 or 1.0, got {self.adv_fraction}")
        if (self.kind == "alp" or self.adv_fraction > 0) \
                and self.inner_attack is None:
            object.__setattr__(self, "inner_attack", default_inner_attack())

    def needs_adversarial(self):
        return self.kind == "alp" or self.adv_fraction > 0


def ce_loss(logits, labels):
    """Mean cross-entropy of a logits Tensor against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = logits.shape[1]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise T.ContractError(
            f"label out of range for {n_classes} classes")
    per_example = T.sub(T.logsumexp(logits, axis=1),
                        T.gather_rows(logits, labels))
    return T.tmean(per_example)


def lsq_penalty(logits, lam):
    """lambda * mean squared L2 norm of the logit rows."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return T.scale(T.tmean(T.tsum(T.mul(logits, logits), axes=1)), lam)


def clp_penalty(logits_a, logits_b, lam):
    """lambda * mean squared L2 distance between paired logit rows."""
    if logits_a.shape != logits_b.shape:
        raise T.DimensionError(
            f"pair shapes differ: {logits_a.shape} vs {logits_b.shape}")
    diff = T.sub(logits_a, logits_b)
    return T.scale(T.tmean(T.tsum(T.mul(diff, diff), axes=1)), lam)


def alp_penalty(logits_clean, logits_adv, lam):
    """Same squared-distance form as CLP, on (clean, adversarial) pairs."""
    return clp_penalty(logits_clean, logits_adv, lam)


def logit_pair_distance(model, x, y, attack, seed=0):
    """Mean L2 distance between clean and adversarial logits on a probe batch.

    A falling value across epochs is the observable signature of pair-based
    logit regularization taking hold.
    """
    from .attacks import pgd

    x = np.asarray(x, dtype=np.float32)
    x_adv = pgd(model, x, np.asarray(y, dtype=np.int64), attack,
                restart_index=seed).x_adv
    z_clean = forward_logits(model, x).data
    z_adv = forward_logits(model, x_adv).data
    return float(np.mean(np.linalg.norm(z_clean - z_adv, axis=1)))


def training_loss(model, x, y, objective, param_tensors=None,
                  epoch_seed=0, noise_rng=None):
    """Assemble the full differentiable training loss for one minibatch.

    Order: Gaussian augmentation, adversarial crafting (detached from the
    parameter graph), cross-entropy on the clean/adversarial mix, then the
    objective's penalty.  Returns a scalar Tensor.
    """
    from .attacks import pgd  # runtime import; attacks also builds graphs
    from .data import gaussian_augment

    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if objective.noise_sigma > 0:
        if noise_rng is None:
            noise_rng = np.random.default_rng(epoch_seed)
        x = gaussian_augment(x, objective.noise_sigma, noise_rng)

    if param_tensors is None:
        param_tensors = model.param_tensors(requires_grad=True)

    half = len(y) // 2
    order = np.random.default_rng(epoch_seed).permutation(len(y))

    # ALP pairs every example with its adversarial twin; plain 50% AT only
    # needs the adversarial half crafted.
    x_adv = None
    if objective.needs_adversarial():
        if objective.kind == "alp" or objective.adv_fraction == 1.0:
            x_adv = pgd(model, x, y, objective.inner_attack,
                        restart_index=epoch_seed).x_adv
        else:
            adv_idx = order[half:]
            x_adv = x.copy()
            x_adv[adv_idx] = pgd(model, x[adv_idx], y[adv_idx],
                                 objective.inner_attack,
                                 restart_index=epoch_seed,
                                 example_ids=adv_idx).x_adv

    logits_clean = None
    logits_adv = None

    def clean_logits():
        nonlocal logits_clean
        if logits_clean is None:
            logits_clean = forward_logits(model, x, param_tensors)
        return logits_clean

    def adv_logits():
        nonlocal logits_adv
        if logits_adv is None:
            logits_adv = forward_logits(model, x_adv, param_tensors)
        return logits_adv

    if objective.adv_fraction == 0.0:
        loss = ce_loss(clean_logits(), y)
    elif objective.adv_fraction == 1.0:
        loss = ce_loss(adv_logits(), y)
    else:
        # 50% regime: equal-weight mean of clean-half and adversarial-half CE
        clean_idx, adv_idx = order[:half], order[half:]
        zc = T.take_rows(clean_logits(), clean_idx)
        za = T.take_rows(adv_logits(), adv_idx)
        loss = T.scale(T.add(ce_loss(zc, y[clean_idx]),
                             ce_loss(za, y[adv_idx])), 0.5)

    if objective.kind == "lsq" and objective.lam > 0:
        loss = T.add(loss, lsq_penalty(clean_logits(), objective.lam))
    elif objective.kind == "clp" and objective.lam > 0:
        # pair the two halves of the epoch-shuffled minibatch
        z = clean_logits()
        z_a = T.take_rows(z, order[:half])
        z_b = T.take_rows(z, order[half:2 * half])
        loss = T.add(loss, clp_penalty(z_a, z_b, objective.lam))
    elif objective.kind == "alp" and objective.lam > 0:
        loss = T.add(loss, alp_penalty(clean_logits(), adv_logits(),
                                       objective.lam))
    return loss
