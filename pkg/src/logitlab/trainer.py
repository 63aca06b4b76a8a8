"""Adam-based training loop with periodic evaluation and checkpointing."""

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import predict, save_checkpoint
from .objectives import TrainObjective, training_loss


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainRun:
    objective: TrainObjective
    epochs: int = 5
    batch_size: int = 200
    lr: float = 1e-3
    init_seed: int = 0
    shuffle_seed: int = 1
    noise_seed: int = 2
    attack_seed: int = 3
    checkpoint_every: int = 0  # epochs; 0 = only at the end
    checkpoint_path: str = None
    metrics_path: str = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def adam_step(params, grads, state):
    """One Adam update, in place on ``params``; t is incremented first."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise T.ContractError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name} of shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clean_accuracy(model, images, labels, batch=500):
    hits = 0
    for start in range(0, len(labels), batch):
        hits += int((predict(model, images[start:start + batch])
                     == labels[start:start + batch]).sum())
    return hits / len(labels)


def train(model, dataset, run, quick_eval=None, progress=None):
    """Run the optimization loop; returns (model, per-epoch metrics list).

    ``quick_eval`` is an optional callable(model) -> dict merged into each
    epoch record (e.g. a fast PGD accuracy probe).
    """
    from .data import batches  # local import keeps module deps one-way

    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    state = AdamState(lr=run.lr)
    metrics = []
    noise_rng = np.random.default_rng(run.noise_seed)
    for epoch in range(run.epochs):
        losses = []
        for b, (x, y) in enumerate(batches(dataset, run.batch_size,
                                           run.shuffle_seed + epoch)):
            param_tensors = model.param_tensors(requires_grad=True)
            loss = training_loss(
                model, x, y, run.objective, param_tensors,
                epoch_seed=run.attack_seed + epoch * 10007 + b,
                noise_rng=noise_rng)
            if not np.isfinite(loss.data):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}, batch {b}")
            T.backward(loss)
            grads = {name: t.grad for name, t in param_tensors.items()}
            adam_step(model.params, grads, state)
            losses.append(float(loss.data))
        record = {"epoch": epoch,
                  "mean_loss": float(np.mean(losses)),
                  "clean_accuracy": clean_accuracy(model, dataset.images,
                                                   dataset.labels)}
        if quick_eval is not None:
            record.update(quick_eval(model))
        metrics.append(record)
        if progress is not None:
            progress(record)
        if run.checkpoint_path and run.checkpoint_every \
                and (epoch + 1) % run.checkpoint_every == 0:
            save_checkpoint(model, _checkpoint_metadata(run, epoch),
                            run.checkpoint_path)
    if run.checkpoint_path:
        save_checkpoint(model, _checkpoint_metadata(run, run.epochs - 1),
                        run.checkpoint_path)
    if run.metrics_path:
        with open(run.metrics_path, "w") as fh:
            for record in metrics:
                fh.write(json.dumps(record) + "\n")
    return model, metrics


def _checkpoint_metadata(run, epoch):
    obj = run.objective
    return {
        "objective": obj.kind,
        "lambda": obj.lam,
        "adv_fraction": obj.adv_fraction,
        "noise_sigma": obj.noise_sigma,
        "epochs_completed": epoch + 1,
        "batch_size": run.batch_size,
        "seeds": {"init": run.init_seed, "shuffle": run.shuffle_seed,
                  "noise": run.noise_seed, "attack": run.attack_seed},
    }
