"""Evaluation instruments: adversarial accuracy, parameter-sweep heatmaps,
restart-loss histograms, and input-space loss surfaces.

Artifacts are CSV files plus JSON metadata; binning and rendering are left
to external tools.  Everything here only reads the model, and every random
choice is derived from explicit seeds, so outputs are reproducible
bit-exactly regardless of chunking or worker count.
"""

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .attacks import (AttackConfig, SpsaConfig, ce_per_example, pgd,
                      pgd_restarts, spsa)
from .models import forward_logits, predict

DEFAULT_SWEEP_STEPS = (0.01, 0.02, 0.05, 0.1, 0.2, 0.3)
DEFAULT_SWEEP_ITERS = (10, 40, 100, 200)
EVAL_CHUNK = 250  # fixed evaluation chunk; workers never change results


@dataclass
class HeatmapGrid:
    steps: tuple
    iters: tuple
    accuracy: np.ndarray  # |steps| x |iters|
    epsilon: float
    restarts: int


@dataclass
class RestartHistogram:
    example_id: int
    losses: np.ndarray  # one final loss per restart
    threshold: float


@dataclass
class SurfaceSample:
    example_id: int
    epsilon: float
    k: int
    losses: np.ndarray  # (2k+1) x (2k+1)
    seed: int


def misclassification_threshold(n_classes):
    """CE above ln(C) at the true label guarantees misclassification."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    return math.log(n_classes)


def _attack_chunk(model, x, y, config, example_ids):
    if isinstance(config, SpsaConfig):
        return spsa(model, x, y, config, example_ids=example_ids)
    return pgd_restarts(model, x, y, config, example_ids=example_ids)


def adversarial_accuracy(model, images, labels, config, stop_on_success=True):
    """Fraction of examples still classified correctly after the attack.

    With ``stop_on_success`` (PGD only), examples that a restart already
    broke are dropped from later restarts; per-example results are
    unchanged because restarts are seeded independently per example.
    """
    if len(labels) == 0:
        raise ValueError("evaluation slice is empty")
    labels = np.asarray(labels, dtype=np.int64)
    survived = 0
    for start in range(0, len(labels), EVAL_CHUNK):
        x = images[start:start + EVAL_CHUNK]
        y = labels[start:start + EVAL_CHUNK]
        ids = np.arange(start, start + len(y))
        if isinstance(config, SpsaConfig) or not stop_on_success:
            result = _attack_chunk(model, x, y, config, ids)
            survived += int((result.predictions == y).sum())
            continue
        alive = np.arange(len(y))
        for r in range(config.restarts):
            if alive.size == 0:
                break
            run = pgd(model, x[alive], y[alive], config, restart_index=r,
                      example_ids=ids[alive])
            alive = alive[run.predictions == y[alive]]
        survived += alive.size
    return survived / len(labels)


def grid_sweep(model, images, labels, epsilon, steps=DEFAULT_SWEEP_STEPS,
               iters=DEFAULT_SWEEP_ITERS, restarts=1, base_seed=0, workers=1):
    """Adversarial accuracy over a (step, iterations) grid at fixed epsilon."""
    steps, iters = tuple(steps), tuple(iters)
    if not steps or not iters:
        raise ValueError("sweep axes must be non-empty")
    cells = [(i, j, AttackConfig(epsilon=epsilon, step=s, iters=n,
                                 restarts=restarts, base_seed=base_seed))
             for i, s in enumerate(steps) for j, n in enumerate(iters)]
    acc = np.zeros((len(steps), len(iters)))

    def run(cell):
        i, j, config = cell
        return i, j, adversarial_accuracy(model, images, labels, config)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(cell) for cell in cells]
    for i, j, value in results:
        acc[i, j] = value
    return HeatmapGrid(steps, iters, acc, epsilon, restarts)


def restart_histogram(model, x, y, config, example_id=0):
    """Final loss of every restart for a single example (not just the max)."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    losses = np.empty(config.restarts)
    for r in range(config.restarts):
        run = pgd(model, x, np.asarray([y]), config, restart_index=r,
                  example_ids=np.asarray([example_id]))
        losses[r] = run.final_loss[0]
    return RestartHistogram(example_id, losses,
                            misclassification_threshold(model.n_classes))


def loss_surface(model, x, y, epsilon, k, seed, example_id=0):
    """Cross-entropy over a 2-d random signed subspace around ``x``.

    Probes clip(x + (i/k)*eps*u + (j/k)*eps*v) for i, j in [-k, k], where u
    and v are Rademacher direction vectors drawn from ``seed``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 4:
        x = x[0]
    rng = np.random.default_rng(seed)
    u = rng.choice(np.array([-1.0, 1.0], dtype=np.float32), size=x.shape)
    v = rng.choice(np.array([-1.0, 1.0], dtype=np.float32), size=x.shape)
    offsets = np.arange(-k, k + 1, dtype=np.float32) * (epsilon / k)
    losses = np.empty((2 * k + 1, 2 * k + 1))
    row_batch = np.empty((2 * k + 1,) + x.shape, dtype=np.float32)
    for i, a in enumerate(offsets):
        for j, b in enumerate(offsets):
            row_batch[j] = np.clip(x + a * u + b * v, 0.0, 1.0)
        logits = forward_logits(model, row_batch).data
        losses[i] = ce_per_example(logits, np.full(2 * k + 1, y))
    return SurfaceSample(example_id, epsilon, k, losses, seed)


def write_heatmap_csv(grid, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "iters", "adv_accuracy"])
        for i, s in enumerate(grid.steps):
            for j, n in enumerate(grid.iters):
                writer.writerow([f"{s:.6f}", n, f"{grid.accuracy[i, j]:.6f}"])


def write_histogram_csv(hist, path, meta_path=None):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["restart", "loss"])
        for r, loss in enumerate(hist.losses):
            writer.writerow([r, f"{loss:.6f}"])
    if meta_path:
        with open(meta_path, "w") as fh:
            json.dump({"example_id": hist.example_id,
                       "threshold": hist.threshold,
                       "restarts": len(hist.losses)}, fh, indent=2)


def write_surface_csv(surface, path):
    k = surface.k
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "loss"])
        for i in range(-k, k + 1):
            for j in range(-k, k + 1):
                writer.writerow([i, j, f"{surface.losses[i + k, j + k]:.6f}"])


def _config_row(config):
    if isinstance(config, SpsaConfig):
        return {"attack": "spsa", "epsilon": config.epsilon,
                "iters": config.iters,
                "samples_per_step": config.samples_per_step,
                "perturbation_size": config.perturbation_size,
                "learning_rate": config.learning_rate,
                "seed": config.base_seed}
    return {"attack": "pgd", "epsilon": config.epsilon, "step": config.step,
            "iters": config.iters, "restarts": config.restarts,
            "target_mode": config.target_mode,
            "random_init": bool(config.random_init),
            "seed": config.base_seed}


def build_report(model, images, labels, attack_suite, artifacts=None):
    """Clean accuracy plus one adversarial-accuracy row per attack config."""
    if not attack_suite:
        raise ValueError("attack suite is empty")
    labels = np.asarray(labels, dtype=np.int64)
    hits = 0
    for start in range(0, len(labels), EVAL_CHUNK):
        hits += int((predict(model, images[start:start + EVAL_CHUNK])
                     == labels[start:start + EVAL_CHUNK]).sum())
    clean = hits / len(labels)
    rows = []
    for config in attack_suite:
        row = _config_row(config)
        row["adv_accuracy"] = adversarial_accuracy(model, images, labels,
                                                   config)
        rows.append(row)
    return {"model": dict(model.metadata),
            "eval_examples": int(len(labels)),
            "clean_accuracy": clean,
            "attacks": rows,
            "artifacts": list(artifacts or [])}
