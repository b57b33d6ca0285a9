"""Task sets, the bilevel training loop, and its ablation baselines.

One training step samples K corruption tasks from the current probability
vector, corrupts the same source minibatch once per task, takes a one-step
inner gradient descent per task, and sums the post-adaptation gradients
(first order: the inner Jacobian is treated as identity) into one outer Adam
update. After each epoch every task is scored on the validation split and
the sampling probabilities become the softmax of those losses, so harder
tasks are sampled more.

Randomness: each run forks one seed into named substreams, in this fixed
order: "init" (parameters), "order" (batch shuffling), "tasks" (task index
draws), "transform" (dynamic transform draws; static mode consumes it once
during precompute), "validate" (validation-time transform draws). The order
is part of the reproducibility contract; new streams must be appended.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import network
from .geometry import KIND_DENSITY, KIND_DROPPING, KIND_OCCLUSION, TransformSpec, apply_transform

MODE_METASETS = "metasets"
MODE_NONE = "none"
MODE_AUGMENT = "augment"
MODE_NO_SOFT = "no-soft-sampling"
MODE_STATIC = "static-transform"
MODES = (MODE_METASETS, MODE_NONE, MODE_AUGMENT, MODE_NO_SOFT, MODE_STATIC)

TASK_MODE_FIXED = "paper"
TASK_MODE_STRATIFIED = "stratified"

# Stock nine-task grid: three static parameters per transform kind.
FIXED_TASK_VALUES = {
    KIND_DENSITY: (1.3, 1.4, 1.6),
    KIND_DROPPING: (24.0, 36.0, 45.0),
    KIND_OCCLUSION: (0.035, 0.022, 0.017),
}

# Stratified mode draws one value per equal third of each range.
DEFAULT_TASK_RANGES = {
    KIND_DENSITY: (1.2, 1.8),
    KIND_DROPPING: (20.0, 50.0),
    KIND_OCCLUSION: (0.015, 0.04),
}

_STREAM_NAMES = ("init", "order", "tasks", "transform", "validate")


@dataclass
class TaskSet:
    """The N corruption tasks plus their sampling probabilities."""

    transforms: list
    probabilities: np.ndarray

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        n = len(self.transforms)
        if n < 1:
            raise ValueError("task set needs at least one transform")
        if self.probabilities.shape != (n,):
            raise ValueError("need one probability per task")
        if not (self.probabilities > 0.0).all():
            raise ValueError("task probabilities must be positive")
        if abs(self.probabilities.sum() - 1.0) > 1e-9:
            raise ValueError("task probabilities must sum to 1")


def build_task_set(mode=TASK_MODE_FIXED, rng=None, ranges=None):
    """Construct the task set, uniform initial probabilities.

    "paper" uses the fixed nine-value grid above. "stratified" splits each
    kind's (t1, t2) range into three equal thirds and draws one uniform
    value per third (kind order density, dropping, occlusion; thirds low to
    high), which needs an rng.
    """
    kinds = (KIND_DENSITY, KIND_DROPPING, KIND_OCCLUSION)
    transforms = []
    if mode == TASK_MODE_FIXED:
        for kind in kinds:
            transforms.extend(TransformSpec(kind, v) for v in FIXED_TASK_VALUES[kind])
    elif mode == TASK_MODE_STRATIFIED:
        if rng is None:
            raise ValueError("stratified task construction needs an rng")
        ranges = dict(DEFAULT_TASK_RANGES, **(ranges or {}))
        for kind in kinds:
            lo, hi = ranges[kind]
            if not lo < hi:
                raise ValueError(f"bad range for {kind}: ({lo}, {hi})")
            edges = np.linspace(lo, hi, 4)
            for a, b in zip(edges[:-1], edges[1:]):
                transforms.append(TransformSpec(kind, float(rng.uniform(a, b))))
    else:
        raise ValueError(f"unknown task mode {mode!r}")
    n = len(transforms)
    return TaskSet(transforms=transforms, probabilities=np.full(n, 1.0 / n))


def sample_task_indices(probabilities, k, rng):
    """Draw k task indices with replacement from a categorical distribution."""
    p = np.asarray(probabilities, dtype=np.float64)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not (p > 0.0).all() or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must be positive and sum to 1")
    return rng.choice(len(p), size=k, replace=True, p=p / p.sum())


def update_probabilities(losses):
    """Softmax of per-task validation losses (max subtracted for stability)."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or len(losses) < 2:
        raise ValueError("need at least two task losses")
    if not np.isfinite(losses).all():
        raise ValueError("task losses must be finite")
    z = np.exp(losses - losses.max())
    return z / z.sum()


@dataclass
class MetaStepResult:
    """Outer gradients plus per-task diagnostics for one training step."""

    grads: dict
    loss: float
    task_indices: np.ndarray
    task_losses: np.ndarray
    adapted_losses: np.ndarray


def _meta_step(params, probabilities, labels, k, eta, task_rng, task_batch):
    """Shared bilevel step; task_batch(t) yields the batch corrupted by task t."""
    indices = sample_task_indices(probabilities, k, task_rng)
    total = None
    task_losses, adapted_losses = [], []
    for t in indices:
        clouds_t = task_batch(int(t))
        loss_t, grads_t = network.loss_and_grad(params, clouds_t, labels)
        adapted = network.sgd_step(params, grads_t, eta)
        loss_a, grads_a = network.loss_and_grad(adapted, clouds_t, labels)
        task_losses.append(loss_t)
        adapted_losses.append(loss_a)
        if total is None:
            total = grads_a
        else:
            total = {key: total[key] + grads_a[key] for key in network.PARAM_KEYS}
    return MetaStepResult(
        grads=total,
        loss=float(sum(adapted_losses)),
        task_indices=indices,
        task_losses=np.array(task_losses),
        adapted_losses=np.array(adapted_losses),
    )


def meta_train_step(params, task_set, clouds, labels, k, eta, task_rng, transform_rng):
    """One bilevel step on a source minibatch with fresh dynamic transforms.

    Samples k tasks from the task set's probabilities, corrupts the same
    minibatch once per sampled task (fresh dynamic draws per cloud), adapts
    the parameters one inner step of size eta per task, and returns the
    summed post-adaptation gradients plus the summed post-adaptation loss.
    Duplicate task draws simply contribute twice.
    """

    def task_batch(t):
        spec = task_set.transforms[t]
        return [apply_transform(spec, c, transform_rng) for c in clouds]

    return _meta_step(params, task_set.probabilities, labels, k, eta, task_rng, task_batch)


def meta_validate(params, task_set, clouds, labels, rng):
    """Score every task on a validation split.

    Each validation cloud is corrupted once per task with fresh dynamic
    draws (task major, cloud minor). Returns (losses, accuracies), one entry
    per task.
    """
    losses, accuracies = [], []
    for spec in task_set.transforms:
        corrupted = [apply_transform(spec, c, rng) for c in clouds]
        loss, acc = network.evaluate(params, corrupted, labels)
        losses.append(loss)
        accuracies.append(acc)
    return np.array(losses), np.array(accuracies)


@dataclass
class TrainConfig:
    """Hyperparameters for one training run."""

    seed: int
    batch_size: int = 128
    tasks_per_step: int = 4
    eta: float = 0.0003
    beta: float = 0.001
    epsilon: float = 0.001
    max_epochs: int = 30

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.tasks_per_step < 1:
            raise ValueError("tasks_per_step must be >= 1")
        if self.eta < 0.0:
            raise ValueError("eta must be >= 0")
        if not self.beta > 0.0:
            raise ValueError("beta must be > 0")
        if not self.epsilon > 0.0:
            raise ValueError("epsilon must be > 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class EpochRecord:
    """One history row: per-task validation stats after one epoch."""

    epoch: int
    val_losses: np.ndarray
    val_accuracies: np.ndarray
    probabilities: np.ndarray
    train_loss: float


@dataclass
class TrainResult:
    params: dict
    adam: network.AdamState
    history: list
    converged: bool


def _streams(seed):
    children = np.random.SeedSequence(seed).spawn(len(_STREAM_NAMES))
    return {name: np.random.default_rng(c) for name, c in zip(_STREAM_NAMES, children)}


def train(config, train_set, val_set, task_set, mode=MODE_METASETS, step_callback=None):
    """Run one training mode to convergence or the epoch cap.

    Modes: "metasets" is the full loop above; "none" is plain Adam on the
    raw source batches; "augment" corrupts each batch with one uniformly
    random task and takes a plain step (no inner loop); "no-soft-sampling"
    is the full loop with probabilities frozen uniform; "static-transform"
    is the full loop with every task's dynamic draws made once per cloud up
    front and reused every epoch.

    Training stops early once every per-task validation loss falls below
    config.epsilon. step_callback(step_index, params), when given, runs
    after every outer update. Returns a TrainResult whose history has one
    EpochRecord per completed epoch.
    """
    if mode not in MODES:
        raise ValueError(f"unknown training mode {mode!r}")
    n_tasks = len(task_set.transforms)
    if config.tasks_per_step > n_tasks:
        raise ValueError(f"tasks_per_step {config.tasks_per_step} exceeds task count {n_tasks}")
    class_count = len(train_set.class_names)
    train_clouds, train_labels = train_set.points_and_labels()
    val_clouds, val_labels = val_set.points_and_labels()
    if not len(train_clouds) or not len(val_clouds):
        raise ValueError("train and validation splits must be non-empty")

    streams = _streams(config.seed)
    params = network.init_params(class_count, streams["init"])
    adam = network.init_adam(params)
    probabilities = np.asarray(task_set.probabilities, dtype=np.float64).copy()

    static_train = static_val = None
    if mode == MODE_STATIC:
        rng = streams["transform"]
        static_train = [
            [apply_transform(spec, c, rng) for c in train_clouds] for spec in task_set.transforms
        ]
        static_val = [
            [apply_transform(spec, c, rng) for c in val_clouds] for spec in task_set.transforms
        ]

    history = []
    converged = False
    step_index = 0
    for epoch in range(1, config.max_epochs + 1):
        order = streams["order"].permutation(len(train_clouds))
        step_losses = []
        for lo in range(0, len(order), config.batch_size):
            batch_idx = order[lo : lo + config.batch_size]
            clouds = [train_clouds[i] for i in batch_idx]
            labels = train_labels[batch_idx]
            if mode == MODE_NONE:
                loss, grads = network.loss_and_grad(params, clouds, labels)
            elif mode == MODE_AUGMENT:
                t = int(streams["tasks"].integers(n_tasks))
                spec = task_set.transforms[t]
                corrupted = [apply_transform(spec, c, streams["transform"]) for c in clouds]
                loss, grads = network.loss_and_grad(params, corrupted, labels)
            else:
                if mode == MODE_STATIC:
                    task_batch = lambda t: [static_train[t][i] for i in batch_idx]
                else:
                    task_batch = lambda t: [
                        apply_transform(task_set.transforms[t], c, streams["transform"])
                        for c in clouds
                    ]
                result = _meta_step(
                    params,
                    probabilities,
                    labels,
                    config.tasks_per_step,
                    config.eta,
                    streams["tasks"],
                    task_batch,
                )
                loss, grads = result.loss, result.grads
            adam, params = network.adam_step(adam, params, grads, config.beta)
            step_index += 1
            step_losses.append(loss)
            if step_callback is not None:
                step_callback(step_index, params)

        if mode == MODE_STATIC:
            val_losses, val_accuracies = [], []
            for t in range(n_tasks):
                loss, acc = network.evaluate(params, static_val[t], val_labels)
                val_losses.append(loss)
                val_accuracies.append(acc)
            val_losses, val_accuracies = np.array(val_losses), np.array(val_accuracies)
        else:
            val_losses, val_accuracies = meta_validate(
                params, task_set, val_clouds, val_labels, streams["validate"]
            )
        if mode in (MODE_METASETS, MODE_STATIC) and n_tasks >= 2:
            probabilities = update_probabilities(val_losses)
        history.append(
            EpochRecord(
                epoch=epoch,
                val_losses=val_losses,
                val_accuracies=val_accuracies,
                probabilities=probabilities.copy(),
                train_loss=float(np.mean(step_losses)),
            )
        )
        if (val_losses < config.epsilon).all():
            converged = True
            break
    return TrainResult(params=params, adam=adam, history=history, converged=converged)


def write_history_csv(path, history, n_tasks):
    """One row per epoch: epoch, N losses, N accuracies, N probabilities, train loss.

    Floats are written with repr, so identical histories give identical
    bytes.
    """
    cols = ["epoch"]
    cols += [f"val_loss_{i + 1}" for i in range(n_tasks)]
    cols += [f"val_acc_{i + 1}" for i in range(n_tasks)]
    cols += [f"p_{i + 1}" for i in range(n_tasks)]
    cols.append("train_loss")
    lines = [",".join(cols)]
    for rec in history:
        fields = [str(rec.epoch)]
        for block in (rec.val_losses, rec.val_accuracies, rec.probabilities):
            fields.extend(repr(float(v)) for v in block)
        fields.append(repr(float(rec.train_loss)))
        lines.append(",".join(fields))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def build_summary(config, mode, task_set, result):
    """Structured run summary for the summary JSON file."""
    final = result.history[-1]
    return {
        "mode": mode,
        "converged": result.converged,
        "epochs_run": len(result.history),
        "final_train_loss": final.train_loss,
        "final_val_losses": [float(v) for v in final.val_losses],
        "final_val_accuracies": [float(v) for v in final.val_accuracies],
        "final_probabilities": [float(v) for v in final.probabilities],
        "tasks": [{"kind": s.kind, "value": s.value} for s in task_set.transforms],
        "config": {
            "seed": config.seed,
            "batch_size": config.batch_size,
            "tasks_per_step": config.tasks_per_step,
            "eta": config.eta,
            "beta": config.beta,
            "epsilon": config.epsilon,
            "max_epochs": config.max_epochs,
        },
    }


def write_summary(path, summary):
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
