"""End-to-end optimization: per-epoch transport-based partition refresh,
mini-batch SGD with a cosine-annealed learning rate, and evaluation.

Only the context tokens and the modulation weights train; the stand-in
encoders stay frozen throughout.  Loss routing sends reliable samples to
cross-entropy and unreliable ones to generalized cross-entropy, with a
configurable all-CE / all-GCE override so plain baselines run through the
same loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses, pipeline as P, transport
from .data import FeatureDataset, estimate_class_directions
from .errors import ConfigError, DegenerateInputError

ROUTE_OT = "ot"
ROUTE_ALL_CE = "all-ce"
ROUTE_ALL_GCE = "all-gce"
ROUTINGS = (ROUTE_OT, ROUTE_ALL_CE, ROUTE_ALL_GCE)


@dataclass
class TrainConfig:
    lr0: float = 0.002
    epochs: int = 200
    batch: int = 16
    warmup_epochs: int = 1          # all-GCE epochs before the first partition
    partition_refresh: int = 1      # refresh cadence in epochs
    variant: str = P.VARIANT_FULL
    routing: str = ROUTE_OT
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)
    epsilon: float = transport.DEFAULT_EPSILON
    sinkhorn_tol: float = transport.DEFAULT_TOL
    sinkhorn_max_iters: int = transport.DEFAULT_MAX_ITERS
    delta_rel: float = 0.5          # threshold as a fraction of max sample mass
    delta_abs: float | None = None
    ctx_mode: str = P.MODE_SHARED
    tau: float = 0.07
    align_noise: float = P.ALIGN_NOISE   # stand-in zero-shot imperfection
    dims: P.ModelDims = field(default_factory=P.ModelDims)
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.variant not in P.VARIANTS:
            raise ConfigError(f"unknown variant: {self.variant!r}")
        if self.routing not in ROUTINGS:
            raise ConfigError(f"unknown routing: {self.routing!r}")
        if self.partition_refresh < 1:
            raise ConfigError("partition_refresh must be >= 1")


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    train_loss: float
    test_accuracy: float
    reliable_count: int
    partition_precision: float | None


@dataclass
class TrainState:
    ctx: P.ContextBank
    params: P.PipelineParams
    enc: P.FrozenEncoders
    rng: np.random.Generator
    step: int = 0
    total_steps: int = 0


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 down to 0 at step `total`."""
    if total <= 0:
        raise ConfigError("total step count must be positive")
    if not 0 <= t <= total:
        raise ConfigError(f"step {t} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


def sgd_step(arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
    """Plain in-place SGD update; no momentum, no weight decay."""
    for name, arr in arrays.items():
        g = grads[name]
        if g.shape != arr.shape:
            raise ConfigError(
                f"gradient shape {g.shape} does not match {name} {arr.shape}")
        arr -= lr * g


def init_state(cfg: TrainConfig, n_classes: int,
               class_directions: np.ndarray | None = None) -> TrainState:
    ctx, params, enc = P.init_model(cfg.dims, n_classes, mode=cfg.ctx_mode,
                                    tau=cfg.tau, seed=cfg.seed,
                                    class_directions=class_directions,
                                    align_noise=cfg.align_noise)
    return TrainState(ctx=ctx, params=params, enc=enc,
                      rng=np.random.default_rng(cfg.seed))


def base_text_features(state: TrainState) -> np.ndarray:
    """Per-class text features from the *unmodulated* context; this is what
    the partition step compares frozen image features against."""
    ctx, enc = state.ctx, state.enc
    feats = np.empty((enc.n_classes, enc.text_proj.shape[1]))
    for k in range(enc.n_classes):
        tokens = ctx.tokens if ctx.mode == P.MODE_SHARED else ctx.tokens[k]
        feats[k] = P.encode_text_standin(tokens, k, enc)
    return feats


def frozen_image_features(ds: FeatureDataset,
                          enc: P.FrozenEncoders) -> np.ndarray:
    feats = np.empty((ds.n_samples, enc.image_proj.shape[1]))
    for i in range(ds.n_samples):
        feats[i] = P.encode_image_standin(ds.tokens[i], enc)
    return feats


def _trivial_partition(n: int, reliable: bool,
                       labels: np.ndarray) -> transport.PartitionResult:
    idx = np.arange(n)
    empty = np.empty(0, dtype=np.intp)
    return transport.PartitionResult(
        pseudo_labels=labels.copy(), confidences=np.ones(n),
        reliable=idx if reliable else empty,
        unreliable=empty if reliable else idx,
        delta=0.0)


def refresh_partition(state: TrainState, ds: FeatureDataset, cfg: TrainConfig,
                      image_feats: np.ndarray) -> transport.PartitionResult:
    """Recompute the reliability split for the whole training set."""
    if cfg.routing == ROUTE_ALL_CE:
        return _trivial_partition(ds.n_samples, True, ds.observed_labels)
    if cfg.routing == ROUTE_ALL_GCE:
        return _trivial_partition(ds.n_samples, False, ds.observed_labels)
    result, _plan = transport.partition_from_features(
        base_text_features(state), image_feats, ds.observed_labels,
        tau=cfg.tau, epsilon=cfg.epsilon, delta_rel=cfg.delta_rel,
        delta_abs=cfg.delta_abs, max_iters=cfg.sinkhorn_max_iters,
        tol=cfg.sinkhorn_tol)
    return result


def partition_precision(part: transport.PartitionResult,
                        noise_mask: np.ndarray) -> float | None:
    """Fraction of the reliable subset whose observed label is clean."""
    if part.reliable.size == 0:
        return None
    return float(np.mean(~noise_mask[part.reliable]))


def _batch_partition(batch: np.ndarray, part: transport.PartitionResult,
                     labels: np.ndarray) -> transport.PartitionResult:
    reliable_mask = np.zeros(labels.size, dtype=bool)
    reliable_mask[part.reliable] = True
    local = reliable_mask[batch]
    pos = np.arange(batch.size)
    return transport.PartitionResult(
        pseudo_labels=part.pseudo_labels[batch],
        confidences=part.confidences[batch],
        reliable=pos[local], unreliable=pos[~local], delta=part.delta)


def train_epoch(state: TrainState, ds: FeatureDataset,
                part: transport.PartitionResult, cfg: TrainConfig) -> float:
    """One seeded-shuffle pass over the training set.

    Every batch forwards all its samples, routes each to the CE or GCE term
    according to the partition, mixes by alpha, backpropagates and applies
    one SGD update at the current cosine learning rate.  Returns the mean
    batch loss.
    """
    n = ds.n_samples
    order = state.rng.permutation(n)
    arrays = P.trainable_arrays(state.ctx, state.params)
    batch_losses = []

    for start in range(0, n, cfg.batch):
        batch = order[start:start + cfg.batch]
        outs = [P.forward(ds.tokens[i], state.ctx, state.params, state.enc,
                          cfg.variant) for i in batch]
        probs = np.stack([o.probs for o in outs])
        labels = ds.observed_labels[batch]
        local_part = _batch_partition(batch, part, ds.observed_labels)

        batch_losses.append(
            losses.robust_loss(probs, labels, local_part, cfg.loss))
        d_probs = losses.loss_gradient(probs, labels, local_part, cfg.loss)

        total = P.zero_grads(state.ctx, state.params)
        for row, out in enumerate(outs):
            g = P.backward(out, d_probs[row], state.ctx, state.params)
            for name in total:
                total[name] += g[name]

        lr = cosine_lr(state.step, state.total_steps, cfg.lr0)
        sgd_step(arrays, total, lr)
        state.step += 1

    return float(np.mean(batch_losses)) if batch_losses else 0.0


def evaluate_accuracy(state: TrainState, test_ds: FeatureDataset,
                      variant: str) -> float:
    """Fraction of argmax-correct predictions against clean labels."""
    if test_ds.n_samples == 0:
        raise DegenerateInputError("cannot evaluate on an empty test set")
    correct = 0
    for i in range(test_ds.n_samples):
        out = P.forward(test_ds.tokens[i], state.ctx, state.params,
                        state.enc, variant)
        if int(np.argmax(out.probs)) == test_ds.clean_labels[i]:
            correct += 1
    return correct / test_ds.n_samples


def run_single(cfg: TrainConfig, train_ds: FeatureDataset,
               test_ds: FeatureDataset,
               class_directions: np.ndarray | None = None
               ) -> tuple[TrainState, list[MetricsRecord], float]:
    """Train one seed; returns the final state, per-epoch metrics and the
    final clean-test accuracy (evaluated even when epochs == 0).

    Unless given explicitly, the stand-in alignment directions are
    estimated from the training set.
    """
    if class_directions is None:
        class_directions = estimate_class_directions(train_ds)
    state = init_state(cfg, train_ds.n_classes, class_directions)
    steps_per_epoch = math.ceil(train_ds.n_samples / cfg.batch)
    state.total_steps = max(1, cfg.epochs * steps_per_epoch)
    image_feats = frozen_image_features(train_ds, state.enc)
    noise_mask = train_ds.noise_mask

    part = _trivial_partition(train_ds.n_samples, False,
                              train_ds.observed_labels)
    records: list[MetricsRecord] = []
    for epoch in range(cfg.epochs):
        if cfg.routing != ROUTE_OT:
            part = refresh_partition(state, train_ds, cfg, image_feats)
        elif epoch >= cfg.warmup_epochs and \
                (epoch - cfg.warmup_epochs) % cfg.partition_refresh == 0:
            part = refresh_partition(state, train_ds, cfg, image_feats)

        lr = cosine_lr(state.step, state.total_steps, cfg.lr0)
        train_loss = train_epoch(state, train_ds, part, cfg)
        records.append(MetricsRecord(
            epoch=epoch,
            lr=lr,
            train_loss=train_loss,
            test_accuracy=evaluate_accuracy(state, test_ds, cfg.variant),
            reliable_count=int(part.reliable.size),
            partition_precision=partition_precision(part, noise_mask),
        ))

    final_acc = (records[-1].test_accuracy if records
                 else evaluate_accuracy(state, test_ds, cfg.variant))
    return state, records, final_acc


@dataclass
class ExperimentReport:
    per_seed_accuracy: dict[int, float]
    accuracy_mean: float
    accuracy_std: float
    trainable_params: int
    frozen_params: int
    metrics: dict[int, list[MetricsRecord]]
    states: dict[int, TrainState]


def run_experiment(cfg: TrainConfig, train_ds: FeatureDataset,
                   test_ds: FeatureDataset, seeds: list[int],
                   class_directions: np.ndarray | None = None
                   ) -> ExperimentReport:
    """Run the configured experiment once per seed and aggregate accuracy."""
    if not seeds:
        raise ConfigError("need at least one seed")
    if class_directions is None:
        class_directions = estimate_class_directions(train_ds)
    per_seed: dict[int, float] = {}
    metrics: dict[int, list[MetricsRecord]] = {}
    states: dict[int, TrainState] = {}
    counts = None
    for seed in seeds:
        seed_cfg = replace(cfg, seed=seed)
        state, records, acc = run_single(seed_cfg, train_ds, test_ds,
                                         class_directions)
        per_seed[seed] = acc
        metrics[seed] = records
        states[seed] = state
        if counts is None:
            counts = P.parameter_counts(state.ctx, state.params, state.enc)
    accs = np.array(list(per_seed.values()))
    return ExperimentReport(
        per_seed_accuracy=per_seed,
        accuracy_mean=float(accs.mean()),
        accuracy_std=float(accs.std()),
        trainable_params=counts["trainable"],
        frozen_params=counts["frozen"],
        metrics=metrics,
        states=states,
    )
