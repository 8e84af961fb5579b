"""Episodic training loop, evaluation, and posterior-collapse diagnostics.

The reference path is single threaded and fully deterministic: one master
generator derived from the config seed hands out child seeds for the
dataset, the parameter init, every batch, every loss evaluation, and every
evaluation pass, in a fixed order. Two runs with the same config produce
byte-identical metrics and checkpoints.
"""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import backward, no_grad
from .config import TrainConfig
from .divergences import KernelConfig
from .episodes import Dataset, generate_synthetic_dataset, load_dataset, sample_episode
from .errors import ContractError, DomainError
from .model import (
    ModelParams,
    aggregate_context,
    amortize,
    decode_logits,
    encode,
    init_model,
    sample_weights,
    save_checkpoint,
)
from .objectives import total_loss
from .schedules import beta_at

METRICS_COLUMNS = ("step", "beta", "nll", "reg", "total", "val_accuracy")

_SEED_BOUND = 2**63


@dataclass
class AdamState:
    """First/second moment buffers plus hyperparameters for Adam."""

    learning_rate: float
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, named_params: list, learning_rate: float) -> "AdamState":
        m = {name: np.zeros_like(t.data) for name, t in named_params}
        v = {name: np.zeros_like(t.data) for name, t in named_params}
        return cls(learning_rate=learning_rate, m=m, v=v)


def adam_step(named_params: list, grads: dict, state: AdamState):
    """One in-place Adam update over (name, tensor) pairs.

    Parameters missing from grads are treated as zero-gradient. Moment
    buffers must mirror parameter shapes.
    """
    state.t += 1
    t = state.t
    for name, tensor in named_params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        if g.shape != tensor.data.shape:
            raise ContractError(
                f"adam_step: gradient shape {g.shape} does not match parameter "
                f"'{name}' shape {tensor.data.shape}"
            )
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / (1.0 - state.beta1**t)
        v_hat = state.v[name] / (1.0 - state.beta2**t)
        tensor.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class EvalReport:
    """Accuracy over sampled tasks with a normal-approximation 95% interval."""

    num_tasks: int
    mean_accuracy: float
    ci95: float
    per_task: list

    def to_dict(self) -> dict:
        return {
            "num_tasks": self.num_tasks,
            "mean_accuracy": self.mean_accuracy,
            "ci95": self.ci95,
            "per_task": self.per_task,
        }


@dataclass
class CollapseReport:
    """Proxy metrics for the information-preference failure mode.

    mean_posterior_variance: mean sigma^2 over classes, dims, and tasks; a
    posterior collapsing to a point drives it toward the variance floor.
    posterior_dispersion: mean pairwise distance between the posterior means
    a dataset class receives across different tasks; zero when the heads
    emit the same mean regardless of context.
    """

    mean_posterior_variance: float
    posterior_dispersion: float
    latents_path: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "mean_posterior_variance": self.mean_posterior_variance,
            "posterior_dispersion": self.posterior_dispersion,
            "latents_path": self.latents_path,
        }


@dataclass
class TrainResult:
    params: ModelParams
    dataset: Dataset
    metrics_rows: list
    checkpoint_path: Optional[str]
    metrics_path: Optional[str]


def build_dataset(cfg: TrainConfig) -> Dataset:
    """Materialize the configured dataset, deterministically in the seed."""
    ds_seed = int(np.random.default_rng(cfg.seed).integers(_SEED_BOUND))
    return _dataset_from(cfg, ds_seed)


def _dataset_from(cfg: TrainConfig, ds_seed: int) -> Dataset:
    d = cfg.dataset
    if d.kind == "fsds":
        return load_dataset(d.path)
    return generate_synthetic_dataset(
        num_classes=d.num_classes,
        per_class=d.per_class,
        input_dim=d.input_dim,
        class_spread=d.class_spread,
        noise=d.noise,
        seed=ds_seed,
    )


def init_from_config(cfg: TrainConfig, rng: np.random.Generator, input_dim: int) -> ModelParams:
    m = cfg.model
    return init_model(
        rng,
        input_dim=input_dim,
        feature_dim=m.feature_dim,
        num_ways=cfg.episode.num_ways,
        encoder_widths=tuple(m.encoder_widths),
        activation=m.activation,
        aggregation=m.aggregation,
        pooling=m.pooling,
        decoder=m.decoder,
        mean_head_widths=tuple(m.mean_head_widths),
        var_head_widths=tuple(m.var_head_widths),
        r_widths=tuple(m.r_widths),
        decoder_widths=tuple(m.decoder_widths),
    )


def _format_value(v) -> str:
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)


def write_metrics(rows: list, path: str):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([_format_value(row[c]) for c in METRICS_COLUMNS])


def train(
    cfg: TrainConfig,
    checkpoint_path: Optional[str] = None,
    metrics_path: Optional[str] = None,
    log: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Run the episodic training loop described by the config.

    Per step: draw a batch of meta-train episodes, compute the annealed
    total loss, backpropagate, and apply Adam. Every eval_interval steps the
    model is scored on meta-val. A non-finite loss aborts immediately with
    the offending step's batch seed so the failure can be replayed.
    """
    log = log or (lambda msg: print(msg, file=sys.stderr))
    master = np.random.default_rng(cfg.seed)
    ds_seed = int(master.integers(_SEED_BOUND))
    init_seed = int(master.integers(_SEED_BOUND))

    dataset = _dataset_from(cfg, ds_seed)
    params = init_from_config(cfg, np.random.default_rng(init_seed), dataset.dim)
    named = params.named_parameters()
    opt = AdamState.for_params(named, cfg.optimizer.learning_rate)

    ep = cfg.episode
    obj = cfg.objective
    kernel = KernelConfig(bandwidth=obj.bandwidth)
    rows = []
    for step in range(cfg.optimizer.steps):
        batch_seed = int(master.integers(_SEED_BOUND))
        loss_seed = int(master.integers(_SEED_BOUND))
        beta = beta_at(step, cfg.schedule)

        batch_rng = np.random.default_rng(batch_seed)
        episodes = [
            sample_episode(dataset, "meta-train", ep.num_ways, ep.num_shots, ep.num_queries, batch_rng)
            for _ in range(cfg.optimizer.tasks_per_batch)
        ]
        try:
            breakdown = total_loss(
                episodes,
                params,
                beta=beta,
                mode=obj.mode,
                mc_samples=obj.mc_samples,
                mmd_samples=obj.mmd_samples,
                kernel=kernel,
                rng=np.random.default_rng(loss_seed),
            )
        except DomainError as e:
            raise RuntimeError(
                f"aborting: non-finite loss at step {step} "
                f"(batch seed {batch_seed}, loss seed {loss_seed}): {e}"
            ) from e
        if not math.isfinite(breakdown.total):
            raise RuntimeError(
                f"aborting: non-finite loss {breakdown.total} at step {step} "
                f"(batch seed {batch_seed}, loss seed {loss_seed})"
            )

        grads_by_tensor = backward(breakdown.node)
        grads = {name: grads_by_tensor.get(t) for name, t in named}
        adam_step(named, grads, opt)

        val_accuracy = None
        if cfg.optimizer.eval_interval and (step + 1) % cfg.optimizer.eval_interval == 0:
            eval_seed = int(master.integers(_SEED_BOUND))
            report = evaluate(
                params,
                dataset,
                "meta-val",
                num_tasks=cfg.optimizer.eval_tasks,
                num_ways=ep.num_ways,
                num_shots=ep.num_shots,
                num_queries=ep.num_queries,
                mc_samples=obj.mc_samples,
                seed=eval_seed,
            )
            val_accuracy = report.mean_accuracy
            log(
                f"step {step + 1}/{cfg.optimizer.steps}: total={breakdown.total:.4f} "
                f"nll={breakdown.nll:.4f} beta={beta:.3f} val_acc={val_accuracy:.4f}"
            )
        rows.append(
            {
                "step": step,
                "beta": beta,
                "nll": breakdown.nll,
                "reg": breakdown.reg,
                "total": breakdown.total,
                "val_accuracy": val_accuracy,
            }
        )

    if metrics_path:
        write_metrics(rows, metrics_path)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, params, cfg.to_dict(), cfg.seed, cfg.optimizer.steps)
    return TrainResult(params, dataset, rows, checkpoint_path, metrics_path)


def _task_posterior(params: ModelParams, episode):
    return amortize(params, aggregate_context(params, episode.support_x, episode.support_y))


def predict_probs(params: ModelParams, episode, mc_samples: int, rng: np.random.Generator) -> np.ndarray:
    """(n_queries, C) predictive probabilities averaged over weight draws."""
    with no_grad():
        posterior = _task_posterior(params, episode)
        phis = sample_weights(posterior, mc_samples, rng)
        h_query = encode(params, episode.query_x)
        probs = np.zeros((episode.query_x.shape[0], params.num_ways))
        for phi in phis:
            probs += ad.softmax(decode_logits(params, phi, h_query)).data
    return probs / mc_samples


def evaluate(
    params: ModelParams,
    dataset: Dataset,
    split: str,
    num_tasks: int,
    num_ways: int,
    num_shots: int,
    num_queries: int,
    mc_samples: int,
    seed: int,
) -> EvalReport:
    """Accuracy of the averaged predictive's argmax over sampled tasks.

    Pure read: parameters and dataset are untouched, and repeated calls with
    the same seed agree bitwise.
    """
    rng = np.random.default_rng(seed)
    accuracies = []
    for _ in range(num_tasks):
        episode = sample_episode(dataset, split, num_ways, num_shots, num_queries, rng)
        probs = predict_probs(params, episode, mc_samples, rng)
        predicted = probs.argmax(axis=1)
        accuracies.append(float(np.mean(predicted == episode.query_y)))
    mean = float(np.mean(accuracies))
    if len(accuracies) > 1:
        ci95 = float(1.96 * np.std(accuracies, ddof=1) / math.sqrt(len(accuracies)))
    else:
        ci95 = 0.0
    return EvalReport(num_tasks=num_tasks, mean_accuracy=mean, ci95=ci95, per_task=accuracies)


def collapse_diagnostics(
    params: ModelParams,
    dataset: Dataset,
    split: str,
    num_tasks: int,
    mc_samples: int,
    seed: int,
    num_shots: int = 1,
    latents_path: Optional[str] = None,
) -> CollapseReport:
    """Posterior-collapse proxies plus an optional latent dump for plotting.

    The posterior of each task is built from a k-shot support set; queries
    play no role here. The dump has one row per (task, class, draw) with the
    drawn weight vector; columns are task, class, sample, dim_0..dim_{d-1}.
    """
    rng = np.random.default_rng(seed)
    variance_means = []
    mu_by_class: dict = {}
    latent_rows = []
    d = params.feature_dim
    for task in range(num_tasks):
        episode = sample_episode(dataset, split, params.num_ways, num_shots, 1, rng)
        with no_grad():
            posterior = _task_posterior(params, episode)
            phis = sample_weights(posterior, mc_samples, rng)
        variance_means.append(float(posterior.sigma2.data.mean()))
        for local, class_id in enumerate(episode.class_map):
            mu_by_class.setdefault(class_id, []).append(posterior.mu.data[local].copy())
        for sample_idx, phi in enumerate(phis):
            for local in range(params.num_ways):
                latent_rows.append([task, local, sample_idx, *phi.data[local].tolist()])

    spreads = []
    for vectors in mu_by_class.values():
        if len(vectors) < 2:
            continue
        stacked = np.asarray(vectors)
        diffs = stacked[:, None, :] - stacked[None, :, :]
        dists = np.sqrt((diffs * diffs).sum(axis=-1))
        iu = np.triu_indices(len(vectors), k=1)
        spreads.append(float(dists[iu].mean()))
    dispersion = float(np.mean(spreads)) if spreads else 0.0

    if latents_path:
        with open(latents_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["task", "class", "sample", *[f"dim_{i}" for i in range(d)]])
            for row in latent_rows:
                writer.writerow([row[0], row[1], row[2], *[repr(v) for v in row[3:]]])

    return CollapseReport(
        mean_posterior_variance=float(np.mean(variance_means)),
        posterior_dispersion=dispersion,
        latents_path=latents_path,
    )
