"""Training losses: Monte-Carlo predictive NLL plus an annealed regularizer.

The predictive term scores each query by the log of the mean predicted
probability over L posterior weight draws. The regularizer measures how far
the context-only posterior sits from a query-conditioned one, either as a
closed-form Gaussian KL or as a kernel MMD^2 between reparameterized draws,
and enters the total weighted by the schedule's beta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .divergences import KernelConfig, gaussian_kl, mmd2
from .episodes import Episode
from .errors import ContractError
from .model import GaussianPosterior, ModelParams, aggregate_context, amortize, decode_logits, encode, sample_weights

REGULARIZER_MODES = ("none", "kl", "mmd")

# Weight of the pooled query features when mixing them into the class
# representations for the query-conditioned posterior.
QUERY_MIX = 0.5


@dataclass
class LossBreakdown:
    """One batch loss: floats for logging plus the differentiable node."""

    nll: float
    reg: float
    beta: float
    total: float
    per_task: list
    node: Tensor


def _mean_of(nodes: list) -> Tensor:
    total = nodes[0]
    for node in nodes[1:]:
        total = ad.add(total, node)
    return ad.scalar_mul(total, 1.0 / len(nodes))


def batch_predictive_log_probs(params: ModelParams, phi_samples: list, h_query: Tensor, labels) -> Tensor:
    """(n, 1) log predictive probabilities of the true labels.

    Stable form: per-draw true-class log-softmax scores are stacked and
    combined with log-sum-exp minus log L, which equals the log of the mean
    predicted probability.
    """
    labels = np.asarray(labels, dtype=np.int64)
    num_ways = params.num_ways
    if labels.min() < 0 or labels.max() >= num_ways:
        raise ContractError(f"labels must lie in [0, {num_ways - 1}], got range "
                            f"[{labels.min()}, {labels.max()}]")
    onehot = Tensor(np.eye(num_ways)[labels])
    cols = []
    for phi in phi_samples:
        logits = decode_logits(params, phi, h_query)
        true_logit = ad.sum_reduce(ad.mul(logits, onehot), axis=-1, keepdims=True)
        cols.append(ad.sub(true_logit, ad.log_sum_exp(logits, keepdims=True)))
    stacked = ad.concat(*cols) if len(cols) > 1 else cols[0]
    lse = ad.log_sum_exp(stacked, keepdims=True)
    return ad.sub(lse, ad.full_like(lse, math.log(len(cols))))


def predictive_log_prob(params: ModelParams, phi_samples: list, h_query, label: int) -> Tensor:
    """Scalar log of the mean predicted probability for one query."""
    h = ad.as_tensor(h_query)
    if h.data.ndim == 1:
        h = ad.as_tensor(h.data.reshape(1, -1))
    lp = batch_predictive_log_probs(params, phi_samples, h, [int(label)])
    return ad.sum_reduce(lp)


def _episode_nll_pieces(params: ModelParams, episode: Episode, mc_samples: int, rng) -> tuple:
    """(sum of negative log predictive probs, query count) for one episode."""
    posterior = amortize(params, aggregate_context(params, episode.support_x, episode.support_y))
    phis = sample_weights(posterior, mc_samples, rng)
    h_query = encode(params, episode.query_x)
    lp = batch_predictive_log_probs(params, phis, h_query, episode.query_y)
    return ad.scalar_mul(ad.sum_reduce(lp), -1.0), episode.query_y.size


def _assemble_nll(pieces: list) -> Tensor:
    total = pieces[0][0]
    count = pieces[0][1]
    for node, n in pieces[1:]:
        total = ad.add(total, node)
        count += n
    return ad.scalar_mul(total, 1.0 / count)


def nll_loss(episodes: list, params: ModelParams, mc_samples: int, rng) -> Tensor:
    """Negative mean log predictive probability over every query in the batch."""
    if not episodes:
        raise ContractError("nll_loss: empty episode batch")
    pieces = [_episode_nll_pieces(params, ep, mc_samples, rng) for ep in episodes]
    return _assemble_nll(pieces)


def context_and_full_posteriors(params: ModelParams, episode: Episode) -> tuple:
    """(query-conditioned, context-only) posteriors for one episode.

    The context posterior comes from the support set alone. The
    query-conditioned one mixes the mean of the unlabeled query features
    into every class representation with weight QUERY_MIX before the same
    amortization heads are applied.
    """
    rep = aggregate_context(params, episode.support_x, episode.support_y)
    q_ctx = amortize(params, rep)
    h_query = encode(params, episode.query_x)
    n = episode.query_x.shape[0]
    pool = Tensor(np.full((1, n), 1.0 / n))
    query_mean = ad.matmul(pool, h_query)
    replicate = Tensor(np.ones((params.num_ways, 1)))
    mixed = ad.add(
        ad.scalar_mul(rep, 1.0 - QUERY_MIX),
        ad.scalar_mul(ad.matmul(replicate, query_mean), QUERY_MIX),
    )
    q_full = amortize(params, mixed)
    return q_full, q_ctx


def _posterior_draws(post: GaussianPosterior, eps_blocks: list) -> Tensor:
    # (count, C*d) reparameterized draws, flattened class-major, one noise
    # block per class.
    num_ways = post.mu.data.shape[0]
    count = eps_blocks[0].shape[0]
    sigma = ad.sqrt_pos(post.sigma2)
    ones_col = Tensor(np.ones((count, 1)))
    blocks = []
    for c in range(num_ways):
        select = Tensor(np.eye(num_ways)[c : c + 1])
        mu_rep = ad.matmul(ones_col, ad.matmul(select, post.mu))
        sig_rep = ad.matmul(ones_col, ad.matmul(select, sigma))
        blocks.append(ad.add(mu_rep, ad.mul(sig_rep, Tensor(eps_blocks[c]))))
    return ad.concat(*blocks) if len(blocks) > 1 else blocks[0]


def posterior_divergence(
    q_full: GaussianPosterior,
    q_ctx: GaussianPosterior,
    mode: str,
    mmd_samples: int = 32,
    kernel: KernelConfig = KernelConfig(),
    rng=None,
) -> Tensor:
    """Divergence between two posteriors under the configured mode.

    kl: closed-form gaussian_kl(q_full || q_ctx). mmd: biased MMD^2 between
    mmd_samples reparameterized draws per side. Both sides reuse the same
    noise blocks (one (mmd_samples, d) draw per class, in class order), so
    identical posteriors give exactly zero and the estimate measures the
    parameter difference rather than sampling noise.
    """
    if mode == "kl":
        return gaussian_kl(q_full, q_ctx)
    if mode == "mmd":
        if mmd_samples < 2:
            raise ContractError(f"mmd mode needs at least 2 draws per side, got {mmd_samples}")
        if rng is None:
            raise ContractError("mmd mode needs a random generator")
        num_ways, d = q_full.mu.data.shape
        eps_blocks = [rng.standard_normal((mmd_samples, d)) for _ in range(num_ways)]
        x = _posterior_draws(q_full, eps_blocks)
        y = _posterior_draws(q_ctx, eps_blocks)
        return mmd2(x, y, kernel=kernel, kind="biased")
    raise ContractError(f"regularizer mode must be 'kl' or 'mmd' here, got {mode!r}")


def regularizer(
    params: ModelParams,
    episode: Episode,
    mode: str,
    mmd_samples: int = 32,
    kernel: KernelConfig = KernelConfig(),
    rng=None,
) -> Tensor:
    """Scalar divergence between query-conditioned and context posteriors."""
    if mode == "none":
        raise ContractError("regularizer called with mode 'none'; caller must skip it")
    q_full, q_ctx = context_and_full_posteriors(params, episode)
    return posterior_divergence(q_full, q_ctx, mode, mmd_samples, kernel, rng)


def total_loss(
    episodes: list,
    params: ModelParams,
    beta: float,
    mode: str = "mmd",
    mc_samples: int = 10,
    mmd_samples: int = 32,
    kernel: KernelConfig = KernelConfig(),
    rng=None,
) -> LossBreakdown:
    """NLL plus beta times the batch-mean regularizer.

    The NLL term consumes the generator first (episode by episode), then the
    regularizer draws; with beta == 0 or mode "none" the regularizer is
    skipped entirely, so the result matches nll_loss bitwise on the same
    generator state.
    """
    if beta < 0.0:
        raise ContractError(f"beta must be non-negative, got {beta}")
    if mode not in REGULARIZER_MODES:
        raise ContractError(f"mode must be one of {REGULARIZER_MODES}, got {mode!r}")
    if not episodes:
        raise ContractError("total_loss: empty episode batch")

    pieces = [_episode_nll_pieces(params, ep, mc_samples, rng) for ep in episodes]
    nll_node = _assemble_nll(pieces)

    skip_reg = mode == "none" or beta == 0.0
    if skip_reg:
        reg_nodes = None
        node = nll_node
        reg_value = 0.0
    else:
        reg_nodes = [regularizer(params, ep, mode, mmd_samples, kernel, rng) for ep in episodes]
        reg_node = _mean_of(reg_nodes)
        node = ad.add(nll_node, ad.scalar_mul(reg_node, beta))
        reg_value = reg_node.item()

    per_task = []
    for i, (piece, _) in enumerate(zip(pieces, episodes)):
        task_nll = piece[0].item() / piece[1]
        task_reg = 0.0 if reg_nodes is None else reg_nodes[i].item()
        per_task.append((i, task_nll, task_reg))

    return LossBreakdown(
        nll=nll_node.item(),
        reg=reg_value,
        beta=float(beta),
        total=node.item(),
        per_task=per_task,
        node=node,
    )
