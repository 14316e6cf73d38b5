"""Differentiable losses: DPO, the clipped on-policy surrogate, GEPO and the
weighted OORL combination.

Every loss takes the trainable policy either as a :class:`PolicyParams` or a
:class:`BoundPolicy`; pass the same ``BoundPolicy`` to several losses to build
them on one graph and read all gradients from a single backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .policy import BoundPolicy, PolicyParams, Prompt, log_prob, token_log_prob_nodes, token_log_probs
from .toylang import PreferenceGroup, grade


@dataclass
class Trajectory:
    prompt: Prompt
    output: tuple
    reward: float
    old_log_probs: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        if len(self.old_log_probs) != len(self.output):
            raise ValueError("old_log_probs must have one entry per generated token")


@dataclass
class AdvantageSet:
    per_trajectory: list  # of np.ndarray, one advantage per generated token

    def flat(self) -> np.ndarray:
        return np.concatenate(self.per_trajectory) if self.per_trajectory else np.zeros(0)


@dataclass
class LossBreakdown:
    on_policy: ad.Node
    gepo_pref: ad.Node
    gepo_var: ad.Node
    combined: ad.Node
    hyperparams: dict = field(default_factory=dict)


def make_trajectory(prompt: Prompt, output, old_policy: PolicyParams, weight: float = 1.0) -> Trajectory:
    output = tuple(output)
    return Trajectory(prompt, output, grade(prompt, output), token_log_probs(old_policy, prompt, output), weight)


def _require_frozen(ref: PolicyParams) -> None:
    if not ref.frozen:
        raise ValueError("reference policy must be frozen (use policy.snapshot)")


def log_ratio(policy, ref: PolicyParams, prompt: Prompt, y) -> ad.Node:
    """log pi_theta(y|x) - log pi_ref(y|x); differentiable w.r.t. ``policy`` only."""
    _require_frozen(ref)
    return log_prob(policy, prompt, y, differentiable=True) - log_prob(ref, prompt, y)


def dpo_loss(policy, ref: PolicyParams, prompt: Prompt, y_w, y_l, beta: float) -> ad.Node:
    """-log sigmoid(beta * (r_w - r_l)) with r the policy/reference log-ratio."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    z = beta * (log_ratio(policy, ref, prompt, y_w) - log_ratio(policy, ref, prompt, y_l))
    return -ad.log_sigmoid(z)


def gepo_terms_from_ratios(winner_ratios: list, loser_ratios: list, beta: float) -> tuple:
    """Preference and variance terms from already-built log-ratio nodes."""
    n = len(winner_ratios)
    w_mean = ad.mean(winner_ratios)
    l_mean = ad.mean(loser_ratios)
    pref = -ad.log_sigmoid(beta * (w_mean - l_mean))
    if n < 2:
        return pref, ad.make_const(0.0)
    sq = ad.add_n([ad.square(r - w_mean) for r in winner_ratios])
    return pref, sq * (beta * beta / (n - 1))


def gepo_loss(policy, ref: PolicyParams, group: PreferenceGroup, beta: float, lam: float) -> tuple:
    """(pref, var) for one group; the group loss is ``pref + lam * var``.

    pref = -log sigmoid(beta * (mean winner ratio - mean loser ratio))
    var  = beta^2 / (n-1) * sum_i (winner ratio_i - mean winner ratio)^2, 0 if n == 1
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if group.n < 1 or group.m < 1:
        raise ValueError("group needs at least one winner and one loser")
    wr = [log_ratio(policy, ref, group.prompt, y) for y in group.winners]
    lr = [log_ratio(policy, ref, group.prompt, y) for y in group.losers]
    return gepo_terms_from_ratios(wr, lr, beta)


def winner_ratio_variance(policy, ref: PolicyParams, group: PreferenceGroup) -> float:
    """Unscaled sample variance of the winners' log-ratios (0 when n == 1)."""
    if group.n < 2:
        return 0.0
    r = np.array([log_prob(policy, group.prompt, y) - log_prob(ref, group.prompt, y) for y in group.winners])
    return float(np.var(r, ddof=1))


def compute_advantages(
    batch: list,
    policy,
    ref: PolicyParams,
    beta_kl: float,
    normalize: bool = True,
) -> AdvantageSet:
    """Per-token advantages from KL-shaped returns with a batch-mean baseline.

    Shaped reward at token t is ``-beta_kl * (log pi(a_t|s_t) - log ref(a_t|s_t))``
    with the rule reward added on the last token; returns are reward-to-go.
    The baseline and the optional std normalisation are trajectory-weighted
    token averages (plain averages when all weights are 1).
    """
    if not batch:
        raise ValueError("empty batch")
    returns = []
    for traj in batch:
        shaped = np.zeros(len(traj.output))
        if beta_kl:
            lp = token_log_probs(policy, traj.prompt, traj.output)
            lp_ref = token_log_probs(ref, traj.prompt, traj.output)
            shaped -= beta_kl * (lp - lp_ref)
        if len(shaped):
            shaped[-1] += traj.reward
        returns.append(np.cumsum(shaped[::-1])[::-1])
    weights = np.concatenate([np.full(len(r), t.weight) for r, t in zip(returns, batch)])
    flat = np.concatenate(returns)
    total = weights.sum()
    baseline = float(np.dot(weights, flat) / total) if total > 0 else 0.0
    adv = [r - baseline for r in returns]
    if normalize and len(batch) > 1 and total > 0:
        centred = flat - baseline
        std = math.sqrt(float(np.dot(weights, centred * centred) / total))
        adv = [a / (std + 1e-8) for a in adv]
    return AdvantageSet(adv)


def onpolicy_loss(batch: list, policy, advantages: AdvantageSet, eps_clip: float) -> ad.Node:
    """-mean_t min(r_t A_t, clip(r_t, 1-eps, 1+eps) A_t) with r_t = pi_theta / pi_old.

    The mean runs over all generated tokens, weighted by each trajectory's
    ``weight`` (1 for sampled batches).
    """
    if not 0 < eps_clip < 1:
        raise ValueError("eps_clip must lie in (0, 1)")
    if len(batch) != len(advantages.per_trajectory):
        raise ValueError("advantages do not match the batch")
    bound = policy if isinstance(policy, BoundPolicy) else BoundPolicy(policy)
    lo, hi = 1.0 - eps_clip, 1.0 + eps_clip
    terms = []
    norm = 0.0
    for traj, adv in zip(batch, advantages.per_trajectory):
        norm += traj.weight * len(traj.output)
        if traj.weight == 0:
            continue
        for lp, old, a in zip(token_log_prob_nodes(bound, traj.prompt, traj.output), traj.old_log_probs, adv):
            ratio = ad.exp(lp - float(old))
            a = float(a)
            term = ad.minimum(ratio * a, ad.clip(ratio, lo, hi) * a)
            terms.append(term * traj.weight if traj.weight != 1.0 else term)
    if norm == 0:
        return ad.make_const(0.0)
    return -ad.add_n(terms) / norm


def oorl_loss(on_policy, gepo_total, w_rl: float = 1.0, w_gepo: float = 0.01) -> ad.Node:
    """w_rl * on-policy loss + w_gepo * preference loss as one node."""
    if w_rl < 0 or w_gepo < 0:
        raise ValueError("loss weights must be non-negative")
    return ad.add(ad.mul(w_rl, on_policy), ad.mul(w_gepo, gepo_total))
