"""Exact-enumeration oracles for the KL-regularised RL solution.

For a small enumerable prompt the optimal policy of
``max E[r] - beta * KL(pi || pi_ref)`` has the closed form
``pi*(y) = pi_ref(y) * exp(r(y) / beta) / Z`` and the reward can be recovered
from it as ``r = beta * log(pi*/pi_ref) + beta * log Z``.  Everything here is
computed by brute force over the sequence space, in log-space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .objectives import Trajectory, compute_advantages, onpolicy_loss
from .policy import (
    ENUMERATION_CAP,
    BoundPolicy,
    PolicyParams,
    Prompt,
    enumerate_distribution,
    enumerate_log_distribution,
    init_tabular,
    snapshot,
    token_log_probs,
)

Reward = Callable[[tuple], float]


@dataclass
class ExactDistribution:
    prompt: Prompt
    entries: list  # (sequence, probability) in enumeration order
    Z: float
    log_Z: float = 0.0
    log_probs: list = field(default_factory=list)

    def __post_init__(self):
        probs = np.array([p for _, p in self.entries])
        if (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be >= 0 and sum to 1")
        if not (self.Z > 0 and math.isfinite(self.Z)):
            raise ValueError("Z must be positive and finite")
        if not self.log_probs:
            self.log_probs = [math.log(p) if p > 0 else -math.inf for p in probs]

    @property
    def sequences(self) -> list:
        return [y for y, _ in self.entries]

    @property
    def probs(self) -> np.ndarray:
        return np.array([p for _, p in self.entries])


def _logsumexp(xs) -> float:
    xs = np.asarray(xs, dtype=float)
    m = float(xs.max())
    if m == -math.inf:
        return m
    return m + math.log(float(np.exp(xs - m).sum()))


def _check_beta(beta: float) -> None:
    if not beta > 0:
        raise ValueError("beta must be positive")


def _tilted(ref: PolicyParams, prompt: Prompt, reward: Reward, beta: float, cap: int) -> tuple:
    _check_beta(beta)
    ref_lps = enumerate_log_distribution(ref, prompt, cap)
    seqs = [y for y, _ in ref_lps]
    logits = np.array([lp + float(reward(y)) / beta for y, lp in ref_lps])
    return seqs, logits


def log_partition_function(
    ref: PolicyParams, prompt: Prompt, reward: Reward, beta: float, cap: int = ENUMERATION_CAP
) -> float:
    """log Z = log sum_y pi_ref(y) exp(r(y)/beta), max-shifted."""
    _, logits = _tilted(ref, prompt, reward, beta, cap)
    return _logsumexp(logits)


def partition_function(
    ref: PolicyParams, prompt: Prompt, reward: Reward, beta: float, cap: int = ENUMERATION_CAP
) -> float:
    log_z = log_partition_function(ref, prompt, reward, beta, cap)
    try:
        return math.exp(log_z)
    except OverflowError:
        raise OverflowError(f"Z overflows (log Z = {log_z}); use log_partition_function") from None


def optimal_policy(
    ref: PolicyParams, prompt: Prompt, reward: Reward, beta: float, cap: int = ENUMERATION_CAP
) -> ExactDistribution:
    seqs, logits = _tilted(ref, prompt, reward, beta, cap)
    log_z = _logsumexp(logits)
    lps = logits - log_z
    z = partition_function(ref, prompt, reward, beta, cap)
    return ExactDistribution(prompt, list(zip(seqs, np.exp(lps).tolist())), z, log_z, lps.tolist())


def policy_from_distribution(dist: ExactDistribution, template: PolicyParams) -> PolicyParams:
    """Materialise ``dist`` as a prefix-context tabular policy.

    Each context row holds the log conditional next-token probabilities, so
    the policy reproduces ``dist`` exactly (up to rounding).  Other prompts of
    the returned policy keep uniform rows.
    """
    policy = init_tabular(
        template.num_prompts, template.vocab_size, template.max_len, context="prefix", eos_id=template.eos_id
    )
    pid = dist.prompt.prompt_id
    masses: dict = {}
    for y, lp in zip(dist.sequences, dist.log_probs):
        for t in range(len(y) + 1):
            masses.setdefault(y[:t], []).append(lp)
    log_mass = {p: _logsumexp(v) for p, v in masses.items()}
    floor = -700.0
    for prefix in sorted(log_mass, key=lambda p: (len(p), p)):
        if len(prefix) >= template.max_len or (prefix and prefix[-1] == template.eos_id):
            continue
        parent = log_mass[prefix]
        row = np.full(template.vocab_size, floor)
        for tok in range(template.vocab_size):
            child = log_mass.get(prefix + (tok,), -math.inf)
            if child > -math.inf and parent > -math.inf:
                row[tok] = max(child - parent, floor)
        policy.set_row(policy.key(pid, prefix), row)
    return policy


def implicit_reward_identity_check(
    policy: PolicyParams,
    ref: PolicyParams,
    prompt: Prompt,
    reward: Reward,
    beta: float,
    cap: int = ENUMERATION_CAP,
) -> float:
    """max_y |r(y) - beta*log(pi(y)/pi_ref(y)) - beta*log Z|."""
    log_z = log_partition_function(ref, prompt, reward, beta, cap)
    worst = 0.0
    for (y, lp), (y2, lp_ref) in zip(
        enumerate_log_distribution(policy, prompt, cap), enumerate_log_distribution(ref, prompt, cap)
    ):
        assert y == y2
        recovered = beta * (lp - lp_ref) + beta * log_z
        worst = max(worst, abs(float(reward(y)) - recovered))
    return worst


def total_variation(p: ExactDistribution, q: ExactDistribution) -> float:
    if p.sequences != q.sequences:
        raise ValueError("distributions have different supports or orderings")
    return 0.5 * float(np.abs(p.probs - q.probs).sum())


def policy_distribution(policy: PolicyParams, prompt: Prompt, cap: int = ENUMERATION_CAP) -> ExactDistribution:
    """A tabular policy's exact output distribution (Z = 1)."""
    return ExactDistribution(prompt, enumerate_distribution(policy, prompt, cap), 1.0)


# --- exact RL fit ----------------------------------------------------------------------


@dataclass
class FitResult:
    converged: bool
    steps: int
    tv: float
    policy: PolicyParams
    history: list = field(default_factory=list)  # (step, tv)


def exact_rl_fit(
    ref: PolicyParams,
    prompt: Prompt,
    reward: Reward,
    beta: float,
    *,
    lr: float = 0.05,
    max_steps: int = 5000,
    tol: float = 0.05,
    eps_clip: float = 0.2,
    check_every: int = 10,
) -> FitResult:
    """Fit the KL-regularised RL objective with exhaustive rollouts.

    Every step enumerates all sequences under the current policy, weights each
    trajectory by its probability, and takes one Adam step on the clipped
    on-policy loss with KL-shaped returns (``beta_kl = beta``, no advantage
    normalisation).  The weighted batch makes the policy gradient exact, so
    the fixed point is ``optimal_policy``.  Stops once TV to pi* is <= ``tol``.
    """
    from .trainer import AdamState, adam_step

    _check_beta(beta)
    if not ref.frozen:
        ref = snapshot(ref)
    target = optimal_policy(ref, prompt, reward, beta)
    policy = ref.copy()
    if policy.context != "prefix":
        raise ValueError("exact_rl_fit needs a prefix-context policy to realise pi*")
    rewards = {y: float(reward(y)) for y in target.sequences}
    state = AdamState()
    history = []

    def tv_now() -> float:
        return total_variation(policy_distribution(policy, prompt), target)

    tv = tv_now()
    history.append((0, tv))
    step = 0
    while tv > tol and step < max_steps:
        old = snapshot(policy)
        batch = [
            Trajectory(prompt, y, rewards[y], token_log_probs(old, prompt, y), p)
            for y, p in enumerate_distribution(old, prompt)
        ]
        adv = compute_advantages(batch, old, ref, beta, normalize=False)
        bound = BoundPolicy(policy)
        loss = onpolicy_loss(batch, bound, adv, eps_clip)
        adam_step(policy, bound.gradients(ad.backward(loss)), state, lr)
        step += 1
        if step % check_every == 0 or step == max_steps:
            tv = tv_now()
            history.append((step, tv))
    return FitResult(tv <= tol, step, tv, policy, history)


# --- oracle suite --------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (tol {self.tol:g})"


def binary_reward(winners) -> Reward:
    good = set(map(tuple, winners))
    return lambda y: 1.0 if tuple(y) in good else 0.0


def uniform_reference(template: PolicyParams, prompt: Prompt) -> PolicyParams:
    """Frozen policy that is uniform over the complete sequences of ``prompt``."""
    seqs = [y for y, _ in enumerate_log_distribution(template, prompt)]
    uniform = ExactDistribution(prompt, [(y, 1.0 / len(seqs)) for y in seqs], 1.0)
    return snapshot(policy_from_distribution(uniform, template))


def random_instance(seed: int, vocab_size: int = 4, max_len: int = 4, init_scale: float = 1.0) -> tuple:
    """(ref, prompt, binary reward) with a random reference and reward-1 set."""
    rng = np.random.default_rng([seed, 77])
    ref = snapshot(init_tabular(1, vocab_size, max_len, init_scale, seed, context="prefix"))
    prompt = Prompt(0, ())
    seqs = [y for y, _ in enumerate_log_distribution(ref, prompt)]
    k = int(rng.integers(1, len(seqs)))
    chosen = rng.choice(len(seqs), size=k, replace=False)
    return ref, prompt, binary_reward([seqs[i] for i in chosen])


def oracle_suite(beta: float = 0.5, instances: int = 20, seed: int = 0) -> list:
    """Partition-function and implicit-reward identity checks; one result per check."""
    _check_beta(beta)
    z_err = zc_err = bin_err = ident_err = zero_ident = 0.0
    tv_large = 0.0
    for i in range(instances):
        s = seed * 100_003 + i
        rng = np.random.default_rng([s, 5])
        vocab, max_len = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        ref, prompt, reward = random_instance(s, vocab, max_len)
        z_err = max(z_err, abs(partition_function(ref, prompt, lambda y: 0.0, beta) - 1.0))
        c = float(rng.uniform(-2, 2))
        zc = partition_function(ref, prompt, lambda y: c, beta)
        zc_err = max(zc_err, abs(zc - math.exp(c / beta)) / math.exp(c / beta))

        uni = uniform_reference(ref, prompt)
        seqs = [y for y, _ in enumerate_log_distribution(uni, prompt)]
        n_seq, k = len(seqs), sum(reward(y) for y in seqs)
        closed = (k * math.exp(1 / beta) + (n_seq - k)) / n_seq
        bin_err = max(bin_err, abs(partition_function(uni, prompt, reward, beta) - closed) / closed)

        star = optimal_policy(ref, prompt, reward, beta)
        fitted = policy_from_distribution(star, ref)
        ident_err = max(ident_err, implicit_reward_identity_check(fitted, ref, prompt, reward, beta))
        fitted0 = policy_from_distribution(optimal_policy(ref, prompt, lambda y: 0.0, beta), ref)
        zero_ident = max(zero_ident, implicit_reward_identity_check(fitted0, ref, prompt, lambda y: 0.0, beta))
        tv_large = max(
            tv_large, total_variation(optimal_policy(ref, prompt, reward, 1e6), policy_distribution(ref, prompt))
        )
    checks = [
        CheckResult("Z with zero reward equals 1", z_err, 1e-9, z_err <= 1e-9),
        CheckResult("Z with constant reward equals exp(c/beta) (rel)", zc_err, 1e-9, zc_err <= 1e-9),
        CheckResult("Z with binary reward matches closed form (rel)", bin_err, 1e-9, bin_err <= 1e-9),
        CheckResult("implicit reward identity", ident_err, 1e-8, ident_err < 1e-8),
        CheckResult("implicit reward identity, zero reward", zero_ident, 1e-8, zero_ident < 1e-8),
        CheckResult("TV(pi*, pi_ref) at beta=1e6", tv_large, 1e-5, tv_large < 1e-5),
    ]
    if beta >= 1e5:
        tv_beta = 0.0
        for i in range(instances):
            ref, prompt, reward = random_instance(seed * 100_003 + i)
            tv_beta = max(
                tv_beta, total_variation(optimal_policy(ref, prompt, reward, beta), policy_distribution(ref, prompt))
            )
        checks.append(CheckResult(f"TV(pi*, pi_ref) at beta={beta:g}", tv_beta, 1e-5, tv_beta < 1e-5))
    return checks
