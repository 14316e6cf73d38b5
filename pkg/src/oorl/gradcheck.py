"""Seeded random loss instances and a finite-difference sweep over them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .objectives import Trajectory, compute_advantages, dpo_loss, gepo_loss, onpolicy_loss, oorl_loss
from .policy import BoundPolicy, PolicyParams, Prompt, init_tabular, snapshot, token_log_probs
from .toylang import PreferenceGroup

LOSSES = ("dpo", "onpolicy", "gepo", "oorl")


@dataclass
class Instance:
    """A loss as a function of the policy rows it touches."""

    name: str
    policy: PolicyParams
    build: Callable  # BoundPolicy -> Node

    def keys(self) -> list:
        bound = BoundPolicy(self.policy)
        self.build(bound)
        return [k for k, n in bound.nodes.items() if n.is_param]

    def loss_of(self, keys: list) -> Callable:
        def builder(nodes):
            return self.build(BoundPolicy(self.policy, dict(zip(keys, nodes))))

        return builder


def random_sequence(rng: np.random.Generator, vocab_size: int, max_len: int, eos_id: int) -> tuple:
    length = int(rng.integers(1, max_len + 1))
    body = [int(t) for t in rng.choice([t for t in range(vocab_size) if t != eos_id], size=length)]
    if length < max_len or rng.random() < 0.5:
        body[-1] = eos_id
    return tuple(body)


def distinct_sequences(rng, k: int, vocab_size: int, max_len: int, eos_id: int) -> list:
    out: list = []
    while len(out) < k:
        y = random_sequence(rng, vocab_size, max_len, eos_id)
        if y not in out:
            out.append(y)
    return out


def _policies(seed: int, vocab_size: int, max_len: int) -> tuple:
    policy = init_tabular(1, vocab_size, max_len, 1.0, seed, context="prefix")
    ref = snapshot(init_tabular(1, vocab_size, max_len, 1.0, seed + 10_000, context="prefix"))
    return policy, ref


def _batch(rng, policy: PolicyParams, prompt: Prompt, size: int) -> list:
    # old log-probs are jittered so some ratios leave the clip interval
    batch = []
    for _ in range(size):
        y = random_sequence(rng, policy.vocab_size, policy.max_len, policy.eos_id)
        old_lp = token_log_probs(policy, prompt, y) + rng.normal(0.0, 0.3, size=len(y))
        batch.append(Trajectory(prompt, y, float(rng.integers(0, 2)), old_lp))
    return batch


def make_instance(name: str, seed: int, vocab_size: int = 5, max_len: int = 4) -> Instance:
    """Random instance of loss ``name``; the same seed always gives the same instance."""
    rng = np.random.default_rng([seed, LOSSES.index(name)])
    policy, ref = _policies(seed, vocab_size, max_len)
    prompt = Prompt(0, (1, 2))
    beta = float(rng.uniform(0.1, 1.0))
    eos = policy.eos_id
    if name == "dpo":
        yw, yl = distinct_sequences(rng, 2, vocab_size, max_len, eos)
        return Instance(name, policy, lambda b: dpo_loss(b, ref, prompt, yw, yl, beta))

    batch = _batch(rng, policy, prompt, 4)
    adv = compute_advantages(batch, policy, ref, float(rng.uniform(0, 0.2)), normalize=True)
    eps = float(rng.uniform(0.1, 0.3))
    n, m = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    seqs = distinct_sequences(rng, n + m, vocab_size, max_len, eos)
    group = PreferenceGroup(prompt, seqs[:n], seqs[n:])
    lam = float(rng.uniform(0, 2))
    w_gepo = float(rng.uniform(0.01, 1.0))

    def gepo_total(b):
        pref, var = gepo_loss(b, ref, group, beta, lam)
        return pref + lam * var

    if name == "onpolicy":
        return Instance(name, policy, lambda b: onpolicy_loss(batch, b, adv, eps))
    if name == "gepo":
        return Instance(name, policy, gepo_total)
    if name == "oorl":
        return Instance(name, policy, lambda b: oorl_loss(onpolicy_loss(batch, b, adv, eps), gepo_total(b), 1.0, w_gepo))
    raise ValueError(f"unknown loss {name!r}")


def check_instance(inst: Instance, h: float = 1e-5) -> float:
    keys = inst.keys()
    params = [np.array(inst.policy.row(k), dtype=float) for k in keys]
    return ad.finite_diff_check(inst.loss_of(keys), params, h)


@dataclass
class GradCheckResult:
    loss: str
    instances: int
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.loss}: worst rel-err {self.worst:.3e} over {self.instances} instances (tol {self.tol:g})"


def grad_check_suite(instances: int = 100, seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> list:
    results = []
    for name in LOSSES:
        worst = max(check_instance(make_instance(name, seed * 1_000_003 + i), h) for i in range(instances))
        results.append(GradCheckResult(name, instances, worst, tol))
    return results
