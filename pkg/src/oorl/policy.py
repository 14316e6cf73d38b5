"""Tabular autoregressive categorical policies.

A policy holds one logit row per *context*.  Two context modes exist:

``"position"``
    one row per (prompt-id, position).  Dense ``(num_prompts * max_len, V)``
    table; positions are independent of the tokens emitted so far.
``"prefix"``
    one row per (prompt-id, generated prefix).  Rows are materialised lazily,
    so the table only grows where training has touched it.  This can represent
    any autoregressive distribution over the enumeration space.

Sequences are plain tuples of token ids.  A sequence is complete when it ends
with the end-of-sequence id or reaches ``max_len`` tokens.

All randomness goes through ``numpy.random.Generator`` with the PCG64
bit generator (``np.random.default_rng``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np

from . import autodiff as ad

ARGMAX_TEMPERATURE = 1e-6
ENUMERATION_CAP = 10**6


class EnumerationCapExceeded(ValueError):
    pass


@dataclass(frozen=True)
class Prompt:
    prompt_id: int
    tokens: tuple


def _logsumexp(row: np.ndarray) -> float:
    m = float(row.max())
    return m + math.log(float(np.exp(row - m).sum()))


class PolicyParams:
    """Logit table for ``num_prompts`` prompts over a ``vocab_size`` vocabulary."""

    def __init__(
        self,
        num_prompts: int,
        vocab_size: int,
        max_len: int,
        *,
        context: str = "position",
        eos_id: int | None = None,
        init_scale: float = 0.0,
        seed: int = 0,
    ):
        if min(num_prompts, vocab_size, max_len) < 1:
            raise ValueError("num_prompts, vocab_size and max_len must be >= 1")
        if init_scale < 0:
            raise ValueError("init_scale must be >= 0")
        if context not in ("position", "prefix"):
            raise ValueError(f"unknown context mode {context!r}")
        self.num_prompts = num_prompts
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.context = context
        self.eos_id = vocab_size - 1 if eos_id is None else eos_id
        if not 0 <= self.eos_id < vocab_size:
            raise ValueError("eos_id out of range")
        self.init_scale = float(init_scale)
        self.seed = seed
        self.frozen = False
        self._lse_cache: dict = {}
        self._lp_cache: dict = {}
        if context == "position":
            rng = np.random.default_rng(seed)
            shape = (num_prompts * max_len, vocab_size)
            self.table = rng.uniform(-init_scale, init_scale, size=shape) if init_scale else np.zeros(shape)
            self.index: dict = {}
        else:
            self.table = np.zeros((0, vocab_size))
            self.index = {}

    # --- context keys and rows --------------------------------------------------

    def key(self, prompt_id: int, prefix: tuple) -> tuple:
        if not 0 <= prompt_id < self.num_prompts:
            raise KeyError(f"unknown prompt-id {prompt_id}")
        if self.context == "position":
            return (prompt_id, len(prefix))
        return (prompt_id, tuple(prefix))

    def _row_id(self, key: tuple) -> int | None:
        if self.context == "position":
            return key[0] * self.max_len + key[1]
        return self.index.get(key)

    def _default_row(self, key: tuple) -> np.ndarray:
        if not self.init_scale:
            return np.zeros(self.vocab_size)
        pid, prefix = key
        rng = np.random.default_rng([self.seed, pid, len(prefix), *prefix])
        return rng.uniform(-self.init_scale, self.init_scale, size=self.vocab_size)

    def row(self, key: tuple) -> np.ndarray:
        """Logits for a context; do not mutate the returned array."""
        rid = self._row_id(key)
        if rid is None:
            return self._default_row(key)
        return self.table[rid]

    def ensure_row(self, key: tuple) -> int:
        """Row index for ``key``, materialising it if needed."""
        rid = self._row_id(key)
        if rid is not None:
            return rid
        self._check_mutable()
        rid = len(self.table)
        self.table = np.vstack([self.table, self._default_row(key)[None, :]])
        self.index[key] = rid
        return rid

    def ensure_rows(self, keys) -> np.ndarray:
        """Row indices for many keys, growing the table once."""
        missing = [k for k in keys if self._row_id(k) is None]
        if missing:
            self._check_mutable()
            start = len(self.table)
            fresh = []
            for k in missing:
                if k not in self.index:
                    self.index[k] = start + len(fresh)
                    fresh.append(self._default_row(k))
            self.table = np.vstack([self.table, np.array(fresh)])
        return np.array([self._row_id(k) for k in keys], dtype=int)

    def set_row(self, key: tuple, values) -> None:
        self._check_mutable()
        rid = self.ensure_row(key)  # may replace self.table
        self.table[rid] = np.asarray(values, dtype=float)

    def _check_mutable(self) -> None:
        if self.frozen:
            raise RuntimeError("policy is frozen")

    def row_lse(self, key: tuple) -> float:
        if self.frozen:
            lse = self._lse_cache.get(key)
            if lse is None:
                lse = self._lse_cache[key] = _logsumexp(self.row(key))
            return lse
        return _logsumexp(self.row(key))

    def copy(self, frozen: bool = False) -> "PolicyParams":
        new = object.__new__(PolicyParams)
        new.__dict__.update(self.__dict__)
        new.table = self.table.copy()
        new.index = dict(self.index)
        new.frozen = frozen
        new._lse_cache = {}
        new._lp_cache = {}
        return new

    def __repr__(self) -> str:
        return (
            f"PolicyParams(prompts={self.num_prompts}, V={self.vocab_size}, "
            f"max_len={self.max_len}, context={self.context!r}, frozen={self.frozen})"
        )


def init_tabular(
    num_prompts: int,
    vocab_size: int,
    max_len: int,
    init_scale: float = 0.0,
    seed: int = 0,
    *,
    context: str = "position",
    eos_id: int | None = None,
) -> PolicyParams:
    """Logits drawn i.i.d. from U[-init_scale, init_scale]; 0 gives the uniform policy."""
    return PolicyParams(
        num_prompts, vocab_size, max_len, context=context, eos_id=eos_id, init_scale=init_scale, seed=seed
    )


def snapshot(policy: PolicyParams) -> PolicyParams:
    """Frozen deep copy (for the reference policy and the sampling-time policy)."""
    return policy.copy(frozen=True)


class BoundPolicy:
    """A policy whose context rows are lifted onto the AD graph on first use.

    Rows of an unfrozen policy become parameter nodes; rows of a frozen policy
    become constants, so they never appear in a gradient map.  One binding is
    meant to live for a single loss evaluation.
    """

    def __init__(self, policy: PolicyParams, nodes: dict | None = None):
        self.policy = policy
        self.nodes: dict = dict(nodes or {})
        self._lse: dict = {}

    def row_node(self, key: tuple) -> ad.Node:
        node = self.nodes.get(key)
        if node is None:
            row = np.array(self.policy.row(key), dtype=float)
            node = ad.make_const(row) if self.policy.frozen else ad.make_param(row)
            self.nodes[key] = node
        return node

    def lse_node(self, key: tuple) -> ad.Node:
        node = self._lse.get(key)
        if node is None:
            node = self._lse[key] = ad.logsumexp(self.row_node(key))
        return node

    def params(self) -> list:
        return [n for n in self.nodes.values() if n.is_param]

    def gradients(self, grads: ad.GradientMap) -> dict:
        """Per-context gradients; contexts untouched by the root are omitted."""
        return {k: grads[n.id] for k, n in self.nodes.items() if n.is_param and n.id in grads}


PolicyLike = Union[PolicyParams, BoundPolicy]


def _unwrap(policy: PolicyLike) -> PolicyParams:
    return policy.policy if isinstance(policy, BoundPolicy) else policy


def validate_sequence(policy: PolicyParams, y) -> None:
    if len(y) > policy.max_len:
        raise ValueError(f"sequence longer than max_len={policy.max_len}")
    for i, tok in enumerate(y):
        if not 0 <= tok < policy.vocab_size:
            raise ValueError(f"token {tok} out of range [0, {policy.vocab_size})")
        if tok == policy.eos_id and i != len(y) - 1:
            raise ValueError("end-of-sequence before the final position")


def is_complete(policy: PolicyParams, y) -> bool:
    return len(y) == policy.max_len or (len(y) > 0 and y[-1] == policy.eos_id)


def token_log_probs(policy: PolicyLike, prompt: Prompt, y) -> np.ndarray:
    """Per-token log-probabilities as plain floats."""
    base = _unwrap(policy)
    y = tuple(y)
    validate_sequence(base, y)
    out = np.empty(len(y))
    for t, tok in enumerate(y):
        key = base.key(prompt.prompt_id, y[:t])
        out[t] = base.row(key)[tok] - base.row_lse(key)
    return out


def token_log_prob_nodes(policy: PolicyLike, prompt: Prompt, y) -> list:
    """Per-token log-probabilities as AD nodes."""
    bound = policy if isinstance(policy, BoundPolicy) else BoundPolicy(policy)
    base = bound.policy
    y = tuple(y)
    validate_sequence(base, y)
    nodes = []
    for t, tok in enumerate(y):
        key = base.key(prompt.prompt_id, y[:t])
        nodes.append(ad.index(bound.row_node(key), tok) - bound.lse_node(key))
    return nodes


def log_prob(policy: PolicyLike, prompt: Prompt, y, differentiable: bool = False):
    """log pi(y | prompt); a Node when ``differentiable`` else a float."""
    if differentiable:
        return ad.add_n(token_log_prob_nodes(policy, prompt, y))
    base = _unwrap(policy)
    if base.frozen:
        ck = (prompt.prompt_id, tuple(y))
        lp = base._lp_cache.get(ck)
        if lp is None:
            lp = base._lp_cache[ck] = math.fsum(token_log_probs(base, prompt, y))
        return lp
    return math.fsum(token_log_probs(base, prompt, y))


def _softmax(row: np.ndarray) -> np.ndarray:
    e = np.exp(row - row.max())
    return e / e.sum()


def sample(
    policy: PolicyParams,
    prompt: Prompt,
    rng: int | np.random.Generator,
    temperature: float = 1.0,
) -> tuple:
    """Ancestral sampling until end-of-sequence or ``max_len``.

    ``temperature <= 1e-6`` switches to argmax decoding (lowest id wins ties).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    y: list[int] = []
    while len(y) < policy.max_len:
        row = policy.row(policy.key(prompt.prompt_id, tuple(y)))
        if temperature <= ARGMAX_TEMPERATURE:
            tok = int(np.argmax(row))
        else:
            cdf = np.cumsum(_softmax(row / temperature))
            tok = int(np.searchsorted(cdf, gen.random() * cdf[-1], side="right"))
            tok = min(tok, policy.vocab_size - 1)
        y.append(tok)
        if tok == policy.eos_id:
            break
    return tuple(y)


def _walk(policy: PolicyParams, pid: int, prefix: tuple, logp: float) -> Iterator[tuple]:
    key = policy.key(pid, prefix)
    row = policy.row(key)
    lps = row - _logsumexp(row)
    for tok in range(policy.vocab_size):
        y = prefix + (tok,)
        lp = logp + float(lps[tok])
        if tok == policy.eos_id or len(y) == policy.max_len:
            yield y, lp
        else:
            yield from _walk(policy, pid, y, lp)


def enumerate_log_distribution(policy: PolicyLike, prompt: Prompt, cap: int = ENUMERATION_CAP) -> list:
    """Every complete sequence with its exact log-probability, in DFS token order."""
    base = _unwrap(policy)
    if base.vocab_size**base.max_len > cap:
        raise EnumerationCapExceeded(
            f"|V|^max_len = {base.vocab_size}^{base.max_len} exceeds cap {cap}"
        )
    base.key(prompt.prompt_id, ())
    return list(_walk(base, prompt.prompt_id, (), 0.0))


def enumerate_distribution(policy: PolicyLike, prompt: Prompt, cap: int = ENUMERATION_CAP) -> list:
    """Every complete sequence with its exact probability."""
    return [(y, math.exp(lp)) for y, lp in enumerate_log_distribution(policy, prompt, cap)]
