"""OORL training loop on the toy translation task.

Each step optionally samples a rollout batch from the sampling-time snapshot,
grades it with the rule reward and builds the clipped on-policy loss; draws a
round-robin batch of preference groups for the GEPO (or pairwise DPO) term;
combines them with fixed weights and takes one Adam step.

Modes:

=========  ===============================  =====================
mode       on-policy term                   preference term
=========  ===============================  =====================
onpolicy   yes                              none
dpo        yes                              DPO on first winner/loser
gepo       no                               GEPO
oorl       yes                              GEPO
=========  ===============================  =====================
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .objectives import (
    compute_advantages,
    dpo_loss,
    gepo_loss,
    make_trajectory,
    onpolicy_loss,
    oorl_loss,
    winner_ratio_variance,
)
from .policy import ARGMAX_TEMPERATURE, BoundPolicy, PolicyParams, Prompt, init_tabular, sample, snapshot
from .toylang import EOS_ID, VOCAB_SIZE, PreferenceGroup, grade

MODES = ("onpolicy", "dpo", "gepo", "oorl")
MODE_ALIASES = {"onpolicy-only": "onpolicy", "on-policy": "onpolicy"}

# values reported for the LLM-scale runs; the desk-scale defaults below differ
LLM_SCALE_DEFAULTS = {
    "optimizer": "AdamW",
    "lr": 5e-7,
    "weight_decay": 0.0,
    "batch_size": 8,
    "epochs": 1,
    "schedule": "cosine",
    "warmup_ratio": 0.03,
    "lam": 1.0,
    "w_rl": 1.0,
    "w_gepo": 0.01,
}

_ROLLOUT_STREAM = 1
_EVAL_STREAM = 2

CSV_FIELDS = (
    "step",
    "on_policy_loss",
    "gepo_pref",
    "gepo_var",
    "combined",
    "mean_reward",
    "winner_ratio_variance",
    "grad_norm",
)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 300
    rollout_batch: int = 32
    rollout_per_prompt: int = 4
    gepo_batch: int = 8
    lr: float = 0.05
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    beta: float = 0.1
    beta_kl: float = 0.01
    lam: float = 1.0
    eps_clip: float = 0.2
    w_rl: float = 1.0
    w_gepo: float = 0.01
    snapshot_every: int = 1
    normalize_adv: bool = True
    schedule: str = "constant"
    warmup_ratio: float = 0.03
    max_len: int = 8
    init_scale: float = 0.0
    context: str = "prefix"
    eval_samples: int = 64

    def validate(self) -> None:
        for name in ("lr", "adam_eps", "beta", "beta_kl", "lam", "w_rl", "w_gepo", "init_scale", "warmup_ratio"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if not 0 < self.eps_clip < 1:
            raise ConfigError("eps_clip must lie in (0, 1)")
        for name in ("rollout_batch", "rollout_per_prompt", "gepo_batch", "snapshot_every", "max_len", "eval_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError("adam_betas must lie in [0, 1)")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.context not in ("position", "prefix"):
            raise ConfigError(f"unknown context {self.context!r}")


@dataclass
class StepRecord:
    step: int
    on_policy_loss: float
    gepo_pref: float
    gepo_var: float
    combined: float
    mean_reward: float
    winner_ratio_variance: float
    grad_norm: float


@dataclass
class TrainReport:
    mode: str
    config: TrainConfig
    records: list = field(default_factory=list)
    initial_success_rate: float = 0.0
    success_rate: float = 0.0
    greedy_success_rate: float = 0.0
    weights: dict = field(default_factory=dict)
    policy: PolicyParams | None = None

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "steps": len(self.records),
            "initial_success_rate": self.initial_success_rate,
            "success_rate": self.success_rate,
            "greedy_success_rate": self.greedy_success_rate,
            "w_rl_effective": self.weights.get("w_rl", 0.0),
            "w_gepo_effective": self.weights.get("w_gepo", 0.0),
            "lam": self.config.lam,
        }


# --- optimizer ----------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0


def adam_step(
    policy: PolicyParams,
    grads: dict,
    state: AdamState,
    lr: float,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple:
    """Bias-corrected Adam over the whole logit table, no weight decay.

    ``grads`` maps context keys to gradient rows; missing contexts have zero
    gradient.  Updates ``policy`` in place and returns ``(policy, state)``.
    """
    if policy.frozen:
        raise RuntimeError("cannot update a frozen policy")
    keys = list(grads)
    rows = policy.ensure_rows(keys)
    n = len(policy.table)
    g = np.zeros_like(policy.table)
    for r, k in zip(rows, keys):
        g[r] += grads[k]
    if state.m is None:
        state.m = np.zeros_like(policy.table)
        state.v = np.zeros_like(policy.table)
    elif len(state.m) < n:
        pad = np.zeros((n - len(state.m), policy.vocab_size))
        state.m = np.vstack([state.m, pad])
        state.v = np.vstack([state.v, pad])
    b1, b2 = betas
    state.t += 1
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * g * g
    m_hat = state.m / (1 - b1**state.t)
    v_hat = state.v / (1 - b2**state.t)
    policy.table -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return policy, state


def learning_rate(cfg: TrainConfig, step: int) -> float:
    if cfg.schedule == "constant" or cfg.steps == 0:
        return cfg.lr
    warm = max(1, math.ceil(cfg.warmup_ratio * cfg.steps)) if cfg.warmup_ratio else 0
    if step < warm:
        return cfg.lr * (step + 1) / warm
    progress = (step - warm) / max(1, cfg.steps - warm)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * progress))


# --- rollouts and evaluation ------------------------------------------------------------


def rollout(policy: PolicyParams, prompts: list, per_prompt: int, seed) -> list:
    """Sample ``per_prompt`` outputs per prompt at temperature 1 and grade them.

    ``policy`` is the sampling-time policy; its per-token log-probabilities
    are recorded as the trajectories' old log-probs.
    """
    if per_prompt < 1:
        raise ValueError("per_prompt must be >= 1")
    rng = np.random.default_rng(seed)
    batch = []
    for prompt in prompts:
        for _ in range(per_prompt):
            batch.append(make_trajectory(prompt, sample(policy, prompt, rng, 1.0), policy))
    return batch


def success_rate(policy: PolicyParams, prompts: list, samples: int, seed) -> float:
    """Mean rule reward over ``samples`` temperature-1 draws per prompt."""
    hits = 0
    for prompt in prompts:
        rng = np.random.default_rng([*np.atleast_1d(seed), _EVAL_STREAM, prompt.prompt_id])
        hits += sum(grade(prompt, sample(policy, prompt, rng, 1.0)) for _ in range(samples))
    return hits / (samples * len(prompts))


def greedy_success_rate(policy: PolicyParams, prompts: list) -> float:
    return sum(grade(p, sample(policy, p, 0, ARGMAX_TEMPERATURE)) for p in prompts) / len(prompts)


# --- training ------------------------------------------------------------------------------


def normalize_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode


def prompts_of(groups: list) -> list:
    seen: dict = {}
    for g in groups:
        seen.setdefault(g.prompt.prompt_id, g.prompt)
    return [seen[k] for k in sorted(seen)]


def _pref_terms(kind: str, policy, ref, groups: list, cfg: TrainConfig) -> tuple:
    if kind == "dpo":
        losses = [dpo_loss(policy, ref, g.prompt, g.winners[0], g.losers[0], cfg.beta) for g in groups]
        return ad.mean(losses), ad.make_const(0.0)
    terms = [gepo_loss(policy, ref, g, cfg.beta, cfg.lam) for g in groups]
    return ad.mean([t[0] for t in terms]), ad.mean([t[1] for t in terms])


def train(
    config: TrainConfig,
    dataset: list,
    prompts: list | None = None,
    mode: str = "oorl",
) -> TrainReport:
    """Run ``config.steps`` optimisation steps and evaluate the final policy."""
    cfg = config
    cfg.validate()
    mode = normalize_mode(mode)
    uses_rl = mode != "gepo"
    pref_kind = {"onpolicy": None, "dpo": "dpo", "gepo": "gepo", "oorl": "gepo"}[mode]
    if pref_kind and not dataset:
        raise ConfigError(f"mode {mode!r} needs a non-empty preference dataset")
    prompts = list(prompts) if prompts else prompts_of(dataset)
    if not prompts:
        raise ConfigError("no prompts to train on")
    for g in dataset:
        if g.n < 1 or g.m < 1:
            raise ConfigError("every group needs at least one winner and one loser")
    w_rl = cfg.w_rl if uses_rl else 0.0
    w_pref = cfg.w_gepo if pref_kind else 0.0

    num_prompts = 1 + max([p.prompt_id for p in prompts] + [g.prompt.prompt_id for g in dataset])
    policy = init_tabular(
        num_prompts, VOCAB_SIZE, cfg.max_len, cfg.init_scale, cfg.seed, context=cfg.context, eos_id=EOS_ID
    )
    ref = snapshot(policy)
    state = AdamState()
    report = TrainReport(mode, cfg, weights={"w_rl": w_rl, "w_gepo": w_pref})
    report.initial_success_rate = success_rate(policy, prompts, cfg.eval_samples, cfg.seed)

    per_step = max(1, cfg.rollout_batch // cfg.rollout_per_prompt)
    old = None
    for step in range(cfg.steps):
        bound = BoundPolicy(policy)
        view = None  # frozen copy for value-only terms

        on_node, mean_reward = ad.make_const(0.0), float("nan")
        if uses_rl:
            if step % cfg.snapshot_every == 0 or old is None:
                old = snapshot(policy)
            step_prompts = [prompts[(step * per_step + j) % len(prompts)] for j in range(per_step)]
            batch = rollout(old, step_prompts, cfg.rollout_per_prompt, (cfg.seed, _ROLLOUT_STREAM, step))
            mean_reward = float(np.mean([t.reward for t in batch]))
            adv = compute_advantages(batch, policy, ref, cfg.beta_kl, cfg.normalize_adv)
            if w_rl > 0:
                on_node = onpolicy_loss(batch, bound, adv, cfg.eps_clip)
            else:
                view = view or snapshot(policy)
                on_node = ad.make_const(onpolicy_loss(batch, view, adv, cfg.eps_clip).value)

        pref_node = var_node = ad.make_const(0.0)
        wr_var = float("nan")
        if dataset:
            groups = [dataset[(step * cfg.gepo_batch + j) % len(dataset)] for j in range(cfg.gepo_batch)]
            wr_var = float(np.mean([winner_ratio_variance(policy, ref, g) for g in groups]))
            if pref_kind and w_pref > 0:
                pref_node, var_node = _pref_terms(pref_kind, bound, ref, groups, cfg)
            elif pref_kind:
                view = view or snapshot(policy)
                p, v = _pref_terms(pref_kind, view, ref, groups, cfg)
                pref_node, var_node = ad.make_const(p.value), ad.make_const(v.value)

        combined = oorl_loss(on_node, pref_node + cfg.lam * var_node, w_rl, w_pref)
        grads = bound.gradients(ad.backward(combined))
        grad_norm = math.sqrt(sum(float(np.dot(g, g)) for g in grads.values()))
        adam_step(policy, grads, state, learning_rate(cfg, step), cfg.adam_betas, cfg.adam_eps)
        report.records.append(
            StepRecord(
                step,
                float(on_node.value),
                float(pref_node.value),
                float(var_node.value),
                float(combined.value),
                mean_reward,
                wr_var,
                grad_norm,
            )
        )

    report.success_rate = success_rate(policy, prompts, cfg.eval_samples, cfg.seed)
    report.greedy_success_rate = greedy_success_rate(policy, prompts)
    report.policy = policy
    return report


# --- CSV report ------------------------------------------------------------------------------

SUMMARY_PREFIX = "# summary "


def report_to_csv(report: TrainReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in report.records:
        writer.writerow([r.step] + [repr(float(getattr(r, f))) for f in CSV_FIELDS[1:]])
    buf.write(SUMMARY_PREFIX + json.dumps(report.summary(), sort_keys=True) + "\n")
    return buf.getvalue()


def write_report(report: TrainReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report_to_csv(report))


class MalformedReport(ValueError):
    pass


def read_report(path) -> tuple:
    """Parse a report CSV into (records, summary); errors carry the line number."""
    records: list = []
    summary: dict = {}
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0].strip() != ",".join(CSV_FIELDS):
        raise MalformedReport(f"{path}:1: unexpected header {lines[0] if lines else ''!r}")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith(SUMMARY_PREFIX):
            try:
                summary = json.loads(line[len(SUMMARY_PREFIX) :])
            except json.JSONDecodeError as exc:
                raise MalformedReport(f"{path}:{lineno}: bad summary record ({exc})") from None
            continue
        cells = line.split(",")
        if len(cells) != len(CSV_FIELDS):
            raise MalformedReport(f"{path}:{lineno}: expected {len(CSV_FIELDS)} fields, got {len(cells)}")
        try:
            records.append(StepRecord(int(cells[0]), *(float(c) for c in cells[1:])))
        except ValueError:
            raise MalformedReport(f"{path}:{lineno}: non-numeric field") from None
    return records, summary


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["adam_betas"] = list(cfg.adam_betas)
    return d


def config_field_names() -> list:
    return [f.name for f in fields(TrainConfig)]
