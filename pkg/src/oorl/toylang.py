"""Toy translation task: reverse-Polish arithmetic -> stack-machine IR.

Source programs are RPN expressions over single digits and ``+ - *``.  The
target IR is a stack machine with ``PUSH d`` (d in 0..9), ``ADD``, ``SUB``,
``MUL`` and a terminating ``END``.  Three deterministic optimisation levels
render the same expression as different but equivalent IR programs:

* ``O0`` literal token-by-token translation.
* ``O1`` folds every maximal proper subtree with at most two operators whose
  value is a single digit into one ``PUSH``.
* ``O2`` folds the whole expression into a constant-building chain
  (base-9 Horner form for values above 9, ``0 - |v|`` for negatives),
  followed by a peephole pass that drops redundant operations.

Vocabulary (shared by prompts and outputs)::

    0..9  PUSH d / source digit d
    10    ADD  / '+'
    11    SUB  / '-'
    12    MUL  / '*'
    13    END  (also the policy's end-of-sequence id)
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np

from .policy import Prompt

log = logging.getLogger(__name__)

ADD, SUB, MUL, END = 10, 11, 12, 13
VOCAB_SIZE = 14
EOS_ID = END
OPS = {"+": ADD, "-": SUB, "*": MUL}
OP_SYMBOL = {ADD: "+", SUB: "-", MUL: "*"}
MNEMONIC = {ADD: "ADD", SUB: "SUB", MUL: "MUL", END: "END"}
_APPLY = {
    ADD: lambda a, b: a + b,
    SUB: lambda a, b: a - b,
    MUL: lambda a, b: a * b,
}


class OptLevel(Enum):
    O0 = 0
    O1 = 1
    O2 = 2


class MutationExhausted(RuntimeError):
    pass


class StackUnderflow(ValueError):
    pass


class DecodeError(ValueError):
    pass


# --- source expressions ------------------------------------------------------------


@dataclass(frozen=True)
class SourceExpr:
    rpn: tuple  # of str tokens: '0'..'9', '+', '-', '*'
    value: int

    @property
    def text(self) -> str:
        return " ".join(self.rpn)


def _normalise_token(tok: str) -> str:
    return "-" if tok in ("−", "–") else tok


def parse_rpn(text_or_tokens) -> SourceExpr:
    """Parse and evaluate an RPN expression such as ``"2 3 * 4 -"``."""
    toks = text_or_tokens.split() if isinstance(text_or_tokens, str) else list(text_or_tokens)
    toks = tuple(_normalise_token(t) for t in toks)
    stack: list[int] = []
    for tok in toks:
        if tok in OPS:
            if len(stack) < 2:
                raise ValueError(f"malformed RPN: operator {tok!r} lacks operands")
            b, a = stack.pop(), stack.pop()
            stack.append(_APPLY[OPS[tok]](a, b))
        elif len(tok) == 1 and tok.isdigit():
            stack.append(int(tok))
        else:
            raise ValueError(f"bad RPN token {tok!r}")
    if len(stack) != 1:
        raise ValueError("malformed RPN: expression must leave exactly one value")
    return SourceExpr(toks, stack[0])


def _tree(rpn: tuple):
    stack: list = []
    for tok in rpn:
        if tok in OPS:
            b, a = stack.pop(), stack.pop()
            stack.append((OPS[tok], a, b))
        else:
            stack.append(int(tok))
    return stack[0]


def _value(tree) -> int:
    if isinstance(tree, int):
        return tree
    op, a, b = tree
    return _APPLY[op](_value(a), _value(b))


def _num_ops(tree) -> int:
    return 0 if isinstance(tree, int) else 1 + _num_ops(tree[1]) + _num_ops(tree[2])


def _random_tree(rng: np.random.Generator, n_ops: int):
    if n_ops == 0:
        return int(rng.integers(0, 10))
    left = int(rng.integers(0, n_ops))
    op = (ADD, SUB, MUL)[int(rng.integers(0, 3))]
    return (op, _random_tree(rng, left), _random_tree(rng, n_ops - 1 - left))


def _rpn_of(tree) -> tuple:
    if isinstance(tree, int):
        return (str(tree),)
    op, a, b = tree
    return _rpn_of(a) + _rpn_of(b) + (OP_SYMBOL[op],)


def gen_source(seed, max_operators: int = 2, value_bound: int = 20) -> SourceExpr:
    """Seeded random well-formed expression with |value| <= value_bound."""
    if max_operators < 1:
        raise ValueError("max_operators must be >= 1")
    rng = np.random.default_rng(seed)
    while True:
        tree = _random_tree(rng, int(rng.integers(1, max_operators + 1)))
        v = _value(tree)
        if abs(v) <= value_bound:
            return SourceExpr(_rpn_of(tree), v)


def source_tokens(expr: SourceExpr) -> tuple:
    return tuple(OPS[t] if t in OPS else int(t) for t in expr.rpn)


def make_prompt(prompt_id: int, expr: SourceExpr) -> Prompt:
    return Prompt(prompt_id, source_tokens(expr))


def prompt_value(prompt: Prompt) -> int:
    return parse_rpn([OP_SYMBOL.get(t, str(t)) for t in prompt.tokens]).value


# --- IR programs ------------------------------------------------------------------------


@dataclass(frozen=True)
class IrProgram:
    """A token-level IR program; ``END`` is always the final instruction."""

    tokens: tuple

    @property
    def value(self) -> int | None:
        try:
            return run(self.tokens)
        except (StackUnderflow, DecodeError):
            return None

    def encode(self) -> tuple:
        return self.tokens

    def __str__(self) -> str:
        return ", ".join(f"PUSH {t}" if t < 10 else MNEMONIC[t] for t in self.tokens)


def run(tokens) -> int:
    """Execute IR tokens; returns the single stack value.

    Raises DecodeError for unknown ids, a missing or misplaced END, or a final
    stack that does not hold exactly one value; StackUnderflow when an operator
    lacks operands.
    """
    tokens = tuple(tokens)
    if not tokens or tokens[-1] != END:
        raise DecodeError("program must end with END")
    stack: list[int] = []
    for tok in tokens[:-1]:
        if not isinstance(tok, (int, np.integer)) or not 0 <= tok < END:
            raise DecodeError(f"invalid instruction id {tok!r}")
        if tok < 10:
            stack.append(int(tok))
        else:
            if len(stack) < 2:
                raise StackUnderflow(MNEMONIC[tok])
            b, a = stack.pop(), stack.pop()
            stack.append(_APPLY[tok](a, b))
    if len(stack) != 1:
        raise DecodeError(f"program leaves {len(stack)} values on the stack")
    return stack[0]


def decode(tokens) -> IrProgram:
    """Token ids -> IrProgram; raises DecodeError if not a well-formed program."""
    tokens = tuple(int(t) for t in tokens)
    if not tokens or tokens[-1] != END or END in tokens[:-1]:
        raise DecodeError("END must appear exactly once, as the final token")
    if any(not 0 <= t <= END for t in tokens):
        raise DecodeError("unknown instruction id")
    return IrProgram(tokens)


def _emit(tree) -> list:
    if isinstance(tree, int):
        return [tree]
    op, a, b = tree
    return _emit(a) + _emit(b) + [op]


def _fold_o1(tree, is_root: bool):
    if isinstance(tree, int):
        return tree
    if not is_root and _num_ops(tree) <= 2 and 0 <= _value(tree) <= 9:
        return _value(tree)
    op, a, b = tree
    return (op, _fold_o1(a, False), _fold_o1(b, False))


def _render_int(v: int) -> list:
    if v < 0:
        return [0] + _render_int(-v) + [SUB]
    if v <= 9:
        return [v]
    q, r = divmod(v, 9)
    return _render_int(q) + [9, MUL, r, ADD]


def eliminate_redundant(instrs: list) -> list:
    """Peephole pass: drop ``PUSH 0; ADD``, ``PUSH 0; SUB``, ``PUSH 1; MUL``
    after a value, and ``PUSH 1; PUSH d; MUL`` -> ``PUSH d``."""
    out = list(instrs)
    changed = True
    while changed:
        changed = False
        for i in range(len(out) - 1):
            a, b = out[i], out[i + 1]
            if i > 0 and ((a == 0 and b in (ADD, SUB)) or (a == 1 and b == MUL)):
                del out[i : i + 2]
                changed = True
                break
            if a == 1 and b < 10 and i + 2 < len(out) and out[i + 2] == MUL:
                del out[i], out[i + 1]
                changed = True
                break
    return out


def compile_at(expr: SourceExpr, level: OptLevel) -> IrProgram:
    tree = _tree(expr.rpn)
    if level is OptLevel.O0:
        body = _emit(tree)
    elif level is OptLevel.O1:
        body = _emit(_fold_o1(tree, True))
    else:
        body = eliminate_redundant(_render_int(_value(tree)))
    return IrProgram(tuple(body) + (END,))


# --- grading -----------------------------------------------------------------------------


def grade(prompt: Prompt, output) -> int:
    """Binary rule reward: 1 iff ``output`` is a valid IR program that runs
    and leaves exactly the source expression's value.  Never raises."""
    try:
        target = prompt_value(prompt)
        return int(run(decode(output).tokens) == target)
    except (ValueError, TypeError, KeyError, IndexError, OverflowError):
        return 0


# --- mutations -----------------------------------------------------------------------------

MUTATION_KINDS = ("literal", "op", "delete_pair", "swap")


def apply_mutation(tokens: tuple, kind: str, rng: np.random.Generator) -> tuple | None:
    """One random mutation of the given kind; None if it does not apply."""
    body = list(tokens[:-1])
    pushes = [i for i, t in enumerate(body) if t < 10]
    ops = [i for i, t in enumerate(body) if t in (ADD, SUB, MUL)]
    if kind == "literal":
        if not pushes:
            return None
        i = pushes[int(rng.integers(len(pushes)))]
        body[i] = int(rng.choice([d for d in range(10) if d != body[i]]))
    elif kind == "op":
        if not ops:
            return None
        i = ops[int(rng.integers(len(ops)))]
        body[i] = int(rng.choice([o for o in (ADD, SUB, MUL) if o != body[i]]))
    elif kind == "delete_pair":
        if not pushes or not ops:
            return None
        i = pushes[int(rng.integers(len(pushes)))]
        j = ops[int(rng.integers(len(ops)))]
        body = [t for k, t in enumerate(body) if k not in (i, j)]
    elif kind == "swap":
        cands = [i for i in range(len(body) - 1) if body[i] != body[i + 1]]
        if not cands:
            return None
        i = cands[int(rng.integers(len(cands)))]
        body[i], body[i + 1] = body[i + 1], body[i]
    else:
        raise ValueError(f"unknown mutation kind {kind!r}")
    return tuple(body) + (END,)


def is_inequivalent(tokens: tuple, value: int) -> bool:
    try:
        return run(tokens) != value
    except (StackUnderflow, DecodeError):
        return True


def mutate_inequivalent(ir: IrProgram, seed, max_attempts: int = 50) -> IrProgram:
    """A random mutant that fails to run or evaluates to a different value."""
    target = ir.value
    if target is None:
        raise ValueError("mutate_inequivalent needs a program with a defined value")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        kind = MUTATION_KINDS[int(rng.integers(len(MUTATION_KINDS)))]
        mutant = apply_mutation(ir.tokens, kind, rng)
        if mutant is not None and is_inequivalent(mutant, target):
            return IrProgram(mutant)
    raise MutationExhausted(f"no inequivalent mutant of [{ir}] in {max_attempts} attempts")


# --- preference groups ---------------------------------------------------------------------


@dataclass
class PreferenceGroup:
    prompt: Prompt
    winners: list
    losers: list
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.winners)

    @property
    def m(self) -> int:
        return len(self.losers)

    def to_json(self) -> str:
        return json.dumps(
            {
                "prompt_id": self.prompt.prompt_id,
                "prompt_tokens": list(self.prompt.tokens),
                "winners": [list(w) for w in self.winners],
                "losers": [list(l) for l in self.losers],
                "meta": self.meta,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "PreferenceGroup":
        d = json.loads(line)
        return cls(
            Prompt(int(d["prompt_id"]), tuple(d["prompt_tokens"])),
            [tuple(w) for w in d["winners"]],
            [tuple(l) for l in d["losers"]],
            dict(d.get("meta", {})),
        )


def distinct_renderings(expr: SourceExpr) -> list:
    seen: list = []
    for level in OptLevel:
        toks = compile_at(expr, level).tokens
        if toks not in seen:
            seen.append(toks)
    return seen


def check_group(group: PreferenceGroup) -> None:
    """Raise ValueError if the group violates its invariants."""
    if group.n < 1 or group.m < 1:
        raise ValueError("groups need at least one winner and one loser")
    every = list(group.winners) + list(group.losers)
    if len(set(every)) != len(every):
        raise ValueError("duplicate sequence in group")
    if any(grade(group.prompt, w) != 1 for w in group.winners):
        raise ValueError("a winner does not grade 1")
    if any(grade(group.prompt, l) != 0 for l in group.losers):
        raise ValueError("a loser does not grade 0")


def build_preference_groups(exprs: Iterable[SourceExpr], n: int, m: int, seed: int) -> list:
    """Winners are the first ``n`` distinct O0/O1/O2 renderings; losers are
    ``m`` distinct verified-inequivalent mutants of the winners.

    Expressions with fewer than ``n`` distinct renderings, or for which ``m``
    distinct inequivalent mutants cannot be found, are skipped; the number
    skipped is ``len(exprs) - len(result)``.
    """
    if not 1 <= n <= len(OptLevel):
        raise ValueError(f"n must be in [1, {len(OptLevel)}]")
    if m < 1:
        raise ValueError("m must be >= 1")
    groups: list = []
    skipped = exhausted = 0
    for i, expr in enumerate(exprs):
        renders = distinct_renderings(expr)
        if len(renders) < n:
            skipped += 1
            continue
        winners = renders[:n]
        rng = np.random.default_rng([seed, i])
        losers: list = []
        attempts = shift = 0
        while len(losers) < m and attempts < 100 * m:
            attempts += 1
            parent = IrProgram(winners[(len(losers) + shift) % n])
            try:
                mutant = mutate_inequivalent(parent, rng).tokens
            except MutationExhausted:
                mutant = None
            if mutant is None or mutant in losers or mutant in winners:
                # some renderings (e.g. of "0 0 0 + *") have few or no inequivalent
                # mutants, so move on to the next winner
                shift += 1
                continue
            losers.append(mutant)
        if len(losers) < m:
            exhausted += 1
            continue
        prompt = make_prompt(len(groups), expr)
        groups.append(
            PreferenceGroup(prompt, winners, losers, {"source_rpn": expr.text, "value": expr.value})
        )
    if skipped:
        log.info("skipped %d expressions with fewer than %d distinct renderings", skipped, n)
    if exhausted:
        log.info("skipped %d expressions without %d distinct inequivalent mutants", exhausted, m)
    return groups


def write_groups(groups: Iterable[PreferenceGroup], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in groups:
            fh.write(g.to_json() + "\n")


def read_groups(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [PreferenceGroup.from_json(line) for line in fh if line.strip()]
