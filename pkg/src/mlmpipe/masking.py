"""Mask planning: strategies, decoupled corruption/prediction, policies.

A MaskPlan records which positions get corrupted and which positions are
prediction targets; the two sets coincide unless the corruption and
prediction rates are decoupled. Budgets are exact: floor(rate * number of
maskable positions), never a per-token coin flip (a Bernoulli variant of
the replacement policy is available behind ``policy_sampling``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .corpus import PackedDataset, Vocab, Window, epoch_stream
from .errors import ConfigError, DataError, InfeasibleError, IntegrityError
from .pmi import PmiVocabulary, segment_units

_EPS = 1e-9

STRATEGIES = ("uniform", "whole_word", "span", "pmi")


class ActionKind(enum.Enum):
    MASK = "mask"
    RANDOM = "random"
    SAME = "same"


@dataclass(slots=True)
class MaskAction:
    position: int
    kind: ActionKind
    replacement: int | None = None


@dataclass
class MaskPlan:
    actions: list[MaskAction]
    predictions: list[tuple[int, int]]  # (position, original id)
    duplicate_index: int = 0
    source_sequence: int = 0

    @property
    def corrupted_positions(self) -> list[int]:
        """Positions whose input identity is destroyed (mask or random)."""
        return [a.position for a in self.actions
                if a.kind in (ActionKind.MASK, ActionKind.RANDOM)]


@dataclass
class MaskedExample:
    corrupted_ids: list[int]
    targets: list[tuple[int, int]]
    duplicate_index: int = 0
    source_sequence: int = 0


@dataclass
class MaskingConfig:
    strategy: str = "uniform"
    m: float = 0.15
    m_corr: float | None = None
    m_pred: float | None = None
    policy: tuple[float, float, float] = (1.0, 0.0, 0.0)
    extra_same: float = 0.0
    mean_span: float = 3.0
    seed: int = 0
    policy_sampling: str = "exact"

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        for name in ("m", "extra_same"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        for name in ("m_corr", "m_pred"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if (self.m_corr is None) != (self.m_pred is None):
            raise ConfigError("m_corr and m_pred must be given together")
        if len(self.policy) != 3 or any(p < 0 for p in self.policy):
            raise ConfigError(f"policy must be 3 non-negative proportions, got {self.policy}")
        if abs(sum(self.policy) - 1.0) > _EPS:
            raise ConfigError(f"policy proportions must sum to 1, got {self.policy}")
        if self.mean_span <= 0:
            raise ConfigError(f"mean_span must be positive, got {self.mean_span}")
        if self.policy_sampling not in ("exact", "bernoulli"):
            raise ConfigError(f"unknown policy_sampling {self.policy_sampling!r}")
        if self.corruption_rate == 0.0 and self.prediction_rate > 0.0:
            raise ConfigError("m_pred > 0 requires m_corr > 0")

    @property
    def corruption_rate(self) -> float:
        return self.m if self.m_corr is None else self.m_corr

    @property
    def prediction_rate(self) -> float:
        return self.m if self.m_pred is None else self.m_pred


def exact_count(rate: float, n: int) -> int:
    """floor(rate * n), guarded against float round-down artifacts."""
    return int(math.floor(rate * n + _EPS))


def effective_rates(config: MaskingConfig) -> tuple[float, float]:
    """Effective corruption/prediction rates under the replacement policy.

    Same-token predictions count toward neither rate; random replacements
    count toward both; extra same-token predictions toward neither.
    """
    p_mask, p_rand, _ = config.policy
    eff = config.m * (p_mask + p_rand)
    return (eff, eff)


# ---------------------------------------------------------------------------
# position samplers


def sample_uniform(allowed: np.ndarray, budget: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly `budget` positions uniformly without replacement."""
    if budget > len(allowed):
        raise InfeasibleError(f"budget {budget} exceeds {len(allowed)} maskable positions")
    if budget == 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(rng.choice(allowed, size=budget, replace=False))


def _composition(total: int, parts: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random composition of `total` into `parts` parts >= 1."""
    if parts == 1:
        return np.array([total], dtype=np.int64)
    cuts = np.sort(rng.choice(total - 1, size=parts - 1, replace=False)) + 1
    bounds = np.concatenate([[0], cuts, [total]])
    return np.diff(bounds)


def sample_span(allowed: np.ndarray, budget: int, mean_span: float,
                rng: np.random.Generator) -> np.ndarray:
    """T5-style noise spans with the given target mean length.

    Span lengths are a uniform composition of the budget; gaps a uniform
    composition of the remainder (interior gaps >= 1 where feasible). For
    very high budgets the span count is reduced to the largest feasible
    value, so realized spans get longer than the target mean.
    """
    n = len(allowed)
    if budget > n:
        raise InfeasibleError(f"budget {budget} exceeds {n} maskable positions")
    if budget == 0:
        return np.empty(0, dtype=np.int64)
    num_spans = max(1, int(round(budget / mean_span)))
    remainder = n - budget
    # all num_spans + 1 gaps must be >= 1; reduce the span count when the
    # remainder cannot supply that many gaps
    num_spans = max(1, min(num_spans, budget, remainder - 1))
    lengths = _composition(budget, num_spans, rng)
    if remainder >= num_spans + 1:
        gaps = _composition(remainder, num_spans + 1, rng)
    else:
        # single span, remainder too small for interior gaps: ends may be 0
        gaps = _composition(remainder + 2, 2, rng)
        gaps[0] -= 1
        gaps[-1] -= 1
    picked = np.empty(budget, dtype=np.int64)
    idx = int(gaps[0])
    out = 0
    for i, length in enumerate(lengths):
        length = int(length)
        picked[out:out + length] = allowed[idx:idx + length]
        out += length
        idx += length + int(gaps[i + 1])
    return picked


def sample_units(units: list[tuple[int, int]], allowed: np.ndarray, budget: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Mask whole units; fill any leftover budget with single positions.

    Units are drawn uniformly without replacement and accepted only when
    they fit the remaining budget in full.
    """
    n = len(allowed)
    if budget > n:
        raise InfeasibleError(f"budget {budget} exceeds {n} maskable positions")
    if budget == 0:
        return np.empty(0, dtype=np.int64)
    allowed_set = set(int(p) for p in allowed)
    usable = [u for u in units
              if all(p in allowed_set for p in range(u[0], u[1]))]
    picked: list[int] = []
    remaining = budget
    for j in rng.permutation(len(usable)):
        if remaining == 0:
            break
        start, end = usable[int(j)]
        if end - start <= remaining:
            picked.extend(range(start, end))
            remaining -= end - start
    if remaining > 0:
        leftover = np.array(sorted(allowed_set - set(picked)), dtype=np.int64)
        picked.extend(int(p) for p in rng.choice(leftover, size=remaining, replace=False))
    return np.sort(np.array(picked, dtype=np.int64))


Sampler = Callable[[np.ndarray, int, np.random.Generator], np.ndarray]


def make_sampler(window: Window, vocab: Vocab, config: MaskingConfig,
                 pmi_vocab: PmiVocabulary | None = None) -> Sampler:
    """Bind a strategy to a window, returning f(allowed, budget, rng)."""
    if config.strategy == "uniform":
        return sample_uniform
    if config.strategy == "span":
        return lambda allowed, budget, rng: sample_span(
            allowed, budget, config.mean_span, rng)
    mode = "whole_word" if config.strategy == "whole_word" else "pmi"
    units = segment_units(window, vocab, mode, pmi_vocab)
    return lambda allowed, budget, rng: sample_units(units, allowed, budget, rng)


# ---------------------------------------------------------------------------
# planning


def plan_decoupled(window: Window, vocab: Vocab, sampler: Sampler,
                   m_corr: float, m_pred: float, rng: np.random.Generator,
                   source_sequence: int = 0) -> list[MaskPlan]:
    """Plans for one window under decoupled corruption/prediction rates.

    Equal rates: one plan predicting all corrupted positions. Lower
    prediction rate: one plan predicting a uniform subset. Higher
    prediction rate: ceil(m_pred/m_corr) duplicate plans with pairwise
    disjoint corruption sets, each predicting everything it corrupts.
    """
    maskable = window.maskable_positions(vocab)
    n = len(maskable)
    c = exact_count(m_corr, n)
    p = exact_count(m_pred, n)
    ids = window.ids

    def make_plan(positions: np.ndarray, predictions: np.ndarray, dup: int) -> MaskPlan:
        return MaskPlan(
            actions=[MaskAction(int(q), ActionKind.MASK) for q in positions],
            predictions=[(int(q), int(ids[q])) for q in np.sort(predictions)],
            duplicate_index=dup,
            source_sequence=source_sequence,
        )

    if m_pred == m_corr:
        positions = sampler(maskable, c, rng)
        return [make_plan(positions, positions, 0)]
    if m_pred < m_corr:
        positions = sampler(maskable, c, rng)
        subset = (rng.choice(positions, size=p, replace=False)
                  if p < len(positions) else positions)
        return [make_plan(positions, np.asarray(subset), 0)]
    if m_corr == 0.0:
        raise ConfigError("m_pred > 0 requires m_corr > 0")
    k = int(math.ceil(m_pred / m_corr - _EPS))
    if k * c > n:
        raise InfeasibleError(
            f"disjoint duplicates infeasible: {k} x {c} corrupted positions "
            f"> {n} maskable positions")
    plans: list[MaskPlan] = []
    remaining = maskable
    for d in range(k):
        positions = sampler(remaining, c, rng)
        plans.append(make_plan(positions, positions, d))
        remaining = np.setdiff1d(remaining, positions, assume_unique=True)
    return plans


def largest_remainder(total: int, proportions: tuple[float, ...]) -> list[int]:
    """Apportion `total` into integer counts matching the proportions.

    Leftover seats go to the largest fractional remainders; remainder ties
    break by position order, keeping the result deterministic.
    """
    quotas = [total * p for p in proportions]
    counts = [int(math.floor(q + _EPS)) for q in quotas]
    short = total - sum(counts)
    order = sorted(range(len(quotas)),
                   key=lambda i: (-(quotas[i] - math.floor(quotas[i] + _EPS)), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def _random_replacements(count: int, vocab: Vocab, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws over the vocabulary excluding mask/pad/sep ids."""
    draws = rng.integers(0, vocab.size - 3, size=count)
    for s in sorted(vocab.special_ids):
        draws[draws >= s] += 1
    return draws


def apply_policy(plan: MaskPlan, policy: tuple[float, float, float], extra_same: float,
                 vocab: Vocab, rng: np.random.Generator, window: Window,
                 sampling: str = "exact") -> MaskPlan:
    """Partition a plan's mask actions into mask/random/same replacements.

    Counts follow exact largest-remainder apportionment (or per-token
    draws when sampling="bernoulli"). extra_same adds same-token
    predictions on previously untouched maskable positions; those join
    the prediction set but are never corrupted.
    """
    if any(a.kind is not ActionKind.MASK for a in plan.actions):
        raise DataError("apply_policy requires an all-mask plan")
    n_act = len(plan.actions)
    if sampling == "exact":
        counts = largest_remainder(n_act, policy)
        kinds = ([ActionKind.MASK] * counts[0] + [ActionKind.RANDOM] * counts[1]
                 + [ActionKind.SAME] * counts[2])
    else:
        draws = rng.choice(3, size=n_act, p=np.asarray(policy) / sum(policy))
        kinds = [(ActionKind.MASK, ActionKind.RANDOM, ActionKind.SAME)[int(d)]
                 for d in draws]
    perm = rng.permutation(n_act)
    actions = [MaskAction(plan.actions[int(i)].position, kind)
               for i, kind in zip(perm, kinds)]
    n_rand = sum(1 for a in actions if a.kind is ActionKind.RANDOM)
    if n_rand:
        repls = iter(_random_replacements(n_rand, vocab, rng))
        for a in actions:
            if a.kind is ActionKind.RANDOM:
                a.replacement = int(next(repls))
    predictions = list(plan.predictions)
    maskable = window.maskable_positions(vocab)
    e = exact_count(extra_same, len(maskable))
    if e:
        taken = {a.position for a in actions}
        candidates = np.array([int(q) for q in maskable if int(q) not in taken],
                              dtype=np.int64)
        if e > len(candidates):
            raise InfeasibleError(
                f"{e} extra same-token predictions requested but only "
                f"{len(candidates)} untouched positions remain")
        chosen = rng.choice(candidates, size=e, replace=False)
        actions.extend(MaskAction(int(q), ActionKind.SAME) for q in chosen)
        predictions.extend((int(q), int(window.ids[q])) for q in chosen)
    actions.sort(key=lambda a: a.position)
    predictions.sort()
    return MaskPlan(actions=actions, predictions=predictions,
                    duplicate_index=plan.duplicate_index,
                    source_sequence=plan.source_sequence)


def materialize(window: Window, plan: MaskPlan, vocab: Vocab) -> MaskedExample:
    """Apply a plan to its window, producing the corrupted example."""
    L = len(window.ids)
    corrupted = window.ids.copy()
    special = set(vocab.special_ids)
    for a in plan.actions:
        if not 0 <= a.position < L:
            raise IntegrityError(f"plan position {a.position} outside window of length {L}")
        if int(window.ids[a.position]) in special:
            raise IntegrityError(f"plan touches special token at position {a.position}")
        if a.kind is ActionKind.MASK:
            corrupted[a.position] = vocab.mask_id
        elif a.kind is ActionKind.RANDOM:
            corrupted[a.position] = a.replacement
    targets: list[tuple[int, int]] = []
    for pos, orig in plan.predictions:
        if not 0 <= pos < L:
            raise IntegrityError(f"prediction position {pos} outside window of length {L}")
        if int(window.ids[pos]) != orig:
            raise IntegrityError(
                f"prediction at {pos} expects id {orig} but window holds {int(window.ids[pos])}")
        targets.append((pos, orig))
    return MaskedExample(corrupted_ids=corrupted.tolist(), targets=targets,
                         duplicate_index=plan.duplicate_index,
                         source_sequence=plan.source_sequence)


# ---------------------------------------------------------------------------
# streaming drivers


def plan_window(window: Window, vocab: Vocab, config: MaskingConfig,
                rng: np.random.Generator, pmi_vocab: PmiVocabulary | None = None,
                source_sequence: int = 0) -> list[MaskPlan]:
    """All plans for one window: strategy sampling, decoupling, policy."""
    sampler = make_sampler(window, vocab, config, pmi_vocab)
    plans = plan_decoupled(window, vocab, sampler, config.corruption_rate,
                           config.prediction_rate, rng, source_sequence)
    if config.policy != (1.0, 0.0, 0.0) or config.extra_same > 0.0 \
            or config.policy_sampling == "bernoulli":
        plans = [apply_policy(p, config.policy, config.extra_same, vocab, rng,
                              window, config.policy_sampling) for p in plans]
    return plans


def generate_plans(ds: PackedDataset, config: MaskingConfig,
                   pmi_vocab: PmiVocabulary | None = None,
                   epoch: int = 0) -> Iterator[MaskPlan]:
    """MaskPlans for one epoch in seeded stream order; duplicates adjacent."""
    for idx, rng in epoch_stream(ds, config.seed, epoch):
        yield from plan_window(ds.sequences[idx], ds.vocab, config, rng,
                               pmi_vocab, source_sequence=idx)


def generate_examples(ds: PackedDataset, config: MaskingConfig,
                      pmi_vocab: PmiVocabulary | None = None,
                      epoch: int = 0) -> Iterator[MaskedExample]:
    """Materialized corrupted examples for one epoch in stream order."""
    for plan in generate_plans(ds, config, pmi_vocab, epoch):
        yield materialize(ds.sequences[plan.source_sequence], plan, ds.vocab)
