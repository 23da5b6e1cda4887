"""Forward-filtering selection of simultaneous parental sets.

Each series keeps three disjoint groups of parents: a core set that defines
the current sparsity structure, a warm-up set of candidates under evaluation,
and a phase-out set of retirees whose coefficients are shrunk to zero over a
fixed span before removal. Candidates are proposed from the rows of a
companion Wishart-DLM precision estimate; promotion and retirement are
decided by signal-to-noise ratios of the parental coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dlm import NormalGammaBelief, StatePartition
from .errors import NumericalError


@dataclass(frozen=True)
class SelectionConfig:
    core_target: int = 20
    warmup_span: int = 10
    n_max: int = 10
    new_parent_prior_var: float = 0.25
    ineligible: frozenset[int] = frozenset()

    def __post_init__(self):
        if min(self.core_target, self.warmup_span, self.n_max) < 1:
            raise ValueError("core_target, warmup_span, n_max must be >= 1")
        if self.new_parent_prior_var <= 0:
            raise ValueError("new_parent_prior_var must be positive")


@dataclass
class ParentalSets:
    """Membership state for one series; ages count completed review steps."""

    owner: int
    core: set[int] = field(default_factory=set)
    warm_up: dict[int, int] = field(default_factory=dict)
    phase_out: dict[int, int] = field(default_factory=dict)

    def members(self) -> tuple[int, ...]:
        return tuple(sorted(self.core | set(self.warm_up) | set(self.phase_out)))

    def copy(self) -> "ParentalSets":
        return ParentalSets(self.owner, set(self.core), dict(self.warm_up),
                            dict(self.phase_out))

    def validate(self, span: int | None = None) -> None:
        groups = [self.core, set(self.warm_up), set(self.phase_out)]
        total = sum(len(g) for g in groups)
        union = set().union(*groups)
        if len(union) != total:
            raise ValueError(f"series {self.owner}: parental sets overlap")
        if self.owner in union:
            raise ValueError(f"series {self.owner} is its own parent")
        if span is not None:
            ages = list(self.warm_up.values()) + list(self.phase_out.values())
            if any(a < 0 or a > span for a in ages):
                raise ValueError(f"series {self.owner}: age outside [0, {span}]")
            if len(self.warm_up) > span:
                raise ValueError(f"series {self.owner}: warm-up overfull")


def partition_for(sets: ParentalSets, n_phi: int) -> StatePartition:
    """State layout implied by the current membership (parents sorted by id)."""
    return StatePartition(n_phi, sets.members())


def propose_candidates(precision_row: np.ndarray, sets: ParentalSets,
                       cfg: SelectionConfig) -> list[int]:
    """Rank-ordered candidate parents from one precision-matrix row.

    Takes the n_max largest off-diagonal entries by absolute value and drops
    those already warming up or in the core. Ties break toward the lower
    series index. Zero entries never qualify.
    """
    row = np.asarray(precision_row, dtype=float)
    scores = np.abs(row)
    scores[sets.owner] = -np.inf
    for j in cfg.ineligible:
        scores[j] = -np.inf
    order = np.argsort(-scores, kind="stable")
    top = [int(j) for j in order[:cfg.n_max] if scores[j] > 0.0]
    return [j for j in top if j not in sets.warm_up and j not in sets.core]


def admit(sets: ParentalSets, candidates: list[int],
          cfg: SelectionConfig) -> tuple[list[int], list[int]]:
    """Move candidates into warm-up, respecting the fixed warm-up size.

    Candidates beyond the free slots are deferred (they will be re-proposed
    while still relevant). A candidate currently phasing out is reactivated
    in place; its state entry already exists. Returns (new_parents,
    reactivated).
    """
    free = cfg.warmup_span - len(sets.warm_up)
    added: list[int] = []
    reactivated: list[int] = []
    for k in candidates:
        if free <= 0:
            break
        if k in sets.phase_out:
            del sets.phase_out[k]
            reactivated.append(k)
        else:
            added.append(k)
        sets.warm_up[k] = 0
        free -= 1
    return added, reactivated


def increment_ages(sets: ParentalSets) -> None:
    for k in sets.warm_up:
        sets.warm_up[k] += 1
    for k in sets.phase_out:
        sets.phase_out[k] += 1


def snr(belief: NormalGammaBelief, partition: StatePartition) -> np.ndarray:
    """|mean| / scale diagonal for each parental coefficient."""
    out = np.empty(partition.n_gamma)
    for i in range(partition.n_gamma):
        k = partition.n_phi + i
        denom = belief.scale[k, k]
        if denom <= 0:
            raise NumericalError(
                f"non-positive scale diagonal for parent {partition.parent_ids[i]}")
        out[i] = abs(belief.mean[k]) / denom
    return out


def review(sets: ParentalSets, snr_by_parent: dict[int, float],
           cfg: SelectionConfig) -> ParentalSets:
    """Promote matured candidates, retire excess core, drop finished retirees.

    Expects ages already incremented for this step. Warm-up members at the
    full span join the core unconditionally; the enlarged core is then
    trimmed to its target size by repeatedly retiring the member with the
    smallest signal-to-noise ratio (ties to the lower index). Phase-out
    members at the full span leave the model entirely.
    """
    out = sets.copy()
    span = cfg.warmup_span

    for k in [k for k, age in out.warm_up.items() if age >= span]:
        del out.warm_up[k]
        out.core.add(k)

    while len(out.core) > cfg.core_target:
        victim = min(out.core, key=lambda k: (snr_by_parent[k], k))
        out.core.remove(victim)
        out.phase_out[victim] = 0

    for k in [k for k, age in out.phase_out.items() if age >= span]:
        del out.phase_out[k]
    return out


def phase_out_scale(age_step: int, span: int) -> float:
    """Shrinkage factor applied to an outgoing coefficient at step l of the span.

    Decreases from 1 - 1/span at l=1 to exactly 0 at l=span, forcing the
    prior mean of the coefficient to zero by the end of the phase-out.
    """
    if not 1 <= age_step <= span:
        raise ValueError(f"phase-out step {age_step} outside 1..{span}")
    return 1.0 - 1.0 / ((span + 1) - age_step)


def transition_diag(sets: ParentalSets, partition: StatePartition,
                    span: int) -> np.ndarray | None:
    """Diagonal transition with phase-out shrinkage; None when identity."""
    if not sets.phase_out:
        return None
    g = np.ones(partition.size)
    for k, age in sets.phase_out.items():
        idx = partition.n_phi + partition.parent_ids.index(k)
        g[idx] = phase_out_scale(age + 1, span)
    return g


def restructure_belief(belief: NormalGammaBelief, old_partition: StatePartition,
                       new_partition: StatePartition,
                       cfg: SelectionConfig) -> NormalGammaBelief:
    """Re-shape a belief onto a new parental layout.

    Removed parents are marginalized out (their rows/columns dropped, which
    is exact for the state's T margin); added parents enter with zero mean,
    diagonal prior variance ``new_parent_prior_var``, and no covariance with
    existing states.
    """
    if old_partition.n_phi != new_partition.n_phi:
        raise ValueError("restructure cannot change the predictor block")
    if belief.dim != old_partition.size:
        raise ValueError("belief does not match the old layout")

    old_pos = {k: old_partition.n_phi + i
               for i, k in enumerate(old_partition.parent_ids)}
    p_new = new_partition.size
    mean = np.zeros(p_new)
    scale = np.zeros((p_new, p_new))

    kept_new = list(range(new_partition.n_phi))
    kept_old = list(range(old_partition.n_phi))
    for i, k in enumerate(new_partition.parent_ids):
        if k in old_pos:
            kept_new.append(new_partition.n_phi + i)
            kept_old.append(old_pos[k])
        else:
            scale[new_partition.n_phi + i, new_partition.n_phi + i] = \
                cfg.new_parent_prior_var
    mean[kept_new] = belief.mean[kept_old]
    scale[np.ix_(kept_new, kept_new)] = belief.scale[np.ix_(kept_old, kept_old)]

    return NormalGammaBelief(mean, scale, belief.dof, belief.precision_scale,
                             role=belief.role)


@dataclass
class SelectionStepResult:
    sets: ParentalSets
    partition: StatePartition
    belief: NormalGammaBelief
    promoted: list[int]
    demoted: list[int]
    removed: list[int]
    admitted: list[int]
    reactivated: list[int]

    @property
    def core_changed(self) -> bool:
        return bool(self.promoted or self.demoted)


def selection_step(sets: ParentalSets, belief: NormalGammaBelief,
                   partition: StatePartition, precision_row: np.ndarray,
                   cfg: SelectionConfig) -> SelectionStepResult:
    """One end-of-step selection pass for a single series.

    Ages advance, matured candidates are reviewed in and excess core members
    out, finished retirees are dropped from the state, and fresh candidates
    from the precision row fill the free warm-up slots.
    """
    work = sets.copy()
    increment_ages(work)

    # Like `snr`, but a coefficient already shrunk to a point mass (terminal
    # phase-out) carries no signal rather than being a conditioning error.
    snr_map = {}
    for i, k in enumerate(partition.parent_ids):
        idx = partition.n_phi + i
        denom = belief.scale[idx, idx]
        snr_map[k] = abs(belief.mean[idx]) / denom if denom > 0.0 else 0.0
    reviewed = review(work, snr_map, cfg)

    promoted = sorted(reviewed.core - work.core)
    demoted = sorted(set(reviewed.phase_out) - set(work.phase_out))
    removed = sorted(set(work.phase_out) - set(reviewed.phase_out))

    # Parents removed or demoted this step wait one step before re-proposal:
    # removals so their state entry is genuinely dropped first, demotions so
    # the review verdict is not undone within the same step.
    blocked = set(removed) | set(demoted)
    candidates = [k for k in propose_candidates(precision_row, reviewed, cfg)
                  if k not in blocked]
    admitted, reactivated = admit(reviewed, candidates, cfg)

    new_partition = partition_for(reviewed, partition.n_phi)
    new_belief = belief
    if new_partition.parent_ids != partition.parent_ids:
        new_belief = restructure_belief(belief, partition, new_partition, cfg)
    return SelectionStepResult(reviewed, new_partition, new_belief, promoted,
                               demoted, removed, admitted, reactivated)
