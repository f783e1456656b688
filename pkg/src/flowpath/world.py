"""Procedural longitudinal world with known dynamics and ground-truth cost.

Every subject is an archetype drawn deterministically from a seed: an
archetype class (which fixes the subject's preferred step size and the
class-level observation structure), an aging rate, a phase offset, and a
stationarity flag.  Observations are a smooth sinusoid-plus-linear function
of (trait, age), so the class is linearly readable from the observation and
transitions depend on age alone, which is what makes the dynamic-programming
oracle valid.  Everything here is a pure function of (config, seed).
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import BudgetError, ValidationError
from .irl import AgingTrajectory, Dynamics, State

PREFERRED_STEP_FRACTIONS = (0.2, 0.4, 0.6)  # of the largest action index
N_ARCHETYPE_CLASSES = 3


@dataclass
class WorldConfig:
    dim: int = 16
    age_min: int = 10
    age_max: int = 60
    noise: float = 0.05
    horizon: int = 5  # maximum number of states in a demo sequence
    n_actions: int = 16
    train_subjects: int = 64
    heldout_subjects: int = 16

    def __post_init__(self):
        if self.dim < 2:
            raise ValidationError("observation dim must be >= 2")
        if self.horizon < 2:
            raise ValidationError("horizon must be >= 2")
        if self.age_max <= self.age_min:
            raise ValidationError("age range must be non-empty")
        if self.noise < 0:
            raise ValidationError("noise level must be >= 0")
        if self.n_actions < 2:
            raise ValidationError("need at least 2 actions")

    @property
    def age_span(self) -> int:
        return self.age_max - self.age_min


@dataclass(eq=False)
class SubjectArchetype:
    """Hidden per-subject aging traits, a deterministic function of the seed."""

    trait: np.ndarray  # [class_id, rate, nonstationary, phase]
    seed: int

    @property
    def class_id(self) -> int:
        return int(self.trait[0])

    @property
    def rate(self) -> float:
        return float(self.trait[1])

    @property
    def nonstationary(self) -> bool:
        return bool(self.trait[2])

    @property
    def phase(self) -> float:
        return float(self.trait[3])


def preferred_step(class_id: int, n_actions: int) -> int:
    """The archetype class's designated step size, scaled to the action space."""
    frac = PREFERRED_STEP_FRACTIONS[class_id % N_ARCHETYPE_CLASSES]
    return max(1, round(frac * (n_actions - 1)))


@functools.lru_cache(maxsize=None)
def _class_bank(class_id: int, dim: int):
    """Fixed per-class observation structure: signature, slope, amp, freq, phase."""
    sig = np.random.default_rng(1000 + class_id).uniform(-1.5, 1.5, dim)
    slope = np.random.default_rng(2000 + class_id).normal(0.0, 0.8, dim)
    amp = np.random.default_rng(3000 + class_id).uniform(0.2, 0.6, dim)
    freq = np.random.default_rng(4000 + class_id).uniform(0.5, 2.0, dim)
    base_phase = np.random.default_rng(5000 + class_id).uniform(0.0, 2 * np.pi, dim)
    return sig, slope, amp, freq, base_phase


def make_archetype(config: WorldConfig, seed: int) -> SubjectArchetype:
    rng = np.random.default_rng(seed)
    class_id = int(rng.integers(0, N_ARCHETYPE_CLASSES))
    rate = float(rng.uniform(0.6, 1.4))
    nonstat = float(rng.integers(0, 2))
    phase = float(rng.uniform(0.0, 2 * np.pi))
    return SubjectArchetype(np.array([class_id, rate, nonstat, phase]), seed)


def observe(config: WorldConfig, arch: SubjectArchetype, age: int) -> np.ndarray:
    """Noise-free observation at an age; constant in age when the rate is zero."""
    sig, slope, amp, freq, base_phase = _class_bank(arch.class_id, config.dim)
    u = (age - config.age_min) / config.age_span
    wave = amp * np.sin(2 * np.pi * freq * u + base_phase + arch.phase)
    return sig + arch.rate * (slope * u + wave)


def ground_truth_cost(state: State, action: int, arch: SubjectArchetype,
                      config: WorldConfig) -> float:
    """Hidden per-step cost the IRL must recover.

    The archetype's preferred step is strictly cheapest at every state with
    a margin of at least 0.5; nonstationary archetypes add a mild age- and
    action-dependent tilt that never moves the argmin.
    """
    base = float(abs(action - preferred_step(arch.class_id, config.n_actions)))
    if arch.nonstationary:
        u = (state.age - config.age_min) / config.age_span
        base += 0.1 * u * (1.0 + action / max(1, config.n_actions - 1))
    return base


class WorldDynamics:
    """Deterministic ground-truth transitions: the noise-free aging curve.

    States are cached per age (the observation is a pure function of age for
    a fixed archetype) and must be treated as read-only by callers.
    """

    def __init__(self, config: WorldConfig, arch: SubjectArchetype):
        self.config = config
        self.arch = arch
        self.n_actions = config.n_actions
        self._states: dict[int, State] = {}

    def step(self, state: State, action: int) -> State:
        return self.state_at(state.age + action)

    def state_at(self, age: int) -> State:
        if age not in self._states:
            self._states[age] = State(observe(self.config, self.arch, age), age)
        return self._states[age]


def brute_force_optimal_path(dynamics: Dynamics, cost, start: State, target_age: int,
                             horizon_cap: int, budget: int = 1_000_000
                             ) -> AgingTrajectory:
    """Exhaustive minimum-cost path reaching at least the target age.

    Paths end the first time the age reaches the target; ties break
    lexicographically on the action tuple (min over (cost, actions)).
    """
    if target_age < start.age:
        raise ValidationError("target age below the start age")
    best: tuple[float, tuple[int, ...]] | None = None
    completed = 0

    def recurse(state: State, acc: float, actions: tuple[int, ...]):
        nonlocal best, completed
        if state.age >= target_age:
            completed += 1
            if completed > budget:
                raise BudgetError(f"enumeration exceeded budget {budget}")
            cand = (acc, actions)
            if best is None or cand < best:
                best = cand
            return
        if len(actions) >= horizon_cap:
            return
        for a in range(dynamics.n_actions):
            recurse(dynamics.step(state, a), acc + float(cost(state, a)),
                    actions + (a,))

    recurse(start, 0.0, ())
    if best is None:
        raise ValidationError(
            f"target {target_age} unreachable from {start.age} in {horizon_cap} steps"
        )
    states = [start]
    for a in best[1]:
        states.append(dynamics.step(states[-1], a))
    return AgingTrajectory(states, list(best[1]))


def dp_optimal_path(dynamics: WorldDynamics, cost, start: State, target_age: int,
                    horizon_cap: int) -> AgingTrajectory:
    """Independent shortest-path oracle on the (age x steps-left) DAG.

    Valid because the world's observation depends only on age.  Values are
    (cost, action-suffix) pairs so the lexicographic tie-break matches the
    brute-force enumeration exactly.
    """
    INF = (math.inf, ())

    @functools.lru_cache(maxsize=None)
    def value(age: int, steps_left: int) -> tuple[float, tuple[int, ...]]:
        if age >= target_age:
            return (0.0, ())
        if steps_left == 0:
            return INF
        state = dynamics.state_at(age)
        best = INF
        for a in range(dynamics.n_actions):
            sub = value(age + a, steps_left - 1)
            if math.isinf(sub[0]):
                continue
            cand = (float(cost(state, a)) + sub[0], (a,) + sub[1])
            if cand < best:
                best = cand
        return best

    total, actions = value(start.age, horizon_cap)
    value.cache_clear()
    if math.isinf(total):
        raise ValidationError(
            f"target {target_age} unreachable from {start.age} in {horizon_cap} steps"
        )
    states = [start]
    for a in actions:
        states.append(dynamics.step(states[-1], a))
    return AgingTrajectory(states, list(actions))


def generate_subject(config: WorldConfig, seed: int
                     ) -> tuple[SubjectArchetype, AgingTrajectory]:
    """One subject's archetype and its demonstration sequence.

    The demo follows the ground-truth-optimal path from a random start age
    over a span that is a multiple of the archetype's preferred step, with
    observation noise added on top of the noise-free curve.  Reproducible
    from (config, seed).
    """
    rng = np.random.default_rng(seed)
    arch = make_archetype(config, seed)
    step = preferred_step(arch.class_id, config.n_actions)
    max_steps = config.horizon - 1
    lo = min(2, max_steps)
    hi = min(max_steps, max(lo, config.age_span // step))
    n_steps = int(rng.integers(lo, hi + 1))
    span = n_steps * step
    if span > config.age_span:
        raise ValidationError(
            f"age range {config.age_span} too narrow for {n_steps} steps of {step}"
        )
    start_age = int(rng.integers(config.age_min, config.age_max - span + 1))
    dyn = WorldDynamics(config, arch)

    def cost(state: State, action: int) -> float:
        return ground_truth_cost(state, action, arch, config)

    optimal = brute_force_optimal_path(dyn, cost, dyn.state_at(start_age),
                                       start_age + span, horizon_cap=max_steps)
    states = []
    for s in optimal.states:
        obs = s.observation + config.noise * rng.standard_normal(config.dim)
        states.append(State(obs, s.age))
    return arch, AgingTrajectory(states, list(optimal.actions))


def generate_pool_sequence(config: WorldConfig, seed: int, stride: int = 1
                           ) -> AgingTrajectory:
    """A dense same-subject sequence across the whole age range.

    Used for flow pretraining and for harvesting controller training pairs at
    every step size, analogous to pairing all images of a subject.
    """
    rng = np.random.default_rng(seed ^ 0x5EED)
    arch = make_archetype(config, seed)
    ages = list(range(config.age_min, config.age_max + 1, stride))
    states = [State(observe(config, arch, a)
                    + config.noise * rng.standard_normal(config.dim), a)
              for a in ages]
    actions = [ages[i + 1] - ages[i] for i in range(len(ages) - 1)]
    return AgingTrajectory(states, actions)


# ---------------------------------------------------------------------------
# Sequence file format (line-delimited JSON records)
# ---------------------------------------------------------------------------

def trajectory_record(subject_id: int, traj: AgingTrajectory) -> str:
    return json.dumps({
        "subject_id": subject_id,
        "ages": [s.age for s in traj.states],
        "observations": [[float(v) for v in s.observation] for s in traj.states],
    })


def write_sequences(path, entries: list[tuple[int, AgingTrajectory]]) -> None:
    lines = [trajectory_record(sid, traj) for sid, traj in entries]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_sequences(path) -> list[tuple[int, AgingTrajectory]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            ages = [int(a) for a in rec["ages"]]
            obs = [np.asarray(o, dtype=np.float64) for o in rec["observations"]]
            if len(ages) != len(obs) or not ages:
                raise ValidationError("malformed sequence record")
            states = [State(o, a) for o, a in zip(obs, ages)]
            actions = [ages[i + 1] - ages[i] for i in range(len(ages) - 1)]
            if any(a < 0 for a in actions):
                raise ValidationError("sequence ages must be non-decreasing")
            out.append((int(rec["subject_id"]), AgingTrajectory(states, actions)))
    return out
