"""Maximum-entropy IRL over longitudinal aging trajectories.

Trajectories alternate states (observation + integer age) and one-hot step
actions.  A trajectory's probability is Gibbs in its summed step cost, the
partition function is approximated by self-normalized importance sampling
under the current policy (exact enumeration is available on small worlds),
and the policy is refined against the learned cost by entropy-regularized
policy gradient.  Transitions are deterministic (synthesis with zero noise)
and demo start states are fixed, so proposal densities reduce to products of
per-step action probabilities.

Trajectory sampling draws per-trajectory RNG streams from a single seed and
merges results in index order, so the sampled set is reproducible regardless
of how the work would be split across workers.  Cost and policy parameter
updates require exclusive access.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import (
    BudgetError,
    DegenerateWeightsError,
    NumericError,
    ShapeError,
    ValidationError,
)
from .nets import Adam, DenseNet, dense_net, net_backward, net_forward
from .transform import DEFAULT_NUM_ACTIONS, AgingModel, synthesize_step, transform_apply
from .flows import flow_forward, flow_inverse

ENUMERATION_BUDGET = 1_000_000


@dataclass(eq=False)
class State:
    """Observation vector plus its integer age label."""

    observation: np.ndarray
    age: int

    def __post_init__(self):
        self.observation = np.asarray(self.observation, dtype=np.float64)
        self.age = int(self.age)


@dataclass(eq=False)
class AgingTrajectory:
    """Alternating states and actions for one subject; ages must add up."""

    states: list[State]
    actions: list[int]

    def __post_init__(self):
        self.actions = [int(a) for a in self.actions]

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def validate(self, n_actions: int | None = None) -> None:
        if len(self.states) < 1 or len(self.states) != len(self.actions) + 1:
            raise ValidationError(
                f"trajectory needs T states and T-1 actions, got "
                f"{len(self.states)} states / {len(self.actions)} actions"
            )
        for t, a in enumerate(self.actions):
            if a < 0 or (n_actions is not None and a >= n_actions):
                raise ValidationError(f"action {a} at step {t} out of range")
            expect = self.states[t].age + a
            if self.states[t + 1].age != expect:
                raise ValidationError(
                    f"age bookkeeping violated at step {t}: "
                    f"{self.states[t + 1].age} != {self.states[t].age} + {a}"
                )


class Dynamics(Protocol):
    """Deterministic transition model over states."""

    n_actions: int

    def step(self, state: State, action: int) -> State: ...


class ModelDynamics:
    """Transitions via the synthesis model with zero injected noise."""

    def __init__(self, model: AgingModel):
        self.model = model
        self.n_actions = model.n_actions

    def step(self, state: State, action: int) -> State:
        obs = synthesize_step(self.model, state.observation, action, 0.0)
        return State(obs, state.age + action)


class FunctionDynamics:
    """Adapter wrapping a plain (state, action) -> state callable."""

    def __init__(self, n_actions: int, fn: Callable[[State, int], State]):
        self.n_actions = n_actions
        self.fn = fn

    def step(self, state: State, action: int) -> State:
        return self.fn(state, action)


def _age_unit(age: float, age_low: float, age_high: float) -> float:
    if age_high <= age_low:
        raise ValueError("age_high must exceed age_low")
    return (age - age_low) / (age_high - age_low)


class CostNet:
    """Per-step cost c(s, a): dense net on (observation ⊕ age ⊕ action one-hot)."""

    def __init__(self, net: DenseNet, n_actions: int, age_low: float, age_high: float):
        self.net = net
        self.n_actions = n_actions
        self.age_low = float(age_low)
        self.age_high = float(age_high)
        self.dim = net.in_dim - 1 - n_actions
        if self.dim < 1 or net.out_dim != 1:
            raise ShapeError("cost net must map (obs ⊕ age ⊕ one-hot action) to a scalar")

    def features(self, state: State, action: int) -> np.ndarray:
        onehot = np.zeros(self.n_actions)
        onehot[action] = 1.0
        return np.concatenate(
            [state.observation, [_age_unit(state.age, self.age_low, self.age_high)], onehot]
        )

    def cost(self, state: State, action: int) -> float:
        return float(net_forward(self.net, self.features(state, action))[0])

    __call__ = cost

    def parameters(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        return self.net.parameters(prefix)


class PolicyNet:
    """Step-size policy q(a | s): dense net to logits, softmax on top."""

    def __init__(self, net: DenseNet, n_actions: int, age_low: float, age_high: float):
        if net.out_dim != n_actions:
            raise ShapeError("policy net must emit one logit per action")
        if net.layers[-1].activation != "identity":
            raise ValueError("policy net must emit raw logits")
        self.net = net
        self.n_actions = n_actions
        self.age_low = float(age_low)
        self.age_high = float(age_high)
        self.dim = net.in_dim - 1

    def features(self, state: State) -> np.ndarray:
        return np.concatenate(
            [state.observation, [_age_unit(state.age, self.age_low, self.age_high)]]
        )

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return net_forward(self.net, feats)

    def probs(self, state: State) -> np.ndarray:
        return _softmax_1d(self.logits(self.features(state)))

    def log_probs(self, state: State) -> np.ndarray:
        logit = self.logits(self.features(state))
        shifted = logit - logit.max()
        return shifted - math.log(np.exp(shifted).sum())

    def entropy(self, state: State) -> float:
        logp = self.log_probs(state)
        return float(-(np.exp(logp) * logp).sum())

    def parameters(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        return self.net.parameters(prefix)


def _softmax_1d(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def make_cost_net(rng: np.random.Generator, dim: int,
                  n_actions: int = DEFAULT_NUM_ACTIONS, age_low: float = 10.0,
                  age_high: float = 60.0, hidden: int = 32) -> CostNet:
    """2 hidden ReLU layers of `hidden` units, identity scalar output."""
    net = dense_net(rng, (dim + 1 + n_actions, hidden, hidden, 1))
    return CostNet(net, n_actions, age_low, age_high)


def make_policy_net(rng: np.random.Generator, dim: int,
                    n_actions: int = DEFAULT_NUM_ACTIONS, age_low: float = 10.0,
                    age_high: float = 60.0, hidden: int = 32,
                    uniform_init: bool = True) -> PolicyNet:
    """Policy with a zeroed final layer by default, i.e. an exactly uniform start."""
    net = dense_net(rng, (dim + 1, hidden, hidden, n_actions), zero_final=uniform_init)
    return PolicyNet(net, n_actions, age_low, age_high)


# ---------------------------------------------------------------------------
# Energies and trajectory distributions
# ---------------------------------------------------------------------------

def sequence_energy(traj: AgingTrajectory, cost: Callable[[State, int], float]) -> float:
    """Sum of per-step costs over the trajectory's (state, action) pairs."""
    traj.validate()
    total = 0.0
    for t, a in enumerate(traj.actions):
        total += float(cost(traj.states[t], a))
    return total


def sequence_energy_and_grad(traj: AgingTrajectory, cost: CostNet
                             ) -> tuple[float, list[np.ndarray]]:
    """Energy plus its gradient w.r.t. the cost-net parameters."""
    traj.validate(cost.n_actions)
    if not traj.actions:
        return 0.0, [np.zeros_like(a) for _, a in cost.parameters()]
    feats = np.stack([cost.features(traj.states[t], a)
                      for t, a in enumerate(traj.actions)])
    values = net_forward(cost.net, feats)
    if not np.all(np.isfinite(values)):
        raise NumericError("non-finite step cost")
    grads, _ = net_backward(cost.net, feats, np.ones_like(values))
    return float(values.sum()), grads


def enumerate_energies(start: State, horizon: int, cost, dynamics: Dynamics,
                       budget: int = ENUMERATION_BUDGET) -> np.ndarray:
    """Energies of every action sequence of the given length from `start`.

    Entry i corresponds to the base-n_actions digits of i (most significant
    action first).  Deterministic transitions make this a full enumeration of
    the trajectory space.
    """
    n = dynamics.n_actions
    total = n**horizon
    if total > budget:
        raise BudgetError(f"enumeration of {total} paths exceeds budget {budget}")
    energies = np.zeros(total)

    def recurse(state: State, depth: int, acc: float, base: int, stride: int):
        if depth == horizon:
            energies[base] = acc
            return
        for a in range(n):
            nxt = dynamics.step(state, a)
            recurse(nxt, depth + 1, acc + float(cost(state, a)), base + a * stride,
                    stride // n)

    recurse(start, 0, 0.0, 0, total // n if horizon > 0 else 1)
    return energies


def _logsumexp(v: np.ndarray) -> float:
    m = float(np.max(v))
    if not np.isfinite(m):
        return m
    return m + math.log(float(np.exp(v - m).sum()))


def exact_sequence_prob(traj: AgingTrajectory, cost, dynamics: Dynamics,
                        budget: int = ENUMERATION_BUDGET) -> float:
    """Exact Gibbs probability of the trajectory's action sequence.

    exp(-E) normalized over the full enumeration of action sequences with the
    same start state and horizon, under the deterministic transition model.
    """
    traj.validate(dynamics.n_actions)
    horizon = traj.horizon
    energies = enumerate_energies(traj.states[0], horizon, cost, dynamics, budget)
    log_z = _logsumexp(-energies)
    index = 0
    for a in traj.actions:
        index = index * dynamics.n_actions + a
    return float(np.exp(-energies[index] - log_z))


def traj_log_proposal_density(traj: AgingTrajectory, policy: PolicyNet) -> float:
    """log q(traj) = sum of per-step action log-probabilities.

    Transition and initial-state factors are point masses under deterministic
    synthesis and fixed start states, so only the policy terms remain.
    """
    total = 0.0
    for t, a in enumerate(traj.actions):
        total += float(policy.log_probs(traj.states[t])[a])
    return total


def traj_proposal_density(traj: AgingTrajectory, policy: PolicyNet) -> float:
    """Product of per-step policy probabilities (exactly 0 if any step is)."""
    traj.validate(policy.n_actions)
    prob = 1.0
    for t, a in enumerate(traj.actions):
        prob *= float(policy.probs(traj.states[t])[a])
    return prob


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def rollout(policy: PolicyNet, dynamics: Dynamics, start: State, horizon: int,
            rng: np.random.Generator) -> AgingTrajectory:
    """Roll one trajectory by stochastically sampling actions from the policy."""
    states = [start]
    actions: list[int] = []
    for _ in range(horizon):
        p = policy.probs(states[-1])
        a = int(rng.choice(policy.n_actions, p=p))
        actions.append(a)
        states.append(dynamics.step(states[-1], a))
    return AgingTrajectory(states, actions)


def sample_trajectories(policy: PolicyNet, dynamics: Dynamics,
                        starts: Sequence[State], horizon: int | Sequence[int],
                        m: int | None = None, seed: int = 0,
                        retry_cap: int = 5) -> list[AgingTrajectory]:
    """Sample m trajectories, cycling over start states.

    Each trajectory gets its own RNG stream spawned from `seed` (index order),
    so the result is bit-reproducible and independent of any worker split.
    Numeric failures during synthesis are retried on the same stream up to
    `retry_cap` times.
    """
    if not starts:
        raise ValidationError("need at least one start state")
    count = m if m is not None else len(starts)
    if count < 1:
        raise ValidationError("m must be >= 1")
    horizons = ([int(horizon)] * len(starts) if np.isscalar(horizon)
                else [int(h) for h in horizon])
    if len(horizons) != len(starts):
        raise ShapeError("one horizon per start state is required")
    if min(horizons) < 1:
        raise ValidationError("horizon must be >= 1")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = root.spawn(count)
    out: list[AgingTrajectory] = []
    for i in range(count):
        rng = np.random.default_rng(streams[i])
        start = starts[i % len(starts)]
        h = horizons[i % len(starts)]
        for attempt in range(retry_cap + 1):
            try:
                out.append(rollout(policy, dynamics, start, h, rng))
                break
            except NumericError:
                if attempt == retry_cap:
                    raise
    return out


# ---------------------------------------------------------------------------
# The importance-sampled cost objective
# ---------------------------------------------------------------------------

def irl_loss_and_grad(cost: CostNet, demos: Sequence[AgingTrajectory],
                      samples: Sequence[AgingTrajectory],
                      sample_log_q: Sequence[float]
                      ) -> tuple[float, list[np.ndarray]]:
    """Importance-sampled trajectory log-likelihood and its exact gradient.

    L = -mean(E over demos) - [logsumexp(-E_j - log q_j) - log N] over samples.
    The gradient is -mean(dE/dΓ over demos) plus the self-normalized
    weighted mean of dE/dΓ over samples, weights w_j ∝ exp(-E_j)/q_j.
    """
    if not demos or not samples:
        raise ValidationError("demo and sample batches must be non-empty")
    if len(sample_log_q) != len(samples):
        raise ShapeError("one log proposal density per sample is required")

    demo_results = [sequence_energy_and_grad(t, cost) for t in demos]
    sample_results = [sequence_energy_and_grad(t, cost) for t in samples]
    demo_e = np.array([e for e, _ in demo_results])
    sample_e = np.array([e for e, _ in sample_results])
    log_q = np.asarray(sample_log_q, dtype=np.float64)

    log_w = -sample_e - log_q
    if np.any(np.isposinf(log_w)) or np.any(np.isnan(log_w)):
        raise DegenerateWeightsError("a sample has zero or invalid proposal density")
    if not np.any(np.isfinite(log_w)):
        raise DegenerateWeightsError("all importance weights are zero or non-finite")
    log_norm = _logsumexp(log_w)
    loss = float(-demo_e.mean() - (log_norm - math.log(len(samples))))
    weights = np.exp(log_w - log_norm)

    grads = [np.zeros_like(a) for _, a in cost.parameters()]
    dm = -1.0 / len(demos)
    for (_, g) in demo_results:
        for acc, gi in zip(grads, g):
            acc += dm * gi
    for w, (_, g) in zip(weights, sample_results):
        for acc, gi in zip(grads, g):
            acc += w * gi
    return loss, grads


def estimate_log_partition(cost, policy: PolicyNet, dynamics: Dynamics, start: State,
                           horizon: int, n: int, seed: int = 0) -> float:
    """Importance-sampling estimate of log Z from `n` policy rollouts."""
    trajs = sample_trajectories(policy, dynamics, [start], horizon, m=n, seed=seed)
    log_w = np.array([-sequence_energy(t, cost) - traj_log_proposal_density(t, policy)
                      for t in trajs])
    return _logsumexp(log_w) - math.log(n)


# ---------------------------------------------------------------------------
# Policy refinement
# ---------------------------------------------------------------------------

def policy_objective(policy: PolicyNet, cost, dynamics: Dynamics,
                     starts: Sequence[State], horizons: Sequence[int],
                     n_rollouts: int, seed: int) -> float:
    """Monte-Carlo estimate of E_q[E(ζ)] - H(q) from fresh rollouts."""
    trajs = sample_trajectories(policy, dynamics, list(starts), list(horizons),
                                m=n_rollouts, seed=seed)
    vals = [sequence_energy(t, cost) + traj_log_proposal_density(t, policy)
            for t in trajs]
    return float(np.mean(vals))


def policy_update(policy: PolicyNet, cost, dynamics: Dynamics,
                  starts: Sequence[State], horizons: Sequence[int],
                  optimizer: Adam, n_rollouts: int, n_steps: int,
                  seed: int = 0, collapse_eps: float = 1e-8) -> dict:
    """Entropy-regularized policy-gradient refinement against a fixed cost.

    Minimizes E_q[E(ζ)] - H(q) with a score-function estimator: per rollout
    the return is energy plus trajectory log-probability, and the batch-mean
    return is subtracted as the baseline.
    """
    names = [n for n, _ in policy.parameters()]
    arrays = [a for _, a in policy.parameters()]
    streams = np.random.SeedSequence(seed).spawn(n_steps)
    info: dict = {"collapse_warning": False}
    last_batch: list[AgingTrajectory] = []
    for step in range(n_steps):
        trajs = sample_trajectories(policy, dynamics, list(starts), list(horizons),
                                    m=n_rollouts, seed=streams[step])
        returns = np.array([sequence_energy(t, cost) + traj_log_proposal_density(t, policy)
                            for t in trajs])
        adv = returns - returns.mean()
        feats, chosen, coeffs = [], [], []
        for traj, a_i in zip(trajs, adv):
            for t, a in enumerate(traj.actions):
                feats.append(policy.features(traj.states[t]))
                chosen.append(a)
                coeffs.append(a_i / n_rollouts)
        fmat = np.stack(feats)
        logits = net_forward(policy.net, fmat)
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        upstream = -probs * np.asarray(coeffs)[:, None]
        upstream[np.arange(len(chosen)), chosen] += np.asarray(coeffs)
        grads, _ = net_backward(policy.net, fmat, upstream)
        optimizer.step(arrays, grads, names)
        last_batch = trajs
    states = [s for t in last_batch for s in t.states[:-1]] or list(starts)
    pmat = np.stack([policy.probs(s) for s in states])
    info["entropy"] = float(-(pmat * np.log(np.maximum(pmat, 1e-300))).sum(axis=1).mean())
    info["collapse_warning"] = bool(np.any(pmat.max(axis=0) < collapse_eps))
    return info


# ---------------------------------------------------------------------------
# The alternating cost / policy learning loop
# ---------------------------------------------------------------------------

@dataclass
class IterationMetrics:
    iteration: int
    demo_energy: float
    sample_energy: float
    loglik_estimate: float
    policy_entropy: float
    wall_seconds: float


def learn_aging_policy(demos: Sequence[AgingTrajectory], cost: CostNet,
                       policy: PolicyNet, dynamics: Dynamics, *,
                       outer_iters: int, inner_iters: int,
                       sample_paths: int, demo_batch: int, sample_batch: int,
                       policy_rollouts: int, policy_steps: int,
                       cost_optimizer: Adam, policy_optimizer: Adam,
                       rng: np.random.Generator,
                       start_iteration: int = 0,
                       on_iteration: Callable[[int, IterationMetrics], None] | None = None,
                       ) -> list[IterationMetrics]:
    """Alternate cost fitting and policy refinement over demo sequences.

    Every outer iteration samples fresh paths from the current policy through
    the synthesis transitions, runs `inner_iters` gradient ascent steps on
    the importance-sampled log-likelihood over mixed demo/sample batches
    (demo members get their proposal density under the current policy), then
    refines the policy against the updated cost.  All randomness is drawn
    from `rng`, so checkpointing its state at an iteration boundary makes
    the run resumable and bit-reproducible.
    """
    if not demos:
        raise ValidationError("need at least one demonstration")
    for d in demos:
        d.validate(cost.n_actions)
    starts = [d.states[0] for d in demos]
    horizons = [max(1, d.horizon) for d in demos]
    names = [n for n, _ in cost.parameters()]
    arrays = [a for _, a in cost.parameters()]
    history: list[IterationMetrics] = []

    for k in range(start_iteration, outer_iters):
        t0 = time.perf_counter()
        try:
            path_seed = int(rng.integers(0, 2**63 - 1))
            samples = sample_trajectories(policy, dynamics, starts, horizons,
                                          m=sample_paths, seed=path_seed)
            loglik_sum = 0.0
            for _ in range(inner_iters):
                d_idx = rng.choice(len(demos), size=min(demo_batch, len(demos)),
                                   replace=False)
                s_idx = rng.choice(len(samples), size=min(sample_batch, len(samples)),
                                   replace=False)
                demo_sel = [demos[i] for i in d_idx]
                mixed = demo_sel + [samples[i] for i in s_idx]
                mixed_log_q = [traj_log_proposal_density(t, policy) for t in mixed]
                loss, grads = irl_loss_and_grad(cost, demo_sel, mixed, mixed_log_q)
                loglik_sum += loss
                cost_optimizer.step(arrays, [-g for g in grads], names)
            pol_seed = int(rng.integers(0, 2**63 - 1))
            pol_info = policy_update(policy, cost, dynamics, starts, horizons,
                                     policy_optimizer, policy_rollouts, policy_steps,
                                     seed=pol_seed)
        except Exception as exc:
            raise IrlIterationError(k, exc) from exc
        metrics = IterationMetrics(
            iteration=k,
            demo_energy=float(np.mean([sequence_energy(t, cost) for t in demos])),
            sample_energy=float(np.mean([sequence_energy(t, cost) for t in samples])),
            loglik_estimate=loglik_sum / max(1, inner_iters),
            policy_entropy=pol_info["entropy"],
            wall_seconds=time.perf_counter() - t0,
        )
        history.append(metrics)
        if on_iteration is not None:
            on_iteration(k, metrics)
    return history


class IrlIterationError(RuntimeError):
    """Wraps a failure inside the learning loop with its iteration index."""

    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"learning aborted at outer iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause


# ---------------------------------------------------------------------------
# Planning and multi-input initialization
# ---------------------------------------------------------------------------

def plan_rollout(policy: PolicyNet, dynamics: Dynamics, start: State,
                 target_age: int) -> tuple[list[int], list[State]]:
    """Greedy argmax rollout until the age reaches the target.

    Ties break toward the smaller action index.  If the argmax is the
    same-age action while the target is still ahead, it is masked and the
    next-highest action is taken, which guarantees progress and termination
    with overshoot strictly below the action count.
    """
    if target_age < start.age:
        raise ValidationError("target age below start age (de-aging unsupported)")
    states = [start]
    actions: list[int] = []
    while states[-1].age < target_age:
        p = policy.probs(states[-1])
        a = int(np.argmax(p))
        if a == 0:
            masked = p.copy()
            masked[0] = -np.inf
            a = int(np.argmax(masked))
        actions.append(a)
        states.append(dynamics.step(states[-1], a))
    return actions, states


def plan_path(policy: PolicyNet, dynamics: Dynamics, start: State,
              target_age: int) -> list[int]:
    actions, _ = plan_rollout(policy, dynamics, start, target_age)
    return actions


def split_age_gap(gap: int, max_step: int) -> list[int]:
    """Split an age difference into steps of at most `max_step`, largest first."""
    if gap < 0:
        raise ValidationError("inputs must be ordered by age")
    if gap == 0:
        return [0]
    steps = []
    while gap > 0:
        take = min(gap, max_step)
        steps.append(take)
        gap -= take
    return steps


def multi_input_init(inputs: Sequence[tuple[np.ndarray, int]], model: AgingModel
                     ) -> State:
    """Fold several observations of one subject into a single start state.

    Inputs are sorted by age; consecutive inputs are bridged by controller
    steps equal to their age difference (split when it exceeds the largest
    action).  The latent memory alternates transform predictions with the
    next real observation's encoding folded in additively, and the returned
    state decodes the memory at the oldest input's age.  A single input
    reduces exactly to encoding and decoding that observation.
    """
    if len(inputs) < 1:
        raise ValidationError("need at least one input")
    order = sorted(range(len(inputs)), key=lambda i: (int(inputs[i][1]), i))
    max_step = model.n_actions - 1
    obs0, age0 = inputs[order[0]]
    z, _ = flow_forward(model.target_flow, np.asarray(obs0, dtype=np.float64))
    age = int(age0)
    for i in order[1:]:
        obs_next, age_next = inputs[i]
        steps = split_age_gap(int(age_next) - age, max_step)
        for j, step in enumerate(steps):
            x_cur = flow_inverse(model.target_flow, z)
            z_src, _ = flow_forward(model.source_flow, x_cur)
            pred = transform_apply(model.transform, z_src, step)
            if j == len(steps) - 1:
                z_real, _ = flow_forward(model.target_flow,
                                         np.asarray(obs_next, dtype=np.float64))
                z = pred + z_real
            else:
                z = pred
        age = int(age_next)
    return State(flow_inverse(model.target_flow, z), age)
