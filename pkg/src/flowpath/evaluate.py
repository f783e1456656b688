"""Held-out evaluation: path recovery, energy separation, and age fidelity.

The age-fidelity report mirrors an age-estimation experiment: a simple
regressor is fit on real observations only, then scored on real held-out
states and on states synthesized at matching target ages.  The gap between
the two MAEs measures whether synthesized observations are perceived to be
at their bookkept ages.
"""

from __future__ import annotations

import numpy as np

from .errors import InsufficientDataError
from .irl import (
    AgingTrajectory,
    ModelDynamics,
    PolicyNet,
    State,
    estimate_log_partition,
    make_policy_net,
    plan_rollout,
    sample_trajectories,
    sequence_energy,
)
from .transform import AgingModel
from .world import (
    WorldConfig,
    WorldDynamics,
    brute_force_optimal_path,
    ground_truth_cost,
    make_archetype,
)


def _age_features(state: State) -> np.ndarray:
    obs = state.observation
    return np.concatenate([obs, obs * obs, [1.0]])


def fit_age_regressor(states: list[State]) -> np.ndarray:
    """Least-squares readout from (obs, obs²) features to age."""
    if len(states) < 2:
        raise InsufficientDataError("age regressor needs at least 2 states")
    feats = np.stack([_age_features(s) for s in states])
    ages = np.array([float(s.age) for s in states])
    coeff, *_ = np.linalg.lstsq(feats, ages, rcond=None)
    return coeff


def regressor_mae(coeff: np.ndarray, states: list[State]) -> float:
    feats = np.stack([_age_features(s) for s in states])
    ages = np.array([float(s.age) for s in states])
    return float(np.abs(feats @ coeff - ages).mean())


def synthesize_progressions(model: AgingModel, policy: PolicyNet,
                            trajs: list[AgingTrajectory]) -> list[State]:
    """Progress each trajectory's first state to every later demo age."""
    dyn = ModelDynamics(model)
    out: list[State] = []
    for traj in trajs:
        start = traj.states[0]
        for target in [s.age for s in traj.states[1:]]:
            _, states = plan_rollout(policy, dyn, start, target)
            out.append(states[-1])
    return out


def evaluate_age_fidelity(model: AgingModel, policy: PolicyNet,
                          config: WorldConfig, train_states: list[State],
                          heldout_trajs: list[AgingTrajectory]) -> dict:
    """MAE of an age regressor on real vs synthesized held-out states."""
    heldout_states = [s for t in heldout_trajs for s in t.states]
    if not heldout_states:
        raise InsufficientDataError("no held-out states to evaluate")
    coeff = fit_age_regressor(train_states)
    synth_states = synthesize_progressions(model, policy, heldout_trajs)
    mae_train = regressor_mae(coeff, train_states)
    mae_real = regressor_mae(coeff, heldout_states)
    mae_synth = regressor_mae(coeff, synth_states)
    return {
        "mae_train": mae_train,
        "mae_real_heldout": mae_real,
        "mae_synth_heldout": mae_synth,
        "gap": mae_synth - mae_real,
        "normalized_gap": (mae_synth - mae_real) / config.age_span,
        "n_synth_states": len(synth_states),
    }


def path_recovery_report(model: AgingModel, policy: PolicyNet, config: WorldConfig,
                         heldout: list[tuple[int, AgingTrajectory]]) -> dict:
    """Compare planned paths against the ground-truth-optimal oracle paths."""
    dyn_model = ModelDynamics(model)
    matches = 0
    per_class_actions: dict[int, list[int]] = {}
    details = []
    for sid, traj in heldout:
        arch = make_archetype(config, sid)
        start = traj.states[0]
        target = traj.states[-1].age
        planned, _ = plan_rollout(policy, dyn_model, start, target)
        world_dyn = WorldDynamics(config, arch)

        def cost(state: State, action: int, _arch=arch) -> float:
            return ground_truth_cost(state, action, _arch, config)

        optimal = brute_force_optimal_path(
            world_dyn, cost, world_dyn.state_at(start.age), target,
            horizon_cap=config.horizon - 1)
        ok = planned == optimal.actions
        matches += ok
        per_class_actions.setdefault(arch.class_id, []).extend(planned)
        details.append({"subject_id": sid, "class_id": arch.class_id,
                        "planned": planned, "optimal": optimal.actions,
                        "match": bool(ok)})
    modal = {c: int(np.bincount(a).argmax()) for c, a in per_class_actions.items() if a}
    distinct = len(set(modal.values())) == len(modal)
    return {
        "match_rate": matches / len(heldout),
        "modal_action_per_class": {str(k): v for k, v in sorted(modal.items())},
        "distinct_paths_across_classes": bool(distinct and len(modal) >= 2),
        "subjects": details,
    }


def energy_separation_report(model: AgingModel, cost, demos: list[AgingTrajectory],
                             policy: PolicyNet, seed: int,
                             partition_samples: int = 2000) -> dict:
    """Mean learned energy of demos vs uniform-policy rollouts from demo starts,
    plus an importance-sampled log-partition estimate under the learned policy."""
    dyn = ModelDynamics(model)
    uniform = make_policy_net(np.random.default_rng(0), model.dim, model.n_actions,
                              age_low=cost.age_low, age_high=cost.age_high)
    starts = [d.states[0] for d in demos]
    horizons = [max(1, d.horizon) for d in demos]
    rollouts = sample_trajectories(uniform, dyn, starts, horizons,
                                   m=2 * len(demos), seed=seed)
    demo_e = float(np.mean([sequence_energy(t, cost) for t in demos]))
    roll_e = float(np.mean([sequence_energy(t, cost) for t in rollouts]))
    log_z = estimate_log_partition(cost, policy, dyn, starts[0], horizons[0],
                                   n=partition_samples, seed=seed + 1)
    return {
        "demo_energy": demo_e,
        "uniform_rollout_energy": roll_e,
        "margin": roll_e - demo_e,
        "log_partition_estimate": log_z,
        "partition_samples": partition_samples,
    }
