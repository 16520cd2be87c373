"""Replay collection with the dependent behavior policy, shared-batch updates and evaluation."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import agents as ag
from .envs import PointMass, write_trajectories_csv
from .neural import AdamState, adam_step, save_checkpoint
from .numerics import RngStream

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "step", "episode", "alpha",
    "return_dep_mean", "return_dep_std", "return_ind_mean", "return_ind_std",
    "loss_td_dep", "loss_td_ind", "loss_pi_dep", "loss_pi_ind",
)
EXTRA_COLUMNS = ("return_dep_greedy", "return_ind_greedy", "return_ext_mean", "return_ext_greedy")

SAMPLER_DEP = 1
SAMPLER_IND = 2


class ReplayBuffer:
    """Ring buffer of transitions; ``sampler`` tags which policy produced each action."""

    def __init__(self, capacity: int, n_agents: int, obs_dim: int, state_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, n_agents, obs_dim))
        self.state = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, n_agents), dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, n_agents, obs_dim))
        self.next_state = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.sampler = np.zeros(capacity, dtype=np.int8)
        self.inserted = 0

    def __len__(self):
        return min(self.inserted, self.capacity)

    def add(self, obs, state, actions, reward, next_obs, next_state, done, sampler=SAMPLER_DEP):
        i = self.inserted % self.capacity
        self.obs[i] = obs
        self.state[i] = state
        self.actions[i] = actions
        self.reward[i] = reward
        self.next_obs[i] = next_obs
        self.next_state[i] = next_state
        self.done[i] = float(done)
        self.sampler[i] = sampler
        self.inserted += 1

    def sample(self, batch_size: int, rng: RngStream) -> ag.Batch:
        n = len(self)
        if n == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, n, size=batch_size)
        return ag.Batch(self.obs[idx], self.state[idx], self.actions[idx], self.reward[idx],
                        self.next_obs[idx], self.next_state[idx], self.done[idx])


@dataclass
class TemperatureSchedule:
    initial: float = 1.0
    final: float = 0.5
    decay: float = 0.999
    episodes: int = 0

    def __post_init__(self):
        if not (self.initial > 0 and self.final > 0 and 0 < self.decay <= 1):
            raise ValueError("temperatures must be positive and decay in (0, 1]")

    @property
    def value(self) -> float:
        return max(self.final, self.initial * self.decay**self.episodes)

    def advance(self) -> float:
        self.episodes += 1
        return self.value


@dataclass
class Learner:
    """Everything one training loop owns: parameters, optimizer, buffer and streams."""

    params: ag.AgentParameterSet
    optimizer: AdamState
    buffer: ReplayBuffer
    schedule: TemperatureSchedule
    rng: RngStream
    gamma: float
    batch_size: int = 64
    target_interval: int = 200
    chain_weight: float = 0.0
    # "tail": alpha / summed mixer slopes of the agent and its successors (dependent),
    # alpha / own slope (independent); "mixer": alpha / own slope for both; "shared": alpha
    local_temperature: str = "tail"
    policy_objective: str = "forward"
    train_steps: int = 0
    episodes: int = 0
    episodes_since_target: int = 0
    env_steps: int = 0
    sample_rng: RngStream = field(init=False)
    batch_rng: RngStream = field(init=False)
    env_rng: RngStream = field(init=False)

    def __post_init__(self):
        self.sample_rng = self.rng.split("act")
        self.batch_rng = self.rng.split("batch")
        self.env_rng = self.rng.split("env")

    @property
    def alpha(self) -> float:
        return self.schedule.value


def behavior_sample(learner: Learner, obs, greedy=False) -> tuple[ag.JointSample, int]:
    # with the corrections disabled the sequential sampler reduces to independent sampling
    return ag.sequential_sample_joint_action(obs, learner.params, learner.sample_rng, greedy), SAMPLER_DEP


def collect_episode(env, learner: Learner, on_step=None) -> float:
    """Roll out one episode with the behavior policy, storing every transition.

    ``on_step(learner)`` runs after each stored transition (used for per-step
    updates). The temperature schedule advances at the end of the episode.
    """
    step = env.reset(learner.env_rng)
    total = 0.0
    while True:
        obs = np.stack(step.observations)
        sample, tag = behavior_sample(learner, obs)
        a = sample.actions[0]
        nxt = env.step(step.env_state, a, learner.env_rng)
        # a horizon cut is not a terminal state: the TD target keeps bootstrapping
        terminal = nxt.done and not nxt.truncated
        learner.buffer.add(obs, step.state, a, nxt.reward, np.stack(nxt.observations), nxt.state, terminal, tag)
        learner.env_steps += 1
        total += nxt.reward
        if on_step is not None:
            on_step(learner)
        step = nxt
        if nxt.done:
            break
    learner.episodes += 1
    learner.episodes_since_target += 1
    learner.params.alpha = learner.schedule.advance()
    learner.params.alphas = (learner.params.alpha,) * learner.params.n_agents
    return total


def train_step(learner: Learner) -> dict | None:
    """One update of all four losses on a single shared batch; None if the buffer is too small."""
    if len(learner.buffer) < learner.batch_size:
        log.debug("buffer holds %d < %d transitions; skipping update", len(learner.buffer), learner.batch_size)
        return None
    p = learner.params
    alpha = p.alpha
    batch = learner.buffer.sample(learner.batch_size, learner.batch_rng)
    rng = learner.sample_rng
    grad = np.zeros(p.params.size)
    out = {}
    if learner.local_temperature in ("mixer", "tail"):
        tail = learner.local_temperature == "tail"
        alphas_dep = ag.local_temperatures(batch, p, alpha, True, tail=tail) if p.enable_dependency else None
        alphas_ind = ag.local_temperatures(batch, p, alpha, dependent=False)
    else:
        alphas_dep = alphas_ind = (alpha,) * p.n_agents
    if p.enable_dependency:
        nxt_dep = ag.sequential_sample_joint_action(batch.next_obs, p, rng)
        out["loss_td_dep"], g = ag.td_loss_dep(batch, p, nxt_dep, alpha, learner.gamma)
        grad += g
        prefixes = ag.sequential_sample_joint_action(batch.obs, p, rng)
        out["loss_pi_dep"], g = ag.policy_loss_dep(batch, p, prefixes.actions, alphas_dep,
                                                   learner.policy_objective)
        grad += g
        if learner.chain_weight > 0:
            out["loss_chain"], g = ag.chain_consistency_loss(batch, p, alphas_dep)
            grad += learner.chain_weight * g
    else:
        out["loss_td_dep"] = out["loss_pi_dep"] = float("nan")
    nxt_ind = ag.independent_sample_joint_action(batch.next_obs, p, rng)
    out["loss_td_ind"], g = ag.td_loss_ind(batch, p, nxt_ind, alpha, learner.gamma)
    grad += g
    out["loss_pi_ind"], g = ag.policy_loss_ind(batch, p, alphas_ind, learner.policy_objective)
    grad += g
    adam_step(p.params.data, grad, learner.optimizer)
    learner.train_steps += 1
    if learner.episodes_since_target >= learner.target_interval:
        ag.target_update(p)
        learner.episodes_since_target = 0
    return out


def evaluate(params: ag.AgentParameterSet, env, variant: str, episodes: int, rng: RngStream,
             greedy: bool = False, record: bool = False):
    """Run ``episodes`` episodes in lockstep; returns (mean, per-episode returns[, trajectories, final steps]).

    ``dep`` samples agents sequentially with action prefixes; ``ind`` lets each
    agent act from its co-trained independent policy alone; ``ext`` acts from
    the product policy extracted from the dependent policy and critic.
    """
    samplers = {
        "dep": ag.sequential_sample_joint_action,
        "ind": ag.independent_sample_joint_action,
        "ext": ag.extracted_sample_joint_action,
    }
    if variant not in samplers:
        raise ValueError(f"unknown evaluation variant {variant!r}")
    sampler = samplers[variant]
    steps = [env.reset(rng) for _ in range(episodes)]
    returns = np.zeros(episodes)
    active = np.ones(episodes, dtype=bool)
    trajs = [[] for _ in range(episodes)]
    t = 0
    while active.any():
        idx = np.flatnonzero(active)
        obs = np.stack([np.stack(steps[k].observations) for k in idx])
        if variant == "ext":
            st = np.stack([steps[k].state for k in idx])
            acts = sampler(obs, params, rng, greedy, state=st).actions
        else:
            acts = sampler(obs, params, rng, greedy).actions
        for j, k in enumerate(idx):
            nxt = env.step(steps[k].env_state, acts[j], rng)
            returns[k] += nxt.reward
            if record and isinstance(env, PointMass):
                pos = nxt.env_state[0]
                trajs[k].append({"t": t + 1, "x": pos[0], "y": pos[1], "a1": int(acts[j, 0]),
                                 "a2": int(acts[j, 1]), "r": nxt.reward})
            steps[k] = nxt
            if nxt.done:
                active[k] = False
        t += 1
    if record:
        return float(returns.mean()), returns, trajs, steps
    return float(returns.mean()), returns


def _empty_metrics():
    return {k: float("nan") for k in ("loss_td_dep", "loss_td_ind", "loss_pi_dep", "loss_pi_ind")}


def metrics_record(learner: Learner, env, eval_episodes: int, losses: dict, seed_rng: RngStream,
                   extracted: bool = False) -> dict:
    p = learner.params
    rng = seed_rng.split(f"eval{learner.episodes}")
    _, dep = evaluate(p, env, "dep", eval_episodes, rng.split("dep"))
    _, ind = evaluate(p, env, "ind", eval_episodes, rng.split("ind"))
    dep_g, _ = evaluate(p, env, "dep", eval_episodes, rng.split("dep_greedy"), greedy=True)
    ind_g, _ = evaluate(p, env, "ind", eval_episodes, rng.split("ind_greedy"), greedy=True)
    ext = ext_g = float("nan")
    if extracted:
        ext, _ = evaluate(p, env, "ext", eval_episodes, rng.split("ext"))
        ext_g, _ = evaluate(p, env, "ext", eval_episodes, rng.split("ext_greedy"), greedy=True)
    row = {
        "step": learner.train_steps, "episode": learner.episodes, "alpha": learner.alpha,
        "return_dep_mean": float(dep.mean()), "return_dep_std": float(dep.std()),
        "return_ind_mean": float(ind.mean()), "return_ind_std": float(ind.std()),
        **losses,
        "return_dep_greedy": dep_g, "return_ind_greedy": ind_g,
        "return_ext_mean": ext, "return_ext_greedy": ext_g,
    }
    return row


# --- experiments ------------------------------------------------------------------

def build_learner(config, env, seed: int) -> Learner:
    from .config import agent_config_for

    root = RngStream(seed)
    acfg = agent_config_for(config, env)
    params = ag.AgentParameterSet(acfg, root.split("init"), alpha=config.alpha_init)
    optimizer = AdamState.zeros(params.params.size, lr=config.lr)
    buffer = ReplayBuffer(config.buffer_capacity, env.n_agents, env.obs_dim, env.state_dim)
    schedule = TemperatureSchedule(config.alpha_init, config.alpha_final, config.alpha_decay)
    return Learner(params, optimizer, buffer, schedule, root.split("train"), gamma=env.gamma,
                   batch_size=config.batch_size, target_interval=config.target_interval,
                   chain_weight=config.chain_consistency, local_temperature=config.local_temperature,
                   policy_objective=config.policy_objective)


def train_seed(config, seed: int, out_dir: Path | None = None) -> dict:
    """Train one seed; returns {"seed", "rows", "learner"}; writes CSV/checkpoint when out_dir is set."""
    from .config import make_env_from_config

    env = make_env_from_config(config)
    learner = build_learner(config, env, seed)
    eval_rng = RngStream(seed).split("evaluation")
    rows = []
    last_losses = _empty_metrics()
    per_step = config.updates_per_step > 0

    def on_step(lr: Learner):
        if lr.env_steps > config.warmup_steps:
            for _ in range(config.updates_per_step):
                res = train_step(lr)
                if res:
                    last_losses.update(res)

    for ep in range(1, config.episodes + 1):
        collect_episode(env, learner, on_step if per_step else None)
        if not per_step:
            for _ in range(config.updates_per_episode):
                res = train_step(learner)
                if res:
                    last_losses.update(res)
        if ep % config.eval_interval == 0 or ep == config.episodes:
            rows.append(metrics_record(learner, env, config.eval_episodes, dict(last_losses), eval_rng,
                                       extracted=config.evaluate_extracted))
    result = {"seed": seed, "rows": rows, "learner": learner}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out_dir / f"metrics_seed{seed}.csv", rows)
        save_learner_checkpoint(out_dir / f"seed{seed}.ckpt", learner, config)
        if isinstance(env, PointMass):
            _, _, trajs, _ = evaluate(learner.params, env, "dep", config.eval_episodes,
                                      eval_rng.split("trajectories"), greedy=True, record=True)
            write_trajectories_csv(out_dir / f"trajectories_seed{seed}.csv", trajs)
    return result


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics_csv(path, rows: list[dict]) -> None:
    cols = METRICS_COLUMNS + EXTRA_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def aggregate_rows(per_seed: list[list[dict]]) -> list[dict]:
    """Mean/std across seeds at each evaluation point."""
    n_points = min(len(r) for r in per_seed)
    out = []
    value_cols = [c for c in METRICS_COLUMNS + EXTRA_COLUMNS if c not in ("step", "episode")]
    for k in range(n_points):
        pts = [r[k] for r in per_seed]
        row = {"episode": pts[0]["episode"], "n_seeds": len(pts)}
        for c in value_cols:
            vals = np.array([p[c] for p in pts], dtype=np.float64)
            row[f"{c}_mean"] = float(np.mean(vals))
            row[f"{c}_std"] = float(np.std(vals))
        out.append(row)
    return out


def write_aggregate_csv(path, rows: list[dict]) -> None:
    if not rows:
        return
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])


def save_learner_checkpoint(path, learner: Learner, config) -> None:
    p = learner.params
    manifest = {
        "ordering": list(p.ordering),
        "alpha": p.alpha,
        "alphas": list(p.alphas),
        "mixer_variant": p.config.mixer.variant,
        "enable_dependency": p.enable_dependency,
        "actions_per_agent": list(p.config.actions_per_agent),
        "config": config.to_dict(),
    }
    save_checkpoint(path, p.params, manifest, extra={"target": p.target})


def _train_seed_job(args):
    config, seed, out_dir = args
    res = train_seed(config, seed, out_dir)
    return seed, res["rows"]


def run_experiment(config, out_dir=None) -> dict:
    """Train every configured seed, then write per-seed and aggregate metrics."""
    out_dir = Path(out_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.cfg").write_text(config.dumps())
    jobs = [(config, s, out_dir) for s in config.seeds]
    t0 = time.perf_counter()
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = dict(pool.map(_train_seed_job, jobs))
    else:
        results = dict(_train_seed_job(j) for j in jobs)
    per_seed = [results[s] for s in config.seeds]
    write_aggregate_csv(out_dir / "aggregate.csv", aggregate_rows(per_seed))
    summary = {
        "seeds": list(config.seeds),
        "final": {str(s): {c: results[s][-1][c] for c in
                           ("return_dep_mean", "return_ind_mean", "return_dep_greedy", "return_ind_greedy",
                            "return_ext_greedy")}
                  for s in config.seeds},
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    log.info("experiment finished in %.1fs", time.perf_counter() - t0)
    return {"out_dir": out_dir, "per_seed": results, "summary": summary}


def load_agent(path):
    """Rebuild (config, env, params) from a checkpoint written by ``train_seed``."""
    from .config import ExperimentConfig, agent_config_for, make_env_from_config
    from .neural import load_checkpoint

    _, manifest, _ = load_checkpoint(path)
    raw = dict(manifest["config"])
    raw["seeds"] = ",".join(str(s) for s in raw["seeds"])
    config = ExperimentConfig.from_pairs({k: str(v) for k, v in raw.items()})
    env = make_env_from_config(config)
    params = ag.AgentParameterSet(agent_config_for(config, env), RngStream(0), alpha=manifest["alpha"],
                                  alphas=manifest["alphas"])
    loaded, _, extra = load_checkpoint(path, expected=params.params)
    params.params.data = loaded.data
    params.target = extra["target"]
    params.enable_dependency = manifest["enable_dependency"]
    return config, env, params


def evaluate_joint_frequencies(params: ag.AgentParameterSet, env, episodes: int, rng: RngStream,
                               variant: str = "dep") -> np.ndarray:
    """Empirical first-step joint-action frequencies over ``episodes`` sampled episodes."""
    samplers = {"dep": ag.sequential_sample_joint_action, "ind": ag.independent_sample_joint_action}
    K = env.actions_per_agent
    steps = [env.reset(rng) for _ in range(episodes)]
    obs = np.stack([np.stack(s.observations) for s in steps])
    acts = samplers[variant](obs, params, rng).actions
    counts = np.zeros(K)
    np.add.at(counts, tuple(acts.T), 1.0)
    return counts / episodes
