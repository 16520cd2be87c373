"""MACPF agents: independent policies/critics, dependency corrections and the mixer.

Every agent ``i`` owns four networks stored under ``agent{i}/<role>/`` in one
flat :class:`ParameterArray`:

* ``policy_ind``  - logits of the independent local policy (theta_i)
* ``policy_corr`` - dependency policy correction logits (phi_i)
* ``critic_ind``  - independent local critic (psi_i)
* ``critic_corr`` - dependency critic correction (omega_i)

plus the shared ``mixer/`` hypernetworks (Theta). The dependent local policy
is ``softmax(policy_ind + policy_corr)``; the dependent local critic is
``critic_ind + critic_corr``. Corrections see the observation concatenated
with the one-hot actions of agents earlier in the ordering.

Losses return ``(loss, grad)`` where ``grad`` spans the whole parameter vector
and is exactly zero outside the slices the loss is allowed to update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .neural import MLPSpec, ParameterArray, init_mlp, mlp_backward, mlp_forward
from .numerics import RngStream, log_softmax, sample_categorical_rows, softmax

ROLES = ("policy_ind", "policy_corr", "critic_ind", "critic_corr")
CRITIC_ROLES = ("critic_ind", "critic_corr")
MIXER_VARIANTS = ("linear", "nonlinear")


@dataclass(frozen=True)
class MixerSpec:
    variant: str = "linear"
    hyper_hidden: int = 64
    embed: int = 32  # hidden mixing width of the nonlinear variant

    def __post_init__(self):
        if self.variant not in MIXER_VARIANTS:
            raise ValueError(f"unknown mixer variant {self.variant!r}")


@dataclass(frozen=True)
class AgentConfig:
    actions_per_agent: tuple[int, ...]
    obs_dim: int
    state_dim: int
    hidden: int = 64
    correction_hidden: int = 64
    activation: str = "relu"
    correction_activation: str = "relu"
    mixer: MixerSpec = field(default_factory=MixerSpec)
    ordering: tuple[int, ...] | None = None
    enable_dependency: bool = True
    zero_init_corrections: bool = False

    @property
    def n_agents(self) -> int:
        return len(self.actions_per_agent)


class AgentParameterSet:
    def __init__(self, config: AgentConfig, rng: RngStream, alpha: float = 1.0, alphas=None):
        self.config = config
        n = config.n_agents
        self.ordering = tuple(range(n)) if config.ordering is None else tuple(config.ordering)
        if sorted(self.ordering) != list(range(n)):
            raise ValueError(f"ordering {self.ordering} is not a permutation")
        self.position = {agent: k for k, agent in enumerate(self.ordering)}
        K = config.actions_per_agent
        # one-hot slot of each ordered position inside the prefix encoding
        self.slot_offsets = np.concatenate([[0], np.cumsum([K[a] for a in self.ordering])]).astype(int)
        self.prefix_width = int(self.slot_offsets[n - 1])
        self.enable_dependency = config.enable_dependency
        self.alpha = float(alpha)
        self.alphas = tuple(alphas) if alphas is not None else (self.alpha,) * n

        self.specs: dict[str, MLPSpec] = {}
        self.params = ParameterArray()
        init = []
        for i in range(n):
            d, d_corr = config.obs_dim, config.obs_dim + self.prefix_width
            for role, (width, hid, act) in {
                "policy_ind": (d, config.hidden, config.activation),
                "policy_corr": (d_corr, config.correction_hidden, config.correction_activation),
                "critic_ind": (d, config.hidden, config.activation),
                "critic_corr": (d_corr, config.correction_hidden, config.correction_activation),
            }.items():
                zero = config.zero_init_corrections and role.endswith("corr")
                self._add_net(f"agent{i}/{role}", MLPSpec((width, hid, K[i]), act), rng, init, zero)
        m, sd, hh = config.mixer, config.state_dim, config.mixer.hyper_hidden
        if m.variant == "linear":
            self._add_net("mixer/hyper_w", MLPSpec((sd, hh, n)), rng, init)
            self._add_net("mixer/hyper_v", MLPSpec((sd, hh, 1)), rng, init)
        else:
            self._add_net("mixer/hyper_w1", MLPSpec((sd, hh, n * m.embed)), rng, init)
            self._add_net("mixer/hyper_b1", MLPSpec((sd, m.embed)), rng, init)
            self._add_net("mixer/hyper_w2", MLPSpec((sd, hh, m.embed)), rng, init)
            self._add_net("mixer/hyper_v", MLPSpec((sd, hh, 1)), rng, init)
        self.params.data = np.concatenate(init)
        self.target = self.params.data.copy()
        self.critic_mask = self.params.mask([f"agent{i}/{r}" for i in range(n) for r in CRITIC_ROLES] + ["mixer/"])

    def _add_net(self, name, spec, rng, init, zero=False):
        self.specs[name] = spec
        self.params.add(name, (spec.n_params,))
        init.append(init_mlp(spec, rng.split(name), zero_output=zero))

    @property
    def data(self) -> np.ndarray:
        return self.params.data

    @property
    def n_agents(self) -> int:
        return self.config.n_agents

    def net(self, name: str, x, data: np.ndarray | None = None):
        src = self.params.data if data is None else data
        return mlp_forward(self.specs[name], src[self.params.span(name)], x)

    def net_backward(self, name: str, cache, grad_out, grad: np.ndarray, data: np.ndarray | None = None):
        src = self.params.data if data is None else data
        g, _ = mlp_backward(self.specs[name], src[self.params.span(name)], cache, grad_out)
        grad[self.params.span(name)] += g

    def mask(self, roles, mixer: bool = False, agents=None) -> np.ndarray:
        agents = range(self.n_agents) if agents is None else agents
        prefixes = [f"agent{i}/{r}" for i in agents for r in roles] + (["mixer/"] if mixer else [])
        return self.params.mask(prefixes)

    def clone(self) -> "AgentParameterSet":
        out = object.__new__(AgentParameterSet)
        out.__dict__.update(self.__dict__)
        out.params = self.params.copy()
        out.target = self.target.copy()
        return out


# --- encodings and local heads ---------------------------------------------------

def prefix_encoding(ps: AgentParameterSet, actions: np.ndarray, agent: int) -> np.ndarray:
    """One-hot actions of agents ordered before ``agent``; zero-padded to full width."""
    actions = np.atleast_2d(actions)
    B = actions.shape[0]
    enc = np.zeros((B, ps.prefix_width))
    for k in range(ps.position[agent]):
        other = ps.ordering[k]
        enc[np.arange(B), ps.slot_offsets[k] + actions[:, other]] = 1.0
    return enc


def _corr_input(obs_i: np.ndarray, prefix: np.ndarray) -> np.ndarray:
    return np.concatenate([obs_i, prefix], axis=1)


def _logits(ps, agent, obs_i, prefix, data=None):
    """(independent logits, correction logits, caches)."""
    z, cz = ps.net(f"agent{agent}/policy_ind", obs_i, data)
    if ps.enable_dependency:
        b, cb = ps.net(f"agent{agent}/policy_corr", _corr_input(obs_i, prefix), data)
    else:
        b, cb = np.zeros_like(z), None
    return z, b, cz, cb


def ind_policy_distribution(obs_i, params: AgentParameterSet, agent: int = 0) -> np.ndarray:
    z, _ = params.net(f"agent{agent}/policy_ind", np.atleast_2d(obs_i))
    p = softmax(z, axis=-1)
    return p[0] if np.ndim(obs_i) == 1 else p


def dep_policy_distribution(obs_i, prefix, params: AgentParameterSet, agent: int = 0) -> np.ndarray:
    """Softmax over independent logits plus the dependency correction logits."""
    squeeze = np.ndim(obs_i) == 1
    obs_i, prefix = np.atleast_2d(obs_i), np.atleast_2d(prefix)
    if prefix.shape[1] != params.prefix_width:
        raise ValueError(f"prefix width {prefix.shape[1]} != {params.prefix_width}")
    z, b, _, _ = _logits(params, agent, obs_i, prefix)
    p = softmax(z + b, axis=-1)
    return p[0] if squeeze else p


def _local_qs(ps, agent, obs_i, prefix, data=None):
    q, cq = ps.net(f"agent{agent}/critic_ind", obs_i, data)
    if ps.enable_dependency:
        c, cc = ps.net(f"agent{agent}/critic_corr", _corr_input(obs_i, prefix), data)
    else:
        c, cc = np.zeros_like(q), None
    return q, c, cq, cc


def dep_local_q(obs_i, prefix, action, params: AgentParameterSet, agent: int = 0):
    """``Q_ind(obs, a) + c_dep(obs, prefix, a)``; ``action=None`` returns the full row."""
    squeeze = np.ndim(obs_i) == 1
    q, c, _, _ = _local_qs(params, agent, np.atleast_2d(obs_i), np.atleast_2d(prefix))
    row = q + c
    if action is None:
        return row[0] if squeeze else row
    action = np.atleast_1d(action)
    out = row[np.arange(row.shape[0]), action]
    return float(out[0]) if squeeze else out


def ind_local_q(obs_i, action, params: AgentParameterSet, agent: int = 0):
    squeeze = np.ndim(obs_i) == 1
    q, _ = params.net(f"agent{agent}/critic_ind", np.atleast_2d(obs_i))
    if action is None:
        return q[0] if squeeze else q
    out = q[np.arange(q.shape[0]), np.atleast_1d(action)]
    return float(out[0]) if squeeze else out


# --- mixer -------------------------------------------------------------------------

def mixer_forward(qs: np.ndarray, state: np.ndarray, params: AgentParameterSet, data=None):
    """Mix per-agent values (B, N) into Q_jt (B,) conditioned on the state (B, sd)."""
    qs, state = np.atleast_2d(qs), np.atleast_2d(state)
    if qs.shape[1] != params.n_agents:
        raise ValueError(f"expected {params.n_agents} agent values, got {qs.shape[1]}")
    if state.shape[1] != params.config.state_dim:
        raise ValueError(f"state width {state.shape[1]} != {params.config.state_dim}")
    if params.config.mixer.variant == "linear":
        hw, cw = params.net("mixer/hyper_w", state, data)
        hv, cv = params.net("mixer/hyper_v", state, data)
        w = np.abs(hw)
        qjt = (w * qs).sum(1) + hv[:, 0]
        return qjt, ("linear", qs, hw, cw, cv)
    E = params.config.mixer.embed
    B, N = qs.shape
    h1, c1 = params.net("mixer/hyper_w1", state, data)
    b1, cb1 = params.net("mixer/hyper_b1", state, data)
    h2, c2 = params.net("mixer/hyper_w2", state, data)
    hv, cv = params.net("mixer/hyper_v", state, data)
    W1 = np.abs(h1).reshape(B, N, E)
    pre = np.einsum("bn,bne->be", qs, W1) + b1
    hidden = np.where(pre > 0, pre, np.expm1(np.minimum(pre, 0.0)))
    qjt = (hidden * np.abs(h2)).sum(1) + hv[:, 0]
    return qjt, ("nonlinear", qs, h1, c1, cb1, h2, c2, cv, W1, pre, hidden)


def mixer_backward(params: AgentParameterSet, cache, g: np.ndarray, grad: np.ndarray, data=None) -> np.ndarray:
    """Accumulate dL/dTheta into ``grad`` and return dL/dqs (B, N) for upstream g = dL/dQ_jt."""
    if cache[0] == "linear":
        _, qs, hw, cw, cv = cache
        params.net_backward("mixer/hyper_w", cw, g[:, None] * np.sign(hw) * qs, grad, data)
        params.net_backward("mixer/hyper_v", cv, g[:, None], grad, data)
        return g[:, None] * np.abs(hw)
    _, qs, h1, c1, cb1, h2, c2, cv, W1, pre, hidden = cache
    B, N, E = W1.shape
    params.net_backward("mixer/hyper_w2", c2, g[:, None] * np.sign(h2) * hidden, grad, data)
    params.net_backward("mixer/hyper_v", cv, g[:, None], grad, data)
    d_hidden = g[:, None] * np.abs(h2)
    d_pre = d_hidden * np.where(pre > 0, 1.0, hidden + 1.0)
    params.net_backward("mixer/hyper_b1", cb1, d_pre, grad, data)
    dW1 = qs[:, :, None] * d_pre[:, None, :]
    params.net_backward("mixer/hyper_w1", c1, (dW1 * np.sign(h1).reshape(B, N, E)).reshape(B, N * E), grad, data)
    return np.einsum("be,bne->bn", d_pre, W1)


# --- sampling ---------------------------------------------------------------------

@dataclass
class JointSample:
    actions: np.ndarray  # (B, N)
    log_prob: np.ndarray  # (B,) joint log-probability
    probs: list  # per-agent (B, K_i) distributions, indexed by agent id


def sequential_sample_joint_action(obs: np.ndarray, params: AgentParameterSet, rng: RngStream | None,
                                   greedy: bool = False) -> JointSample:
    """Sample agents one by one in the ordering, each conditioned on earlier choices.

    ``obs`` has shape (B, N, obs_dim) (or (N, obs_dim) for a single step).
    """
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 2:
        obs = obs[None]
    B, N = obs.shape[:2]
    actions = np.zeros((B, N), dtype=np.int64)
    logp = np.zeros(B)
    probs = [None] * N
    for agent in params.ordering:
        prefix = prefix_encoding(params, actions, agent)
        z, b, _, _ = _logits(params, agent, obs[:, agent], prefix)
        lp = log_softmax(z + b)
        p = np.exp(lp)
        a = np.argmax(lp, axis=1) if greedy else sample_categorical_rows(p, rng)
        actions[:, agent] = a
        logp += lp[np.arange(B), a]
        probs[agent] = p
    return JointSample(actions, logp, probs)


def independent_sample_joint_action(obs: np.ndarray, params: AgentParameterSet, rng: RngStream | None,
                                    greedy: bool = False) -> JointSample:
    """Each agent samples from its own independent policy; no actions are shared."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 2:
        obs = obs[None]
    B, N = obs.shape[:2]
    actions = np.zeros((B, N), dtype=np.int64)
    logp = np.zeros(B)
    probs = [None] * N
    for agent in range(N):
        z, _ = params.net(f"agent{agent}/policy_ind", obs[:, agent])
        lp = log_softmax(z)
        p = np.exp(lp)
        a = np.argmax(lp, axis=1) if greedy else sample_categorical_rows(p, rng)
        actions[:, agent] = a
        logp += lp[np.arange(B), a]
        probs[agent] = p
    return JointSample(actions, logp, probs)


def joint_dep_distribution(obs_single: np.ndarray, params: AgentParameterSet) -> np.ndarray:
    """Exhaustive dependent joint distribution for one step (small action spaces only)."""
    K = params.config.actions_per_agent
    grid = np.array(np.unravel_index(np.arange(int(np.prod(K))), K)).T  # (A, N)
    obs = np.repeat(np.asarray(obs_single, dtype=np.float64)[None], grid.shape[0], axis=0)
    logp = np.zeros(grid.shape[0])
    for agent in params.ordering:
        prefix = prefix_encoding(params, grid, agent)
        z, b, _, _ = _logits(params, agent, obs[:, agent], prefix)
        logp += log_softmax(z + b)[np.arange(grid.shape[0]), grid[:, agent]]
    return np.exp(logp).reshape(K)


def joint_ind_distribution(obs_single: np.ndarray, params: AgentParameterSet) -> np.ndarray:
    joint = np.ones(())
    for agent in range(params.n_agents):
        joint = np.multiply.outer(joint, ind_policy_distribution(obs_single[agent], params, agent))
    return joint


# --- losses -----------------------------------------------------------------------

@dataclass
class Batch:
    obs: np.ndarray  # (B, N, d)
    state: np.ndarray  # (B, sd)
    actions: np.ndarray  # (B, N)
    reward: np.ndarray  # (B,)
    next_obs: np.ndarray
    next_state: np.ndarray
    done: np.ndarray  # (B,) float 0/1

    def __len__(self):
        return self.reward.shape[0]


def _gather(rows: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return rows[np.arange(rows.shape[0]), idx]


def _mixed_target(ps, batch, next_sample: JointSample, alpha, gamma, dependent: bool) -> np.ndarray:
    """r + gamma * (1 - done) * (target Q_jt(s', a') - alpha * log pi_jt(a'|s'))."""
    live = 1.0 - batch.done
    if not np.any(live):
        return batch.reward.astype(np.float64).copy()
    B, N = next_sample.actions.shape
    qs = np.zeros((B, N))
    for i in range(N):
        if dependent:
            prefix = prefix_encoding(ps, next_sample.actions, i)
            q, c, _, _ = _local_qs(ps, i, batch.next_obs[:, i], prefix, ps.target)
            row = q + c
        else:
            row, _ = ps.net(f"agent{i}/critic_ind", batch.next_obs[:, i], ps.target)
        qs[:, i] = _gather(row, next_sample.actions[:, i])
    q_next, _ = mixer_forward(qs, batch.next_state, ps, ps.target)
    return batch.reward + gamma * live * (q_next - alpha * next_sample.log_prob)


def td_loss_dep(batch: Batch, params: AgentParameterSet, next_sample: JointSample, alpha: float,
                gamma: float) -> tuple[float, np.ndarray]:
    """TD loss of the dependent joint critic; gradient only on critic corrections and mixer.

    ``next_sample`` holds a' drawn from the current dependent policies at s'.
    """
    grad = np.zeros(params.params.size)
    if not params.enable_dependency:
        return 0.0, grad
    if len(batch) == 0:
        raise ValueError("empty batch")
    y = _mixed_target(params, batch, next_sample, alpha, gamma, dependent=True)
    B, N = batch.actions.shape
    qs = np.zeros((B, N))
    caches = []
    for i in range(N):
        prefix = prefix_encoding(params, batch.actions, i)
        q, c, _, cc = _local_qs(params, i, batch.obs[:, i], prefix)
        qs[:, i] = _gather(q + c, batch.actions[:, i])
        caches.append((cc, c.shape))
    qjt, mcache = mixer_forward(qs, batch.state, params)
    err = qjt - y
    loss = float(np.mean(err**2))
    dq = mixer_backward(params, mcache, 2.0 * err / B, grad)
    for i, (cc, shape) in enumerate(caches):
        up = np.zeros(shape)
        up[np.arange(B), batch.actions[:, i]] = dq[:, i]
        params.net_backward(f"agent{i}/critic_corr", cc, up, grad)
    return loss, grad


def td_loss_ind(batch: Batch, params: AgentParameterSet, next_sample: JointSample, alpha: float,
                gamma: float) -> tuple[float, np.ndarray]:
    """TD loss of the independent joint critic; gradient only on independent critics and mixer."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    grad = np.zeros(params.params.size)
    y = _mixed_target(params, batch, next_sample, alpha, gamma, dependent=False)
    B, N = batch.actions.shape
    qs = np.zeros((B, N))
    caches = []
    for i in range(N):
        q, cq = params.net(f"agent{i}/critic_ind", batch.obs[:, i])
        qs[:, i] = _gather(q, batch.actions[:, i])
        caches.append((cq, q.shape))
    qjt, mcache = mixer_forward(qs, batch.state, params)
    err = qjt - y
    loss = float(np.mean(err**2))
    dq = mixer_backward(params, mcache, 2.0 * err / B, grad)
    for i, (cq, shape) in enumerate(caches):
        up = np.zeros(shape)
        up[np.arange(B), batch.actions[:, i]] = dq[:, i]
        params.net_backward(f"agent{i}/critic_ind", cq, up, grad)
    return loss, grad


def chain_consistency_loss(batch: Batch, params: AgentParameterSet, alphas=None) -> tuple[float, np.ndarray]:
    """Pull each dependent local critic toward the soft value of the next agent in the ordering.

    For ordered position k < N-1 the row Q_dep(o, a_<k, .) is regressed on
    ``alpha_next * logsumexp(Q_dep_next(o, a_<k, a_k, .) / alpha_next)`` for every
    candidate a_k (prefix a_<k taken from the batch). The regression target is
    held fixed; gradient flows only into the critic corrections. This pins the
    split between agents that the mixed TD loss leaves free.
    """
    grad = np.zeros(params.params.size)
    if not params.enable_dependency or params.n_agents < 2:
        return 0.0, grad
    alphas = params.alphas if alphas is None else alphas
    K = params.config.actions_per_agent
    B = len(batch)
    total = 0.0
    for k, agent in enumerate(params.ordering[:-1]):
        nxt = params.ordering[k + 1]
        Ka = K[agent]
        prefix = prefix_encoding(params, batch.actions, agent)
        q, c, _, cc = _local_qs(params, agent, batch.obs[:, agent], prefix)
        # candidate prefixes for the next agent: batch prefix plus each possible a_agent
        acts = np.repeat(batch.actions, Ka, axis=0)
        acts[:, agent] = np.tile(np.arange(Ka), B)
        obs_n = np.repeat(batch.obs[:, nxt], Ka, axis=0)
        qn, cn, _, _ = _local_qs(params, nxt, obs_n, prefix_encoding(params, acts, nxt))
        a_next = np.broadcast_to(_agent_alpha(alphas, nxt), (B,))
        a_n = np.repeat(a_next, Ka)
        row = (qn + cn) / a_n[:, None]
        m = row.max(1)
        lse = (m + np.log(np.exp(row - m[:, None]).sum(1))).reshape(B, Ka)
        err = (q + c) - a_next[:, None] * lse
        total += float(np.mean((err**2).sum(1)))
        params.net_backward(f"agent{agent}/critic_corr", cc, 2.0 * err / B, grad)
    return total, grad


POLICY_OBJECTIVES = ("reverse", "forward")


def _soft_kl_grad(logits: np.ndarray, q: np.ndarray, alpha_i, objective: str = "reverse"):
    """Per-row projection loss onto softmax(Q / alpha_i) and its gradient w.r.t. logits.

    ``reverse``: sum_a pi(a) (alpha log pi(a) - Q(a)), i.e. alpha * KL(pi || target) up to a constant.
    ``forward``: KL(target || pi). Same minimizer, but the gradient ``pi - target`` does not
    vanish on actions the policy has already pushed to near-zero probability.
    ``alpha_i`` is a scalar or one temperature per row.
    """
    a = np.reshape(np.asarray(alpha_i, dtype=np.float64), (-1, 1))
    lp = log_softmax(logits)
    p = np.exp(lp)
    if objective == "forward":
        lt = log_softmax(q / a)
        t = np.exp(lt)
        return (t * (lt - lp)).sum(1), p - t
    if objective != "reverse":
        raise ValueError(f"unknown policy objective {objective!r}")
    inner = a * lp - q
    per_row = (p * inner).sum(1)
    return per_row, p * (inner - per_row[:, None])


def _agent_alpha(alphas, i: int):
    """Column ``i`` of a (B, N) temperature array, or the i-th scalar of a sequence."""
    arr = np.asarray(alphas, dtype=np.float64)
    return arr[:, i] if arr.ndim == 2 else float(arr[i])


def mixer_slopes(qs: np.ndarray, state: np.ndarray, params: AgentParameterSet) -> np.ndarray:
    """dQ_jt/dQ_i at (qs, state), shape (B, N); equals |w_i(s)| for the linear mixer."""
    qs = np.atleast_2d(qs)
    _, cache = mixer_forward(qs, state, params)
    scratch = np.zeros(params.params.size)
    return mixer_backward(params, cache, np.ones(qs.shape[0]), scratch)


def local_temperatures(batch: Batch, params: AgentParameterSet, alpha: float, dependent: bool = True,
                       floor: float = 1e-2, tail: bool = False) -> np.ndarray:
    """Per-sample agent temperatures alpha / (dQ_jt/dQ_i), shape (B, N).

    Matches the joint Boltzmann policy at temperature ``alpha`` to local
    policies over mixer-scaled utilities. With ``tail`` each agent divides by
    the summed slopes of itself and every agent after it in the ordering; for
    a linear mixer and chain-consistent dependent critics this makes the
    sequential joint policy exactly Boltzmann in Q_jt at ``alpha``.
    Treated as constants by the losses.
    """
    B, N = batch.actions.shape
    qs = np.zeros((B, N))
    for i in range(N):
        prefix = prefix_encoding(params, batch.actions, i)
        q, c, _, _ = _local_qs(params, i, batch.obs[:, i], prefix)
        row = q + c if dependent else q
        qs[:, i] = _gather(row, batch.actions[:, i])
    slopes = mixer_slopes(qs, batch.state, params)
    if tail:
        order = list(params.ordering)
        summed = np.cumsum(slopes[:, order[::-1]], axis=1)[:, ::-1]
        slopes = np.empty_like(summed)
        slopes[:, order] = summed
    return alpha / np.maximum(slopes, floor)


def policy_loss_dep(batch: Batch, params: AgentParameterSet, prefix_actions: np.ndarray,
                    alphas=None, objective: str = "reverse") -> tuple[float, np.ndarray]:
    """KL projection of each dependent local policy onto exp(Q_dep_i / alpha_i).

    ``prefix_actions`` (B, N) are drawn from the current dependent policies;
    agent i only reads the entries of agents ordered before it. The expectation
    over a_i is taken exactly. Gradient flows only into the policy corrections.
    """
    grad = np.zeros(params.params.size)
    if not params.enable_dependency:
        return 0.0, grad
    alphas = params.alphas if alphas is None else alphas
    B = len(batch)
    total = 0.0
    for i in range(params.n_agents):
        prefix = prefix_encoding(params, prefix_actions, i)
        z, b, _, cb = _logits(params, i, batch.obs[:, i], prefix)
        q, c, _, _ = _local_qs(params, i, batch.obs[:, i], prefix)
        per_row, g_logits = _soft_kl_grad(z + b, q + c, _agent_alpha(alphas, i), objective)
        total += per_row.mean()
        params.net_backward(f"agent{i}/policy_corr", cb, g_logits / B, grad)
    return float(total), grad


def policy_loss_ind(batch: Batch, params: AgentParameterSet, alphas=None,
                    objective: str = "reverse") -> tuple[float, np.ndarray]:
    """KL projection of each independent local policy onto exp(Q_ind_i / alpha_i); updates theta only."""
    alphas = params.alphas if alphas is None else alphas
    grad = np.zeros(params.params.size)
    B = len(batch)
    total = 0.0
    for i in range(params.n_agents):
        z, cz = params.net(f"agent{i}/policy_ind", batch.obs[:, i])
        q, _ = params.net(f"agent{i}/critic_ind", batch.obs[:, i])
        per_row, g_logits = _soft_kl_grad(z, q, _agent_alpha(alphas, i), objective)
        total += per_row.mean()
        params.net_backward(f"agent{i}/policy_ind", cz, g_logits / B, grad)
    return float(total), grad


# --- target networks and variants ----------------------------------------------------

def target_update(params: AgentParameterSet) -> AgentParameterSet:
    """Hard copy of the live critic-path parameters into the target copy."""
    params.target[params.critic_mask] = params.params.data[params.critic_mask]
    return params


def control_variant_configure(params: AgentParameterSet, enable_dependency: bool) -> AgentParameterSet:
    """Toggle the dependency corrections; disabled corrections contribute exactly zero."""
    params.enable_dependency = bool(enable_dependency)
    return params


# --- independent counterpart of the learned dependent policy ----------------------------

def joint_dep_q_table(obs_single: np.ndarray, params: AgentParameterSet, state=None) -> np.ndarray:
    """Q_jt^dep for every joint action at one step, shaped like the joint action grid."""
    K = params.config.actions_per_agent
    grid = np.array(np.unravel_index(np.arange(int(np.prod(K))), K)).T
    A = grid.shape[0]
    obs = np.repeat(np.asarray(obs_single, dtype=np.float64)[None], A, axis=0)
    qs = np.zeros((A, params.n_agents))
    for i in range(params.n_agents):
        q, c, _, _ = _local_qs(params, i, obs[:, i], prefix_encoding(params, grid, i))
        qs[:, i] = _gather(q + c, grid[:, i])
    st = np.ones((A, params.config.state_dim)) if state is None else np.repeat(np.atleast_2d(state), A, axis=0)
    qjt, _ = mixer_forward(qs, st, params)
    return qjt.reshape(K)


def extracted_independent_policy(obs_single: np.ndarray, params: AgentParameterSet, state=None) -> list:
    """Per-agent product policy with the same expected Q_jt^dep as the dependent joint policy.

    Exhaustive over joint actions, so only for small action spaces.
    """
    from .tabular import independent_counterpart

    q = joint_dep_q_table(obs_single, params, state)
    dep = joint_dep_distribution(obs_single, params)
    return independent_counterpart(q.ravel(), dep.ravel(), params.config.actions_per_agent)


def extracted_sample_joint_action(obs: np.ndarray, params: AgentParameterSet, rng: RngStream | None,
                                  greedy: bool = False, state=None) -> JointSample:
    """Sample from the extracted product policy, one state at a time."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 2:
        obs = obs[None]
    B, N = obs.shape[:2]
    states = [None] * B if state is None else np.atleast_2d(state)
    actions = np.zeros((B, N), dtype=np.int64)
    logp = np.zeros(B)
    probs = [np.zeros((B, k)) for k in params.config.actions_per_agent]
    cache = {}
    for b in range(B):
        key = (obs[b].tobytes(), None if states[b] is None else np.asarray(states[b]).tobytes())
        if key not in cache:
            cache[key] = extracted_independent_policy(obs[b], params, states[b])
        for i, p in enumerate(cache[key]):
            probs[i][b] = p
    for i in range(N):
        p = probs[i]
        a = np.argmax(p, axis=1) if greedy else sample_categorical_rows(p, rng)
        actions[:, i] = a
        logp += np.log(np.maximum(p[np.arange(B), a], 1e-300))
    return JointSample(actions, logp, probs)
