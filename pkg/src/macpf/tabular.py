"""Exact conditional factorized soft policy iteration on finite multi-agent MDPs.

Joint actions are flattened in C order over agents ``0..N-1`` (agent 0 is the
most significant digit). Conditional policy tables follow the agent ordering:
the table of the k-th agent in the ordering has shape
``(S, K[o_0], ..., K[o_{k-1}], K[o_k])``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .numerics import log_sum_exp, softmax

MMDP_FORMAT = "macpf-mmdp"
MMDP_VERSION = 1


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


@dataclass
class TabularMMDP:
    actions_per_agent: tuple[int, ...]
    transition: np.ndarray  # (S, A_joint, S)
    reward: np.ndarray  # (S, A_joint)
    gamma: float

    def __post_init__(self):
        self.actions_per_agent = tuple(int(k) for k in self.actions_per_agent)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        S, A = self.n_states, self.n_joint_actions
        if self.transition.shape != (S, A, S):
            raise ValueError(f"transition shape {self.transition.shape} != {(S, A, S)}")
        if self.reward.shape != (S, A):
            raise ValueError(f"reward shape {self.reward.shape} != {(S, A)}")
        if np.any(self.transition < 0) or np.max(np.abs(self.transition.sum(-1) - 1)) > 1e-9:
            raise ValueError("transition rows must be distributions")
        if not np.all(np.isfinite(self.reward)):
            raise ValueError("rewards must be finite")
        if not 0 <= self.gamma < 1:
            raise ValueError(f"discount must lie in [0, 1), got {self.gamma}")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_agents(self) -> int:
        return len(self.actions_per_agent)

    @property
    def n_joint_actions(self) -> int:
        return int(np.prod(self.actions_per_agent))

    def to_document(self) -> dict:
        return {
            "format": MMDP_FORMAT,
            "version": MMDP_VERSION,
            "n_states": self.n_states,
            "actions_per_agent": list(self.actions_per_agent),
            "gamma": self.gamma,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
        }

    @classmethod
    def from_document(cls, doc: dict) -> "TabularMMDP":
        if doc.get("format") != MMDP_FORMAT:
            raise ValueError(f"not an MMDP document: format={doc.get('format')!r}")
        if doc.get("version") != MMDP_VERSION:
            raise ValueError(f"unsupported MMDP version {doc.get('version')!r}")
        mmdp = cls(doc["actions_per_agent"], doc["transition"], doc["reward"], float(doc["gamma"]))
        if mmdp.n_states != doc["n_states"]:
            raise ValueError("n_states does not match the tables")
        return mmdp

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_document(), indent=1))

    @classmethod
    def load(cls, path) -> "TabularMMDP":
        return cls.from_document(json.loads(Path(path).read_text()))


@dataclass
class ConditionalPolicyBundle:
    """Per-agent conditional tables ``pi_i(a_i | s, a_<i)`` in ordering order."""

    tables: list[np.ndarray]
    ordering: tuple[int, ...]
    alpha: float
    alphas: tuple[float, ...] = field(default=())

    @property
    def actions_per_agent(self) -> tuple[int, ...]:
        sizes = [0] * len(self.ordering)
        for pos, agent in enumerate(self.ordering):
            sizes[agent] = self.tables[pos].shape[-1]
        return tuple(sizes)

    def conditional(self, agent: int) -> np.ndarray:
        return self.tables[self.ordering.index(agent)]

    def joint(self) -> np.ndarray:
        """Chain-rule product, returned as an (S, A_joint) table."""
        prod = self.tables[0]
        for table in self.tables[1:]:
            prod = prod[..., None] * table
        # axes are (S, ordered agents...); restore natural agent order
        inverse = np.argsort(self.ordering)
        prod = np.transpose(prod, (0, *(1 + inverse)))
        return prod.reshape(prod.shape[0], -1)


def _check_ordering(ordering, n_agents: int) -> tuple[int, ...]:
    if ordering is None:
        return tuple(range(n_agents))
    ordering = tuple(int(i) for i in ordering)
    if sorted(ordering) != list(range(n_agents)):
        raise ValueError(f"ordering {ordering} is not a permutation of 0..{n_agents - 1}")
    return ordering


def _ordered_view(table: np.ndarray, actions_per_agent, ordering) -> np.ndarray:
    """Reshape (S, A_joint) to (S, K...) with agent axes permuted to ordering."""
    t = table.reshape(table.shape[0], *actions_per_agent)
    return np.transpose(t, (0, *(1 + np.asarray(ordering))))


def _entropy_terms(policy: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logp = np.where(policy > 0, np.log(np.where(policy > 0, policy, 1.0)), 0.0)
    return policy * logp


def _check_joint(policy: np.ndarray, mmdp: TabularMMDP) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != mmdp.reward.shape:
        raise ValueError(f"policy shape {policy.shape} != {mmdp.reward.shape}")
    if np.any(policy < 0) or np.max(np.abs(policy.sum(-1) - 1)) > 1e-9:
        raise ValueError("policy rows must be distributions")
    return policy


def joint_soft_policy_evaluation(mmdp: TabularMMDP, policy: np.ndarray, alpha: float,
                                 tol: float = 1e-10, max_iters: int = 100_000,
                                 q0: np.ndarray | None = None,
                                 residuals: list | None = None) -> np.ndarray:
    """Iterate the soft Bellman backup of a fixed joint policy to its fixed point.

    Stops once successive iterates differ by at most ``tol`` in sup-norm.
    ``residuals``, when given, receives the sup-norm difference of every sweep.
    """
    if not alpha > 0 or not tol > 0:
        raise ValueError("alpha and tol must be positive")
    policy = _check_joint(policy, mmdp)
    neg_ent = _entropy_terms(policy).sum(-1)
    q = np.zeros_like(mmdp.reward) if q0 is None else np.array(q0, dtype=np.float64)
    diff = np.inf
    for it in range(1, max_iters + 1):
        v = (policy * q).sum(-1) - alpha * neg_ent
        q_new = mmdp.reward + mmdp.gamma * mmdp.transition @ v
        diff = float(np.max(np.abs(q_new - q)))
        q = q_new
        if residuals is not None:
            residuals.append(diff)
        if diff <= tol:
            return q
    raise ConvergenceError("soft policy evaluation did not converge", diff, max_iters)


def soft_policy_evaluation_linear(mmdp: TabularMMDP, policy: np.ndarray, alpha: float) -> np.ndarray:
    """Direct linear solve of ``Q = r_pi + gamma * P Pi Q`` (reference path)."""
    policy = _check_joint(policy, mmdp)
    S, A = mmdp.reward.shape
    entropy = -_entropy_terms(policy).sum(-1)
    r_pi = mmdp.reward + mmdp.gamma * alpha * mmdp.transition @ entropy
    # M[(s,a),(s',a')] = P(s'|s,a) pi(a'|s')
    M = (mmdp.transition[:, :, :, None] * policy[None, None, :, :]).reshape(S * A, S * A)
    q = np.linalg.solve(np.eye(S * A) - mmdp.gamma * M, r_pi.ravel())
    return q.reshape(S, A)


def boltzmann_joint(q: np.ndarray, alpha: float) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("Q table must be finite")
    return softmax(q, alpha, axis=-1)


def chain_rule_conditionals(joint: np.ndarray, actions_per_agent: Sequence[int], ordering=None,
                            alpha: float = 1.0, alphas=None) -> ConditionalPolicyBundle:
    """Factor a joint table into ``pi_i(a_i | s, a_<i)`` following ``ordering``.

    Prefixes with zero probability get a uniform conditional.
    """
    joint = np.asarray(joint, dtype=np.float64)
    n = len(actions_per_agent)
    ordering = _check_ordering(ordering, n)
    if joint.shape[-1] != int(np.prod(actions_per_agent)):
        raise ValueError("joint table width does not match actions_per_agent")
    if np.any(joint < 0) or np.max(np.abs(joint.sum(-1) - 1)) > 1e-9:
        raise ValueError("joint rows must be distributions")
    full = _ordered_view(joint, actions_per_agent, ordering)
    # marginals[k] has shape (S, K_o0..K_ok)
    marginals = [full]
    for _ in range(n - 1):
        marginals.append(marginals[-1].sum(-1))
    marginals.reverse()
    tables = []
    prev = np.ones(joint.shape[0])
    for k in range(n):
        m = marginals[k]
        denom = prev[..., None]
        K = m.shape[-1]
        with np.errstate(invalid="ignore", divide="ignore"):
            cond = np.where(denom > 0, m / np.where(denom > 0, denom, 1.0), 1.0 / K)
        tables.append(cond)
        prev = m
    alphas = tuple(alphas) if alphas is not None else (alpha,) * n
    return ConditionalPolicyBundle(tables, ordering, alpha, alphas)


def conditional_q_values(q: np.ndarray, alpha: float, actions_per_agent: Sequence[int],
                         ordering=None, alphas=None) -> list[np.ndarray]:
    """Per-agent conditional Q tables ``Q_i(s, a_<i, a_i)`` in ordering order.

    ``Q_i`` is the soft value of the tail: ``alpha * log sum_{a_>i} exp(Q_jt / alpha)``,
    rescaled by ``alpha_i / alpha`` so that ``softmax(Q_i / alpha_i)`` gives the
    chain-rule conditional of the Boltzmann joint.
    """
    n = len(actions_per_agent)
    ordering = _check_ordering(ordering, n)
    alphas = tuple(alphas) if alphas is not None else (alpha,) * n
    full = _ordered_view(np.asarray(q, dtype=np.float64), actions_per_agent, ordering)
    out = [full]
    for _ in range(n - 1):
        out.append(log_sum_exp(out[-1], alpha, axis=-1))
    out.reverse()
    return [t * (alphas[ordering[k]] / alpha) for k, t in enumerate(out)]


def conditionals_from_q(q_tables: list[np.ndarray], ordering, alpha: float, alphas) -> ConditionalPolicyBundle:
    tables = [softmax(t, alphas[ordering[k]], axis=-1) for k, t in enumerate(q_tables)]
    return ConditionalPolicyBundle(tables, tuple(ordering), alpha, tuple(alphas))


def conditional_factorized_soft_policy_iteration(
        mmdp: TabularMMDP, alpha: float, tol: float = 1e-10, max_iters: int = 1000,
        ordering=None, alphas=None, initial_policy: np.ndarray | None = None,
        eval_tol: float = 1e-12, callback: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
) -> tuple[ConditionalPolicyBundle, np.ndarray]:
    """Alternate joint soft policy evaluation and per-agent conditional improvement.

    The improvement step sets each agent's conditional to the softmax of its
    conditional Q table, which is the exact minimizer of the per-agent KL
    projection. Stops when the joint policy moves by at most ``tol``.
    ``callback(k, q_k, policy_k)`` is invoked after every evaluation.
    """
    if not alpha > 0 or not tol > 0:
        raise ValueError("alpha and tol must be positive")
    n = mmdp.n_agents
    ordering = _check_ordering(ordering, n)
    alphas = tuple(alphas) if alphas is not None else (alpha,) * n
    S, A = mmdp.reward.shape
    policy = np.full((S, A), 1.0 / A) if initial_policy is None else _check_joint(initial_policy, mmdp)
    q = None
    change = np.inf
    for k in range(max_iters):
        q = joint_soft_policy_evaluation(mmdp, policy, alpha, eval_tol, q0=q)
        if callback is not None:
            callback(k, q, policy)
        q_tables = conditional_q_values(q, alpha, mmdp.actions_per_agent, ordering, alphas)
        bundle = conditionals_from_q(q_tables, ordering, alpha, alphas)
        new_policy = bundle.joint()
        change = float(np.max(np.abs(new_policy - policy)))
        policy = new_policy
        if change <= tol:
            q = joint_soft_policy_evaluation(mmdp, policy, alpha, eval_tol, q0=q)
            return bundle, q
    raise ConvergenceError("conditional soft policy iteration did not converge", change, max_iters)


def joint_soft_value_iteration_oracle(mmdp: TabularMMDP, alpha: float, tol: float = 1e-10,
                                      max_iters: int = 1_000_000) -> np.ndarray:
    """Soft value iteration over the flattened joint action.

    Iterates until the returned table is within ``tol`` of the fixed point in
    sup-norm (contraction bound ``diff * gamma / (1 - gamma) <= tol``).
    """
    if not alpha > 0 or not tol > 0:
        raise ValueError("alpha and tol must be positive")
    g = mmdp.gamma
    q = np.array(mmdp.reward)
    if g == 0:
        return q
    diff = np.inf
    for it in range(max_iters):
        v = log_sum_exp(q, alpha, axis=-1)
        q_new = mmdp.reward + g * mmdp.transition @ v
        diff = float(np.max(np.abs(q_new - q)))
        q = q_new
        if diff * g / (1 - g) <= tol:
            return q
    raise ConvergenceError("soft value iteration did not converge", diff, max_iters)


# --- independent counterpart -------------------------------------------------

def _as_joint(dist, actions_per_agent) -> np.ndarray:
    if isinstance(dist, (list, tuple)):
        joint = np.ones(())
        for p in dist:
            joint = np.multiply.outer(joint, np.asarray(p, dtype=np.float64))
        return joint.ravel()
    return np.asarray(dist, dtype=np.float64).ravel()


def expected_value_under_policy(q_row, dist, actions_per_agent=None) -> float:
    """Expected joint value; ``dist`` is a joint vector or a list of per-agent marginals."""
    q_row = np.asarray(q_row, dtype=np.float64).ravel()
    joint = _as_joint(dist, actions_per_agent)
    if joint.shape != q_row.shape:
        raise ValueError(f"distribution size {joint.size} != Q size {q_row.size}")
    return float(joint @ q_row)


def _path_policy(lo_idx, hi_idx, actions_per_agent, t: float, temperature: float):
    out = []
    for k, a_lo, a_hi in zip(actions_per_agent, lo_idx, hi_idx):
        logits = np.zeros(k)
        logits[a_lo] += (1.0 - t) / temperature
        logits[a_hi] += t / temperature
        out.append(softmax(logits))
    return out


def _point_mass(idx, actions_per_agent):
    out = []
    for k, a in zip(actions_per_agent, idx):
        p = np.zeros(k)
        p[a] = 1.0
        out.append(p)
    return out


def independent_counterpart(q_row, dep, actions_per_agent: Sequence[int], tol: float = 1e-9,
                            temperature: float = 0.05, max_bisections: int = 200) -> list[np.ndarray]:
    """Find a product policy whose expected ``q_row`` equals that of ``dep``.

    Walks a straight line in per-agent logit space from the (smoothed)
    deterministic product minimizer to the maximizer and bisects on the path
    parameter. If smoothing leaves the target outside the bracket the path is
    sharpened; exact deterministic endpoints are returned when they already
    match within ``tol``.
    """
    actions_per_agent = tuple(int(k) for k in actions_per_agent)
    q_row = np.asarray(q_row, dtype=np.float64).ravel()
    if q_row.size != int(np.prod(actions_per_agent)):
        raise ValueError("q_row size does not match actions_per_agent")
    dep_joint = _as_joint(dep, actions_per_agent)
    if np.any(dep_joint < -1e-12) or abs(dep_joint.sum() - 1) > 1e-9:
        raise ValueError("dependent policy must be a distribution")
    target = float(dep_joint @ q_row)
    hi_idx = np.unravel_index(int(np.argmax(q_row)), actions_per_agent)
    lo_idx = np.unravel_index(int(np.argmin(q_row)), actions_per_agent)
    for idx in (hi_idx, lo_idx):
        if abs(q_row[np.ravel_multi_index(idx, actions_per_agent)] - target) <= tol:
            return _point_mass(idx, actions_per_agent)

    def value(t, temp):
        return expected_value_under_policy(q_row, _path_policy(lo_idx, hi_idx, actions_per_agent, t, temp))

    temp = temperature
    for _ in range(60):
        f_lo, f_hi = value(0.0, temp) - target, value(1.0, temp) - target
        if f_lo <= 0 <= f_hi:
            break
        temp *= 0.5
    else:
        raise RuntimeError(f"could not bracket target {target} between product extremes "
                           f"[{q_row.min()}, {q_row.max()}]")
    a, b = 0.0, 1.0
    for _ in range(max_bisections):
        mid = 0.5 * (a + b)
        f_mid = value(mid, temp) - target
        if abs(f_mid) <= tol:
            return _path_policy(lo_idx, hi_idx, actions_per_agent, mid, temp)
        if f_mid < 0:
            a = mid
        else:
            b = mid
    f_a, f_b = value(a, temp) - target, value(b, temp) - target
    best = a if abs(f_a) <= abs(f_b) else b
    if min(abs(f_a), abs(f_b)) <= tol:
        return _path_policy(lo_idx, hi_idx, actions_per_agent, best, temp)
    raise RuntimeError(f"bisection stalled: residual {min(abs(f_a), abs(f_b)):.3e}, tol {tol:.1e}")
