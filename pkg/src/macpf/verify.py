"""Verification suites: tabular oracle equivalence and finite-difference gradient checks."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import agents as ag
from . import tabular as tb
from .envs import random_mmdp
from .neural import finite_difference_check
from .numerics import RngStream


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"[{mark}] {self.name}: {self.value:.3e} (limit {self.threshold:.1e}){extra}"


@dataclass
class SuiteReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def add(self, result: CheckResult) -> CheckResult:
        self.results.append(result)
        return result


# --- tabular --------------------------------------------------------------------

def random_instance_shape(seed: int) -> tuple[int, tuple[int, ...]]:
    """(n_states, actions_per_agent) for the seeded random-MMDP suite."""
    rng = RngStream(seed).split("shape")
    n_agents = 2 + int(rng.integers(0, 2))
    n_states = 1 + int(rng.integers(0, 5))
    actions = tuple(int(k) for k in rng.integers(1, 4, size=n_agents))
    return n_states, actions


def solver_oracle_gap(seed: int, gamma: float = 0.9, alpha: float = 0.2) -> float:
    n_states, actions = random_instance_shape(seed)
    mmdp = random_mmdp(seed, n_states, len(actions), actions, gamma)
    _, q = tb.conditional_factorized_soft_policy_iteration(mmdp, alpha, tol=1e-12)
    oracle = tb.joint_soft_value_iteration_oracle(mmdp, alpha, tol=1e-11)
    return float(np.max(np.abs(q - oracle)))


def random_counterpart_instance(seed: int):
    """Random (Q row, dependent joint policy, action counts) for two agents with at most 3 actions."""
    rng = RngStream(seed).split("counterpart")
    K = tuple(int(k) for k in rng.integers(1, 4, size=2))
    if K == (1, 1):
        K = (2, 2)
    A = int(np.prod(K))
    q = rng.uniform(-10.0, 10.0, size=A)
    w = rng.exponential(1.0, size=A)
    # occasionally sparse, dependent-looking policies
    if rng.random() < 0.3:
        w[rng.random(A) < 0.5] = 0.0
        if w.sum() == 0:
            w[int(rng.integers(0, A))] = 1.0
    return q, w / w.sum(), K


def counterpart_gap(seed: int) -> float:
    q, dep, K = random_counterpart_instance(seed)
    ind = tb.independent_counterpart(q, dep, K)
    return abs(tb.expected_value_under_policy(q, ind) - float(dep @ q))


def grid_counterpart_gap(seed: int, points: int = 201) -> tuple[float, float]:
    """(grid gap, grid bound): best product policy on a points x points grid vs the dependent value.

    Each agent mixes its argmin and argmax actions (taken from the joint
    extremes); bilinearity bounds the gap by the grid spacing times the Q range.
    """
    q, dep, K = random_counterpart_instance(seed)
    target = float(dep @ q)
    Q = q.reshape(K)
    hi = np.unravel_index(int(np.argmax(q)), K)
    lo = np.unravel_index(int(np.argmin(q)), K)
    t = np.linspace(0.0, 1.0, points)
    # value of (t1, t2) mixtures: sum over the 2x2 corner combinations
    corners = np.array([[Q[lo[0], lo[1]], Q[lo[0], hi[1]]], [Q[hi[0], lo[1]], Q[hi[0], hi[1]]]])
    w1 = np.stack([1 - t, t], 1)
    vals = w1 @ corners @ w1.T
    gap = float(np.min(np.abs(vals - target)))
    bound = float((q.max() - q.min()) / (points - 1))
    return gap, bound


def run_tabular_suite(n_mmdp: int = 100, n_counterpart: int = 1000, n_grid: int = 50,
                      report: SuiteReport | None = None) -> SuiteReport:
    report = report or SuiteReport()
    t0 = time.perf_counter()
    gaps = [solver_oracle_gap(s) for s in range(n_mmdp)]
    report.add(CheckResult(f"conditional solver vs joint soft VI, {n_mmdp} random MMDPs (sup-norm)",
                           max(gaps), 1e-6, max(gaps) <= 1e-6, f"{time.perf_counter() - t0:.1f}s"))
    t0 = time.perf_counter()
    cg = [counterpart_gap(s) for s in range(n_counterpart)]
    report.add(CheckResult(f"independent counterpart value gap, {n_counterpart} instances",
                           max(cg), 1e-6, max(cg) <= 1e-6, f"{time.perf_counter() - t0:.1f}s"))
    ratios = []
    for s in range(n_grid):
        gap, bound = grid_counterpart_gap(s)
        ratios.append(gap / bound if bound > 0 else 0.0)
    report.add(CheckResult(f"201x201 product grid reaches the dependent value, {n_grid} instances (gap / spacing bound)",
                           max(ratios), 1.0, max(ratios) <= 1.0))
    return report


# --- gradients --------------------------------------------------------------------

def gradient_instance(seed: int, variant: str = "linear"):
    rng = RngStream(seed).split("gradient_instance")
    n = 2 + int(rng.integers(0, 2))
    K = tuple(int(k) for k in rng.integers(2, 5, size=n))
    cfg = ag.AgentConfig(K, obs_dim=3, state_dim=2, hidden=8, correction_hidden=8,
                         activation="tanh", correction_activation="tanh", mixer=ag.MixerSpec(variant, 8, 4))
    ps = ag.AgentParameterSet(cfg, rng.split("init"), alpha=0.6)
    ps.target = ps.params.data + 0.1 * rng.normal(size=ps.params.data.size)
    B = 5
    batch = ag.Batch(rng.normal(size=(B, n, 3)), rng.normal(size=(B, 2)),
                     np.stack([rng.integers(0, k, size=B) for k in K], 1), rng.normal(size=B),
                     rng.normal(size=(B, n, 3)), rng.normal(size=(B, 2)),
                     (rng.random(B) < 0.3).astype(float))
    return ps, batch, rng


def loss_suite(ps: ag.AgentParameterSet, batch: ag.Batch, rng: RngStream, gamma: float = 0.9):
    """name -> (loss closure, allowed mask); sampled actions are drawn once and held fixed."""
    alpha = ps.alpha
    nxt_dep = ag.sequential_sample_joint_action(batch.next_obs, ps, rng.split("next_dep"))
    nxt_ind = ag.independent_sample_joint_action(batch.next_obs, ps, rng.split("next_ind"))
    prefixes = ag.sequential_sample_joint_action(batch.obs, ps, rng.split("prefix")).actions
    temps = ag.local_temperatures(batch, ps, alpha, tail=True)
    first = ps.ordering[0]
    return {
        "td_dep": (lambda: ag.td_loss_dep(batch, ps, nxt_dep, alpha, gamma), ps.mask(["critic_corr"], mixer=True)),
        "td_ind": (lambda: ag.td_loss_ind(batch, ps, nxt_ind, alpha, gamma), ps.mask(["critic_ind"], mixer=True)),
        "pi_dep": (lambda: ag.policy_loss_dep(batch, ps, prefixes, temps), ps.mask(["policy_corr"])),
        "pi_ind": (lambda: ag.policy_loss_ind(batch, ps, temps), ps.mask(["policy_ind"])),
        "pi_dep_forward": (lambda: ag.policy_loss_dep(batch, ps, prefixes, temps, "forward"),
                           ps.mask(["policy_corr"])),
        "pi_ind_forward": (lambda: ag.policy_loss_ind(batch, ps, temps, "forward"), ps.mask(["policy_ind"])),
        # the soft-value target is held fixed, so only the first agent's slice is a true gradient
        "chain": (lambda: ag.chain_consistency_loss(batch, ps, temps), ps.mask(["critic_corr"], agents=[first])),
    }


def check_loss_gradient(ps, fn, mask, rng, sample_size=32, tolerance=1e-4, full_mask=None):
    """(finite-difference report, largest gradient magnitude outside the allowed mask)."""
    _, grad = fn()
    outside = float(np.max(np.abs(grad[~(full_mask if full_mask is not None else mask)]), initial=0.0))
    base = ps.params.data.copy()

    def f(x):
        ps.params.data[:] = x
        return fn()[0]

    try:
        rep = finite_difference_check(f, base, grad, sample_size=sample_size, tolerance=tolerance, rng=rng,
                                      candidates=np.flatnonzero(mask))
    finally:
        ps.params.data[:] = base
    return rep, outside


def run_gradient_suite(seeds=(0, 1, 2), report: SuiteReport | None = None) -> SuiteReport:
    report = report or SuiteReport()
    worst = {}
    leaks = {}
    for variant in ag.MIXER_VARIANTS:
        for seed in seeds:
            ps, batch, rng = gradient_instance(seed, variant)
            for name, (fn, mask) in loss_suite(ps, batch, rng).items():
                full = ps.mask(["critic_corr"]) if name == "chain" else mask
                rep, outside = check_loss_gradient(ps, fn, mask, rng.split(f"fd/{name}"), full_mask=full)
                key = f"{name} ({variant} mixer)"
                worst[key] = max(worst.get(key, 0.0), rep.worst)
                leaks[key] = max(leaks.get(key, 0.0), outside)
    for key in worst:
        report.add(CheckResult(f"finite differences {key}, worst relative error", worst[key], 1e-4,
                               worst[key] <= 1e-4))
        report.add(CheckResult(f"gradient outside allowed slices {key}", leaks[key], 0.0, leaks[key] == 0.0))
    return report


def run_suite(name: str) -> SuiteReport:
    if name not in ("tabular", "gradients", "all"):
        raise ValueError(f"unknown suite {name!r}; expected tabular, gradients or all")
    report = SuiteReport()
    if name in ("tabular", "all"):
        run_tabular_suite(report=report)
    if name in ("gradients", "all"):
        run_gradient_suite(report=report)
    return report
