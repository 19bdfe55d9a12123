#!/usr/bin/env python3
"""
Cross-module property checks, mutation checks and the golden-case registry.

Every property runs against an ``Impl`` bundle of the core formulas. The
mutation checks swap one formula for a known-wrong variant and pass only when
the matching property then fails, which shows the properties are sharp enough
to catch that mistake.

Usage:
    python property_suite.py [--profile quick] [--seed 0] [--out props]
"""

import os
import sys
import json
import math
import argparse
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional

import numpy as np

from channel_model import ChannelParams, FadingProcess, ber, link_state, rate, snr
from ddqn_agent import (AgentConfig, QNetwork, TabularTransition, TransitionBatch, double_dqn_targets, loss_and_grads,
                        q_forward, single_net_targets, tabular_q_update, td_loss, train)
from fidelity_model import FidelityWeights, SyntheticScorer, combine
from jppo_env import DEFAULT_PROMPTS, EnvConfig, JPPOEnv, evaluate_request, shaped_reward, violations
from jppo_errors import ConfigError
from policy_oracle import FadingBin, derive_request_table, evaluate_bin, optimal_policy, snr_bin_edges, snr_scale
from service_costs import (ALL_ACTIONS, NUM_ACTIONS, NUM_COMPRESSION_LEVELS, Action, ComputeProfile,
                           Constraints, CostBreakdown, encode_times, kappa_of_level, total_cost)
from timing_calibration import improvement_at

logger = logging.getLogger(__name__)

GOLDEN_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir, "data", "golden_cases.json")
PROVENANCES = ("published", "trivial", "derived")


@dataclass(frozen=True)
class Tolerances:
    """Sample sizes and tolerances for one run of the suite."""

    random_cases: int
    ordering_samples: int
    mc_samples: int
    oracle_bins: int
    train_episodes: int
    train_horizon: int
    grad_rel_tol: float = 1e-4
    grad_step: float = 1e-7
    oracle_atol: float = 1e-9


PROFILES = {
    "default": Tolerances(random_cases=1000, ordering_samples=2000, mc_samples=4000, oracle_bins=16,
                          train_episodes=4, train_horizon=12),
    "quick": Tolerances(random_cases=200, ordering_samples=500, mc_samples=1000, oracle_bins=16,
                        train_episodes=2, train_horizon=6),
}


# ---------------------------------------------------------------- implementation bundle

def _cost(profile, action, g, config):
    link = link_state(action.power_w, g, config.channel)
    return total_cost(profile, action, link, config.compute, config.channel)


@dataclass(frozen=True)
class Impl:
    """The formulas the properties exercise; mutations replace one field."""

    kappa_of_level: Callable = kappa_of_level
    combine: Callable = lambda f1, f2, f3, w: combine(f1, f2, f3, w).f
    cost: Callable = _cost
    rate: Callable = rate
    td_loss: Callable = lambda batch, cur, tgt, mu: td_loss(batch, cur, tgt, mu)[0]
    double_targets: Callable = double_dqn_targets


def _energy_total_is_encode_only(profile, action, g, config):
    c = _cost(profile, action, g, config)
    return replace(c, energy_total_j=c.energy_encode_j)


def _encode_energy_ignores_gpu_count(profile, action, g, config):
    c = _cost(profile, action, g, config)
    cp = config.compute
    e_enc = c.time_slm_s * cp.slm_gpu_power_w + c.time_llm_s * cp.llm_gpu_power_w
    return replace(c, energy_encode_j=e_enc, energy_total_j=e_enc + c.energy_tx_j)


def _tx_energy_without_power(profile, action, g, config):
    c = _cost(profile, action, g, config)
    return replace(c, energy_tx_j=c.time_tx_s, energy_total_j=c.energy_encode_j + c.time_tx_s)


def _delay_without_transmission(profile, action, g, config):
    c = _cost(profile, action, g, config)
    return replace(c, time_total_s=c.time_slm_s + c.time_llm_s)


MUTATIONS = [
    # (name, replaced formula, property expected to catch it)
    ("compression ratio as 1 - level/5",
     {"kappa_of_level": lambda level: 1.0 - level / NUM_COMPRESSION_LEVELS}, "service.kappa_levels"),
    ("fidelity weights rotated",
     {"combine": lambda f1, f2, f3, w: combine(f1, f2, f3, FidelityWeights(w.w2, w.w3, w.w1)).f},
     "fidelity.weighting"),
    ("total energy drops the transmission term", {"cost": _energy_total_is_encode_only},
     "service.cost_matches_oracle"),
    ("encode energy ignores GPU counts", {"cost": _encode_energy_ignores_gpu_count},
     "service.cost_matches_oracle"),
    ("transmission energy without the power factor", {"cost": _tx_energy_without_power},
     "service.cost_matches_oracle"),
    ("rate with natural log", {"rate": lambda s, p: p.bandwidth_hz * math.log1p(s)}, "channel.rate"),
    ("delay omits transmission time", {"cost": _delay_without_transmission}, "service.cost_matches_oracle"),
    ("TD loss summed over the batch",
     {"td_loss": lambda batch, cur, tgt, mu: td_loss(batch, cur, tgt, mu)[0] * len(batch)},
     "agent.td_loss_mean"),
    ("double target uses the target net's own argmax",
     {"double_targets": lambda batch, cur, tgt, mu: single_net_targets(batch, tgt, mu)},
     "agent.overestimation_ordering"),
]


# ---------------------------------------------------------------- report types

@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class MutationResult:
    mutation: str
    property: str
    detected: bool
    detail: str = ""


@dataclass
class GoldenCase:
    identifier: str
    description: str
    inputs: dict
    expected: Optional[dict]
    provenance: str
    derivation: str
    tolerance: float = 1e-6


@dataclass
class GoldenResult:
    identifier: str
    provenance: str
    passed: bool
    detail: str = ""


@dataclass
class PropertyReport:
    profile: str
    seed: int
    properties: List[PropertyResult] = field(default_factory=list)
    mutations: List[MutationResult] = field(default_factory=list)
    golden: List[GoldenResult] = field(default_factory=list)

    @property
    def passed(self):
        return (all(p.passed for p in self.properties) and all(m.detected for m in self.mutations)
                and all(g.passed for g in self.golden))

    def to_dict(self):
        data = asdict(self)
        data["passed"] = self.passed
        return data

    def as_text(self):
        lines = [f"Property suite (profile {self.profile}, seed {self.seed})", ""]
        lines.append("Properties:")
        for p in self.properties:
            lines.append(f"  [{'PASS' if p.passed else 'FAIL'}] {p.name}" + (f"  {p.detail}" if p.detail else ""))
        lines.append("")
        lines.append("Mutation checks:")
        for m in self.mutations:
            lines.append(f"  [{'PASS' if m.detected else 'FAIL'}] {m.mutation} -> {m.property} "
                         f"{'behaves as expected' if m.detected else 'went unnoticed'}")
        lines.append("")
        lines.append("Golden cases:")
        for g in self.golden:
            lines.append(f"  [{'PASS' if g.passed else 'FAIL'}] {g.identifier} ({g.provenance})"
                         + (f"  {g.detail}" if g.detail else ""))
        total = len(self.properties) + len(self.mutations) + len(self.golden)
        failed = (sum(not p.passed for p in self.properties) + sum(not m.detected for m in self.mutations)
                  + sum(not g.passed for g in self.golden))
        lines.append("")
        lines.append(f"{total - failed}/{total} checks passed: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


class Context:
    """What a property needs: the formula bundle, tolerances and a fresh seeded generator."""

    def __init__(self, impl, tol, seed, name):
        self.impl = impl
        self.tol = tol
        # same name + seed gives the same stream whatever else has run
        key = [seed] + [ord(ch) for ch in name]
        self.rng = np.random.default_rng(np.random.SeedSequence(key))
        self.config = EnvConfig(seed=seed)


class PropertyFailed(AssertionError):
    pass


def check(condition, message):
    if not condition:
        raise PropertyFailed(message)


# ---------------------------------------------------------------- helpers

def _random_net(rng, dims):
    return QNetwork.initialize(dims, rng)


def _random_batch(rng, size, state_dim=3, num_actions=NUM_ACTIONS, terminal_prob=0.2):
    return TransitionBatch(
        states=rng.normal(size=(size, state_dim)),
        actions=rng.integers(num_actions, size=size),
        rewards=rng.normal(size=size),
        next_states=rng.normal(size=(size, state_dim)),
        terminals=rng.random(size) < terminal_prob,
    )


def _bin_gains(config, bins):
    """One representative fading gain inside every reference-SNR bin."""
    edges = snr_bin_edges(bins)
    scale = snr_scale(config)
    gains = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if lo == 0.0:
            mid = hi / 2.0
        elif math.isinf(hi):
            mid = lo * 2.0
        else:
            mid = math.sqrt(lo * hi)
        gains.append(mid / scale)
    return np.array(gains)


# ---------------------------------------------------------------- channel

def prop_ber_shape(ctx):
    grid = np.concatenate([[0.0], np.logspace(-3, 2, 200)])
    values = [ber(g) for g in grid]
    check(values[0] == 0.5, f"ber(0) = {values[0]}")
    check(all(0.0 < v <= 0.5 for v in values), "ber left (0, 0.5] on finite SNR")
    check(all(b <= a for a, b in zip(values, values[1:])), "ber increased with SNR")


def prop_rate(ctx):
    params = ChannelParams()
    grid = np.logspace(-3, 2, 100)
    values = np.array([ctx.impl.rate(s, params) for s in grid])
    check(np.all(np.diff(values) > 0), "rate not strictly increasing in SNR")
    doubled = replace(params, bandwidth_hz=2 * params.bandwidth_hz)
    check(np.allclose([ctx.impl.rate(s, doubled) for s in grid], 2 * values, rtol=1e-12),
          "rate not linear in bandwidth")
    expected = params.bandwidth_hz * np.log2(1.0 + grid)
    check(np.allclose(values, expected, rtol=1e-12, atol=0.0), "rate differs from W log2(1 + snr)")


def prop_snr_linear(ctx):
    params = ChannelParams()
    for _ in range(ctx.tol.random_cases):
        p, g, k = ctx.rng.uniform(0.1, 5.0), ctx.rng.exponential(1.0), ctx.rng.uniform(0.1, 4.0)
        base = snr(p, g, params)
        check(math.isclose(snr(k * p, g, params), k * base, rel_tol=1e-12), "snr not linear in power")
        check(math.isclose(snr(p, k * g, params), k * base, rel_tol=1e-12), "snr not linear in fading gain")


def prop_power_lowers_ber(ctx):
    params = ChannelParams()
    for g in (0.05, 0.3, 1.0, 2.0):
        values = [ber(snr(a.power_w, g, params)) for a in ALL_ACTIONS[:10]]
        check(all(b < a for a, b in zip(values, values[1:])), f"ber not strictly decreasing in power at g={g}")


def prop_fading_determinism(ctx):
    params = ChannelParams()
    seqs = []
    for _ in range(2):
        fp = FadingProcess(params, np.random.default_rng(1234))
        fp.start_episode()
        seqs.append([fp.next_gain() for _ in range(100)])
    check(seqs[0] == seqs[1], "same seed gave different fading sequences")


# ---------------------------------------------------------------- service

def prop_kappa_levels(ctx):
    values = [ctx.impl.kappa_of_level(level) for level in range(NUM_COMPRESSION_LEVELS)]
    check(np.allclose(values, [1.0, 1 / 2, 1 / 3, 1 / 4, 1 / 5], rtol=0, atol=1e-15),
          f"compression ratios {values}")


def prop_cost_monotone_in_kappa(ctx):
    cfg = ctx.config
    for profile in cfg.prompt_distribution:
        for g in (0.1, 1.0, 3.0):
            for p in range(10):
                costs = [ctx.impl.cost(profile, Action(c, p), g, cfg) for c in reversed(range(5))]
                times = [c.time_total_s for c in costs]
                energies = [c.energy_total_j for c in costs]
                check(all(b >= a for a, b in zip(times, times[1:])), "latency fell as kappa grew")
                check(all(b >= a for a, b in zip(energies, energies[1:])), "energy fell as kappa grew")


def prop_tx_power_tension(ctx):
    # time falls with power while transmit energy rises: x / log(1 + x) is increasing
    cfg = ctx.config
    profile = cfg.prompt_distribution[-1]
    for g in (0.05, 0.5, 2.0):
        for c in range(5):
            costs = [ctx.impl.cost(profile, Action(c, p), g, cfg) for p in range(10)]
            times = [x.time_tx_s for x in costs]
            energies = [x.energy_tx_j for x in costs]
            check(all(b < a for a, b in zip(times, times[1:])), "transmit time not decreasing in power")
            check(all(b > a for a, b in zip(energies, energies[1:])), "transmit energy not increasing in power")


def prop_cost_decomposition(ctx):
    cfg = ctx.config
    for _ in range(ctx.tol.random_cases // 10):
        profile = cfg.prompt_distribution[int(ctx.rng.integers(len(cfg.prompt_distribution)))]
        action = Action.from_index(int(ctx.rng.integers(NUM_ACTIONS)))
        c = ctx.impl.cost(profile, action, float(ctx.rng.exponential(1.0)) + 1e-6, cfg)
        for name in ("energy_encode_j", "energy_tx_j", "energy_total_j", "time_slm_s", "time_llm_s",
                     "time_tx_s", "time_total_s"):
            check(getattr(c, name) >= 0, f"{name} negative")
        check(c.energy_total_j == c.energy_encode_j + c.energy_tx_j, "energy terms do not add up")
        check(c.time_total_s == c.time_slm_s + c.time_llm_s + c.time_tx_s, "delay terms do not add up")


def prop_cost_matches_oracle(ctx):
    cfg = ctx.config
    gains = _bin_gains(cfg, ctx.tol.oracle_bins)
    table = derive_request_table(cfg, gains)
    fields = ("energy_encode_j", "energy_tx_j", "energy_total_j", "time_tx_s", "time_total_s")
    for s, g in enumerate(gains):
        for p, profile in enumerate(cfg.prompt_distribution):
            for action in ALL_ACTIONS:
                c = ctx.impl.cost(profile, action, g, cfg)
                for name in fields:
                    expected = table[name][s, p, action.joint_index]
                    check(math.isclose(getattr(c, name), expected, rel_tol=1e-12, abs_tol=ctx.tol.oracle_atol),
                          f"{name} for {action} at g={g:.4g}: {getattr(c, name)} vs {expected}")


def prop_uncompressed_baseline(ctx):
    cfg = ctx.config
    cp = cfg.compute
    for profile in cfg.prompt_distribution:
        t_slm, t_llm = encode_times(profile, 1.0, cp)
        expected = cp.llm_fixed_overhead_s + cp.llm_time_per_token_s * (profile.total_tokens + cp.output_tokens)
        check(t_slm == 0.0 and math.isclose(t_llm, expected, rel_tol=1e-12),
              f"kappa=1 encode time for {profile.name} is {t_slm + t_llm}, expected {expected}")


# ---------------------------------------------------------------- fidelity

def prop_fidelity_weighting(ctx):
    w = FidelityWeights()
    basis = [ctx.impl.combine(*e, w) for e in ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))]
    check(np.allclose(basis, [w.w1, w.w2, w.w3], rtol=0, atol=1e-15), f"unit components give {basis}")
    for _ in range(ctx.tol.random_cases):
        comps = ctx.rng.random(3)
        f = ctx.impl.combine(*comps, w)
        check(0.0 <= f <= 1.0, f"f={f} outside [0, 1]")
        check(math.isclose(f, float(np.dot(comps, [w.w1, w.w2, w.w3])), abs_tol=1e-12), "combine is not linear")


def prop_weights_validated(ctx):
    try:
        FidelityWeights(0.5, 0.3, 0.3)
    except ConfigError:
        return
    raise PropertyFailed("weights summing to 1.1 were accepted")


def prop_fidelity_monotone(ctx):
    scorer = SyntheticScorer()
    bers = np.linspace(0.0, 0.5, 51)
    kappas = [kappa_of_level(c) for c in reversed(range(NUM_COMPRESSION_LEVELS))]
    for k in kappas:
        values = [scorer.score(k, b).f for b in bers]
        check(all(b <= a for a, b in zip(values, values[1:])), f"f increased with BER at kappa={k}")
    for b in bers:
        values = [scorer.score(k, b).f for k in kappas]
        check(all(y >= x for x, y in zip(values, values[1:])), f"f decreased with kappa at BER={b}")
    check(scorer.score(1.0, 0.0).f == 1.0, "f(kappa=1, ber=0) is not exactly 1")


# ---------------------------------------------------------------- env

def prop_reward_monotone(ctx):
    cfg = ctx.config
    none = frozenset()
    base = shaped_reward(0.8, 0.1, 2.0, none, cfg)
    check(shaped_reward(0.81, 0.1, 2.0, none, cfg) > base, "reward not increasing in fidelity")
    check(shaped_reward(0.8, 0.11, 2.0, none, cfg) < base, "reward not decreasing in BER")
    check(shaped_reward(0.8, 0.1, 2.5, none, cfg) < base, "reward not decreasing in power")


def prop_constraints_exact(ctx):
    con = Constraints()
    fid = SyntheticScorer().score
    for _ in range(ctx.tol.random_cases):
        e = float(ctx.rng.choice([con.energy_max_j, ctx.rng.uniform(0, 2 * con.energy_max_j)]))
        t = float(ctx.rng.choice([con.latency_max_s, ctx.rng.uniform(0, 2 * con.latency_max_s)]))
        p = float(ctx.rng.choice([con.power_max_w, ctx.rng.uniform(0.5, 2 * con.power_max_w)]))
        cost = CostBreakdown(kappa=1.0, tx_bits=16, energy_encode_j=e, energy_tx_j=0.0, energy_total_j=e,
                             time_slm_s=0.0, time_llm_s=t, time_tx_s=0.0, time_total_s=t)
        report = fid(float(ctx.rng.choice([0.25, 1.0])), float(ctx.rng.uniform(0, 0.5)))
        tags = violations(cost, p, report, con)
        check(("energy" in tags) == (e > con.energy_max_j), "energy tag wrong")
        check(("power" in tags) == (p > con.power_max_w), "power tag wrong")
        check(("latency" in tags) == (t > con.latency_max_s), "latency tag wrong")
        check(("fidelity" in tags) == (report.f <= con.fidelity_min), "fidelity tag wrong")


def _run_actions(config, actions_per_step, seed):
    env = JPPOEnv(config)
    env.reset(seed=seed)
    out = []
    for actions in actions_per_step:
        out.append([(o.reward, o.next_state.tobytes()) for o in env.step(actions)])
    return out


def prop_episode_reproducible(ctx):
    cfg = replace(ctx.config, horizon=ctx.tol.train_horizon)
    seq = [[int(ctx.rng.integers(NUM_ACTIONS))] for _ in range(cfg.horizon)]
    check(_run_actions(cfg, seq, 7) == _run_actions(cfg, seq, 7), "same seed and actions gave different steps")


def prop_users_independent(ctx):
    cfg = replace(ctx.config, num_users=2, horizon=ctx.tol.train_horizon)
    first = [int(ctx.rng.integers(NUM_ACTIONS)) for _ in range(cfg.horizon)]
    a = _run_actions(cfg, [[x, 0] for x in first], 11)
    b = _run_actions(cfg, [[x, 49] for x in first], 11)
    check([s[0] for s in a] == [s[0] for s in b], "user 0 outcomes depend on user 1's actions")


# ---------------------------------------------------------------- agent

def prop_double_target_reduction(ctx):
    for _ in range(ctx.tol.random_cases // 50):
        net = _random_net(ctx.rng, [3, 8, NUM_ACTIONS])
        batch = _random_batch(ctx.rng, 50)
        mu = float(ctx.rng.uniform(0, 0.99))
        check(np.array_equal(ctx.impl.double_targets(batch, net, net, mu), single_net_targets(batch, net, mu)),
              "double target differs from single-net target with identical networks")


def prop_overestimation_ordering(ctx):
    n = ctx.tol.ordering_samples
    current = _random_net(ctx.rng, [3, 16, NUM_ACTIONS])
    target = _random_net(ctx.rng, [3, 16, NUM_ACTIONS])
    batch = _random_batch(ctx.rng, n, terminal_prob=0.0)
    double = float(np.mean(ctx.impl.double_targets(batch, current, target, 0.9)))
    single = float(np.mean(single_net_targets(batch, target, 0.9)))
    check(double < single, f"mean double target {double:.6f} not below max target {single:.6f}")


def _independent_loss(batch, current, target, mu):
    q, _ = current.forward(batch.states)
    best = np.argmax(current.forward(batch.next_states)[0], axis=1)
    boot = target.forward(batch.next_states)[0][np.arange(len(best)), best]
    y = batch.rewards + mu * np.where(batch.terminals, 0.0, boot)
    return float(np.mean((q[np.arange(len(y)), batch.actions] - y) ** 2))


def prop_td_loss_mean(ctx):
    current = _random_net(ctx.rng, [3, 8, NUM_ACTIONS])
    target = _random_net(ctx.rng, [3, 8, NUM_ACTIONS])
    batch = _random_batch(ctx.rng, 32)
    loss = ctx.impl.td_loss(batch, current, target, 0.5)
    expected = _independent_loss(batch, current, target, 0.5)
    check(math.isclose(loss, expected, rel_tol=1e-12), f"loss {loss} vs mean squared error {expected}")
    doubled = TransitionBatch(*(np.concatenate([x, x]) for x in (batch.states, batch.actions, batch.rewards,
                                                                   batch.next_states, batch.terminals)))
    check(math.isclose(ctx.impl.td_loss(doubled, current, target, 0.5), loss, rel_tol=1e-12),
          "loss changed when every transition was duplicated")


def prop_gradients(ctx):
    tol = ctx.tol
    net = _random_net(ctx.rng, [3, 5, 4, 6])
    states = ctx.rng.normal(size=(8, 3))
    actions = ctx.rng.integers(6, size=8)
    targets = ctx.rng.normal(size=8)
    _, grads = loss_and_grads(net, states, actions, targets)
    worst = 0.0
    for layer in range(len(net.weights)):
        for kind, analytic in (("weights", grads[layer][0]), ("biases", grads[layer][1])):
            params = getattr(net, kind)[layer]
            for idx in np.ndindex(params.shape):
                saved = params[idx]
                params[idx] = saved + tol.grad_step
                up = loss_and_grads(net, states, actions, targets)[0]
                params[idx] = saved - tol.grad_step
                down = loss_and_grads(net, states, actions, targets)[0]
                params[idx] = saved
                numeric = (up - down) / (2 * tol.grad_step)
                err = abs(analytic[idx] - numeric) / max(abs(analytic[idx]), abs(numeric), 1e-3)
                worst = max(worst, err)
    check(worst <= tol.grad_rel_tol, f"worst relative gradient error {worst:.2e}")


def _small_training(ctx, seed, on_episode_end=None, sync=10):
    env = JPPOEnv(replace(ctx.config, horizon=ctx.tol.train_horizon))
    cfg = AgentConfig(batch_size=4, buffer_capacity=64, hidden_sizes=(8,), target_sync_every=sync,
                      learning_rate=1e-2)
    return train(env, cfg, ctx.tol.train_episodes, seed=seed, on_episode_end=on_episode_end)


def prop_target_staleness(ctx):
    snapshots = []
    sync = 2

    def record(episode, net, target_net, epsilon, buffer):
        snapshots.append((episode, net.copy(), target_net.copy()))

    _small_training(ctx, 5, record, sync=sync)
    held = snapshots[0][2]
    for episode, net, target in snapshots:
        if (episode + 1) % sync == 0:
            check(target.same_parameters(net), f"target not synced after episode {episode}")
            held = target
        else:
            check(target.same_parameters(held), f"target changed between syncs at episode {episode}")


def prop_training_determinism(ctx):
    a = _small_training(ctx, 3)
    b = _small_training(ctx, 3)
    check(a.metrics == b.metrics, "metric streams differ between identical runs")
    check(a.net.same_parameters(b.net), "final networks differ between identical runs")


# ---------------------------------------------------------------- oracle

def prop_oracle_env_agreement(ctx):
    cfg = ctx.config
    gains = _bin_gains(cfg, ctx.tol.oracle_bins)
    table = derive_request_table(cfg, gains)
    atol = ctx.tol.oracle_atol
    for s, g in enumerate(gains):
        for p, profile in enumerate(cfg.prompt_distribution):
            for action in ALL_ACTIONS:
                ev = evaluate_request(cfg, profile, action, g)
                i = action.joint_index
                pairs = (("reward", ev.reward), ("f", ev.fidelity.f), ("ber", ev.link.ber),
                         ("energy_total_j", ev.cost.energy_total_j), ("time_total_s", ev.cost.time_total_s))
                for name, value in pairs:
                    expected = table[name][s, p, i]
                    check(math.isclose(value, expected, rel_tol=1e-12, abs_tol=atol),
                          f"{name} for {action} at g={g:.4g}: env {value} vs oracle {expected}")
                check(len(ev.violated) == table["violations"][s, p, i], f"violation count for {action}")


def prop_mc_convergence(ctx):
    cfg = ctx.config
    scale = snr_scale(cfg)
    fading = FadingBin(0.5 / scale, 2.0 / scale)
    n = ctx.tol.mc_samples
    small = evaluate_bin(cfg, fading, n, np.random.default_rng(ctx.rng.integers(2 ** 32)))
    large = evaluate_bin(cfg, fading, 4 * n, np.random.default_rng(ctx.rng.integers(2 ** 32)))
    mask = small.std_errors > 0
    check(mask.any(), "no action has any reward spread in the bin")
    ratio = float(np.mean(large.std_errors[mask] / small.std_errors[mask]))
    check(0.4 <= ratio <= 0.6, f"standard error shrank by {ratio:.3f} for 4x samples, expected about 0.5")


def prop_oracle_exhaustive(ctx):
    table = optimal_policy(ctx.config, bins=ctx.tol.oracle_bins, mc_samples=ctx.tol.mc_samples // 4, workers=2)
    check(table.reward_table.shape == (ctx.tol.oracle_bins, NUM_ACTIONS), f"shape {table.reward_table.shape}")
    check(np.all(np.isfinite(table.reward_table)), "non-finite expected reward")


PROPERTIES: Dict[str, Callable] = {
    "channel.ber_shape": prop_ber_shape,
    "channel.rate": prop_rate,
    "channel.snr_linear": prop_snr_linear,
    "channel.power_lowers_ber": prop_power_lowers_ber,
    "channel.fading_determinism": prop_fading_determinism,
    "service.kappa_levels": prop_kappa_levels,
    "service.cost_monotone_in_kappa": prop_cost_monotone_in_kappa,
    "service.tx_power_tension": prop_tx_power_tension,
    "service.cost_decomposition": prop_cost_decomposition,
    "service.cost_matches_oracle": prop_cost_matches_oracle,
    "service.uncompressed_baseline": prop_uncompressed_baseline,
    "fidelity.weighting": prop_fidelity_weighting,
    "fidelity.weights_validated": prop_weights_validated,
    "fidelity.monotone": prop_fidelity_monotone,
    "env.reward_monotone": prop_reward_monotone,
    "env.constraints_exact": prop_constraints_exact,
    "env.episode_reproducible": prop_episode_reproducible,
    "env.users_independent": prop_users_independent,
    "agent.double_target_reduction": prop_double_target_reduction,
    "agent.overestimation_ordering": prop_overestimation_ordering,
    "agent.td_loss_mean": prop_td_loss_mean,
    "agent.gradients": prop_gradients,
    "agent.target_staleness": prop_target_staleness,
    "agent.training_determinism": prop_training_determinism,
    "oracle.env_agreement": prop_oracle_env_agreement,
    "oracle.mc_convergence": prop_mc_convergence,
    "oracle.exhaustive": prop_oracle_exhaustive,
}


def run_property(name, impl, tol, seed):
    """Run one property; any exception other than a failed check is reported as a failure too."""
    try:
        PROPERTIES[name](Context(impl, tol, seed, name))
    except PropertyFailed as e:
        return PropertyResult(name, False, str(e))
    except Exception as e:
        logger.exception("Property %s raised", name)
        return PropertyResult(name, False, f"{type(e).__name__}: {e}")
    return PropertyResult(name, True)


def run_mutations(tol, seed, mutations=None):
    results = []
    for label, overrides, prop in (mutations or MUTATIONS):
        outcome = run_property(prop, replace(Impl(), **overrides), tol, seed)
        results.append(MutationResult(label, prop, detected=not outcome.passed, detail=outcome.detail))
    # the same wrong double target must still satisfy the reduction property
    label, overrides, _ = MUTATIONS[-1]
    outcome = run_property("agent.double_target_reduction", replace(Impl(), **overrides), tol, seed)
    results.append(MutationResult(label + " (reduction still holds)", "agent.double_target_reduction",
                                  detected=outcome.passed, detail=outcome.detail))
    return results


# ---------------------------------------------------------------- golden cases

def _prompt(name):
    for p in DEFAULT_PROMPTS:
        if p.name == name:
            return p
    raise KeyError(f"Unknown prompt {name!r}")


def _derive_channel(inputs):
    params = replace(ChannelParams(), bandwidth_hz=float(inputs.get("bandwidth_hz", 1e6)))
    s = float(inputs["snr"])
    return {"ber": ber(s), "rate_bps": rate(s, params)}


def _derive_snr(inputs):
    return {"snr": snr(float(inputs["power_w"]), float(inputs["gain"]), ChannelParams())}


def _derive_kappa_levels(inputs):
    return {"kappa": [kappa_of_level(c) for c in range(NUM_COMPRESSION_LEVELS)]}


def _derive_request_cost(inputs):
    cfg = EnvConfig()
    action = Action(inputs["compression_level"], inputs["power_level"])
    c = _cost(_prompt(inputs["prompt"]), action, float(inputs["gain"]), cfg)
    return {k: v for k, v in asdict(c).items() if k != "kappa"}


def _derive_latency_improvement(inputs):
    return {"improvement": improvement_at(ComputeProfile(), _prompt(inputs["prompt"]).total_tokens,
                                          float(inputs.get("kappa", 0.25)))}


def _derive_fidelity(inputs):
    r = SyntheticScorer().score(float(inputs["kappa"]), float(inputs["ber"]))
    return {"f1": r.f1, "f2": r.f2, "f3": r.f3, "f": r.f}


def _derive_handset_net(inputs):
    w2 = 0.1 * np.arange(NUM_ACTIONS)[None, :]
    net = QNetwork([[[1.0], [2.0], [-1.0]], w2], [[0.5], np.ones(NUM_ACTIONS)])
    q = q_forward(net, np.ones(3))
    return {"q_first": float(q[0]), "q_last": float(q[-1]), "greedy": int(np.argmax(q))}


def _derive_tabular_chain(inputs):
    mu = float(inputs["discount"])
    # (state, action) -> (reward, next state)
    chain = {("A", 0): (0.0, "A"), ("A", 1): (1.0, "B"), ("B", 0): (2.0, "A"), ("B", 1): (0.0, "B")}
    q = {"A": [0.0, 0.0], "B": [0.0, 0.0]}
    for _ in range(int(inputs.get("sweeps", 200))):
        for (s, a), (r, s2) in chain.items():
            q = tabular_q_update(q, TabularTransition(s, a, r, s2, False), 1.0, mu)
    return {"q_A": q["A"], "q_B": q["B"]}


def _derive_step_vs_oracle(inputs):
    """Largest gap between one live env step and the independent derivation of the same request."""
    cfg = EnvConfig(seed=int(inputs["seed"]))
    action = Action(inputs["compression_level"], inputs["power_level"])
    env = JPPOEnv(cfg)
    env.reset(seed=cfg.seed)
    outcome = env.step([action])[0]
    table = derive_request_table(cfg, np.array([outcome.link.fading_gain]))
    p = cfg.prompt_distribution.index(outcome.prompt)
    i = action.joint_index
    gaps = [abs(outcome.reward - table["reward"][0, p, i]), abs(outcome.fidelity.f - table["f"][0, p, i]),
            abs(outcome.link.ber - table["ber"][0, p, i]),
            abs(outcome.cost.energy_total_j - table["energy_total_j"][0, p, i]),
            abs(outcome.cost.time_total_s - table["time_total_s"][0, p, i])]
    return {"max_abs_gap": float(max(gaps))}


def _derive_reset_state(inputs):
    cfg = EnvConfig(seed=int(inputs["seed"]))
    state = JPPOEnv(cfg).reset(seed=cfg.seed)
    return {"state": [float(x) for x in state[0]]}


def _derive_env_step(inputs):
    """Every recorded field of the first StepOutcome of a seeded episode."""
    cfg = EnvConfig(seed=int(inputs["seed"]))
    env = JPPOEnv(cfg)
    env.reset(seed=cfg.seed)
    outcome = env.step([Action(inputs["compression_level"], inputs["power_level"])])[0]
    return {
        "prompt": outcome.prompt.name,
        "fading_gain": outcome.link.fading_gain,
        "reward": outcome.reward,
        "fidelity": outcome.fidelity.f,
        "ber": outcome.link.ber,
        "energy_total_j": outcome.cost.energy_total_j,
        "time_total_s": outcome.cost.time_total_s,
        "violated": sorted(outcome.violated),
        "next_state": [float(x) for x in outcome.next_state],
    }


def _derive_cost_table(inputs):
    """Total energy and delay of all 50 actions, per prompt, with every action's link at one SNR."""
    cfg = EnvConfig()
    if inputs.get("compute"):
        cfg = replace(cfg, compute=replace(cfg.compute, **inputs["compute"]))
    target = float(inputs["snr"])
    scale = cfg.channel.path_gain / cfg.channel.noise_power_w
    table = {}
    for profile in cfg.prompt_distribution:
        energies, times = [], []
        for action in ALL_ACTIONS:
            c = _cost(profile, action, target / (action.power_w * scale), cfg)
            energies.append(c.energy_total_j)
            times.append(c.time_total_s)
        table[f"{profile.name}_energy_total_j"] = energies
        table[f"{profile.name}_time_total_s"] = times
    return table


def _derive_service_table(inputs):
    """Largest gap between total_cost and the independent derivation for every action at a fixed SNR."""
    cfg = EnvConfig()
    target = float(inputs["snr"])
    scale = cfg.channel.path_gain / cfg.channel.noise_power_w
    worst = 0.0
    for p, profile in enumerate(cfg.prompt_distribution):
        for action in ALL_ACTIONS:
            g = target / (action.power_w * scale)
            c = _cost(profile, action, g, cfg)
            table = derive_request_table(cfg, np.array([g]))
            for name in ("energy_total_j", "time_total_s", "energy_tx_j", "time_tx_s"):
                worst = max(worst, abs(getattr(c, name) - table[name][0, p, action.joint_index]))
    return {"max_abs_gap": worst}


DERIVATIONS: Dict[str, Callable] = {
    "channel": _derive_channel,
    "snr": _derive_snr,
    "kappa_levels": _derive_kappa_levels,
    "request_cost": _derive_request_cost,
    "latency_improvement": _derive_latency_improvement,
    "fidelity": _derive_fidelity,
    "handset_net": _derive_handset_net,
    "tabular_chain": _derive_tabular_chain,
    "reset_state": _derive_reset_state,
    "env_step": _derive_env_step,
    "cost_table": _derive_cost_table,
    "step_vs_oracle": _derive_step_vs_oracle,
    "service_table_vs_oracle": _derive_service_table,
}


def load_golden_cases(path=GOLDEN_PATH):
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    cases = []
    for entry in data["cases"]:
        case = GoldenCase(**entry)
        if case.provenance not in PROVENANCES:
            raise ValueError(f"{case.identifier}: provenance must be one of {', '.join(PROVENANCES)}")
        cases.append(case)
    return cases


def _is_label(value):
    """Strings and lists of strings (tags, prompt names) compare exactly."""
    if isinstance(value, str):
        return True
    return isinstance(value, list) and all(isinstance(v, str) for v in value)


def check_golden(case):
    """Recompute a case through its derivation and compare with the stored values."""
    if case.derivation not in DERIVATIONS:
        return GoldenResult(case.identifier, case.provenance, False,
                            f"no derivation named {case.derivation!r}")
    try:
        actual = DERIVATIONS[case.derivation](case.inputs)
    except Exception as e:
        return GoldenResult(case.identifier, case.provenance, False, f"{type(e).__name__}: {e}")
    for key, expected in (case.expected or {}).items():
        if key not in actual:
            return GoldenResult(case.identifier, case.provenance, False, f"derivation gave no {key!r}")
        if _is_label(expected):
            if actual[key] != expected:
                return GoldenResult(case.identifier, case.provenance, False,
                                    f"{key}: got {actual[key]!r}, expected {expected!r}")
            continue
        if np.shape(actual[key]) != np.shape(expected):
            return GoldenResult(case.identifier, case.provenance, False,
                                f"{key}: shape {np.shape(actual[key])}, expected {np.shape(expected)}")
        if not np.allclose(actual[key], expected, rtol=case.tolerance, atol=case.tolerance):
            return GoldenResult(case.identifier, case.provenance, False,
                                f"{key}: got {actual[key]}, expected {expected}")
    return GoldenResult(case.identifier, case.provenance, True)


def regenerate_golden(path=GOLDEN_PATH):
    """Rewrite the expected values of derived cases from their derivations."""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    for entry in data["cases"]:
        if entry["provenance"] == "derived":
            actual = DERIVATIONS[entry["derivation"]](entry["inputs"])
            entry["expected"] = {k: actual[k] for k in entry["expected"]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
        f.write("\n")
    return path


# ---------------------------------------------------------------- entry points

def run_all(profile="default", seed=0, golden_path=GOLDEN_PATH):
    """Run every property, every mutation check and every golden case."""
    if profile not in PROFILES:
        raise ValueError(f"Unknown profile {profile!r}; choose from {', '.join(PROFILES)}")
    tol = PROFILES[profile]
    report = PropertyReport(profile=profile, seed=seed)
    impl = Impl()
    for name in PROPERTIES:
        result = run_property(name, impl, tol, seed)
        logger.info("%s %s", "PASS" if result.passed else "FAIL", name)
        report.properties.append(result)
    report.mutations = run_mutations(tol, seed)
    report.golden = [check_golden(case) for case in load_golden_cases(golden_path)]
    return report


def write_reports(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    text_path = os.path.join(out_dir, "property_report.txt")
    json_path = os.path.join(out_dir, "property_report.json")
    with open(text_path, "w", encoding="utf-8") as f:
        f.write(report.as_text() + "\n")
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return text_path, json_path


def main():
    parser = argparse.ArgumentParser(description="Run the property suite.")
    parser.add_argument("--profile", choices=sorted(PROFILES), default="default")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="props", help="Directory for the report pair")
    parser.add_argument("--regenerate", action="store_true", help="Rewrite derived golden values and exit")
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING)

    if args.regenerate:
        print(f"Regenerated {regenerate_golden()}")
        return 0
    report = run_all(args.profile, args.seed)
    text_path, json_path = write_reports(report, args.out)
    print(report.as_text())
    print(f"Reports written to {text_path} and {json_path}")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
