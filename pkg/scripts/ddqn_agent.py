"""
Double DQN learner with a small numpy value network.

The network is applied per user slot: its input is one user's 3-entry state
row and its output holds one value per joint action. Forward and backward
passes are written out by hand; training uses plain SGD.
"""

import json
import math
import logging
from collections import namedtuple
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from jppo_errors import ConfigError, JPPOError, ShapeMismatchError
from service_costs import NUM_ACTIONS

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "jppo-qnet"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AgentConfig:
    """Hyper-parameters of the learner.

    Args:
        learning_rate: SGD step size
        discount: Discount factor, in [0, 1)
        epsilon_start, epsilon_decay, epsilon_min: Per-episode exploration schedule
        batch_size: Transitions per gradient step
        buffer_capacity: Replay memory size
        target_sync_every: Episodes between target-network copies
        hidden_sizes: Widths of the rectified hidden layers
        learn_start: Buffer size before updates begin (defaults to batch_size)
    """

    learning_rate: float = 1e-3
    discount: float = 0.5
    epsilon_start: float = 1.0
    epsilon_decay: float = 0.995
    epsilon_min: float = 0.05
    batch_size: int = 64
    buffer_capacity: int = 10000
    target_sync_every: int = 10
    hidden_sizes: Tuple[int, ...] = (64, 64)
    learn_start: Optional[int] = None

    def __post_init__(self):
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate!r}",
                              field="agent.learning_rate")
        if not 0.0 <= self.discount < 1.0:
            raise ConfigError(f"discount must be in [0, 1), got {self.discount!r}", field="agent.discount")
        for name in ("epsilon_start", "epsilon_decay", "epsilon_min"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {value!r}", field=f"agent.{name}")
        if self.epsilon_min > self.epsilon_start:
            raise ConfigError("epsilon_min must not exceed epsilon_start", field="agent.epsilon_min")
        for name in ("batch_size", "buffer_capacity", "target_sync_every"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}", field=f"agent.{name}")
        hidden = tuple(self.hidden_sizes)
        if any(isinstance(h, bool) or int(h) != h or h < 1 for h in hidden):
            raise ConfigError(f"hidden_sizes must be positive integers, got {list(hidden)!r}",
                              field="agent.hidden_sizes")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in hidden))
        if self.learn_start is not None and (int(self.learn_start) != self.learn_start or self.learn_start < 1):
            raise ConfigError(f"learn_start must be a positive integer, got {self.learn_start!r}",
                              field="agent.learn_start")

    @property
    def effective_learn_start(self):
        return max(self.batch_size, self.learn_start or 0)


class QNetwork:
    """Feed-forward value network: rectified hidden layers, identity output.

    Weights are stored as (fan_in, fan_out) arrays so a batch X of shape
    (B, fan_in) maps to X @ W + b.
    """

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ShapeMismatchError("A network needs matching, non-empty weight and bias lists")
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float).reshape(-1) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != b.shape[0]:
                raise ShapeMismatchError(f"Layer {i}: weight {w.shape} does not match bias {b.shape}")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ShapeMismatchError(f"Layer {i} input {w.shape[0]} does not match previous output "
                                         f"{self.weights[i - 1].shape[1]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise JPPOError(f"Layer {i} has non-finite parameters")

    @classmethod
    def initialize(cls, layer_dims, rng):
        """He-normal weights and zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, layer_dims):
        return cls([np.zeros((i, o)) for i, o in zip(layer_dims[:-1], layer_dims[1:])],
                   [np.zeros(o) for o in layer_dims[1:]])

    @property
    def layer_dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    @property
    def output_dim(self):
        return self.weights[-1].shape[1]

    def copy(self):
        return QNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def same_parameters(self, other):
        """True when every parameter is bit-identical."""
        return (self.layer_dims == other.layer_dims
                and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
                and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases)))

    def forward(self, x):
        """Batch forward pass. Returns (outputs, cache) with cache used by backward."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeMismatchError(f"Expected input of shape (B, {self.input_dim}), got {x.shape}")
        activations = [x]
        pre_activations = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre_activations.append(z)
            h = z if i == last else np.maximum(z, 0.0)
            activations.append(h)
        return h, (activations, pre_activations)

    def backward(self, d_out, cache):
        """Gradients of a scalar loss given dL/d(outputs). Returns [(dW, db), ...]."""
        activations, pre_activations = cache
        grads = [None] * len(self.weights)
        delta = d_out
        for i in range(len(self.weights) - 1, -1, -1):
            grads[i] = (activations[i].T @ delta, delta.sum(axis=0))
            if i:
                delta = (delta @ self.weights[i].T) * (pre_activations[i - 1] > 0.0)
        return grads


@dataclass
class Transition:
    state: np.ndarray
    action_index: int
    reward: float
    next_state: np.ndarray
    terminal: bool

    def __post_init__(self):
        if not 0 <= int(self.action_index) < NUM_ACTIONS:
            raise ValueError(f"action_index must be in [0, {NUM_ACTIONS - 1}], got {self.action_index!r}")
        self.state = np.asarray(self.state, dtype=float)
        self.next_state = np.asarray(self.next_state, dtype=float)
        if not (np.all(np.isfinite(self.state)) and np.all(np.isfinite(self.next_state))):
            raise ValueError("Transition states must be finite")


@dataclass
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    @classmethod
    def from_transitions(cls, transitions):
        if not transitions:
            raise ValueError("Batch must contain at least one transition")
        return cls(
            states=np.vstack([t.state for t in transitions]),
            actions=np.array([int(t.action_index) for t in transitions], dtype=np.int64),
            rewards=np.array([t.reward for t in transitions], dtype=float),
            next_states=np.vstack([t.next_state for t in transitions]),
            terminals=np.array([bool(t.terminal) for t in transitions]),
        )

    def __len__(self):
        return len(self.actions)


# Transition keyed by hashable discrete states, for the tabular learner
TabularTransition = namedtuple("TabularTransition", "state action_index reward next_state terminal")

class ReplayBuffer:
    """Fixed-capacity FIFO replay memory backed by numpy ring arrays."""

    def __init__(self, capacity, state_dim):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.state_dim = int(state_dim)
        self.states = np.zeros((self.capacity, self.state_dim))
        self.actions = np.zeros(self.capacity, dtype=np.int64)
        self.rewards = np.zeros(self.capacity)
        self.next_states = np.zeros((self.capacity, self.state_dim))
        self.terminals = np.zeros(self.capacity, dtype=bool)
        self._next = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, transition):
        i = self._next
        self.states[i] = transition.state
        self.actions[i] = transition.action_index
        self.rewards[i] = transition.reward
        self.next_states[i] = transition.next_state
        self.terminals[i] = transition.terminal
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _ordered_indices(self):
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def transitions(self):
        """Stored transitions, oldest first."""
        return [Transition(self.states[i].copy(), int(self.actions[i]), float(self.rewards[i]),
                           self.next_states[i].copy(), bool(self.terminals[i]))
                for i in self._ordered_indices()]

    def sample(self, batch_size, rng):
        """Uniform mini-batch without replacement."""
        if batch_size > self.size:
            raise ValueError(f"Cannot sample {batch_size} transitions from a buffer of {self.size}")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return TransitionBatch(self.states[idx].copy(), self.actions[idx].copy(), self.rewards[idx].copy(),
                               self.next_states[idx].copy(), self.terminals[idx].copy())


def q_forward(net, state):
    """Action values for one state row (shape (d,)) or a batch (shape (B, d))."""
    state = np.asarray(state, dtype=float)
    if state.ndim == 1:
        if state.shape[0] != net.input_dim:
            raise ShapeMismatchError(f"State has {state.shape[0]} entries, network expects {net.input_dim}")
        return net.forward(state[None, :])[0][0]
    return net.forward(state)[0]


def select_action(net, state, epsilon, rng):
    """Epsilon-greedy choice; greedy ties go to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon!r}")
    if rng.random() < epsilon:
        return int(rng.integers(net.output_dim))
    return int(np.argmax(q_forward(net, state)))


def double_dqn_target(transition, current_net, target_net, discount):
    """y = r for terminal transitions, else r + mu * Q_target(s', argmax_a Q_current(s', a))."""
    if transition.terminal:
        return float(transition.reward)
    best = int(np.argmax(q_forward(current_net, transition.next_state)))
    return float(transition.reward + discount * q_forward(target_net, transition.next_state)[best])


def double_dqn_targets(batch, current_net, target_net, discount):
    """Vectorised double-DQN targets for a TransitionBatch."""
    q_next_current = q_forward(current_net, batch.next_states)
    q_next_target = q_forward(target_net, batch.next_states)
    best = np.argmax(q_next_current, axis=1)
    bootstrap = q_next_target[np.arange(len(best)), best]
    return batch.rewards + discount * np.where(batch.terminals, 0.0, bootstrap)


def single_net_targets(batch, net, discount):
    """Max-based target r + mu * max_a Q(s', a) evaluated with one network."""
    q_next = q_forward(net, batch.next_states)
    return batch.rewards + discount * np.where(batch.terminals, 0.0, q_next.max(axis=1))


def loss_and_grads(net, states, actions, targets):
    """Mean squared TD error against fixed targets, and its parameter gradients."""
    q, cache = net.forward(states)
    rows = np.arange(len(actions))
    diff = q[rows, actions] - targets
    loss = float(np.mean(diff ** 2))
    d_out = np.zeros_like(q)
    d_out[rows, actions] = 2.0 * diff / len(actions)
    return loss, net.backward(d_out, cache)


def td_loss(batch, current_net, target_net, discount):
    """Loss over a batch with double-DQN targets held constant.

    Returns:
        (loss, grads) with grads a list of (dW, db) per layer
    """
    if isinstance(batch, (list, tuple)):
        batch = TransitionBatch.from_transitions(list(batch))
    if len(batch) == 0:
        raise ValueError("td_loss needs a non-empty batch")
    targets = double_dqn_targets(batch, current_net, target_net, discount)
    return loss_and_grads(current_net, batch.states, batch.actions, targets)


def sgd_step(net, grads, learning_rate):
    """Return a new network with theta - learning_rate * grad."""
    if len(grads) != len(net.weights):
        raise ShapeMismatchError(f"Expected gradients for {len(net.weights)} layers, got {len(grads)}")
    weights, biases = [], []
    for i, ((dw, db), w, b) in enumerate(zip(grads, net.weights, net.biases)):
        dw = np.asarray(dw, dtype=float)
        db = np.asarray(db, dtype=float)
        if dw.shape != w.shape or db.shape != b.shape:
            raise ShapeMismatchError(f"Layer {i}: gradient shapes {dw.shape}/{db.shape} "
                                     f"do not match parameters {w.shape}/{b.shape}")
        weights.append(w - learning_rate * dw)
        biases.append(b - learning_rate * db)
    return QNetwork(weights, biases)


def tabular_q_update(q_table, transition, learning_rate, discount):
    """One Bellman update on a dict table {state_key: sequence of action values}.

    transition.state and transition.next_state are used as table keys.

    Raises:
        KeyError: unknown state or action
    """
    s = transition.state
    if s not in q_table:
        raise KeyError(f"Unknown state {s!r}")
    values = list(q_table[s])
    a = transition.action_index
    if not 0 <= a < len(values):
        raise KeyError(f"Unknown action {a!r} for state {s!r}")
    if transition.terminal:
        target = transition.reward
    else:
        if transition.next_state not in q_table:
            raise KeyError(f"Unknown state {transition.next_state!r}")
        target = transition.reward + discount * max(q_table[transition.next_state])
    values[a] = values[a] + learning_rate * (target - values[a])
    updated = dict(q_table)
    updated[s] = values
    return updated


def epsilon_after(episodes_done, cfg):
    """Exploration rate after a number of completed episodes."""
    return max(cfg.epsilon_start * cfg.epsilon_decay ** episodes_done, cfg.epsilon_min)


class GreedyPolicy:
    """Wraps a network as ``policy(state_row) -> joint action index``."""

    def __init__(self, net):
        self.net = net

    def __call__(self, state_row):
        return int(np.argmax(q_forward(self.net, state_row)))


@dataclass
class TrainingResult:
    net: QNetwork
    target_net: QNetwork
    metrics: List[dict] = field(default_factory=list)
    epsilon: float = 1.0
    updates: int = 0


def _episode_record(episode, rewards, metric_sums, metric_counts, epsilon, losses, buffer_size):
    record = {
        "episode": episode,
        "total_reward": float(np.sum(rewards)),
        "mean_reward": float(np.mean(rewards)),
        "epsilon": epsilon,
        "mean_loss": float(np.mean(losses)) if losses else None,
        "buffer_size": buffer_size,
    }
    for key in sorted(metric_sums):
        if key.startswith("violation_"):
            record["violations_" + key[len("violation_"):]] = int(metric_sums[key])
        else:
            record["mean_" + key] = metric_sums[key] / metric_counts[key]
    return record


def train(env, cfg, episodes, seed=None, on_episode_end=None, step_sink=None, progress=False):
    """Run the double-DQN training loop.

    Args:
        env: Environment exposing reset(seed), step(actions), num_users, state_dim, num_actions
        cfg: AgentConfig
        episodes: Number of episodes, at least 1
        seed: Master seed for the environment and the learner's random sources
        on_episode_end: Optional callable(episode, net, target_net, epsilon, buffer)
        step_sink: Optional callable(episode, step, user, outcome) for per-step records
        progress: Show a tqdm progress bar

    Returns:
        TrainingResult with the final networks and one metrics dict per episode
    """
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    if seed is None:
        seed = getattr(getattr(env, "config", None), "seed", 0)
    init_rng, explore_rng, replay_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]

    dims = [env.state_dim, *cfg.hidden_sizes, env.num_actions]
    net = QNetwork.initialize(dims, init_rng)
    target_net = net.copy()
    buffer = ReplayBuffer(cfg.buffer_capacity, env.state_dim)
    learn_start = cfg.effective_learn_start
    result = TrainingResult(net=net, target_net=target_net, epsilon=cfg.epsilon_start)

    for episode in tqdm(range(episodes), desc="Training", unit="ep", disable=not progress):
        epsilon = epsilon_after(episode, cfg)
        states = env.reset(seed=seed if episode == 0 else None)
        rewards, losses = [], []
        metric_sums, metric_counts = {}, {}
        step = 0
        terminal = False
        while not terminal:
            actions = [select_action(net, states[n], epsilon, explore_rng) for n in range(env.num_users)]
            outcomes = env.step(actions)
            for n, outcome in enumerate(outcomes):
                buffer.add(Transition(states[n], actions[n], outcome.reward, outcome.next_state, outcome.terminal))
                rewards.append(outcome.reward)
                values = outcome.metric_values() if hasattr(outcome, "metric_values") else {}
                for key, value in values.items():
                    metric_sums[key] = metric_sums.get(key, 0.0) + value
                    metric_counts[key] = metric_counts.get(key, 0) + 1
                if step_sink is not None:
                    step_sink(episode, step, n, outcome)
            if buffer.size >= learn_start:
                batch = buffer.sample(cfg.batch_size, replay_rng)
                loss, grads = td_loss(batch, net, target_net, cfg.discount)
                net = sgd_step(net, grads, cfg.learning_rate)
                losses.append(loss)
                result.updates += 1
            states = np.vstack([o.next_state for o in outcomes])
            terminal = any(o.terminal for o in outcomes)
            step += 1

        if (episode + 1) % cfg.target_sync_every == 0:
            target_net = net.copy()
        result.metrics.append(_episode_record(episode, rewards, metric_sums, metric_counts, epsilon, losses,
                                              buffer.size))
        if on_episode_end is not None:
            on_episode_end(episode, net, target_net, epsilon, buffer)

    result.net = net
    result.target_net = target_net
    result.epsilon = epsilon_after(episodes, cfg)
    logger.info("Training finished: %d episodes, %d updates", episodes, result.updates)
    return result


def save_checkpoint(path, net, target_net=None, metadata=None):
    """Write networks as JSON with row-major parameter lists (exact float round trip)."""
    def pack(n):
        return {
            "layer_dims": n.layer_dims,
            "weights": [w.tolist() for w in n.weights],
            "biases": [b.tolist() for b in n.biases],
        }

    payload = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "net": pack(net)}
    if target_net is not None:
        payload["target_net"] = pack(target_net)
    if metadata:
        payload["metadata"] = metadata
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True)
        f.write("\n")
    return path


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint.

    Returns:
        (net, target_net or None, metadata dict)
    """
    with open(path, "r", encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise JPPOError(f"{path} is not a checkpoint: {e}") from e
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise JPPOError(f"{path}: unsupported checkpoint format {payload.get('format')!r} "
                        f"version {payload.get('version')!r}")

    def unpack(blob):
        net = QNetwork(blob["weights"], blob["biases"])
        if net.layer_dims != blob["layer_dims"]:
            raise ShapeMismatchError(f"{path}: stored layer dims {blob['layer_dims']} do not match arrays")
        return net

    net = unpack(payload["net"])
    target = unpack(payload["target_net"]) if "target_net" in payload else None
    return net, target, payload.get("metadata", {})
