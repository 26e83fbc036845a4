"""Desk-scale differentiable environments and the tabular random MDP.

Environment dynamics and rewards are written in adgraph primitives, so exact
step Jacobians come straight off the tape. States and actions are batched
row-wise: (B, d_s) states, (B, d_a) actions, (B,) rewards.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import adgraph as ag
from .adgraph import Value


@dataclass
class Transition:
    """One environment step enriched with next-state Jacobians."""

    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    j_s: np.ndarray        # d s_{t+1} / d s_t, (d_s, d_s)
    j_a: np.ndarray        # d s_{t+1} / d a_t, (d_s, d_a)
    done: bool
    episode: int
    step: int


class DiffEnv:
    """Base differentiable environment. Subclasses define the step program."""

    name = "base"
    state_dim = 0
    action_dim = 0
    action_bound = 1.0
    horizon = 100
    noise_std = 0.0
    default_discount = 0.99

    def sample_p0(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def dynamics(self, tape: ag.Tape, s: Value, a: Value) -> Value:
        raise NotImplementedError

    def reward(self, tape: ag.Tape, s: Value, a: Value) -> Value:
        raise NotImplementedError


class LqrEnv(DiffEnv):
    """s' = A s + B a with quadratic cost r = -(s'Qs + a'Ra)."""

    name = "lqr"
    state_dim = 4
    action_dim = 2
    action_bound = 10.0
    horizon = 64
    default_discount = 0.95

    def __init__(self, seed: int = 0, spectral_radius: float = 0.95, noise_std: float = 0.0):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((self.state_dim, self.state_dim))
        rho = np.max(np.abs(np.linalg.eigvals(a)))
        self.A = a * (spectral_radius / rho)
        self.B = rng.standard_normal((self.state_dim, self.action_dim)) / np.sqrt(self.state_dim)
        self.Q = np.eye(self.state_dim)
        self.R = 0.1 * np.eye(self.action_dim)
        self.noise_std = noise_std
        self.p0_std = 0.5

    def sample_p0(self, rng, n):
        return self.p0_std * rng.standard_normal((n, self.state_dim))

    def dynamics(self, tape, s, a):
        at = tape.leaf(self.A.T)
        bt = tape.leaf(self.B.T)
        return (s @ at) + (a @ bt)

    def reward(self, tape, s, a):
        q = tape.leaf(self.Q)
        r = tape.leaf(self.R)
        sq = ag.rowsum((s @ q) * s)
        ar = ag.rowsum((a @ r) * a)
        return -(sq + ar)


class PendulumEnv(DiffEnv):
    """Semi-implicit-Euler swing-up; angle is measured from upright."""

    name = "pendulum"
    state_dim = 2
    action_dim = 1
    action_bound = 5.0
    horizon = 128
    default_discount = 0.98

    def __init__(self, seed: int = 0, noise_std: float = 0.0):
        self.dt = 0.05
        self.grav_coef = 14.7      # 3 g / (2 l)
        self.torque_coef = 3.0     # 3 / (m l^2)
        self.damping = 0.1
        self.noise_std = noise_std

    def sample_p0(self, rng, n):
        th = rng.uniform(-np.pi, np.pi, size=(n, 1))
        om = rng.uniform(-1.0, 1.0, size=(n, 1))
        return np.concatenate([th, om], axis=1)

    def dynamics(self, tape, s, a):
        th = ag.take_slice(s, 0, 1)
        om = ag.take_slice(s, 1, 2)
        om2 = om + ag.scale(ag.sin(th), self.grav_coef * self.dt) \
                 + ag.scale(a, self.torque_coef * self.dt) \
                 + ag.scale(om, -self.damping * self.dt)
        th2 = th + ag.scale(om2, self.dt)
        return ag.concat([th2, om2])

    def reward(self, tape, s, a):
        th = ag.take_slice(s, 0, 1)
        om = ag.take_slice(s, 1, 2)
        ones = tape.leaf(np.ones(th.shape))
        upright = ag.scale(ones - ag.cos(th), 2.0)
        cost = upright + ag.scale(ag.square(om), 0.05) + ag.scale(ag.square(a), 0.001)
        return ag.reshape(ag.scale(cost, -1.0), (s.shape[0],))


class SoftContactEnv(DiffEnv):
    """Point mass near a stiff smooth penalty wall at x = 0.

    The wall pushes with a softplus-shaped normal force whose stiffness makes
    step Jacobians nearly discontinuous across the contact boundary.
    """

    name = "softcontact-pointmass"
    state_dim = 2
    action_dim = 1
    action_bound = 5.0
    horizon = 100
    default_discount = 0.98

    def __init__(self, seed: int = 0, noise_std: float = 0.0):
        self.dt = 0.05
        self.length_scale = 0.01
        self.stiffness = 400.0
        self.sharpness = 2.0 / self.length_scale
        self.damping = 0.2
        self.target = 0.02
        self.noise_std = noise_std

    def wall_force_np(self, x: np.ndarray) -> np.ndarray:
        return (self.stiffness / self.sharpness) * np.logaddexp(0.0, -self.sharpness * x)

    def sample_p0(self, rng, n):
        x = rng.uniform(0.5, 1.5, size=(n, 1))
        v = rng.uniform(-2.0, 0.5, size=(n, 1))
        return np.concatenate([x, v], axis=1)

    def dynamics(self, tape, s, a):
        x = ag.take_slice(s, 0, 1)
        v = ag.take_slice(s, 1, 2)
        force = ag.scale(ag.softplus(ag.scale(x, -self.sharpness)),
                         self.stiffness / self.sharpness)
        acc = a + force - ag.scale(v, self.damping)
        v2 = v + ag.scale(acc, self.dt)
        x2 = x + ag.scale(v2, self.dt)
        return ag.concat([x2, v2])

    def reward(self, tape, s, a):
        x = ag.take_slice(s, 0, 1)
        v = ag.take_slice(s, 1, 2)
        tgt = tape.leaf(np.full(x.shape, self.target))
        cost = ag.square(x - tgt) + ag.scale(ag.square(v), 0.1) \
            + ag.scale(ag.square(a), 0.01)
        return ag.reshape(ag.scale(cost, -1.0), (s.shape[0],))


_ENVS = {"lqr": LqrEnv, "pendulum": PendulumEnv, "softcontact-pointmass": SoftContactEnv}


def make_env(name: str, seed: int = 0, **kwargs) -> DiffEnv:
    if name not in _ENVS:
        raise ValueError(f"unknown environment '{name}' (have {sorted(_ENVS)})")
    return _ENVS[name](seed=seed, **kwargs)


def env_step(env: DiffEnv, s: Value, a: Value, tape: ag.Tape,
             rng: np.random.Generator | None = None,
             noise: np.ndarray | None = None) -> tuple[Value, Value]:
    """One recorded step: (s', r). Process noise is added after the
    deterministic map through a constant leaf, so path gradients flow.
    A NonFiniteError from the step program signals trajectory truncation.
    """
    s_det = env.dynamics(tape, s, a)
    r = env.reward(tape, s, a)
    if noise is None and rng is not None and env.noise_std > 0.0:
        noise = env.noise_std * rng.standard_normal(s_det.shape)
    if noise is not None:
        s_det = s_det + tape.leaf(noise)
    return s_det, r


def collect_diff_trajectories(env: DiffEnv, policy, n_envs: int, horizon: int,
                              seed, episode_offset: int = 0) -> list[Transition]:
    """Roll n_envs independent episodes, extracting per-step Jacobians.

    Per-env RNG streams are spawned from the seed, so results do not depend
    on how the rollouts are batched.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = [np.random.default_rng(s) for s in seq.spawn(n_envs)]
    states = np.stack([env.sample_p0(streams[i], 1)[0] for i in range(n_envs)])
    alive = np.ones(n_envs, dtype=bool)
    out: list[list[Transition]] = [[] for _ in range(n_envs)]
    ds, da = env.state_dim, env.action_dim

    for t in range(horizon):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        s_np = states[idx]
        mu = policy.mlp.forward_np(s_np)
        eps = np.stack([streams[i].standard_normal(da) for i in idx])
        a_np = policy.bound * np.tanh(mu + np.exp(policy.log_std) * eps)
        if env.noise_std > 0.0:
            noise = env.noise_std * np.stack([streams[i].standard_normal(ds) for i in idx])
        else:
            noise = None
        try:
            batch = _step_with_jacobians(env, s_np, a_np, noise)
        except ag.NonFiniteError:
            batch = None
        if batch is None:
            # isolate the offending rows one env at a time
            for row, i in enumerate(idx):
                ni = None if noise is None else noise[row:row + 1]
                try:
                    single = _step_with_jacobians(env, s_np[row:row + 1],
                                                  a_np[row:row + 1], ni)
                except ag.NonFiniteError:
                    alive[i] = False
                    if out[i]:
                        out[i][-1].done = True
                    continue
                sp, r, js, ja = single
                done = t == horizon - 1
                out[i].append(Transition(s_np[row].copy(), a_np[row].copy(), float(r[0]),
                                         sp[0].copy(), js[0].copy(), ja[0].copy(),
                                         done, episode_offset + i, t))
                states[i] = sp[0]
        else:
            sp, r, js, ja = batch
            done = t == horizon - 1
            for row, i in enumerate(idx):
                out[i].append(Transition(s_np[row].copy(), a_np[row].copy(), float(r[row]),
                                         sp[row].copy(), js[row].copy(), ja[row].copy(),
                                         done, episode_offset + i, t))
                states[i] = sp[row]
    return [tr for per_env in out for tr in per_env]


def _step_with_jacobians(env, s_np, a_np, noise):
    tape = ag.Tape()
    s = tape.leaf(s_np)
    a = tape.leaf(a_np)
    s_det = env.dynamics(tape, s, a)
    r = env.reward(tape, s, a)
    jac = ag.batched_jacobian(tape, s_det, [s, a])
    j = jac.data
    ds = env.state_dim
    sp = s_det.data if noise is None else s_det.data + noise
    if not np.all(np.isfinite(sp)):
        raise ag.NonFiniteError("non-finite next state")
    return sp, r.data, j[:, :, :ds], j[:, :, ds:]


def eval_policy(env: DiffEnv, policy, gamma: float, n_episodes: int,
                horizon: int, seed) -> tuple[float, float]:
    """Discounted return of the mean action, averaged over fresh episodes."""
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.default_rng(seq)
    states = env.sample_p0(rng, n_episodes)
    returns = np.zeros(n_episodes)
    disc = 1.0
    for t in range(horizon):
        a_np = policy.act_np(states)
        tape = ag.Tape()
        s = tape.leaf(states)
        a = tape.leaf(a_np)
        noise = env.noise_std * rng.standard_normal(states.shape) if env.noise_std > 0 else None
        sp, r = env_step(env, s, a, tape, noise=noise)
        returns += disc * r.data
        disc *= gamma
        states = sp.data
    return float(np.mean(returns)), float(np.std(returns))


def dump_transitions(path, transitions: list[Transition], state_dim: int, action_dim: int) -> None:
    """Columnar trajectory dump, one row per transition."""
    header = (["episode", "step"]
              + [f"s{i}" for i in range(state_dim)]
              + [f"a{i}" for i in range(action_dim)]
              + ["r"]
              + [f"sp{i}" for i in range(state_dim)]
              + [f"js{i}{j}" for i in range(state_dim) for j in range(state_dim)]
              + [f"ja{i}{j}" for i in range(state_dim) for j in range(action_dim)]
              + ["done"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for tr in transitions:
            row = ([tr.episode, tr.step] + [repr(v) for v in tr.s] + [repr(v) for v in tr.a]
                   + [repr(tr.r)] + [repr(v) for v in tr.s_next]
                   + [repr(v) for v in tr.j_s.ravel()] + [repr(v) for v in tr.j_a.ravel()]
                   + [int(tr.done)])
            w.writerow(row)


# ---------------------------------------------------------------------------
# tabular random MDP


@dataclass
class TabularMdp:
    rewards: np.ndarray        # (S, A), iid uniform [0, 1]
    transitions: np.ndarray    # (S, A, S), Dirichlet rows
    logits: np.ndarray         # (S, A) softmax policy parameters
    gamma: float

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_actions(self) -> int:
        return self.rewards.shape[1]


def make_tabular_mdp(seed: int, n_states: int = 20, n_actions: int = 5,
                     dirichlet_alpha: float = 1.0, gamma: float = 0.99) -> TabularMdp:
    if n_states < 1 or n_actions < 1:
        raise ValueError("state/action counts must be >= 1")
    if dirichlet_alpha <= 0:
        raise ValueError("dirichlet_alpha must be > 0")
    rng = np.random.default_rng(seed)
    rewards = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    alpha = np.full(n_states, dirichlet_alpha)
    transitions = rng.dirichlet(alpha, size=(n_states, n_actions))
    logits = np.zeros((n_states, n_actions))
    return TabularMdp(rewards=rewards, transitions=transitions, logits=logits, gamma=gamma)


def softmax_policy(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=1, keepdims=True)


def tabular_exact_value(mdp: TabularMdp, policy_probs: np.ndarray) -> np.ndarray:
    """Solve (I - gamma P^pi) V = r^pi directly."""
    if not (0.0 <= mdp.gamma < 1.0):
        raise ValueError("exact value solve needs gamma < 1")
    r_pi = np.sum(policy_probs * mdp.rewards, axis=1)
    p_pi = np.einsum("sa,sat->st", policy_probs, mdp.transitions)
    mat = np.eye(mdp.n_states) - mdp.gamma * p_pi
    v = np.linalg.solve(mat, r_pi)
    resid = np.max(np.abs(mat @ v - r_pi))
    if resid > 1e-10:
        raise ArithmeticError(f"value solve residual {resid:.3e}")
    return v


def stationary_reward_rate(mdp: TabularMdp, policy_probs: np.ndarray) -> float:
    """Long-run average reward per step under the stationary distribution."""
    p_pi = np.einsum("sa,sat->st", policy_probs, mdp.transitions)
    n = mdp.n_states
    mat = (p_pi.T - np.eye(n)).copy()
    mat[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    d = np.linalg.solve(mat, rhs)
    r_pi = np.sum(policy_probs * mdp.rewards, axis=1)
    return float(d @ r_pi)


# ---------------------------------------------------------------------------
# Riccati oracle for LQR control quality


def riccati_lqr(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
                gamma: float = 1.0, tol: float = 1e-13, max_iter: int = 200_000):
    """Fixed-point iteration on the discounted discrete Riccati equation.

    Returns (P, K) with optimal value s'Ps and optimal control a = -K s.
    """
    asq = np.sqrt(gamma) * A
    bsq = np.sqrt(gamma) * B
    p = Q.copy()
    for _ in range(max_iter):
        btp = bsq.T @ p
        gain = np.linalg.solve(R + btp @ bsq, btp @ asq)
        p_next = Q + asq.T @ p @ asq - asq.T @ p @ bsq @ gain
        delta = np.max(np.abs(p_next - p))
        p = p_next
        if delta < tol:
            break
    else:
        raise ArithmeticError("Riccati iteration did not converge")
    btp = bsq.T @ p
    k = np.linalg.solve(R + btp @ bsq, btp @ asq)
    return p, k


def lqr_optimal_cost(env: LqrEnv, gamma: float, n_episodes: int, seed) -> float:
    """Mean discounted optimal cost over the same start states eval uses."""
    p, _ = riccati_lqr(env.A, env.B, env.Q, env.R, gamma)
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.default_rng(seq)
    starts = env.sample_p0(rng, n_episodes)
    return float(np.mean(np.einsum("bi,ij,bj->b", starts, p, starts)))
