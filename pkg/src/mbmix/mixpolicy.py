"""Mixed-horizon path-derivative policy optimization.

The policy objective blends truncated-horizon objectives J^H with geometric
weights in the trajectory length, which lowers the variance of the policy
gradient relative to a single fixed truncation (the SHAC-style baseline).
Rollouts happen either in the learned dynamics model (branching from real
states) or directly in the differentiable environment.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace

import numpy as np

from . import adgraph as ag
from .nets import Adam, GaussianPolicy, Mlp, RunningNorm, ValueFunction, global_norm
from .envlab import DiffEnv, collect_diff_trajectories, env_step, eval_policy
from .worldmodel import DynamicsModel, EnvBuffer, SobolevConfig, train_model


class PolicyGradientError(RuntimeError):
    def __init__(self, msg, branch: int | None = None):
        super().__init__(msg)
        self.branch = branch


@dataclass
class MixConfig:
    lambda_mix: float = 0.98
    gamma: float = 0.99
    h_max: int = 16
    m: int = 1
    branch_len: int | None = None     # model-rollout length; defaults to h_max
    n_branch: int = 32
    lambda_td: float = 0.98

    def __post_init__(self):
        if not (0.0 <= self.lambda_mix <= 1.0):
            raise ValueError("lambda_mix must be in [0, 1]")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")
        if not (1 <= self.m <= self.h_max):
            raise ValueError("need 1 <= m <= h_max")
        if self.h_max % self.m != 0:
            raise ValueError("h_max must be divisible by m")
        if self.branch_len is None:
            self.branch_len = self.h_max
        if self.branch_len < self.h_max:
            raise ValueError("branch_len must be >= h_max")
        if not (0.0 <= self.lambda_td <= 1.0):
            raise ValueError("lambda_td must be in [0, 1]")


def mix_weights(lambda_mix: float, h_max: int, m: int):
    """Geometric horizon weights over {m, 2m, ..., h_max}.

    w_H is proportional to lambda^(H-1); the final horizon absorbs the
    geometric tail. The weights are nudged so np.sum(w) == 1.0 exactly.
    """
    if not (0.0 <= lambda_mix <= 1.0):
        raise ValueError("lambda_mix must be in [0, 1]")
    if not (1 <= m <= h_max) or h_max % m != 0:
        raise ValueError(f"invalid (h_max={h_max}, m={m})")
    k = h_max // m
    rho = lambda_mix ** m
    w = np.empty(k)
    for i in range(k - 1):
        w[i] = (1.0 - rho) * rho ** i
    w[k - 1] = rho ** (k - 1)
    if not _force_exact_sum(w):
        raise ArithmeticError("weight normalization did not settle")
    horizons = [(i + 1) * m for i in range(k)]
    return horizons, w


def _force_exact_sum(w: np.ndarray) -> bool:
    """Nudge one weight by ulps until np.sum(w) == 1.0 exactly.

    Adjusting a single coarse-grained entry can step the rounded sum past
    1.0 without landing on it, so candidates are tried from the entry whose
    ulp is finest relative to the sum's quantum outward.
    """
    if np.sum(w) == 1.0:
        return True
    order = sorted(range(len(w)), key=lambda i: abs(w[i] - 0.15))
    for j in order:
        if w[j] <= 0.0:
            continue
        orig = w[j]
        for _ in range(8):
            err = 1.0 - np.sum(w)
            if err == 0.0:
                return True
            w[j] += err
        for _ in range(8192):
            s = np.sum(w)
            if s == 1.0:
                return True
            w[j] = np.nextafter(w[j], np.inf if s < 1.0 else -np.inf)
        w[j] = orig
    return False


class RolloutBundle:
    """Tape-recorded branch rollouts plus bootstrap values at every step."""

    def __init__(self, tape, states, actions, rewards, values, gamma):
        self.tape = tape
        self.states = states       # L+1 Values, each (B, d_s)
        self.actions = actions     # L Values, (B, d_a)
        self.rewards = rewards     # L Values, (B,)
        self.values = values       # L+1 Values, (B,)
        self.gamma = gamma
        self._mean_r: list = [None] * len(rewards)
        self._mean_v: list = [None] * len(values)

    @property
    def length(self) -> int:
        return len(self.rewards)

    def mean_reward(self, t: int) -> ag.Value:
        if self._mean_r[t] is None:
            self._mean_r[t] = ag.reduce_mean(self.rewards[t])
        return self._mean_r[t]

    def mean_value(self, t: int) -> ag.Value:
        if self._mean_v[t] is None:
            self._mean_v[t] = ag.reduce_mean(self.values[t])
        return self._mean_v[t]

    def rewards_np(self) -> np.ndarray:
        return np.stack([r.data for r in self.rewards])

    def values_np(self) -> np.ndarray:
        return np.stack([v.data for v in self.values])

    def states_np(self) -> np.ndarray:
        return np.stack([s.data for s in self.states])


def rollout(tape: ag.Tape, env: DiffEnv, policy: GaussianPolicy, value_net: ValueFunction,
            starts: np.ndarray, length: int, rng: np.random.Generator,
            gamma: float, model: DynamicsModel | None = None,
            policy_binding=None, value_binding=None) -> RolloutBundle:
    """Differentiable rollout; in the model world when a model is given."""
    pb = policy_binding if policy_binding is not None else policy.bind(tape)
    vb = value_binding if value_binding is not None else value_net.bind(tape)
    mb = model.mlp.bind(tape) if model is not None else None
    s = tape.leaf(starts)
    states, actions, rewards, values = [s], [], [], []
    values.append(value_net.forward(tape, s, vb))
    for _ in range(length):
        eps = rng.standard_normal((starts.shape[0], policy.action_dim))
        a = policy.sample(tape, s, eps, pb)
        if model is not None:
            s_next = model.predict(tape, s, a, mb)
            r = env.reward(tape, s, a)
        else:
            noise = env.noise_std * rng.standard_normal((starts.shape[0], env.state_dim)) \
                if env.noise_std > 0 else None
            s_next, r = env_step(env, s, a, tape, noise=noise)
        actions.append(a)
        rewards.append(r)
        s = s_next
        states.append(s)
        values.append(value_net.forward(tape, s, vb))
    return RolloutBundle(tape, states, actions, rewards, values, gamma)


def fixed_horizon_objective(bundle: RolloutBundle, h: int, gamma: float) -> ag.Value:
    """Mean over branches of sum_{t<h} gamma^t r_t + gamma^h V(s_h)."""
    if h < 1 or h > bundle.length:
        raise ValueError(f"horizon {h} exceeds rollout length {bundle.length}")
    total = ag.scale(bundle.mean_reward(0), 1.0)
    for t in range(1, h):
        total = total + ag.scale(bundle.mean_reward(t), gamma ** t)
    return total + ag.scale(bundle.mean_value(h), gamma ** h)


def mix_objective(bundle: RolloutBundle, cfg: MixConfig) -> ag.Value:
    """Weighted sum of truncated objectives over the horizon grid."""
    horizons, weights = mix_weights(cfg.lambda_mix, cfg.h_max, cfg.m)
    if bundle.length < cfg.h_max:
        raise ValueError("rollout shorter than h_max")
    gamma = cfg.gamma
    # cumulative discounted reward prefixes shared across horizons
    prefixes = []
    cum = None
    for t in range(cfg.h_max):
        term = ag.scale(bundle.mean_reward(t), gamma ** t)
        cum = term if cum is None else cum + term
        prefixes.append(cum)
    total = None
    for h, w in zip(horizons, weights):
        j_h = prefixes[h - 1] + ag.scale(bundle.mean_value(h), gamma ** h)
        contrib = ag.scale(j_h, float(w))
        total = contrib if total is None else total + contrib
    return total


def mix_objective_single_pass(bundle: RolloutBundle, cfg: MixConfig) -> ag.Value:
    """Single-pass evaluation of the mixed objective (m = 1 only).

    Expands the weighted sum into per-step terms (gamma*lambda)^t (r_t +
    (1-lambda) gamma V(s_{t+1})), with the final step keeping the full
    bootstrap weight because the geometric tail is absorbed there.
    """
    if cfg.m != 1:
        raise ValueError("single-pass form requires m = 1")
    lam, gamma, h = cfg.lambda_mix, cfg.gamma, cfg.h_max
    total = None
    for t in range(h):
        gl = (gamma * lam) ** t
        term = ag.scale(bundle.mean_reward(t), gl)
        if t < h - 1:
            term = term + ag.scale(bundle.mean_value(t + 1), gl * (1.0 - lam) * gamma)
        else:
            term = term + ag.scale(bundle.mean_value(t + 1), gl * gamma)
        total = term if total is None else total + term
    return total


def value_targets(rewards: np.ndarray, values: np.ndarray, gamma: float,
                  lambda_td: float, h: int) -> np.ndarray:
    """TD(lambda)-style targets, computed with the backward recursion
    T_t = r_t + gamma ((1-lambda) V(s_{t+1}) + lambda T_{t+1}).

    rewards is (h, ...) and values is (h+1, ...); the result is detached
    (plain arrays) so the regression cannot leak gradients anywhere.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape[0] != h or values.shape[0] != h + 1:
        raise ValueError(f"need {h} rewards and {h + 1} values, got "
                         f"{rewards.shape[0]} and {values.shape[0]}")
    targets = np.empty_like(rewards)
    targets[h - 1] = rewards[h - 1] + gamma * values[h]
    for t in range(h - 2, -1, -1):
        targets[t] = rewards[t] + gamma * ((1.0 - lambda_td) * values[t + 1]
                                           + lambda_td * targets[t + 1])
    return targets


def train_value(value_net: ValueFunction, states: np.ndarray, targets: np.ndarray,
                opt: Adam, rng: np.random.Generator, epochs: int = 2,
                batch_size: int = 256) -> float:
    """Minibatch squared-error regression toward frozen targets.

    Targets are standardized through the value head's running affine, so the
    net always regresses O(1) quantities. Returns the raw-space loss."""
    n = states.shape[0]
    value_net.update_target_stats(targets)
    z = value_net.normalize_targets(targets)
    last = 0.0
    for _ in range(epochs):
        order = rng.permutation(n)
        for b in range(0, n, batch_size):
            idx = order[b:b + batch_size]
            tape = ag.Tape()
            binding = value_net.bind(tape)
            s = tape.leaf(states[idx])
            v = value_net.raw_forward(tape, s, binding)
            diff = v - tape.leaf(z[idx])
            loss = ag.reduce_mean(ag.square(diff))
            gmap = ag.backward(tape, loss)
            opt.step(value_net.mlp.params, value_net.grads_from(gmap, binding))
            last = float(loss.data) * value_net.t_sd ** 2
    return last


@dataclass
class GradientEstimate:
    grad: np.ndarray            # flat -dJ/dtheta (descent direction on -J)
    method: str                 # "MIX" | "SHAC"
    h_max: int
    objective: float


def policy_gradient(method: str, world: str, env: DiffEnv, cfg: MixConfig,
                    policy: GaussianPolicy, value_net: ValueFunction,
                    model: DynamicsModel | None, buffer: EnvBuffer | None,
                    rng: np.random.Generator,
                    start_window: int = 4096) -> GradientEstimate:
    """One policy-gradient estimate from fresh branch rollouts."""
    if method not in ("MIX", "SHAC"):
        raise ValueError(f"unknown method '{method}'")
    if world not in ("learned-model", "real-env"):
        raise ValueError(f"unknown world '{world}'")
    if world == "learned-model":
        if model is None or buffer is None or len(buffer) == 0:
            raise PolicyGradientError("learned-model world needs a model and a non-empty buffer")
        starts = buffer.recent_start_states(rng, cfg.n_branch, start_window)
        mdl = model
    else:
        starts = env.sample_p0(rng, cfg.n_branch)
        mdl = None
    tape = ag.Tape()
    pb = policy.bind(tape)
    try:
        bundle = rollout(tape, env, policy, value_net, starts, cfg.branch_len,
                         rng, cfg.gamma, model=mdl, policy_binding=pb)
        obj = mix_objective(bundle, cfg) if method == "MIX" \
            else fixed_horizon_objective(bundle, cfg.h_max, cfg.gamma)
    except ag.NonFiniteError as err:
        raise PolicyGradientError(str(err), branch=_find_bad_branch(
            env, policy, value_net, starts, cfg, rng, mdl)) from err
    gmap = ag.backward(tape, obj)
    flat = np.concatenate([-gmap.get(pb[name]).ravel() for name in policy.param_names()])
    if not np.all(np.isfinite(flat)):
        raise PolicyGradientError("non-finite policy gradient")
    return GradientEstimate(grad=flat, method=method, h_max=cfg.h_max,
                            objective=float(obj.data))


def _find_bad_branch(env, policy, value_net, starts, cfg, rng, model):
    for i in range(starts.shape[0]):
        tape = ag.Tape()
        try:
            rollout(tape, env, policy, value_net, starts[i:i + 1], cfg.branch_len,
                    np.random.default_rng(0), cfg.gamma, model=model)
        except ag.NonFiniteError:
            return i
    return None


# ---------------------------------------------------------------------------
# full training loop


@dataclass
class TrainerConfig:
    mix: MixConfig
    sobolev: SobolevConfig
    world: str = "learned-model"      # "learned-model" | "real-env"
    objective: str = "mix"            # "mix" | "fixed"
    n_envs: int = 4
    collect_horizon: int | None = None
    buffer_capacity: int = 50_000
    start_window: int = 4096
    inner_iters: int = 4
    policy_lr: float = 2e-3
    value_lr: float = 1e-3
    value_epochs: int = 2
    value_batch: int = 256
    grad_clip: float = 1.0
    value_grad_clip: float | None = 100.0
    policy_hidden: tuple = (64, 64)
    value_hidden: tuple = (64, 64)
    model_hidden: tuple = (128, 128)
    value_out_gain: float = 1.0
    init_log_std: float = -1.0
    eval_episodes: int = 16
    eval_horizon: int | None = None
    eval_every: int = 1
    eval_seed: int | None = None      # fixed eval episodes; derived from seed if None
    warmup_iters: int = 1             # model-only outer iterations before policy updates
    obs_norm: bool = False
    target_return: float | None = None   # early stop once eval reaches this


def init_nets(env: DiffEnv, cfg: TrainerConfig, seed):
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    pol_s, val_s, mdl_s = seq.spawn(3)
    policy = GaussianPolicy(env.state_dim, env.action_dim, env.action_bound,
                            hidden=cfg.policy_hidden, init_log_std=cfg.init_log_std,
                            rng=np.random.default_rng(pol_s))
    value_net = ValueFunction(env.state_dim, hidden=cfg.value_hidden,
                              out_gain=cfg.value_out_gain,
                              rng=np.random.default_rng(val_s))
    model = DynamicsModel(env.state_dim, env.action_dim, hidden=cfg.model_hidden,
                          rng=np.random.default_rng(mdl_s))
    return policy, value_net, model


def mbmix_train(env: DiffEnv, cfg: TrainerConfig, seed: int, budget: int,
                nets=None) -> list[dict]:
    """Run the outer loop until the real-env step budget is spent.

    Returns one record per outer iteration with evaluation returns, model
    losses, and gradient norms; budget 0 yields the initial evaluation only.
    """
    seq = np.random.SeedSequence([int(seed), 17])
    net_seq, collect_seq, model_seq, roll_seq, value_seq, eval_seq = seq.spawn(6)
    if nets is None:
        policy, value_net, model = init_nets(env, cfg, net_seq)
    else:
        policy, value_net, model = nets
    model_rng = np.random.default_rng(model_seq)
    roll_rng = np.random.default_rng(roll_seq)
    value_rng = np.random.default_rng(value_seq)
    pol_opt = Adam(lr=cfg.policy_lr, clip=cfg.grad_clip)
    val_opt = Adam(lr=cfg.value_lr, clip=cfg.value_grad_clip)
    buffer = EnvBuffer(cfg.buffer_capacity)
    collect_h = cfg.collect_horizon or env.horizon
    eval_h = cfg.eval_horizon or env.horizon
    model_based = cfg.world == "learned-model"
    method = "MIX" if cfg.objective == "mix" else "SHAC"

    records: list[dict] = []
    env_steps = 0
    outer = 0
    episodes = 0
    obs_norm = RunningNorm(env.state_dim) if cfg.obs_norm else None
    t0 = time.perf_counter()
    eval_ss = np.random.SeedSequence(cfg.eval_seed) if cfg.eval_seed is not None else eval_seq

    def evaluate():
        # same episodes every time: the curve tracks the policy, not eval noise
        return eval_policy(env, policy, cfg.mix.gamma, cfg.eval_episodes, eval_h, eval_ss)

    def make_record(ret, std, pred_loss, jac_loss, gnorm):
        return {"outer_iter": outer, "env_steps": env_steps,
                "eval_return_mean": ret, "eval_return_std": std,
                "model_pred_loss": pred_loss, "model_jac_loss": jac_loss,
                "grad_norm": gnorm, "wallclock_s": time.perf_counter() - t0,
                "failures": 0}

    ret, std = evaluate()
    records.append(make_record(ret, std, float("nan"), float("nan"), 0.0))
    if cfg.target_return is not None and ret >= cfg.target_return:
        return records

    collect_children = iter([])

    def next_collect_seed():
        nonlocal collect_children
        child = next(collect_children, None)
        if child is None:
            collect_children = iter(collect_seq.spawn(256))
            child = next(collect_children)
        return child

    while env_steps < budget:
        outer += 1
        pred_loss, jac_loss = float("nan"), float("nan")
        failures = 0
        if model_based:
            transitions = collect_diff_trajectories(env, policy, cfg.n_envs,
                                                    collect_h, next_collect_seed(),
                                                    episode_offset=episodes)
            episodes += cfg.n_envs
            env_steps += len(transitions)
            buffer.add(transitions)
            if obs_norm is not None:
                obs_norm.update(np.stack([tr.s for tr in transitions]))
                _apply_obs_norm(policy, value_net, obs_norm)
            report = train_model(model, buffer, cfg.sobolev, model_rng)
            good = [r for r in report if "pred_loss" in r]
            if good:
                pred_loss = good[-1]["pred_loss"]
                jac_loss = good[-1]["jac_loss"]
        gnorm = 0.0
        inner = cfg.inner_iters
        if model_based and outer <= cfg.warmup_iters:
            inner = 0      # model-only warmup
        for _ in range(inner):
            if not model_based:
                env_steps += cfg.mix.n_branch * cfg.mix.branch_len
            try:
                gnorm = _update_once(env, cfg, policy, value_net,
                                     model if model_based else None,
                                     buffer if model_based else None,
                                     method, pol_opt, val_opt, roll_rng, value_rng,
                                     obs_norm=None if model_based else obs_norm)
            except PolicyGradientError:
                failures += 1
            if not model_based and env_steps >= budget:
                break
        if outer % cfg.eval_every == 0 or env_steps >= budget:
            ret, std = evaluate()
            rec = make_record(ret, std, pred_loss, jac_loss, gnorm)
            rec["failures"] = failures
            records.append(rec)
            if cfg.target_return is not None and ret >= cfg.target_return:
                break
    return records


def _update_once(env, cfg, policy, value_net, model, buffer, method,
                 pol_opt, val_opt, roll_rng, value_rng, obs_norm=None) -> float:
    mix = cfg.mix
    if model is not None:
        starts = buffer.recent_start_states(roll_rng, mix.n_branch, cfg.start_window)
    else:
        starts = env.sample_p0(roll_rng, mix.n_branch)
    tape = ag.Tape()
    pb = policy.bind(tape)
    bundle = rollout(tape, env, policy, value_net, starts, mix.branch_len,
                     roll_rng, mix.gamma, model=model, policy_binding=pb)
    if method == "MIX":
        obj = mix_objective(bundle, mix)
    else:
        obj = fixed_horizon_objective(bundle, mix.h_max, mix.gamma)
    gmap = ag.backward(tape, obj)
    grads = {name: -gmap.get(pb[name]) for name in policy.param_names()}
    gnorm = global_norm(grads)
    if not np.isfinite(gnorm):
        raise PolicyGradientError("non-finite policy gradient")
    view = dict(policy.mlp.params)
    view["log_std"] = policy.log_std
    pol_opt.step(view, grads)
    # value regression on the same trajectories, against frozen targets
    targets = value_targets(bundle.rewards_np(), bundle.values_np(),
                            mix.gamma, mix.lambda_td, bundle.length)
    states = bundle.states_np()[:-1].reshape(-1, env.state_dim)
    train_value(value_net, states, targets.reshape(-1), val_opt, value_rng,
                epochs=cfg.value_epochs, batch_size=cfg.value_batch)
    if obs_norm is not None:
        obs_norm.update(states)
        _apply_obs_norm(policy, value_net, obs_norm)
    return gnorm


def _apply_obs_norm(policy, value_net, norm: RunningNorm):
    stats = (norm.mean.copy(), norm.std())
    policy.mlp.input_norm = stats
    value_net.mlp.input_norm = stats


# ---------------------------------------------------------------------------
# gradient-variance study


def variance_study(env: DiffEnv, policy: GaussianPolicy, value_net: ValueFunction,
                   base_cfg: MixConfig, h_grid, n_estimates: int, seed,
                   world: str = "real-env", model: DynamicsModel | None = None,
                   buffer: EnvBuffer | None = None, n_boot: int = 1000) -> list[dict]:
    """Empirical trace-of-covariance of MIX vs SHAC gradient estimates."""
    if n_estimates < 2:
        raise ValueError("need at least 2 estimates")
    if len(list(h_grid)) == 0:
        raise ValueError("degenerate horizon grid")
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    out = []
    for h in h_grid:
        cfg = replace(base_cfg, h_max=int(h), branch_len=None)
        for method in ("MIX", "SHAC"):
            child = np.random.SeedSequence(entropy=seq.entropy,
                                           spawn_key=(int(h), 0 if method == "MIX" else 1))
            rngs = [np.random.default_rng(c) for c in child.spawn(n_estimates)]
            grads = np.stack([
                policy_gradient(method, world, env, cfg, policy, value_net,
                                model, buffer, r).grad
                for r in rngs])
            tvar = float(np.sum(np.var(grads, axis=0, ddof=1)))
            lo, hi = _bootstrap_trace_ci(grads, n_boot,
                                         np.random.default_rng(child.spawn(1)[0]))
            out.append({"method": method, "H_max": int(h),
                        "lambda": cfg.lambda_mix, "trace_variance": tvar,
                        "ci_low": lo, "ci_high": hi,
                        "grad_mean_norm": float(np.linalg.norm(grads.mean(axis=0)))})
    return out


def _bootstrap_trace_ci(grads: np.ndarray, n_boot: int, rng) -> tuple[float, float]:
    n = grads.shape[0]
    stats = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, size=n)
        stats[b] = np.sum(np.var(grads[idx], axis=0, ddof=1))
    return float(np.percentile(stats, 2.5)), float(np.percentile(stats, 97.5))


# ---------------------------------------------------------------------------
# artifact writers


LEARN_COLUMNS = ["outer_iter", "env_steps", "eval_return_mean", "eval_return_std",
                 "model_pred_loss", "model_jac_loss", "grad_norm", "wallclock_s"]


def write_learning_csv(path, records: list[dict], record_wallclock: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LEARN_COLUMNS)
        for rec in records:
            row = []
            for col in LEARN_COLUMNS:
                val = rec.get(col)
                if col == "wallclock_s" and not record_wallclock:
                    val = 0.0
                row.append(repr(float(val)) if isinstance(val, float) else val)
            w.writerow(row)


VARIANCE_COLUMNS = ["method", "H_max", "lambda", "trace_variance", "ci_low", "ci_high"]


def write_variance_csv(path, records: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VARIANCE_COLUMNS)
        for rec in records:
            w.writerow([rec["method"], rec["H_max"], repr(float(rec["lambda"])),
                        repr(float(rec["trace_variance"])), repr(float(rec["ci_low"])),
                        repr(float(rec["ci_high"]))])
