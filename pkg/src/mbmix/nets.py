"""MLP function approximators and an adaptive-moment optimizer.

Networks hold raw float64 parameter arrays; per update step they are bound
onto a tape as leaves so gradients can be read back out of a GradMap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import adgraph as ag


def orthogonal_init(rng: np.random.Generator, rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((rows, cols))
    q, r = np.linalg.qr(a if rows >= cols else a.T)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Mlp:
    """tanh MLP with an identity, tanh-squash, or softmax output head."""

    HEADS = ("identity", "tanh", "softmax")

    def __init__(self, sizes, head: str = "identity", out_scale: float = 1.0,
                 out_gain: float = 0.01, rng: np.random.Generator | None = None):
        if head not in self.HEADS:
            raise ValueError(f"unknown head '{head}'")
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = list(int(s) for s in sizes)
        self.head = head
        self.out_scale = float(out_scale)
        self.input_norm: tuple[np.ndarray, np.ndarray] | None = None
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, np.ndarray] = {}
        n_layers = len(self.sizes) - 1
        for i in range(n_layers):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            gain = out_gain if i == n_layers - 1 else 1.0
            self.params[f"w{i}"] = orthogonal_init(rng, fan_in, fan_out, gain)
            self.params[f"b{i}"] = np.zeros(fan_out)

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def param_names(self):
        return sorted(self.params.keys())

    def flat_size(self) -> int:
        return sum(p.size for p in self.params.values())

    def bind(self, tape: ag.Tape) -> dict[str, ag.Value]:
        return {name: tape.leaf(self.params[name]) for name in self.param_names()}

    def forward(self, tape: ag.Tape, x: ag.Value, binding: dict[str, ag.Value] | None = None) -> ag.Value:
        """Runs the net on a (B, in_dim) or (in_dim,) input, on the tape."""
        if x.shape[-1] != self.in_dim:
            raise ag.ShapeError(f"input dim {x.shape[-1]} != {self.in_dim}")
        b = binding if binding is not None else self.bind(tape)
        batched = len(x.shape) == 2
        h = x
        if self.input_norm is not None:
            mu, sd = self.input_norm
            neg_mu = tape.leaf(-mu)
            inv_sd = tape.leaf(1.0 / sd)
            if batched:
                neg_mu = ag.broadcast_rows(neg_mu, x.shape[0])
                inv_sd = ag.broadcast_rows(inv_sd, x.shape[0])
            h = (h + neg_mu) * inv_sd
        n = self.n_layers()
        for i in range(n):
            w, bias = b[f"w{i}"], b[f"b{i}"]
            z = h @ w
            if batched:
                bias = ag.broadcast_rows(bias, x.shape[0])
            h = z + bias
            if i < n - 1:
                h = ag.tanh(h)
        if self.head == "tanh":
            h = ag.scale(ag.tanh(h), self.out_scale)
        elif self.head == "softmax":
            h = ag.softmax(h)
        return h

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Tape-free forward pass for rollouts that never need gradients."""
        h = np.asarray(x, dtype=np.float64)
        if self.input_norm is not None:
            mu, sd = self.input_norm
            h = (h + (-mu)) * (1.0 / sd)
        n = self.n_layers()
        for i in range(n):
            h = h @ self.params[f"w{i}"] + self.params[f"b{i}"]
            if i < n - 1:
                h = np.tanh(h)
        if self.head == "tanh":
            h = self.out_scale * np.tanh(h)
        elif self.head == "softmax":
            z = h - np.max(h, axis=-1, keepdims=True)
            e = np.exp(z)
            h = e / np.sum(e, axis=-1, keepdims=True)
        return h

    def grads_from(self, gmap: ag.GradMap, binding: dict[str, ag.Value]) -> dict[str, np.ndarray]:
        return {name: gmap.get(binding[name]) for name in self.param_names()}

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.param_names()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        ofs = 0
        for n in self.param_names():
            p = self.params[n]
            self.params[n] = flat[ofs:ofs + p.size].reshape(p.shape).copy()
            ofs += p.size
        if ofs != flat.size:
            raise ValueError("flat parameter size mismatch")


class GaussianPolicy:
    """Squashed-Gaussian policy: a = bound * tanh(mu(s) + sigma * eps).

    The mean comes from an MLP; log-std is a state-independent learnable
    vector, so sampled actions stay differentiable w.r.t. all parameters.
    """

    def __init__(self, state_dim: int, action_dim: int, bound: float,
                 hidden=(64, 64), init_log_std: float = -1.0,
                 rng: np.random.Generator | None = None):
        self.mlp = Mlp([state_dim] + list(hidden) + [action_dim], head="identity",
                       out_gain=0.01, rng=rng)
        self.bound = float(bound)
        self.action_dim = int(action_dim)
        self.log_std = np.full(action_dim, float(init_log_std))

    def param_names(self):
        return self.mlp.param_names() + ["log_std"]

    @property
    def params(self) -> dict[str, np.ndarray]:
        d = dict(self.mlp.params)
        d["log_std"] = self.log_std
        return d

    def set_param(self, name: str, arr: np.ndarray) -> None:
        if name == "log_std":
            self.log_std = arr
        else:
            self.mlp.params[name] = arr

    def bind(self, tape: ag.Tape) -> dict[str, ag.Value]:
        b = self.mlp.bind(tape)
        b["log_std"] = tape.leaf(self.log_std)
        return b

    def sample(self, tape: ag.Tape, s: ag.Value, eps: np.ndarray,
               binding: dict[str, ag.Value]) -> ag.Value:
        """Reparameterized action for a (B, ds) state batch; eps is (B, da)."""
        mu = self.mlp.forward(tape, s, binding)
        sigma = ag.exp(binding["log_std"])
        sigma_b = ag.broadcast_rows(sigma, s.shape[0])
        noise = tape.leaf(eps)
        pre = mu + sigma_b * noise
        return ag.scale(ag.tanh(pre), self.bound)

    def act_np(self, s: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """Tape-free action; stochastic when an rng is given, else the mean."""
        mu = self.mlp.forward_np(s)
        if rng is not None:
            mu = mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)
        return self.bound * np.tanh(mu)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.param_names()])

    def flat_size(self) -> int:
        return self.mlp.flat_size() + self.log_std.size

    def grads_from(self, gmap: ag.GradMap, binding: dict[str, ag.Value]) -> dict[str, np.ndarray]:
        return {name: gmap.get(binding[name]) for name in self.param_names()}


class ValueFunction:
    """State-value head with target standardization.

    The net regresses standardized targets; predictions are rescaled on the
    tape (V = mu + sd * net(s)), so value magnitudes in the hundreds stay
    learnable at ordinary learning rates and state-gradients still flow.
    """

    def __init__(self, state_dim: int, hidden=(64, 64), out_gain: float = 1.0,
                 rng: np.random.Generator | None = None):
        self.mlp = Mlp([state_dim] + list(hidden) + [1], head="identity",
                       out_gain=out_gain, rng=rng)
        self.t_mu = 0.0
        self.t_sd = 1.0

    def param_names(self):
        return self.mlp.param_names()

    @property
    def params(self):
        return self.mlp.params

    def bind(self, tape: ag.Tape):
        return self.mlp.bind(tape)

    def grads_from(self, gmap, binding):
        return self.mlp.grads_from(gmap, binding)

    def raw_forward(self, tape: ag.Tape, s: ag.Value, binding=None) -> ag.Value:
        out = self.mlp.forward(tape, s, binding)
        n = s.shape[0] if len(s.shape) == 2 else 1
        return ag.reshape(out, (n,))

    def forward(self, tape: ag.Tape, s: ag.Value, binding=None) -> ag.Value:
        raw = self.raw_forward(tape, s, binding)
        scaled = ag.scale(raw, self.t_sd)
        shift = tape.leaf(np.full(scaled.shape, self.t_mu))
        return scaled + shift

    def forward_np(self, s: np.ndarray) -> np.ndarray:
        return self.t_mu + self.t_sd * self.mlp.forward_np(s).reshape(-1)

    def update_target_stats(self, targets: np.ndarray) -> None:
        self.t_mu = float(np.mean(targets))
        self.t_sd = float(max(np.std(targets), 1e-6))

    def normalize_targets(self, targets: np.ndarray) -> np.ndarray:
        return (targets - self.t_mu) / self.t_sd


@dataclass
class StepReport:
    skipped: bool = False
    reason: str = ""
    grad_norm: float = 0.0


class Adam:
    """Adam with global-gradient-norm clipping applied before the update."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip: float | None = 1.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip = clip
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> StepReport:
        """One in-place update. Non-finite gradients skip the step."""
        missing = [k for k in params if k not in grads]
        if missing:
            raise KeyError(f"gradients missing for {missing}")
        gnorm = global_norm(grads)
        if not np.isfinite(gnorm):
            return StepReport(skipped=True, reason="non-finite gradient", grad_norm=float(gnorm))
        gs = grads
        if self.clip is not None and gnorm > self.clip and gnorm > 0.0:
            factor = self.clip / gnorm
            gs = {k: g * factor for k, g in grads.items()}
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, g in gs.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return StepReport(grad_norm=float(gnorm))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g)))
    return float(np.sqrt(total))


def apply_gradients(net, grads, opt: Adam, binding=None) -> StepReport:
    """Spec-level convenience: grads may be a GradMap (with the binding used
    to produce it) or a dict of per-parameter arrays."""
    if isinstance(grads, ag.GradMap):
        if binding is None:
            raise ValueError("GradMap gradients need the parameter binding")
        grads = net.grads_from(grads, binding)
    if isinstance(net, GaussianPolicy):
        report = opt.step(_policy_param_view(net), grads)
        return report
    return opt.step(net.params, grads)


def _policy_param_view(policy: GaussianPolicy) -> dict[str, np.ndarray]:
    view = dict(policy.mlp.params)
    view["log_std"] = policy.log_std
    return view


class RunningNorm:
    """Optional running input standardization (disabled by default)."""

    def __init__(self, dim: int):
        self.count = 0.0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, batch: np.ndarray) -> None:
        batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        nb = float(batch.shape[0])
        if nb == 0:
            return
        mb = batch.mean(axis=0)
        m2b = np.sum((batch - mb) ** 2, axis=0)
        delta = mb - self.mean
        total = self.count + nb
        self.mean = self.mean + delta * (nb / total)
        self.m2 = self.m2 + m2b + delta * delta * (self.count * nb / total)
        self.count = total

    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.ones_like(self.mean)
        return np.sqrt(np.maximum(self.m2 / (self.count - 1.0), 1e-8))

    def normalize_np(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std()


CHECKPOINT_VERSION = 1


def save_checkpoint(path, nets: dict) -> None:
    """Bit-exact float64 checkpoint: one npz with a JSON manifest inside."""
    manifest = {"version": CHECKPOINT_VERSION, "nets": {}}
    arrays = {}
    for net_name, net in nets.items():
        if isinstance(net, GaussianPolicy):
            meta = {"kind": "gaussian_policy", "sizes": net.mlp.sizes,
                    "head": net.mlp.head, "out_scale": net.mlp.out_scale,
                    "bound": net.bound, "params": net.param_names()}
            source = net.params
            inner = net.mlp
        elif isinstance(net, ValueFunction):
            meta = {"kind": "value_function", "sizes": net.mlp.sizes,
                    "t_mu": net.t_mu, "t_sd": net.t_sd, "params": net.param_names()}
            source = net.params
            inner = net.mlp
        elif isinstance(net, Mlp):
            meta = {"kind": "mlp", "sizes": net.sizes, "head": net.head,
                    "out_scale": net.out_scale, "params": net.param_names()}
            source = net.params
            inner = net
        else:
            raise TypeError(f"cannot checkpoint {type(net)}")
        manifest["nets"][net_name] = meta
        for pname in meta["params"]:
            arrays[f"{net_name}::{pname}"] = np.asarray(source[pname], dtype=np.float64)
        if inner.input_norm is not None:
            meta["input_norm"] = True
            arrays[f"{net_name}::__norm_mu__"] = inner.input_norm[0]
            arrays[f"{net_name}::__norm_sd__"] = inner.input_norm[1]
    arrays["__manifest__"] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8).copy()
    np.savez(path, **arrays)


def load_checkpoint(path) -> dict:
    with np.load(path) as data:
        manifest = json.loads(bytes(data["__manifest__"]).decode())
        if manifest["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest['version']}")
        out = {}
        for net_name, meta in manifest["nets"].items():
            if meta["kind"] == "gaussian_policy":
                sizes = meta["sizes"]
                net = GaussianPolicy(sizes[0], sizes[-1], meta["bound"],
                                     hidden=tuple(sizes[1:-1]))
                for pname in meta["params"]:
                    net.set_param(pname, data[f"{net_name}::{pname}"].copy())
                inner = net.mlp
            elif meta["kind"] == "value_function":
                sizes = meta["sizes"]
                net = ValueFunction(sizes[0], hidden=tuple(sizes[1:-1]))
                net.t_mu, net.t_sd = meta["t_mu"], meta["t_sd"]
                for pname in meta["params"]:
                    net.mlp.params[pname] = data[f"{net_name}::{pname}"].copy()
                inner = net.mlp
            else:
                net = Mlp(meta["sizes"], head=meta["head"], out_scale=meta["out_scale"])
                for pname in meta["params"]:
                    net.params[pname] = data[f"{net_name}::{pname}"].copy()
                inner = net
            if meta.get("input_norm"):
                inner.input_norm = (data[f"{net_name}::__norm_mu__"].copy(),
                                    data[f"{net_name}::__norm_sd__"].copy())
            out[net_name] = net
    return out
