"""Jacobian-enriched replay buffer and Sobolev dynamics-model training.

The model is supervised on next-state predictions and, in sobolev mode, on
the Jacobians of the composed prediction map against the Jacobians recorded
from the differentiable environment. The Jacobian penalty needs gradients of
a Jacobian, which the tape provides by recording JVP arithmetic as ordinary
ops.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import adgraph as ag
from .nets import Adam, Mlp
from .envlab import Transition


class EnvBuffer:
    """FIFO ring buffer of transitions."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list[Transition] = []
        self.inserted = 0

    def add(self, transitions) -> None:
        for tr in transitions:
            self._items.append(tr)
            self.inserted += 1
        if len(self._items) > self.capacity:
            self._items = self._items[len(self._items) - self.capacity:]

    def __len__(self) -> int:
        return len(self._items)

    def items(self) -> list[Transition]:
        return self._items

    def sample_indices(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Without replacement within one batch."""
        n = len(self._items)
        if n == 0:
            raise ValueError("buffer empty")
        size = min(size, n)
        return rng.choice(n, size=size, replace=False)

    def recent_start_states(self, rng: np.random.Generator, n: int, window: int) -> np.ndarray:
        """Branch-rollout starts, drawn uniformly from the newest transitions."""
        items = self._items[-window:] if window > 0 else self._items
        idx = rng.integers(0, len(items), size=n)
        return np.stack([items[i].s for i in idx])


@dataclass
class SobolevConfig:
    alpha: float = 0.1
    batch_size: int = 128
    epochs: int = 4
    lr: float = 1e-3
    mode: str = "sobolev"          # "sobolev" | "plain"
    alpha_warmup: bool = True      # ramp alpha linearly over the first epoch
    n_probes: int | None = None    # random-direction probes; None = full Jacobian
    max_batches_per_epoch: int | None = None   # cap per-epoch minibatch count

    def __post_init__(self):
        if self.mode not in ("sobolev", "plain"):
            raise ValueError(f"unknown model-training mode '{self.mode}'")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.mode == "plain":
            self.alpha = 0.0

    def effective_alpha(self, epoch: int, batch_idx: int, n_batches: int) -> float:
        if self.mode == "plain":
            return 0.0
        if self.alpha_warmup and epoch == 0 and n_batches > 0:
            return self.alpha * float(batch_idx + 1) / float(n_batches)
        return self.alpha


class DynamicsModel:
    """Residual MLP dynamics model with input/target standardization.

    The standardization is recorded on the tape, so Jacobians of the composed
    map (raw state/action in, raw next state out) come out in raw units.
    """

    def __init__(self, state_dim: int, action_dim: int, hidden=(128, 128),
                 residual: bool = True, rng: np.random.Generator | None = None):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.residual = residual
        self.mlp = Mlp([state_dim + action_dim] + list(hidden) + [state_dim],
                       head="identity", out_gain=0.01, rng=rng)
        self.mu_s = np.zeros(state_dim)
        self.sd_s = np.ones(state_dim)
        self.mu_a = np.zeros(action_dim)
        self.sd_a = np.ones(action_dim)
        self.mu_t = np.zeros(state_dim)
        self.sd_t = np.ones(state_dim)
        self.opt = Adam(lr=1e-3, clip=10.0)

    def fit_stats(self, transitions: list[Transition]) -> None:
        s = np.stack([tr.s for tr in transitions])
        a = np.stack([tr.a for tr in transitions])
        sp = np.stack([tr.s_next for tr in transitions])
        tgt = sp - s if self.residual else sp
        self.mu_s, self.sd_s = s.mean(axis=0), np.maximum(s.std(axis=0), 1e-6)
        self.mu_a, self.sd_a = a.mean(axis=0), np.maximum(a.std(axis=0), 1e-6)
        self.mu_t, self.sd_t = tgt.mean(axis=0), np.maximum(tgt.std(axis=0), 1e-6)

    def _affine(self, tape, x, mu, sd, n):
        neg_mu = ag.broadcast_rows(tape.leaf(-mu), n)
        inv_sd = ag.broadcast_rows(tape.leaf(1.0 / sd), n)
        return (x + neg_mu) * inv_sd

    def predict(self, tape: ag.Tape, s: ag.Value, a: ag.Value,
                binding: dict[str, ag.Value] | None = None) -> ag.Value:
        """Taped next-state prediction for a (B, d_s) state batch."""
        n = s.shape[0]
        z_s = self._affine(tape, s, self.mu_s, self.sd_s, n)
        z_a = self._affine(tape, a, self.mu_a, self.sd_a, n)
        out = self.mlp.forward(tape, ag.concat([z_s, z_a]), binding)
        mu_t = ag.broadcast_rows(tape.leaf(self.mu_t), n)
        sd_t = ag.broadcast_rows(tape.leaf(self.sd_t), n)
        delta = mu_t + sd_t * out
        return s + delta if self.residual else delta


def _stack_batch(items: list[Transition]):
    s = np.stack([tr.s for tr in items])
    a = np.stack([tr.a for tr in items])
    sp = np.stack([tr.s_next for tr in items])
    js = np.stack([tr.j_s for tr in items])
    ja = np.stack([tr.j_a for tr in items])
    return s, a, sp, js, ja


def sobolev_loss(model: DynamicsModel, batch: list[Transition], alpha: float,
                 tape: ag.Tape, binding=None, rng: np.random.Generator | None = None,
                 n_probes: int | None = None):
    """Mean prediction error plus alpha-weighted Jacobian mismatch.

    Returns (total, pred_term, jac_term) as on-tape Values; jac_term is None
    when alpha == 0. Norms are Euclidean per sample and Frobenius for the
    Jacobian blocks.
    """
    if not batch:
        raise ValueError("empty batch")
    s_np, a_np, sp_np, js_np, ja_np = _stack_batch(batch)
    ds = model.state_dim
    s = tape.leaf(s_np)
    a = tape.leaf(a_np)
    pred = model.predict(tape, s, a, binding)
    target = tape.leaf(sp_np)
    pred_term = ag.reduce_mean(ag.l2_norm(pred - target, batched=True))
    if alpha == 0.0:
        return pred_term, pred_term, None
    if not np.all(np.isfinite(js_np)) or not np.all(np.isfinite(ja_np)):
        raise ValueError("Jacobian targets missing or non-finite with alpha > 0")
    if n_probes is None:
        jac = ag.batched_jacobian(tape, pred, [s, a])
        jac_target = tape.leaf(np.concatenate([js_np, ja_np], axis=2))
        diff = jac - jac_target
        js_err = ag.reduce_mean(ag.l2_norm(ag.take_slice(diff, 0, ds), batched=True))
        ja_err = ag.reduce_mean(ag.l2_norm(ag.take_slice(diff, ds, diff.shape[-1]), batched=True))
        jac_term = js_err + ja_err
    else:
        if rng is None:
            raise ValueError("random-probe mode needs an rng")
        jac_term = _probe_jac_term(model, tape, pred, s, a, js_np, ja_np, rng, n_probes)
    total = pred_term + ag.scale(jac_term, alpha)
    return total, pred_term, jac_term


def _probe_jac_term(model, tape, pred, s, a, js_np, ja_np, rng, n_probes):
    """Random-direction Jacobian supervision: match J u for unit probes u."""
    bsz = s.shape[0]
    din = model.state_dim + model.action_dim
    target_full = np.concatenate([js_np, ja_np], axis=2)
    terms = []
    for _ in range(n_probes):
        u = rng.standard_normal(din)
        u /= np.linalg.norm(u)
        tangents = [np.broadcast_to(u[:model.state_dim], (bsz, model.state_dim)).copy(),
                    np.broadcast_to(u[model.state_dim:], (bsz, model.action_dim)).copy()]
        ju = ag.jvp_parts(tape, pred, [s, a], tangents)
        tgt = tape.leaf(target_full @ u)
        terms.append(ag.reduce_mean(ag.l2_norm(ju - tgt, batched=True)))
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return ag.scale(acc, 1.0 / n_probes)


def train_model(model: DynamicsModel, buffer: EnvBuffer, cfg: SobolevConfig,
                rng: np.random.Generator) -> list[dict]:
    """cfg.epochs of minibatch updates; returns one record per epoch."""
    if len(buffer) == 0:
        raise ValueError("buffer has no data")
    if cfg.epochs == 0:
        return []
    model.fit_stats(buffer.items())
    model.opt.lr = cfg.lr
    items = buffer.items()
    report = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        n_batches = max(1, len(items) // cfg.batch_size)
        if cfg.max_batches_per_epoch is not None:
            n_batches = min(n_batches, cfg.max_batches_per_epoch)
        pred_sum, jac_sum, count = 0.0, 0.0, 0
        aborted = False
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if idx.size == 0:
                continue
            batch = [items[i] for i in idx]
            alpha = cfg.effective_alpha(epoch, b, n_batches)
            tape = ag.Tape()
            binding = model.mlp.bind(tape)
            try:
                total, pred_t, jac_t = sobolev_loss(model, batch, alpha, tape,
                                                    binding, rng, cfg.n_probes)
            except ag.NonFiniteError as err:
                report.append({"epoch": epoch, "error": str(err), "aborted": True})
                aborted = True
                break
            gmap = ag.backward(tape, total)
            grads = model.mlp.grads_from(gmap, binding)
            model.opt.step(model.mlp.params, grads)
            pred_sum += float(pred_t.data) * idx.size
            jac_sum += (float(jac_t.data) if jac_t is not None else 0.0) * idx.size
            count += idx.size
        if not aborted and count > 0:
            report.append({"epoch": epoch,
                           "pred_loss": pred_sum / count,
                           "jac_loss": jac_sum / count,
                           "total": (pred_sum + cfg.alpha * jac_sum) / count})
    return report


def write_training_report(path, report: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in report:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def evaluate_model(model: DynamicsModel, heldout: list[Transition],
                   rollout_ks=(1, 5, 10)) -> dict:
    """One-step error, Jacobian error vs stored targets, k-step rollout error."""
    if not heldout:
        raise ValueError("empty held-out set")
    s_np, a_np, sp_np, js_np, ja_np = _stack_batch(heldout)
    ds = model.state_dim
    tape = ag.Tape()
    s = tape.leaf(s_np)
    a = tape.leaf(a_np)
    pred = model.predict(tape, s, a)
    one_step = float(np.mean(np.linalg.norm(pred.data - sp_np, axis=1)))
    jac = ag.batched_jacobian(tape, pred, [s, a]).data
    js_err = float(np.mean(np.sqrt(np.sum((jac[:, :, :ds] - js_np) ** 2, axis=(1, 2)))))
    ja_err = float(np.mean(np.sqrt(np.sum((jac[:, :, ds:] - ja_np) ** 2, axis=(1, 2)))))
    metrics = {"one_step_error": one_step,
               "jac_s_error": js_err,
               "jac_a_error": ja_err,
               "jac_error": js_err + ja_err}
    episodes: dict[int, list[Transition]] = {}
    for tr in sorted(heldout, key=lambda t: (t.episode, t.step)):
        episodes.setdefault(tr.episode, []).append(tr)
    for k in rollout_ks:
        errs = _open_loop_errors(model, episodes, k)
        metrics[f"rollout_{k}_error"] = float(np.mean(errs)) if errs.size else float("nan")
    return metrics


def _open_loop_errors(model, episodes, k):
    starts, action_seqs, finals = [], [], []
    for seq in episodes.values():
        steps = [tr.step for tr in seq]
        for i in range(len(seq) - k + 1):
            if steps[i + k - 1] - steps[i] != k - 1:
                continue
            starts.append(seq[i].s)
            action_seqs.append([seq[i + j].a for j in range(k)])
            finals.append(seq[i + k - 1].s_next)
    if not starts:
        return np.zeros(0)
    cur = np.stack(starts)
    for j in range(k):
        tape = ag.Tape()
        s = tape.leaf(cur)
        a = tape.leaf(np.stack([acts[j] for acts in action_seqs]))
        cur = model.predict(tape, s, a).data
    return np.linalg.norm(cur - np.stack(finals), axis=1)
