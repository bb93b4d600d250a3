"""MLP score model trained by denoising score matching on closed-form kernel draws.

The network is plain numpy with hand-written reverse mode; everything runs in
float64 so the analytic gradients can be checked against finite differences.
"""
import collections
import hashlib
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, HashMismatchError, InvalidArgumentError, NumericalError
from .processes import forward_sample

CHECKPOINT_VERSION = 1


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def time_features(t, horizon, n_features=16):
    """``[t/T, sin(2^k pi t/T), cos(2^k pi t/T)]`` features, shape ``(n, 1 + n_features)``."""
    tau = np.atleast_1d(np.asarray(t, dtype=np.float64)) / horizon
    freqs = np.pi * 2.0 ** np.arange(n_features // 2)
    ang = tau[:, None] * freqs[None, :]
    return np.concatenate([tau[:, None], np.sin(ang), np.cos(ang)], axis=1)


class ScoreNetwork:
    """MLP ``(a, time features[, condition]) -> R^{2d}`` with an EMA shadow copy.

    ``in_scale`` rescales the augmented state before the first layer (useful
    for stretched data); it is a fixed preprocessing constant, not trained.
    """

    def __init__(
        self,
        dim,
        hidden=(128, 128, 128),
        horizon=1.0,
        n_time_features=16,
        cond_dim=0,
        ema_beta=0.9999,
        in_scale=None,
        seed=0,
        zero_last=True,
    ):
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.horizon = float(horizon)
        self.n_time_features = int(n_time_features)
        self.cond_dim = int(cond_dim)
        self.ema_beta = float(ema_beta)
        self.in_scale = np.ones(2 * self.dim) if in_scale is None else np.asarray(in_scale, dtype=np.float64)
        rng = np.random.default_rng(seed)
        sizes = [2 * self.dim + 1 + self.n_time_features + self.cond_dim, *self.hidden, 2 * self.dim]
        self.params = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and zero_last:
                W = np.zeros((fan_in, fan_out))
            else:
                W = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
            self.params.append(W)
            self.params.append(np.zeros(fan_out))
        self.ema = [p.copy() for p in self.params]

    # -- bookkeeping -------------------------------------------------------

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def get_flat(self, which="params"):
        return np.concatenate([p.ravel() for p in getattr(self, which)])

    def set_flat(self, flat, which="params"):
        out, i = [], 0
        for p in self.params:
            out.append(flat[i:i + p.size].reshape(p.shape).copy())
            i += p.size
        setattr(self, which, out)

    def arch(self):
        return {
            "dim": self.dim,
            "hidden": list(self.hidden),
            "horizon": self.horizon,
            "n_time_features": self.n_time_features,
            "cond_dim": self.cond_dim,
            "ema_beta": self.ema_beta,
            "in_scale": self.in_scale.tolist(),
        }

    # -- forward / backward ------------------------------------------------

    def _inputs(self, a, t, cond):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        n = a.shape[0]
        tf = time_features(np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)), self.horizon, self.n_time_features)
        parts = [a * self.in_scale, tf]
        if self.cond_dim:
            if cond is None:
                raise InvalidArgumentError("conditional network needs a condition vector")
            parts.append(np.broadcast_to(np.atleast_2d(cond), (n, self.cond_dim)))
        return np.concatenate(parts, axis=1)

    def forward(self, a, t, cond=None, params=None, keep=False):
        params = self.params if params is None else params
        h = self._inputs(a, t, cond)
        cache = [h]
        nl = len(params) // 2
        for i in range(nl):
            z = h @ params[2 * i] + params[2 * i + 1]
            if i < nl - 1:
                h, s = _silu(z)
                if keep:
                    cache.append((z, s, h))
            else:
                h = z
        return (h, cache) if keep else h

    def backward(self, cache, grad_out, params=None):
        """Parameter gradients and the gradient w.r.t. the condition input."""
        params = self.params if params is None else params
        nl = len(params) // 2
        grads = [None] * len(params)
        g = grad_out
        for i in range(nl - 1, -1, -1):
            h_in = cache[0] if i == 0 else cache[i][2]
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ params[2 * i].T
            if i > 0:
                z, s, _ = cache[i]
                g = g * (s * (1.0 + z * (1.0 - s)))
        g_cond = g[:, -self.cond_dim:] if self.cond_dim else None
        return grads, g_cond

    def score_fn(self, use_ema=True, cond=None):
        """Callable ``(a, t) -> score`` bound to the live or EMA weights."""
        params = self.ema if use_ema else self.params

        def fn(a, t):
            out = self.forward(a, t, cond=cond, params=params)
            if not np.all(np.isfinite(out)):
                raise NumericalError(f"non-finite score output at t={float(np.mean(t)):.6g}")
            return out

        return fn


def score_forward(net, a, t, cond=None, use_ema=False):
    out = net.forward(a, t, cond=cond, params=net.ema if use_ema else net.params)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite activations in score network")
    return out


def dsm_loss(net, kernel, a0, node, eps, cond=None, weighting="score", params=None):
    """Denoising score-matching loss and its parameter gradient.

    ``weighting="score"`` is the plain ``mean ||-L^{-T} eps - s(a_t, t)||^2``.
    ``weighting="noise"`` multiplies each residual by ``L^T`` (the
    ``Sigma``-weighted member of the same loss family, residual ``-eps - L^T s``),
    which keeps the near-singular small-``t`` position targets from dominating.

    Returns ``(loss, grads, grad_cond)``.
    """
    a0 = np.atleast_2d(a0)
    n = a0.shape[0]
    if n == 0:
        raise InvalidArgumentError("dsm_loss needs a nonempty batch")
    node = np.broadcast_to(np.asarray(node), (n,))
    a_t, target = forward_sample(kernel, a0, node, eps)
    t = kernel.times[node]
    s, cache = net.forward(a_t, t, cond=cond, params=params, keep=True)
    if weighting == "score":
        r = target - s
        loss = float(np.sum(r * r) / n)
        g_out = -2.0 * r / n
    elif weighting == "noise":
        LT = np.swapaxes(kernel.L[node], -1, -2)
        r = kernel.apply(LT, target - s)
        loss = float(np.sum(r * r) / n)
        g_out = -2.0 * kernel.apply(kernel.L[node], r) / n
    else:
        raise InvalidArgumentError(f"unknown weighting {weighting!r}")
    grads, g_cond = net.backward(cache, g_out, params=params)
    return loss, grads, g_cond


class Adam:
    def __init__(self, shapes, lr=3e-4, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def update(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return {"t": self.t, "m": self.m, "v": self.v}


@dataclass
class TrainState:
    step: int = 0
    score_lr: float = 3e-4
    variational_lr: float = 3e-6
    batch_size: int = 256
    weighting: str = "noise"
    history: collections.deque = field(default_factory=lambda: collections.deque(maxlen=10_000))
    optimizer: Adam = None

    def ensure_optimizer(self, net):
        if self.optimizer is None:
            self.optimizer = Adam([p.shape for p in net.params], lr=self.score_lr)
        return self.optimizer


def update_ema(net, step):
    # warm-up keeps the shadow from anchoring on the initial weights in short runs
    decay = min(net.ema_beta, (1.0 + step) / (10.0 + step))
    for e, p in zip(net.ema, net.params):
        e *= decay
        e += (1.0 - decay) * p


def sample_training_batch(kernel, data, rng, batch_size):
    """Nodes uniform on ``{1..N-1}``, ``x0`` from the data with ``v0 = 0`` and fresh ``eps``.

    The conditional kernel already carries ``v0 ~ N(0, I)`` in its initial
    covariance, so ``v0 = 0`` here realizes ``a0 ~ p_data x N(0, I)``.
    """
    d = data.shape[1]
    idx = rng.integers(0, data.shape[0], batch_size)
    a0 = np.zeros((batch_size, 2 * d))
    a0[:, :d] = data[idx]
    node = rng.integers(1, kernel.grid_size, batch_size)
    eps = rng.standard_normal((batch_size, 2 * d))
    return a0, node, eps, idx


def train_step(state, net, kernel, data, rng, cond=None):
    """One Adam update of the score network plus the EMA refresh; returns the batch loss.

    ``cond`` (optional) is a per-row condition array aligned with ``data``.
    """
    opt = state.ensure_optimizer(net)
    opt.lr = state.score_lr
    a0, node, eps, idx = sample_training_batch(kernel, data, rng, state.batch_size)
    c = None if cond is None else cond[idx]
    # overflow surfaces as a non-finite loss below
    with np.errstate(over="ignore", invalid="ignore"):
        loss, grads, _ = dsm_loss(net, kernel, a0, node, eps, cond=c, weighting=state.weighting)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss at step {state.step}")
    opt.update(net.params, grads)
    state.step += 1
    update_ema(net, state.step)
    state.history.append(loss)
    return loss


# -- checkpoints -------------------------------------------------------------


def config_hash(obj):
    """Stable short hash of a JSON-serializable config."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, net, state, sched=None, cfg_hash="", extra=None, rng=None, arrays=None):
    """Write params, EMA, optimizer moments, schedule and JSON metadata to one ``.npz``.

    ``arrays`` holds additional named arrays (stored under an ``x_`` prefix).
    """
    meta = {
        "version": CHECKPOINT_VERSION,
        "config_hash": cfg_hash,
        "step": state.step,
        "arch": net.arch(),
        "score_lr": state.score_lr,
        "variational_lr": state.variational_lr,
        "batch_size": state.batch_size,
        "weighting": state.weighting,
        "history": list(state.history),
        "extra": extra or {},
    }
    if rng is not None:
        meta["rng_state"] = rng.bit_generator.state
    extra_arrays = arrays or {}
    arrays = {f"x_{k}": np.asarray(v) for k, v in extra_arrays.items()}
    for i, (p, e) in enumerate(zip(net.params, net.ema)):
        arrays[f"param_{i}"] = p
        arrays[f"ema_{i}"] = e
    if state.optimizer is not None:
        meta["adam_t"] = state.optimizer.t
        for i, (m, v) in enumerate(zip(state.optimizer.m, state.optimizer.v)):
            arrays[f"adam_m_{i}"] = m
            arrays[f"adam_v_{i}"] = v
    if sched is not None:
        arrays["a_x"] = sched.a_x
        arrays["a_v"] = sched.a_v
    arrays["meta"] = np.frombuffer(json.dumps(meta, default=_json_default).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def load_checkpoint(path, expected_hash=None):
    """Return ``(net, state, sched_or_None, meta)``."""
    from .processes import VariationalSchedule

    try:
        z = np.load(path, allow_pickle=False)
        meta = json.loads(bytes(z["meta"]).decode())
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    if expected_hash is not None and meta["config_hash"] != expected_hash:
        raise HashMismatchError(
            f"config hash mismatch: checkpoint was trained with {meta['config_hash']}, "
            f"current config hashes to {expected_hash}"
        )
    arch = meta["arch"]
    net = ScoreNetwork(
        arch["dim"], hidden=arch["hidden"], horizon=arch["horizon"], n_time_features=arch["n_time_features"],
        cond_dim=arch["cond_dim"], ema_beta=arch["ema_beta"], in_scale=arch["in_scale"],
    )
    nparam = len(net.params)
    net.params = [z[f"param_{i}"].copy() for i in range(nparam)]
    net.ema = [z[f"ema_{i}"].copy() for i in range(nparam)]
    state = TrainState(step=meta["step"], score_lr=meta["score_lr"], variational_lr=meta["variational_lr"],
                       batch_size=meta["batch_size"], weighting=meta["weighting"])
    state.history.extend(meta["history"])
    if "adam_t" in meta:
        opt = state.ensure_optimizer(net)
        opt.t = meta["adam_t"]
        opt.m = [z[f"adam_m_{i}"].copy() for i in range(nparam)]
        opt.v = [z[f"adam_v_{i}"].copy() for i in range(nparam)]
    sched = VariationalSchedule(z["a_x"], z["a_v"]) if "a_x" in z.files else None
    meta["arrays"] = {k[2:]: z[k].copy() for k in z.files if k.startswith("x_")}
    return net, state, sched, meta
