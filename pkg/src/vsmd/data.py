"""Toy 2-D datasets, a synthetic multivariate series corpus and the forecasting context encoder."""
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, InvalidArgumentError

TOY_KINDS = ("spiral", "checkerboard", "gaussian", "anisotropic_gaussian")
BOARD_CELLS = 4
BOARD_HALF_WIDTH = 2.0


@dataclass(frozen=True)
class ToySpec:
    kind: str = "spiral"
    stretch_axis: str = "y"
    stretch_factor: float = 8.0
    n_points: int = 10_000
    seed: int = 0
    jitter: float = 0.05
    turns: float = 1.5

    def validate(self):
        if self.kind not in TOY_KINDS:
            raise ConfigError(f"unknown toy kind {self.kind!r}; choose from {TOY_KINDS}")
        if self.stretch_axis not in ("x", "y", "none"):
            raise ConfigError(f"stretch_axis must be x, y or none (got {self.stretch_axis!r})")
        if not self.stretch_factor >= 1:
            raise ConfigError(f"stretch_factor must be >= 1 (got {self.stretch_factor})")
        if self.n_points < 1:
            raise ConfigError("n_points must be >= 1")
        if not self.jitter >= 0:
            raise ConfigError("jitter must be >= 0")
        return self

    @property
    def stretch_index(self):
        return {"x": 0, "y": 1, "none": None}[self.stretch_axis]

    @property
    def reference_index(self):
        """Axis whose variance is normalized to one (the unstretched one)."""
        return 1 if self.stretch_axis == "x" else 0

    def to_dict(self):
        return asdict(self)


def _spiral(rng, n, jitter, turns):
    # two arms r = theta / theta_max, the second a point reflection of the first
    theta_max = 2 * np.pi * turns
    theta = np.sqrt(rng.uniform(0.0, 1.0, n)) * theta_max
    r = theta / theta_max
    arm = np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)
    pts = arm[:, None] * np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return pts + jitter * rng.standard_normal((n, 2))


def _checkerboard(rng, n):
    cells = [(i, j) for i in range(BOARD_CELLS) for j in range(BOARD_CELLS) if (i + j) % 2 == 0]
    pick = rng.integers(0, len(cells), n)
    ij = np.array(cells, dtype=np.float64)[pick]
    return -BOARD_HALF_WIDTH + ij + rng.uniform(0.0, 1.0, (n, 2))


def gen_toy_with_meta(spec):
    """Return ``(points, meta)``; ``meta`` holds the normalization scale and board half-width."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_points
    if spec.kind == "spiral":
        raw = _spiral(rng, n, spec.jitter, spec.turns)
        scale = 1.0 / np.std(raw[:, spec.reference_index])
    elif spec.kind == "checkerboard":
        raw = _checkerboard(rng, n)
        # each board column is half filled, so either marginal is uniform on [-2, 2]
        scale = np.sqrt(3.0) / BOARD_HALF_WIDTH
    else:
        raw = rng.standard_normal((n, 2))
        scale = 1.0
    pts = raw * scale
    k = spec.stretch_index
    if k is not None:
        pts[:, k] *= spec.stretch_factor
    meta = {"scale": float(scale), "half_width": float(BOARD_HALF_WIDTH * scale)}
    return pts, meta


def gen_toy(spec):
    return gen_toy_with_meta(spec)[0]


# --------------------------------------------------------------------------
# synthetic forecasting corpus
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SeriesSpec:
    dims: int = 8
    length: int = 2000
    trend: float = 0.002
    amp1: float = 1.0
    period1: float = 24.0
    amp2: float = 0.5
    period2: float = 168.0
    noise: float = 0.3
    ar: float = 0.7
    context: int = 48
    horizon: int = 24
    seed: int = 0

    def validate(self):
        if self.dims < 1:
            raise ConfigError("dims must be >= 1")
        if self.context < 1 or self.horizon < 1:
            raise ConfigError("context and horizon must be >= 1")
        if not self.length > self.context + self.horizon:
            raise ConfigError(
                f"length ({self.length}) must exceed context + horizon ({self.context + self.horizon})"
            )
        if not -1 < self.ar < 1:
            raise ConfigError(f"AR coefficient must lie in (-1, 1) (got {self.ar})")
        if self.period1 <= 0 or self.period2 <= 0:
            raise ConfigError("periods must be > 0")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        return self

    def to_dict(self):
        return asdict(self)


def gen_series(spec):
    """Per dimension: level + trend + two sinusoids + stationary AR(1) noise, shape ``(length, dims)``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    T, d = spec.length, spec.dims
    t = np.arange(T, dtype=np.float64)[:, None]
    level = rng.normal(0.0, 1.0, d)
    gain = rng.uniform(0.5, 1.5, (2, d))
    phase = rng.uniform(0.0, 2 * np.pi, (2, d))
    slope = spec.trend * rng.uniform(0.5, 1.5, d)
    season = (
        spec.amp1 * gain[0] * np.sin(2 * np.pi * t / spec.period1 + phase[0])
        + spec.amp2 * gain[1] * np.sin(2 * np.pi * t / spec.period2 + phase[1])
    )
    shocks = rng.standard_normal((T, d)) * spec.noise
    noise = np.empty((T, d))
    # stationary start
    noise[0] = shocks[0] / np.sqrt(1.0 - spec.ar**2)
    for i in range(1, T):
        noise[i] = spec.ar * noise[i - 1] + shocks[i]
    return level + slope * t + season + noise


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, series):
        series = np.asarray(series, dtype=np.float64)
        std = series.std(axis=0)
        return cls(series.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, x):
        return (x - self.mean) / self.std

    def inverse(self, z):
        return z * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def windows(series, context):
    """All ``(window, next value)`` pairs: ``(n, context, dims)`` and ``(n, dims)``."""
    series = np.asarray(series, dtype=np.float64)
    n = series.shape[0] - context
    if n < 1:
        raise InvalidArgumentError("series shorter than the context window")
    idx = np.arange(context)[None, :] + np.arange(n)[:, None]
    return series[idx], series[context:]


# --------------------------------------------------------------------------
# context encoder
# --------------------------------------------------------------------------


class ContextEncoder:
    """Two-layer tanh MLP over the flattened lag window, producing an ``out_dim`` embedding."""

    def __init__(self, context, dims, hidden=64, out_dim=16, seed=0, zero_init=False):
        self.context, self.dims = int(context), int(dims)
        self.hidden, self.out_dim = int(hidden), int(out_dim)
        rng = np.random.default_rng(seed)
        fan_in = self.context * self.dims
        if zero_init:
            W1 = np.zeros((fan_in, self.hidden))
        else:
            W1 = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, self.hidden))
        W2 = rng.normal(0.0, 1.0 / np.sqrt(self.hidden), (self.hidden, self.out_dim))
        self.params = [W1, np.zeros(self.hidden), W2, np.zeros(self.out_dim)]
        self.ema = [p.copy() for p in self.params]

    def arch(self):
        return {"context": self.context, "dims": self.dims, "hidden": self.hidden, "out_dim": self.out_dim}

    def forward(self, window, keep=False, params=None):
        w = np.asarray(window, dtype=np.float64)
        flat = w.reshape(-1, self.context * self.dims)
        W1, b1, W2, b2 = self.params if params is None else params
        hid = np.tanh(flat @ W1 + b1)
        out = hid @ W2 + b2
        return (out, (flat, hid)) if keep else out

    def backward(self, cache, grad_out):
        flat, hid = cache
        W1, _, W2, _ = self.params
        gW2 = hid.T @ grad_out
        gb2 = grad_out.sum(axis=0)
        gh = (grad_out @ W2.T) * (1.0 - hid * hid)
        return [flat.T @ gh, gh.sum(axis=0), gW2, gb2]


def encode_context(window, encoder, use_ema=False):
    """Embedding ``h`` of one window ``(C, dims)`` (or a batch ``(n, C, dims)``)."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape[-2:] != (encoder.context, encoder.dims):
        raise InvalidArgumentError(
            f"window shape {window.shape[-2:]} does not match encoder ({encoder.context}, {encoder.dims})"
        )
    out = encoder.forward(window, params=encoder.ema if use_ema else None)
    return out[0] if window.ndim == 2 else out


def write_points_csv(path, pts, columns=None):
    pts = np.atleast_2d(pts)
    columns = columns or [f"x{j}" for j in range(pts.shape[1])]
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in pts:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_points_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return arr, header
