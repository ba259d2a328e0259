"""Multilayer-perceptron signed-distance model with hand-derived gradients.

The network maps a body-frame point to an approximate signed distance.
Hidden layers use a sharp softplus, the output layer is linear. Training
minimizes an asymmetric value loss that prefers over-estimation, plus an
Eikonal penalty on the input gradient, so the weight gradients include the
second-order path through the input Jacobian.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from proxsafe.geometry import SdfDataset

log = logging.getLogger(__name__)

SOFTPLUS_SHARPNESS = 100.0
ACTIVATIONS = {"softplus": 0, "identity": 1}
MODEL_MAGIC = b"NSDF"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sIII")
LOSS_KINDS = ("asymmetric", "paper-literal")


class NonFiniteError(FloatingPointError):
    """A forward pass, gradient or loss produced NaN or infinity."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int, loss: float) -> None:
        super().__init__(f"loss became non-finite ({loss}) at iteration {iteration}")
        self.iteration = iteration


@dataclass
class MlpParams:
    """Weights ``W[l]`` of shape (dims[l+1], dims[l]) and biases ``b[l]``."""

    dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "softplus"

    def __post_init__(self) -> None:
        self.dims = [int(d) for d in self.dims]
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        self.validate()

    def validate(self) -> None:
        _check_dims(self.dims)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.dims) - 1 or len(self.biases) != len(self.dims) - 1:
            raise ValueError("number of weight/bias blocks does not match dims")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[l + 1], self.dims[l]) or b.shape != (self.dims[l + 1],):
                raise ValueError(f"layer {l}: expected W {(self.dims[l + 1], self.dims[l])}, "
                                 f"b {(self.dims[l + 1],)}, got {w.shape}, {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l}: non-finite parameter")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        ws, bs, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[k:k + w.size].reshape(w.shape))
            k += w.size
            bs.append(vec[k:k + b.size].copy())
            k += b.size
        return MlpParams(list(self.dims), ws, bs, self.activation)

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.dims), [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activation)

    def to_bytes(self) -> bytes:
        out = [_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, ACTIVATIONS[self.activation], len(self.dims)),
               np.asarray(self.dims, dtype="<u4").tobytes()]
        for w, b in zip(self.weights, self.biases):
            out.append(w.astype("<f8").tobytes(order="C"))
            out.append(b.astype("<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "MlpParams":
        if len(raw) < _MODEL_HEADER.size:
            raise ValueError("truncated model header")
        magic, version, act, n = _MODEL_HEADER.unpack_from(raw)
        if magic != MODEL_MAGIC:
            raise ValueError(f"bad model magic {magic!r}")
        if version != MODEL_VERSION:
            raise ValueError(f"unsupported model version {version}")
        names = {v: k for k, v in ACTIVATIONS.items()}
        if act not in names:
            raise ValueError(f"unknown activation tag {act}")
        off = _MODEL_HEADER.size
        dims = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(int).tolist()
        off += 4 * n
        ws, bs = [], []
        for l in range(n - 1):
            m, k = dims[l + 1], dims[l]
            ws.append(np.frombuffer(raw, dtype="<f8", count=m * k, offset=off).reshape(m, k).copy())
            off += 8 * m * k
            bs.append(np.frombuffer(raw, dtype="<f8", count=m, offset=off).copy())
            off += 8 * m
        if off != len(raw):
            raise ValueError(f"model file has {len(raw) - off} trailing bytes")
        return cls(dims, ws, bs, names[act])


def _check_dims(dims: Sequence[int]) -> None:
    if len(dims) < 2 or dims[0] != 3 or dims[-1] != 1 or any(int(d) < 1 for d in dims):
        raise ValueError(f"layer dims must start at 3, end at 1 and be positive, got {list(dims)}")


@dataclass
class TrainConfig:
    """Optimizer and loss settings.

    Attributes:
        kappa: asymmetry factor (> 1); under-estimation costs ``kappa`` times more.
        eta: Eikonal penalty weight.
        iterations: number of Adam steps.
        batch_size: mini-batch size.
        lr_initial: initial learning rate.
        lr_decay: multiplicative decay applied every ``decay_interval`` steps.
        decay_interval: steps between decays.
        seed: shuffling seed.
        loss: ``"asymmetric"`` or ``"paper-literal"``.
        normalize: train in coordinates scaled by the data extent, then fold
            the scale back into the first and last layers.
        geometric_init: start from a sphere-like field centred on the data
            instead of He-normal weights (ignored when continuing from
            given parameters).
    """

    kappa: float = 2.0
    eta: float = 0.1
    iterations: int = 10000
    batch_size: int = 1024
    lr_initial: float = 0.005
    lr_decay: float = 0.5
    decay_interval: int = 2000
    seed: int = 0
    loss: str = "asymmetric"
    normalize: bool = True
    geometric_init: bool = True

    def __post_init__(self) -> None:
        if not self.kappa > 1.0:
            raise ValueError("kappa must exceed 1")
        if not self.eta > 0.0:
            raise ValueError("eta must be positive")
        if not self.lr_initial > 0.0:
            raise ValueError("lr_initial must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.iterations < 0 or self.batch_size < 1 or self.decay_interval < 1:
            raise ValueError("iterations, batch_size and decay_interval must be non-negative/positive")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")

    def learning_rate(self, iteration: int) -> float:
        return self.lr_initial * self.lr_decay ** (iteration // self.decay_interval)


@dataclass(frozen=True)
class ErrorBounds:
    """Certified value bound ``e_h`` and empirical gradient-error bound ``e_grad_h``."""

    e_h: float
    e_grad_h: float

    def __post_init__(self) -> None:
        for name in ("e_h", "e_grad_h"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class SurfaceMetrics:
    """Mean absolute surface error and mean positive (over-approximation) error."""

    epsilon: float
    epsilon_plus: float
    n_points: int
    n_positive: int

    @property
    def positive_set_empty(self) -> bool:
        return self.n_positive == 0


def init_mlp(layer_dims: Sequence[int], activation: str = "softplus", seed: int = 0,
             final_bias: float = 0.1, sphere_radius: float | None = None) -> MlpParams:
    """Random initial parameters.

    With ``sphere_radius`` unset: He-normal weights, zero biases and a
    positive output bias. With it set, the geometric scheme is used instead,
    so the untrained network already approximates ``||p|| - sphere_radius``.
    """
    _check_dims(layer_dims)
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    pairs = list(zip(layer_dims[:-1], layer_dims[1:]))
    for k, (fan_in, fan_out) in enumerate(pairs):
        if sphere_radius is None:
            ws.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        elif k == len(pairs) - 1:
            ws.append(rng.normal(np.sqrt(np.pi / fan_in), 1e-4, size=(fan_out, fan_in)))
        else:
            ws.append(rng.normal(0.0, np.sqrt(2.0 / fan_out), size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    bs[-1][:] = final_bias if sphere_radius is None else -sphere_radius
    return MlpParams(list(layer_dims), ws, bs, activation)


def _act(a: np.ndarray, kind: str, order: int) -> tuple[np.ndarray, ...]:
    """Activation value and up to ``order`` derivatives."""
    if kind == "identity":
        one = np.ones_like(a)
        return (a, one, np.zeros_like(a))[: order + 1]
    z = SOFTPLUS_SHARPNESS * a
    e = np.exp(-np.abs(z))
    y = (np.maximum(z, 0.0) + np.log1p(e)) / SOFTPLUS_SHARPNESS
    if order == 0:
        return (y,)
    inv = 1.0 / (1.0 + e)
    s = np.where(z >= 0.0, inv, e * inv)
    if order == 1:
        return y, s
    return y, s, SOFTPLUS_SHARPNESS * s * (1.0 - s)


def _check_finite(x: np.ndarray, what: str, layer: int) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite {what} at layer {layer}")


def forward(params: MlpParams, points: np.ndarray) -> np.ndarray | float:
    """Network output at one point (scalar) or a batch (n,)."""
    single = np.ndim(points) == 1
    y = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = y @ w.T + b
        y = a if l == last else _act(a, params.activation, 0)[0]
        _check_finite(y, "output", l)
    out = y[:, 0]
    return float(out[0]) if single else out


def forward_and_gradient(params: MlpParams, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch values (n,) and input gradients (n, 3) by forward-mode chain rule."""
    y = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = y.shape[0]
    last = params.n_layers - 1
    jac = None  # (3, n, width): derivative of the layer output wrt each input coordinate
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = y @ w.T + b
        if jac is None:
            da = np.broadcast_to(w.T[:, None, :], (3, n, w.shape[0]))
        else:
            da = (jac.reshape(3 * n, -1) @ w.T).reshape(3, n, -1)
        if l == last:
            y, jac = a, da
        else:
            y, d1 = _act(a, params.activation, 1)
            jac = d1[None] * da
        _check_finite(jac, "gradient", l)
    return y[:, 0], jac[:, :, 0].T.copy()


def input_gradient(params: MlpParams, points: np.ndarray) -> np.ndarray:
    """Gradient of the network output with respect to the input point(s)."""
    single = np.ndim(points) == 1
    _, g = forward_and_gradient(params, points)
    return g[0] if single else g


def _value_loss(err: np.ndarray, kappa: float, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample value loss and its derivative wrt ``err = prediction - target``."""
    pos = err > 0.0
    if kind == "paper-literal":
        return (kappa - 1.0) * np.maximum(err, 0.0), np.where(pos, kappa - 1.0, 0.0)
    loss = np.maximum(err, 0.0) + kappa * np.maximum(-err, 0.0)
    return loss, np.where(pos, 1.0, np.where(err < 0.0, -kappa, 0.0))


def parameter_gradients(
    params: MlpParams,
    points: np.ndarray,
    targets: np.ndarray,
    kappa: float,
    eta: float,
    loss_kind: str = "asymmetric",
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Loss value and its exact gradient with respect to every weight and bias.

    The Eikonal term depends on the input gradient, so the backward pass runs
    through both the value path and the forward-mode Jacobian path.

    Returns:
        (loss, weight gradients, bias gradients) aligned with ``params``.
    """
    x = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(targets, dtype=np.float64).reshape(-1)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    L = params.n_layers
    ys = [x]
    jacs: list[np.ndarray | None] = [None]
    das: list[np.ndarray] = []
    d1s: list[np.ndarray] = []
    d2s: list[np.ndarray] = []
    y, jac = x, None
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = y @ w.T + b
        if jac is None:
            da = np.broadcast_to(w.T[:, None, :], (3, n, w.shape[0]))
        else:
            da = (jac.reshape(3 * n, -1) @ w.T).reshape(3, n, -1)
        das.append(da)
        if l == L - 1:
            y, jac = a, da
        else:
            y, d1, d2 = _act(a, params.activation, 2)
            jac = d1[None] * da
            d1s.append(d1)
            d2s.append(d2)
        ys.append(y)
        jacs.append(jac)
    out = ys[-1][:, 0]
    grad = jacs[-1][:, :, 0].T  # (n, 3)

    vloss, dv = _value_loss(out - d, kappa, loss_kind)
    gnorm = np.linalg.norm(grad, axis=1)
    eik = (gnorm - 1.0) ** 2
    loss = float(vloss.mean() + eta * eik.mean())
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss")

    y_bar = (dv / n)[:, None]  # (n, 1)
    safe = np.where(gnorm > 0.0, gnorm, 1.0)
    coef = np.where(gnorm > 0.0, 2.0 * eta * (gnorm - 1.0) / (n * safe), 0.0)
    j_bar = (coef[:, None] * grad).T[:, :, None]  # (3, n, 1)

    gw: list[np.ndarray] = [np.empty(0)] * L
    gb: list[np.ndarray] = [np.empty(0)] * L
    for l in range(L - 1, -1, -1):
        w = params.weights[l]
        if l == L - 1:
            a_bar = y_bar
            da_bar = j_bar
        else:
            d1, d2 = d1s[l], d2s[l]
            a_bar = y_bar * d1 + d2 * np.einsum("kni,kni->ni", j_bar, das[l])
            da_bar = j_bar * d1[None]
        y_prev = ys[l]
        gw_l = a_bar.T @ y_prev
        if jacs[l] is None:
            gw_l = gw_l + da_bar.sum(axis=1).T  # previous Jacobian is the identity
        else:
            gw_l = gw_l + da_bar.reshape(3 * n, -1).T @ jacs[l].reshape(3 * n, -1)
        gw[l] = gw_l
        gb[l] = a_bar.sum(axis=0)
        if l > 0:
            y_bar = a_bar @ w
            j_bar = (da_bar.reshape(3 * n, -1) @ w).reshape(3, n, -1)
    for l in range(L):
        _check_finite(gw[l], "weight gradient", l)
    return loss, gw, gb


def _normalizer(points: np.ndarray) -> tuple[np.ndarray, float]:
    lo, hi = points.min(axis=0), points.max(axis=0)
    center = 0.5 * (lo + hi)
    scale = float(0.5 * np.linalg.norm(hi - lo)) or 1.0
    return center, scale


def _to_normalized(params: MlpParams, center: np.ndarray, scale: float) -> MlpParams:
    """Parameters of g with f(p) = scale * g((p - center) / scale)."""
    p = params.copy()
    w0 = p.weights[0]
    p.biases[0] = p.biases[0] + w0 @ center
    p.weights[0] = w0 * scale
    p.weights[-1] = p.weights[-1] / scale
    p.biases[-1] = p.biases[-1] / scale
    return p


def _from_normalized(params: MlpParams, center: np.ndarray, scale: float) -> MlpParams:
    p = params.copy()
    w0 = p.weights[0] / scale
    p.weights[0] = w0
    p.biases[0] = p.biases[0] - w0 @ center
    p.weights[-1] = p.weights[-1] * scale
    p.biases[-1] = p.biases[-1] * scale
    return p


def train(
    dataset: SdfDataset,
    layer_dims: Sequence[int] | MlpParams,
    config: TrainConfig,
    history: list[float] | None = None,
    log_every: int = 500,
    callback: Callable[[int, float], None] | None = None,
) -> MlpParams:
    """Fit the network to ``dataset`` with Adam and stepwise learning-rate decay.

    Args:
        dataset: labelled points.
        layer_dims: architecture, or initial parameters to continue from.
        config: optimizer and loss settings.
        history: if given, receives the per-iteration mini-batch loss.
        log_every: logging period in iterations.
        callback: called as ``callback(iteration, loss)`` after each step.

    Raises:
        TrainingDivergedError: when the loss becomes non-finite.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    pts, dist = dataset.points, dataset.distances
    if isinstance(layer_dims, MlpParams):
        params = layer_dims.copy()
    elif config.geometric_init:
        center = _normalizer(pts)[0]
        radius = float(np.median(np.linalg.norm(pts - center, axis=1) - dist))
        params = _from_normalized(
            init_mlp(layer_dims, seed=config.seed, sphere_radius=max(radius, 0.0)), center, 1.0)
    else:
        params = init_mlp(layer_dims, seed=config.seed)
    if config.iterations == 0:
        return params
    if config.normalize:
        center, scale = _normalizer(pts)
        work = _to_normalized(params, center, scale)
        pts = (pts - center) / scale
        dist = dist / scale
    else:
        work = params
    flat = work.flat()
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    b1, b2, eps = 0.9, 0.999, 1e-8
    rng = np.random.default_rng(config.seed)
    n = len(dist)
    bs = min(config.batch_size, n)
    perm = rng.permutation(n)
    cursor = 0
    for it in range(config.iterations):
        if cursor + bs > n:
            perm = rng.permutation(n)
            cursor = 0
        idx = perm[cursor:cursor + bs]
        cursor += bs
        try:
            loss, gw, gb = parameter_gradients(work, pts[idx], dist[idx], config.kappa, config.eta, config.loss)
        except NonFiniteError as exc:
            raise TrainingDivergedError(it, float("nan")) from exc
        if not np.isfinite(loss):
            raise TrainingDivergedError(it, loss)
        g = np.concatenate([np.concatenate([a.ravel(), c]) for a, c in zip(gw, gb)])
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        t = it + 1
        step = config.learning_rate(it) * (m / (1.0 - b1**t)) / (np.sqrt(v / (1.0 - b2**t)) + eps)
        flat = flat - step
        work = _unflatten_fast(work, flat)
        if history is not None:
            history.append(loss)
        if callback is not None:
            callback(it, loss)
        if log_every and (it % log_every == 0 or it == config.iterations - 1):
            log.info("iter %d loss %.6g lr %.3g", it, loss, config.learning_rate(it))
    result = work.with_flat(flat)
    if config.normalize:
        result = _from_normalized(result, center, scale)
    return result


def _unflatten_fast(template: MlpParams, flat: np.ndarray) -> MlpParams:
    # views into ``flat``; skips validation inside the hot loop
    p = object.__new__(MlpParams)
    p.dims, p.activation = template.dims, template.activation
    p.weights, p.biases = [], []
    k = 0
    for w, b in zip(template.weights, template.biases):
        p.weights.append(flat[k:k + w.size].reshape(w.shape))
        k += w.size
        p.biases.append(flat[k:k + b.size])
        k += b.size
    return p


def estimate_error_bounds(
    params: MlpParams,
    oracle,
    eval_points: np.ndarray,
    quantile: float = 0.999,
    inflation: float = 1.1,
    medial_tol: float = 1e-3,
    chunk: int = 8192,
) -> ErrorBounds:
    """Value and gradient error bounds over ``eval_points``.

    ``e_h`` is the largest amount by which the network exceeds the true
    distance, so ``f_net - e_h <= f_true`` holds on every evaluation point.
    ``e_grad_h`` is an inflated high quantile of the gradient error, taken over
    points whose true gradient is well defined.
    """
    pts = np.asarray(eval_points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("no evaluation points")
    over = 0.0
    gerr: list[np.ndarray] = []
    for i in range(0, len(pts), chunk):
        p = pts[i:i + chunk]
        f_net, g_net = forward_and_gradient(params, p)
        f_true = oracle.signed_distance(p)
        over = max(over, float(np.max(f_net - f_true)))
        g_true, valid = oracle.gradient(p, medial_tol)
        if np.any(valid):
            gerr.append(np.linalg.norm(g_true[valid] - g_net[valid], axis=1))
    if not gerr or sum(len(e) for e in gerr) == 0:
        raise ValueError("no evaluation point has a well-defined oracle gradient")
    e = np.concatenate(gerr)
    e_grad = float(np.quantile(e, quantile)) * inflation
    log.info("gradient-error bound is an empirical %.4g-quantile estimate, not a certificate", quantile)
    return ErrorBounds(e_h=max(0.0, over), e_grad_h=e_grad)


def eval_metrics(params: MlpParams, surface_points: np.ndarray) -> SurfaceMetrics:
    """Mean |f| and mean of the positive part of f over true-surface points."""
    f = np.asarray(forward(params, np.asarray(surface_points).reshape(-1, 3)))
    pos = f[f > 0.0]
    return SurfaceMetrics(
        epsilon=float(np.mean(np.abs(f))),
        epsilon_plus=float(pos.mean()) if len(pos) else 0.0,
        n_points=int(len(f)),
        n_positive=int(len(pos)),
    )


def save_model(path: str | Path, params: MlpParams, sidecar: dict | None = None) -> None:
    """Write the binary model and a JSON sidecar next to it."""
    path = Path(path)
    path.write_bytes(params.to_bytes())
    meta = {"dims": params.dims, "activation": params.activation,
            "sha256": hashlib.sha256(params.to_bytes()).hexdigest()}
    meta.update(sidecar or {})
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n",
                                  encoding="utf-8")


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_model(path: str | Path) -> tuple[MlpParams, dict]:
    path = Path(path)
    params = MlpParams.from_bytes(path.read_bytes())
    side = sidecar_path(path)
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
    return params, meta


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dataset_hash(dataset: SdfDataset) -> str:
    return hashlib.sha256(dataset.to_bytes()).hexdigest()


@dataclass
class NeuralSdf:
    """Callable learned distance field with its certified bounds."""

    params: MlpParams
    bounds: ErrorBounds = field(default_factory=lambda: ErrorBounds(0.0, 0.0))

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(forward(self.params, np.asarray(points).reshape(-1, 3)))

    def value_and_gradient(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return forward_and_gradient(self.params, points)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.signed_distance(points)
