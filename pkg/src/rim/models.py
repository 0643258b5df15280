"""Recurrent inference machine, its GDN/FFN ablations and the classical MAP iteration.

Network layout (standard variant)::

    [grad, eta] --conv3x3/2, tanh--> F_in --ConvGRU--> s (F_hidden, H/2)
    s --transpose conv3x3/2, tanh--> F_out --conv3x3--> delta eta

The dilated variant keeps full resolution and replaces the stride by
dilations ``(1, 2, 4, 1)`` on the four convolutional layers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .likelihood import DEFAULT_MARGIN, grad_loglik_eta, grad_loglik_x, link_inverse, make_eps
from .operators import LinearOperator

__all__ = [
    "RimConfig",
    "RimParams",
    "Trajectory",
    "rim_init",
    "param_count",
    "rim_step",
    "gdn_step",
    "ffn_step",
    "model_step",
    "initial_eta",
    "initial_state",
    "rim_rollout",
    "classical_map_step",
    "learned_update_step",
    "map_gradient_descent",
]

KINDS = ("rim", "gdn", "ffn")
VARIANTS = ("standard", "dilated")
DEFAULT_WIDTHS = {"standard": (64, 256, 64), "dilated": (64, 96, 64)}
DESK_WIDTHS = (16, 64, 16)


@dataclass(frozen=True)
class RimConfig:
    """Architecture description; ``widths`` are (input features, recurrent features, output features)."""

    kind: str = "rim"
    variant: str = "standard"
    channels: int = 1
    widths: tuple[int, int, int] | None = None
    dilations: tuple[int, int, int, int] = (1, 2, 4, 1)
    grad_space: str = "eta"
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"model kind must be one of {KINDS}, got {self.kind!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.grad_space not in ("eta", "x"):
            raise ValueError(f"grad_space must be 'eta' or 'x', got {self.grad_space!r}")
        widths = DEFAULT_WIDTHS[self.variant] if self.widths is None else tuple(int(w) for w in self.widths)
        if len(widths) != 3 or min(widths) < 1:
            raise ValueError(f"widths must be three positive integers, got {widths}")
        object.__setattr__(self, "widths", widths)
        dil = tuple(int(d) for d in self.dilations)
        if len(dil) != 4 or min(dil) < 1:
            raise ValueError(f"dilations must be four positive integers, got {dil}")
        object.__setattr__(self, "dilations", dil)
        if self.channels < 1:
            raise ValueError(f"channels must be positive, got {self.channels}")
        if not 0 < self.margin < 0.5:
            raise ValueError(f"margin must lie in (0, 0.5), got {self.margin}")

    @property
    def in_channels(self) -> int:
        return self.channels if self.kind == "gdn" else 2 * self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RimConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RimParams:
    config: RimConfig
    tensors: dict[str, ad.Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[ad.Tensor]:
        return list(self.tensors.values())

    def copy(self) -> "RimParams":
        return RimParams(self.config, {k: ad.parameter(v.data.copy(), name=k) for k, v in self.tensors.items()})


@dataclass
class Trajectory:
    """Estimates ``eta_t`` and ``x_t = psi(eta_t)`` for ``t = 0 .. T``."""

    etas: list[ad.Tensor]
    xs: list[ad.Tensor]
    state: ad.Tensor | None

    def __len__(self) -> int:
        return len(self.xs)

    def x(self, t: int) -> np.ndarray:
        return self.xs[t].data


def _shapes(config: RimConfig) -> dict[str, tuple[int, ...]]:
    f_in, f_hid, f_out = config.widths
    c = config.channels
    shapes = {"conv_in.w": (f_in, config.in_channels, 3, 3), "conv_in.b": (f_in,)}
    if config.kind == "ffn":
        shapes["hidden.w"] = (f_hid, f_in, 3, 3)
        shapes["hidden.b"] = (f_hid,)
    else:
        shapes["gru.w_x"] = (3 * f_hid, f_in, 3, 3)
        shapes["gru.b"] = (3 * f_hid,)
        shapes["gru.w_h"] = (2 * f_hid, f_hid, 3, 3)
        shapes["gru.w_hn"] = (f_hid, f_hid, 3, 3)
    if config.variant == "standard":
        # laid out like the paired stride-2 convolution (f_out -> f_hid)
        shapes["up.w"] = (f_hid, f_out, 3, 3)
    else:
        shapes["up.w"] = (f_out, f_hid, 3, 3)
    shapes["up.b"] = (f_out,)
    shapes["conv_out.w"] = (c, f_out, 3, 3)
    shapes["conv_out.b"] = (c,)
    shapes["phi_eps"] = ()
    return shapes


def _fan_in(name: str, shape, config: RimConfig) -> int:
    if name == "up.w" and config.variant == "standard":
        return shape[0] * 9
    if name == "gru.w_x":
        return (shape[1] + config.widths[1]) * 9
    if name in ("gru.w_h", "gru.w_hn"):
        return (config.widths[0] + shape[1]) * 9
    return shape[1] * 9


def rim_init(config: RimConfig, seed: int) -> RimParams:
    """Uniform fan-in scaled weights, zero biases, ``phi_eps = 0``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _shapes(config).items():
        if name.endswith(".b") or name == "phi_eps":
            data = np.zeros(shape)
        else:
            bound = 1 / math.sqrt(_fan_in(name, shape, config))
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = ad.parameter(data, name=name)
    return RimParams(config, tensors)


def param_count(params: RimParams | RimConfig) -> int:
    if isinstance(params, RimConfig):
        return sum(math.prod(s) for s in _shapes(params).values())
    return sum(t.size for t in params.values())


def _encode(params: RimParams, inputs: ad.Tensor) -> ad.Tensor:
    cfg = params.config
    if cfg.variant == "standard":
        h = ad.conv2d(inputs, params["conv_in.w"], params["conv_in.b"], stride=2)
    else:
        h = ad.conv2d(inputs, params["conv_in.w"], params["conv_in.b"], dilation=cfg.dilations[0])
    return ad.tanh(h)


def _gru_params(params: RimParams) -> dict:
    return {"w_x": params["gru.w_x"], "b": params["gru.b"], "w_h": params["gru.w_h"], "w_hn": params["gru.w_hn"]}


def _recur(params: RimParams, features: ad.Tensor, state: ad.Tensor) -> ad.Tensor:
    return ad.gru_step(features, state, _gru_params(params), dilation=_mid_dilation(params.config))


def _mid_dilation(cfg: RimConfig) -> int:
    return 1 if cfg.variant == "standard" else cfg.dilations[1]


def _decode(params: RimParams, hidden: ad.Tensor, out_hw: tuple[int, int]) -> ad.Tensor:
    cfg = params.config
    if cfg.variant == "standard":
        h = ad.conv2d_transpose(hidden, params["up.w"], params["up.b"], stride=2, output_size=out_hw)
    else:
        h = ad.conv2d(hidden, params["up.w"], params["up.b"], dilation=cfg.dilations[2])
    dil = 1 if cfg.variant == "standard" else cfg.dilations[3]
    return ad.conv2d(ad.tanh(h), params["conv_out.w"], params["conv_out.b"], dilation=dil)


def _check_inputs(params: RimParams, grad_eta: ad.Tensor, eta: ad.Tensor | None) -> None:
    c = params.config.channels
    if grad_eta.ndim != 4 or grad_eta.shape[1] != c:
        raise ValueError(f"gradient must be (B, {c}, H, W), got {grad_eta.shape}")
    if eta is not None and eta.shape != grad_eta.shape:
        raise ValueError(f"eta {eta.shape} and gradient {grad_eta.shape} shapes differ")


def initial_state(params: RimParams, signal_shape: tuple[int, ...]) -> ad.Tensor | None:
    """Zero recurrent state for a ``(B, C, H, W)`` signal batch (``None`` for FFN)."""
    cfg = params.config
    if cfg.kind == "ffn":
        return None
    b, _, h, w = signal_shape
    if cfg.variant == "standard":
        h, w = ad.conv_output_size(h, 2), ad.conv_output_size(w, 2)
    return ad.Tensor(np.zeros((b, cfg.widths[1], h, w), dtype=params["conv_in.w"].dtype))


def _check_state(params, state, eta_shape):
    expected = initial_state(params, eta_shape).shape
    if state.shape != expected:
        raise ValueError(f"state shape {state.shape} does not match expected {expected}")


def rim_step(params: RimParams, grad_eta: ad.Tensor, eta: ad.Tensor, state: ad.Tensor):
    """One RIM update; the state is advanced first and the increment reads the new state.

    Returns ``(eta_next, state_next)``.
    """
    _check_inputs(params, grad_eta, eta)
    _check_state(params, state, eta.shape)
    features = _encode(params, ad.concat([grad_eta, eta], axis=1))
    state_next = _recur(params, features, state)
    delta = _decode(params, state_next, eta.shape[2:])
    return ad.add(eta, delta), state_next


def gdn_step(params: RimParams, grad_eta: ad.Tensor, state: ad.Tensor):
    """Ablation without the current estimate as input. Returns ``(delta_eta, state_next)``."""
    _check_inputs(params, grad_eta, None)
    _check_state(params, state, grad_eta.shape)
    features = _encode(params, grad_eta)
    state_next = _recur(params, features, state)
    return _decode(params, state_next, grad_eta.shape[2:]), state_next


def ffn_step(params: RimParams, grad_eta: ad.Tensor, eta: ad.Tensor) -> ad.Tensor:
    """Stateless ablation: the recurrent cell becomes a conv + relu layer. Returns ``delta_eta``."""
    _check_inputs(params, grad_eta, eta)
    features = _encode(params, ad.concat([grad_eta, eta], axis=1))
    hidden = ad.relu(ad.conv2d(features, params["hidden.w"], params["hidden.b"], dilation=_mid_dilation(params.config)))
    return _decode(params, hidden, eta.shape[2:])


def model_step(params: RimParams, grad_eta: ad.Tensor, eta: ad.Tensor, state):
    """Dispatch on ``params.config.kind``; always returns ``(eta_next, state_next)``."""
    kind = params.config.kind
    if kind == "rim":
        return rim_step(params, grad_eta, eta, state)
    if kind == "gdn":
        delta, state = gdn_step(params, grad_eta, state)
        return ad.add(eta, delta), state
    return ad.add(eta, ffn_step(params, grad_eta, eta)), None


def initial_eta(op: LinearOperator, y: np.ndarray, margin: float = DEFAULT_MARGIN) -> np.ndarray:
    """Starting point ``psi^{-1}(clip(A^T y))``."""
    return link_inverse(op.adjoint(np.asarray(y)), margin)


def rim_rollout(params: RimParams, op: LinearOperator, obs, T: int, eta0=None) -> Trajectory:
    """Unroll the model for ``T`` steps, recomputing the likelihood gradient each step."""
    if T < 1:
        raise ValueError(f"number of steps must be >= 1, got {T}")
    cfg = params.config
    dtype = params["conv_in.w"].dtype
    if eta0 is None:
        eta0 = initial_eta(op, obs.y, cfg.margin)
    eta = eta0 if isinstance(eta0, ad.Tensor) else ad.Tensor(np.asarray(eta0, dtype=dtype))
    eps = make_eps(params["phi_eps"])
    state = initial_state(params, eta.shape)
    etas, xs = [eta], [ad.sigmoid(eta)]
    for _ in range(T):
        if cfg.grad_space == "eta":
            grad = grad_loglik_eta(op, obs, eta, eps)
        else:
            grad = grad_loglik_x(op, obs, xs[-1], eps)
        eta, state = model_step(params, grad, eta, state)
        etas.append(eta)
        xs.append(ad.sigmoid(eta))
    return Trajectory(etas, xs, state)


# ---------------------------------------------------------------------------
# classical baseline

def learned_update_step(x_t, grad_x, g: Callable):
    """Generic update ``x_{t+1} = x_t + g(grad_x, x_t)``."""
    return x_t + g(grad_x, x_t)


def classical_map_step(x_t, grad_x, prior_grad: Callable, gamma: float):
    """Gradient ascent on the log posterior: ``x + gamma (grad_x + prior_grad(x))``."""
    return learned_update_step(x_t, grad_x, lambda g, x: gamma * (g + prior_grad(x)))


def map_gradient_descent(op: LinearOperator, obs, prior_grad: Callable, gamma: float, n_iter: int,
                         eps: float, x0=None, tol: float = 0.0):
    """Iterate :func:`classical_map_step` in signal space.

    Stops early once the relative change of an iterate falls below ``tol``.
    Returns ``(x, iterations)``.
    """
    y = np.asarray(obs.y)
    x = op.adjoint(y) if x0 is None else np.asarray(x0)
    with ad.no_grad():
        for it in range(1, n_iter + 1):
            grad = grad_loglik_x(op, obs, x, eps).data
            x_new = classical_map_step(x, grad, prior_grad, gamma)
            change = np.linalg.norm(x_new - x) / max(np.linalg.norm(x_new), 1e-300)
            x = x_new
            if change < tol:
                return x, it
    return x, n_iter
