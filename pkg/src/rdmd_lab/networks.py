"""
MLP denoiser for low-dimensional data and the one-step generators built on it.

The denoiser has three blocks: an input encoder, a time encoder fed with a
sinusoidal encoding of log(sigma), and a decoder on the concatenated
(input, time) embeddings. Layers compute ``x @ W + b``; weights are stored as
(fan_in, fan_out).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np

from rdmd_lab import tensor as T
from rdmd_lab.errors import ShapeError, ValidationError
from rdmd_lab.schedule import NoiseSchedule
from rdmd_lab.tensor import Graph, Tensor

Params = dict[str, np.ndarray]


class Denoiser(Protocol):
    def denoise(self, x: np.ndarray, sigma) -> np.ndarray: ...


@dataclass(frozen=True)
class NetConfig:
    input_dim: int = 2
    encoder_dims: tuple[int, ...] = (16, 32, 32, 32)
    decoder_dims: tuple[int, ...] = (128, 256, 128, 64, 2)
    embed_dim: int = 64
    slope: float = 0.01
    init: str = "kaiming-uniform"

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder_dims", tuple(int(d) for d in self.encoder_dims))
        object.__setattr__(self, "decoder_dims", tuple(int(d) for d in self.decoder_dims))
        if not self.encoder_dims or not self.decoder_dims:
            raise ValidationError("network: encoder_dims and decoder_dims must be non-empty")
        if any(d < 1 for d in self.encoder_dims + self.decoder_dims) or self.input_dim < 1:
            raise ValidationError("network: layer widths must be positive")
        if self.decoder_dims[-1] != self.input_dim:
            raise ValidationError(
                f"network: last decoder dim {self.decoder_dims[-1]} must equal input_dim {self.input_dim}"
            )
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValidationError(f"network: embed_dim must be even and >= 2, got {self.embed_dim}")
        if self.init != "kaiming-uniform":
            raise ValidationError(f"network: unknown init {self.init!r}")

    def layer_shapes(self) -> dict[str, list[tuple[int, int]]]:
        def chain(fan_in: int, dims: tuple[int, ...]) -> list[tuple[int, int]]:
            out = []
            for d in dims:
                out.append((fan_in, d))
                fan_in = d
            return out

        return {
            "enc": chain(self.input_dim, self.encoder_dims),
            "time": chain(self.embed_dim, self.encoder_dims),
            "dec": chain(2 * self.encoder_dims[-1], self.decoder_dims),
        }

    def parameter_count(self) -> int:
        return sum(fi * fo + fo for block in self.layer_shapes().values() for fi, fo in block)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_dims"] = list(self.encoder_dims)
        d["decoder_dims"] = list(self.decoder_dims)
        return d


def positional_encode(sigma, embed_dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos of log(sigma) at geometric frequencies 1 .. 1/max_period.

    Scalar sigma gives shape (embed_dim,), a vector of n sigmas gives (n, embed_dim).
    """
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s <= 0):
        raise ValidationError("positional_encode: sigma must be > 0")
    if embed_dim < 2 or embed_dim % 2:
        raise ValidationError(f"positional_encode: embed_dim must be even, got {embed_dim}")
    half = embed_dim // 2
    freqs = max_period ** (-np.arange(half, dtype=np.float64) / half)
    args = np.log(s)[..., None] * freqs
    out = np.empty(args.shape[:-1] + (embed_dim,))
    out[..., 0::2] = np.sin(args)
    out[..., 1::2] = np.cos(args)
    return out


def score_from_denoiser(x: np.ndarray, d: np.ndarray, sigma) -> np.ndarray:
    """Tweedie: grad log p_sigma(x) = (D(x, sigma) - x) / sigma^2."""
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if x.shape != d.shape:
        raise ShapeError(f"score_from_denoiser: shapes {x.shape} and {d.shape} differ")
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s <= 0):
        raise ValidationError("score_from_denoiser: sigma must be > 0")
    if s.ndim == 1:
        s = s[:, None]
    return (d - x) / (s * s)


def _kaiming_uniform(rng, fan_in: int, fan_out: int, slope: float) -> np.ndarray:
    bound = math.sqrt(6.0 / ((1.0 + slope * slope) * fan_in))
    return rng.uniform((fan_in, fan_out), -bound, bound)


class DenoiserNet:
    def __init__(self, config: NetConfig, params: Params, schedule: NoiseSchedule) -> None:
        expected = {}
        for block, shapes in config.layer_shapes().items():
            for i, (fi, fo) in enumerate(shapes):
                expected[f"{block}.{i}.weight"] = (fi, fo)
                expected[f"{block}.{i}.bias"] = (fo,)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ShapeError(f"DenoiserNet: parameter names mismatch (missing={missing}, unexpected={extra})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"DenoiserNet: {name} has shape {params[name].shape}, config needs {shape}")
        self.config = config
        self.params = {name: np.asarray(params[name], dtype=np.float64) for name in expected}
        self.schedule = schedule

    @classmethod
    def init(cls, config: NetConfig, schedule: NoiseSchedule, rng) -> "DenoiserNet":
        params: Params = {}
        for block, shapes in config.layer_shapes().items():
            for i, (fi, fo) in enumerate(shapes):
                params[f"{block}.{i}.weight"] = _kaiming_uniform(rng, fi, fo, config.slope)
                params[f"{block}.{i}.bias"] = np.zeros(fo)
        return cls(config, params, schedule)

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "DenoiserNet":
        return DenoiserNet(self.config, {k: v.copy() for k, v in self.params.items()}, self.schedule)

    def _bind(self, graph: Graph | None) -> dict[str, Tensor]:
        if graph is None:
            return {name: Tensor(p) for name, p in self.params.items()}
        return {name: graph.param(name, p) for name, p in self.params.items()}

    def _mlp(self, w: dict[str, Tensor], block: str, h: Tensor, last_linear: bool) -> Tensor:
        n_layers = len(self.config.layer_shapes()[block])
        for i in range(n_layers):
            h = T.add_bias(T.matmul(h, w[f"{block}.{i}.weight"]), w[f"{block}.{i}.bias"])
            if not (last_linear and i == n_layers - 1):
                h = T.leaky_relu(h, self.config.slope)
        return h

    def apply(self, x: Tensor, sigma, graph: Graph | None = None) -> Tensor:
        """D(x, sigma) as a tensor; parameters become leaves of ``graph`` when given."""
        if len(x.shape) != 2 or x.shape[1] != self.config.input_dim:
            raise ShapeError(f"denoise: x must be (batch, {self.config.input_dim}), got {x.shape}")
        self.schedule.check(sigma)
        n = x.shape[0]
        s = np.asarray(sigma, dtype=np.float64)
        if s.ndim == 0:
            emb = np.tile(positional_encode(s, self.config.embed_dim), (n, 1))
        elif s.shape == (n,):
            emb = positional_encode(s, self.config.embed_dim)
        else:
            raise ShapeError(f"denoise: sigma must be a scalar or shape ({n},), got {s.shape}")

        w = self._bind(graph)
        h_x = self._mlp(w, "enc", x, last_linear=False)
        h_t = self._mlp(w, "time", Tensor(emb), last_linear=False)
        return self._mlp(w, "dec", T.concat(h_x, h_t), last_linear=True)

    def denoise(self, x: np.ndarray, sigma) -> np.ndarray:
        return self.apply(Tensor(x), sigma).values

    __call__ = denoise


class GeneratorNet:
    """One-step generator G(x) = D(x, sigma_init) with its own parameter copy."""

    def __init__(self, net: DenoiserNet, sigma_init: float) -> None:
        net.schedule.check(sigma_init, "sigma_init")
        self.net = net
        self.sigma_init = float(sigma_init)

    @property
    def params(self) -> Params:
        return self.net.params

    @property
    def config(self) -> NetConfig:
        return self.net.config

    def apply(self, x: Tensor, graph: Graph | None = None) -> Tensor:
        return self.net.apply(x, self.sigma_init, graph)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.apply(Tensor(x)).values


def init_generator_from(denoiser: DenoiserNet, sigma_init: float = 1.0) -> GeneratorNet:
    return GeneratorNet(denoiser.copy(), sigma_init)


class LinearGenerator:
    """G(x) = A x; ``params['weight']`` stores A^T so the forward pass is x @ weight."""

    def __init__(self, matrix: np.ndarray) -> None:
        a = np.asarray(matrix, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"LinearGenerator: matrix must be square, got {a.shape}")
        self.params: Params = {"weight": a.T.copy()}

    @classmethod
    def identity(cls, dim: int = 2) -> "LinearGenerator":
        return cls(np.eye(dim))

    @property
    def matrix(self) -> np.ndarray:
        return self.params["weight"].T

    def apply(self, x: Tensor, graph: Graph | None = None) -> Tensor:
        w = Tensor(self.params["weight"]) if graph is None else graph.param("weight", self.params["weight"])
        return T.matmul(x, w)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.apply(Tensor(x)).values
