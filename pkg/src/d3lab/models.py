"""Desk-scale architectures: ReLU MLP, sine-activation MLP, linear feature models."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn.params import ParamVector
from .nn.rng import Rng
from .nn.tensor import NonFiniteError, Tensor, backward, relu, sin

MLP_RELU = "mlp_relu"
MLP_SINE = "mlp_sine"
LINEAR_FEATURES = "linear_features"
ARCH_KINDS = (MLP_RELU, MLP_SINE, LINEAR_FEATURES)


@dataclass(frozen=True)
class FeatureBasis:
    """Fixed features phi_1..phi_P for a linear model.

    ``polynomial`` uses powers of the first input coordinate, ``params['degrees']``
    (default 0..P-1).  ``random_fourier`` uses sqrt(2/P) cos(w.x + b) with
    frequencies w ~ N(0, scale^2) and phases b ~ U[0, 2pi) drawn from
    ``params['seed']``.
    """

    kind: str
    P: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("polynomial", "random_fourier"):
            raise ValueError(f"unknown feature basis {self.kind!r}")
        if self.P < 1:
            raise ValueError("feature count P must be >= 1")

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Design matrix of shape (N, P)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.kind == "polynomial":
            degrees = self.params.get("degrees", list(range(self.P)))
            if len(degrees) != self.P:
                raise ValueError("polynomial degrees must have length P")
            return np.stack([x[:, 0] ** d for d in degrees], axis=1)
        w, b = self._fourier(x.shape[1])
        return np.sqrt(2.0 / self.P) * np.cos(x @ w + b)

    def _fourier(self, input_dim: int) -> tuple[np.ndarray, np.ndarray]:
        rng = Rng(int(self.params.get("seed", 0)), "fourier")
        scale = float(self.params.get("scale", 1.0))
        w = rng.normal(0.0, scale, (input_dim, self.P))
        b = rng.uniform(0.0, 2 * np.pi, self.P)
        return w, b


@dataclass(frozen=True)
class ArchSpec:
    kind: str
    input_dim: int
    output_dim: int
    hidden_widths: tuple = ()
    sine_omega0: float = 30.0
    feature_basis: FeatureBasis | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(h) for h in self.hidden_widths))
        if self.kind not in ARCH_KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.output_dim < 1 or self.input_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if self.kind in (MLP_RELU, MLP_SINE) and not self.hidden_widths:
            raise ValueError("MLP architectures need at least one hidden layer")
        if self.kind == LINEAR_FEATURES and self.feature_basis is None:
            raise ValueError("linear_features needs a feature_basis")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        fb = d.get("feature_basis")
        if isinstance(fb, dict):
            d["feature_basis"] = FeatureBasis(**fb)
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_widths, self.output_dim]


class ModelState:
    """Architecture plus a flat parameter vector ``theta``.

    Forward passes read the parameters through views of ``theta.params``;
    the trainer mutates that array in place through the optimizer.
    """

    def __init__(self, arch: ArchSpec, theta: ParamVector, init_seed: int):
        self.arch = arch
        self.theta = theta
        self.init_seed = init_seed

    @property
    def n_params(self) -> int:
        return len(self.theta)

    def clone(self) -> "ModelState":
        return ModelState(self.arch, self.theta.copy(), self.init_seed)

    # ------------------------------------------------------------------
    def _leaves(self, requires_grad: bool) -> list[Tensor]:
        return [Tensor(self.theta.view(seg), requires_grad) for seg in self.theta.layout]

    def graph(self, x, requires_grad: bool = True) -> tuple[Tensor, list[Tensor]]:
        """Forward pass that records the graph; returns (output, parameter leaves)."""
        x = self._check_input(x)
        leaves = self._leaves(requires_grad)
        arch = self.arch
        h = Tensor(x)
        if arch.kind == LINEAR_FEATURES:
            phi = Tensor(arch.feature_basis.evaluate(x))
            out = phi @ leaves[0]
        else:
            n_layers = len(leaves) // 2
            for i in range(n_layers):
                W, b = leaves[2 * i], leaves[2 * i + 1]
                h = h @ W + b
                if i < n_layers - 1:
                    h = relu(h) if arch.kind == MLP_RELU else sin(h * arch.sine_omega0)
            out = h
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("non-finite model output")
        return out, leaves

    def __call__(self, x) -> np.ndarray:
        return self.graph(x, requires_grad=False)[0].data

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(1, -1) if x.size == self.arch.input_dim else x.reshape(-1, 1)
        if x.ndim != 2 or x.shape[1] != self.arch.input_dim:
            raise ValueError(
                f"input shape {x.shape} does not match input_dim={self.arch.input_dim}"
            )
        return x

    def flat_grad(self, root: Tensor, leaves: list[Tensor], seed=None) -> np.ndarray:
        """Backpropagate ``root`` and scatter leaf gradients into one flat vector."""
        g = backward(root, seed)
        out = np.zeros_like(self.theta.params)
        for seg, leaf in zip(self.theta.layout, leaves):
            lg = g.get(id(leaf))
            if lg is not None:
                self.theta.view(seg, out)[...] = lg
        return out


def forward(model: ModelState, x) -> np.ndarray:
    return model(x)


# ----------------------------------------------------------------------
# initialization


def _layer_shapes(arch: ArchSpec) -> list[tuple[int, str, tuple]]:
    if arch.kind == LINEAR_FEATURES:
        return [(0, "theta", (arch.feature_basis.P, arch.output_dim))]
    dims = arch.layer_dims
    shapes = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        shapes.append((i, "W", (a, b)))
        shapes.append((i, "b", (b,)))
    return shapes


def init_model(arch: ArchSpec, seed: int) -> ModelState:
    """Draw parameters for ``arch`` from ``seed``.

    Dense (ReLU) layers: W, b ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Sine layers: first W ~ U(-1/fan_in, 1/fan_in), later
    W ~ U(-sqrt(6/fan_in)/omega0, +sqrt(6/fan_in)/omega0), biases as dense.
    Linear features: theta ~ U(-1/sqrt(P), 1/sqrt(P)).
    """
    theta = ParamVector.allocate(_layer_shapes(arch))
    rng = Rng(seed, "init")
    for seg in theta.layout:
        view = theta.view(seg)
        if arch.kind == LINEAR_FEATURES:
            k = 1.0 / np.sqrt(arch.feature_basis.P)
        else:
            fan_in = arch.layer_dims[seg.layer]
            k = 1.0 / np.sqrt(fan_in)
            if arch.kind == MLP_SINE and seg.role == "W":
                if seg.layer == 0:
                    k = 1.0 / fan_in
                else:
                    k = np.sqrt(6.0 / fan_in) / arch.sine_omega0
        view[...] = rng.uniform(-k, k, seg.shape)
    return ModelState(arch, theta, seed)


def make_identical_cohort(arch: ArchSpec, J: int, seeds: list[int]) -> list[ModelState]:
    if J < 2:
        raise ValueError("a cohort needs at least two members")
    if len(seeds) != J:
        raise ValueError(f"expected {J} seeds, got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"cohort seeds must be distinct, got {list(seeds)}")
    return [init_model(arch, s) for s in seeds]


def predict_class(model_or_logits, x=None) -> np.ndarray:
    """Argmax over logits; ties go to the lowest index."""
    if x is None:
        logits = np.asarray(model_or_logits, dtype=np.float64)
    else:
        model = model_or_logits
        if model.arch.output_dim < 2:
            raise ValueError("predict_class needs a classifier (output_dim >= 2)")
        logits = model(x)
    if logits.ndim == 1:
        return int(np.argmax(logits))
    return np.argmax(logits, axis=1)


# ----------------------------------------------------------------------
# per-sample gradients


def vjp(model: ModelState, x, cotangent) -> np.ndarray:
    """Flat gradient of ``sum_i cot_i . f(x_i)`` with respect to theta."""
    out, leaves = model.graph(x)
    cot = np.asarray(cotangent, dtype=np.float64).reshape(out.shape)
    return model.flat_grad(out, leaves, seed=cot)


def jacobian_rows(model: ModelState, x, max_bytes: int = 256 * 2**20) -> np.ndarray:
    """Per-sample, per-output parameter gradients, shape (N, output_dim, P)."""
    x = model._check_input(x)
    n, k, p = x.shape[0], model.arch.output_dim, model.n_params
    need = n * k * p * 8
    if need > max_bytes:
        raise MemoryError(f"jacobian needs {need} bytes, budget is {max_bytes}")
    rows = np.empty((n, k, p))
    for i in range(n):
        out, leaves = model.graph(x[i : i + 1])
        for o in range(k):
            seed = np.zeros((1, k))
            seed[0, o] = 1.0
            rows[i, o] = model.flat_grad(out, leaves, seed=seed)
    return rows


# ----------------------------------------------------------------------
# checkpoints: b"D3CK" | u32 header length | JSON header | float64 LE params

_MAGIC = b"D3CK"


def save_checkpoint(model: ModelState, path) -> None:
    header = json.dumps(
        {"arch": model.arch.to_dict(), "seed": model.init_seed, "n_params": model.n_params},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(model.theta.params.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelState:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ValueError("not a d3lab checkpoint")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + hlen])
    arch = ArchSpec.from_dict(header["arch"])
    params = np.frombuffer(blob[8 + hlen :], dtype="<f8").astype(np.float64)
    if params.size != header["n_params"]:
        raise ValueError("truncated checkpoint parameter block")
    model = init_model(arch, header["seed"])
    model.theta.params[...] = params
    return model
