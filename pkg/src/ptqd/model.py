"""Small noise-prediction network, trainable at desk scale.

The network is an MLP over a 2-d point concatenated with a learned per-step
time embedding.  Each hidden block is affine -> layer normalization (with
affine parameters) -> SiLU; the output block is a plain affine map back to
the data dimension.  Gradients are derived by hand, so training has no
autodiff dependency, and every forward can optionally run with per-layer
fake quantization of weights and post-activation tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidConfigError,
    InvalidInputError,
    TrainingFailureError,
    UncalibratedError,
)
from .quant import (
    QuantConfig,
    calibrate_clip_range,
    calibrate_clip_range_per_channel,
    quantize_dequantize,
)

LN_EPS = 1e-10

# Marks a layer whose quantization is requested but whose clipping range has
# not been calibrated yet.
PENDING_CALIBRATION = "pending"


def _sigmoid(y: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(y))  # bounded by 1, so no overflow either side
    return np.where(y >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(y: np.ndarray) -> np.ndarray:
    return y * _sigmoid(y)


def silu_grad(y: np.ndarray) -> np.ndarray:
    s = _sigmoid(y)
    return s * (1.0 + y * (1.0 - s))


def standardize_rows(z: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance normalization over the feature axis."""
    m = z.mean(axis=-1, keepdims=True)
    v = z.var(axis=-1, keepdims=True)
    return (z - m) / np.sqrt(v + LN_EPS)


@dataclass
class DenseLayer:
    W: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    gamma: np.ndarray | None  # layer-norm scale, None on the output layer
    beta: np.ndarray | None  # layer-norm shift
    silu: bool

    @property
    def normalized(self) -> bool:
        return self.gamma is not None

    @property
    def macs(self) -> int:
        return int(self.W.shape[0] * self.W.shape[1])


@dataclass
class LayerQuant:
    """Quantization choice for one layer; ``None`` means full precision."""

    weight: QuantConfig | str | None = None
    activation: QuantConfig | str | None = None


@dataclass
class LayerQuantAssignment:
    """Per-layer weight and activation configs for a whole network.

    The standard builders pin the first and last layers to 8-bit whenever any
    quantization is active; direct construction leaves that to the caller so
    diagnostic assignments (e.g. everything at 16-bit) stay expressible.
    """

    layers: list[LayerQuant]
    weight_bits: int | None = None
    activation_bits: int | None = None

    def __len__(self) -> int:
        return len(self.layers)

    def io_pinned(self, io_bits: int = 8) -> bool:
        """True when the first and last layer run at the io bitwidth."""
        for entry in (self.layers[0], self.layers[-1]):
            for cfg in (entry.weight, entry.activation):
                if isinstance(cfg, QuantConfig) and cfg.bitwidth != io_bits:
                    return False
        return True

    def to_dict(self) -> dict:
        def cfg_dict(cfg):
            if cfg is None:
                return None
            if cfg is PENDING_CALIBRATION:
                return PENDING_CALIBRATION
            return cfg.to_dict()

        return {
            "weight_bits": self.weight_bits,
            "activation_bits": self.activation_bits,
            "layers": [
                {"weight": cfg_dict(e.weight), "activation": cfg_dict(e.activation)}
                for e in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerQuantAssignment":
        def cfg_from(v):
            if v is None:
                return None
            if v == PENDING_CALIBRATION:
                return PENDING_CALIBRATION
            return QuantConfig.from_dict(v)

        return cls(
            layers=[
                LayerQuant(weight=cfg_from(e["weight"]), activation=cfg_from(e["activation"]))
                for e in d["layers"]
            ],
            weight_bits=d.get("weight_bits"),
            activation_bits=d.get("activation_bits"),
        )


@dataclass
class NoisePredictor:
    data_dim: int
    hidden_dims: tuple[int, ...]
    d_emb: int
    T: int
    embedding: np.ndarray  # (T, d_emb)
    layers: list[DenseLayer]
    train_config: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def layer_macs(self) -> list[int]:
        return [layer.macs for layer in self.layers]

    def _embed(self, x: np.ndarray, t) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.data_dim:
            raise InvalidInputError(f"expected (n, {self.data_dim}) input, got {x.shape}")
        t_idx = np.asarray(t, dtype=int)
        if np.any(t_idx < 1) or np.any(t_idx > self.T):
            raise InvalidInputError(f"step index outside 1..{self.T}")
        emb = self.embedding[t_idx - 1]
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (x.shape[0], self.d_emb))
        return np.concatenate([x, emb], axis=1)

    def forward(
        self,
        x: np.ndarray,
        t,
        assign: LayerQuantAssignment | None = None,
        trace: bool = False,
    ):
        """Deterministic forward pass, optionally fake-quantized.

        With an assignment, each layer's weights pass through
        quantize-dequantize before the affine map and the layer's output
        tensor is quantized afterwards.  Biases and normalization parameters
        stay in full precision.
        """
        if assign is not None and len(assign) != self.n_layers:
            raise InvalidInputError(
                f"assignment covers {len(assign)} layers, network has {self.n_layers}"
            )
        h = self._embed(x, t)
        pre_norm = [] if trace else None
        activations = [] if trace else None
        for i, layer in enumerate(self.layers):
            wcfg = acfg = None
            if assign is not None:
                wcfg = assign.layers[i].weight
                acfg = assign.layers[i].activation
                if wcfg is PENDING_CALIBRATION or acfg is PENDING_CALIBRATION:
                    raise UncalibratedError(f"layer {i} has no calibrated quantization range")
            W = layer.W if wcfg is None else quantize_dequantize(layer.W, wcfg)
            z = h @ W + layer.b
            if trace:
                pre_norm.append(z)
            if layer.normalized:
                y = layer.gamma * standardize_rows(z) + layer.beta
            else:
                y = z
            a = silu(y) if layer.silu else y
            if acfg is not None:
                a = quantize_dequantize(a, acfg)
            if trace:
                activations.append(a)
            h = a
        if trace:
            return h, {"pre_norm": pre_norm, "activations": activations}
        return h

    def to_dict(self) -> dict:
        weights = []
        for layer in self.layers:
            weights.append(
                {
                    "w": layer.W.ravel().tolist(),
                    "w_shape": list(layer.W.shape),
                    "b": layer.b.tolist(),
                    "gamma": None if layer.gamma is None else layer.gamma.tolist(),
                    "beta": None if layer.beta is None else layer.beta.tolist(),
                    "silu": layer.silu,
                }
            )
        return {
            "version": 1,
            "arch": {
                "data_dim": self.data_dim,
                "hidden_dims": list(self.hidden_dims),
                "d_emb": self.d_emb,
                "T": self.T,
            },
            "weights": weights,
            "time_embedding": self.embedding.tolist(),
            "train_config": self.train_config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoisePredictor":
        arch = d["arch"]
        layers = []
        for entry in d["weights"]:
            layers.append(
                DenseLayer(
                    W=np.array(entry["w"], dtype=float).reshape(entry["w_shape"]),
                    b=np.array(entry["b"], dtype=float),
                    gamma=None if entry["gamma"] is None else np.array(entry["gamma"], dtype=float),
                    beta=None if entry["beta"] is None else np.array(entry["beta"], dtype=float),
                    silu=bool(entry["silu"]),
                )
            )
        return cls(
            data_dim=int(arch["data_dim"]),
            hidden_dims=tuple(arch["hidden_dims"]),
            d_emb=int(arch["d_emb"]),
            T=int(arch["T"]),
            embedding=np.array(d["time_embedding"], dtype=float),
            layers=layers,
            train_config=dict(d.get("train_config", {})),
        )


def predict(
    x_t: np.ndarray, t, net: NoisePredictor, assign: LayerQuantAssignment | None = None
) -> np.ndarray:
    """Network output for state ``x_t`` at step ``t`` (quantized if assigned)."""
    return net.forward(x_t, t, assign=assign)


def init_network(
    T: int,
    data_dim: int = 2,
    hidden_dims: tuple[int, ...] = (128, 128, 128),
    d_emb: int = 16,
    seed: int = 0,
) -> NoisePredictor:
    rng = np.random.default_rng(seed)
    dims = [data_dim + d_emb, *hidden_dims, data_dim]
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        last = i == len(dims) - 2
        layers.append(
            DenseLayer(
                W=rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in),
                b=np.zeros(fan_out),
                gamma=None if last else np.ones(fan_out),
                beta=None if last else np.zeros(fan_out),
                silu=not last,
            )
        )
    embedding = 0.1 * rng.standard_normal((T, d_emb))
    return NoisePredictor(
        data_dim=data_dim,
        hidden_dims=tuple(hidden_dims),
        d_emb=d_emb,
        T=T,
        embedding=embedding,
        layers=layers,
    )


def _forward_cached(net: NoisePredictor, h0: np.ndarray):
    """Full-precision forward keeping the intermediates backward needs."""
    cache = []
    h = h0
    for layer in net.layers:
        z = h @ layer.W + layer.b
        if layer.normalized:
            m = z.mean(axis=1, keepdims=True)
            v = z.var(axis=1, keepdims=True)
            inv = 1.0 / np.sqrt(v + LN_EPS)
            zn = (z - m) * inv
            y = layer.gamma * zn + layer.beta
        else:
            inv = zn = None
            y = z
        a = silu(y) if layer.silu else y
        cache.append((h, zn, inv, y))
        h = a
    return h, cache


def _backward(net: NoisePredictor, cache, dout: np.ndarray):
    """Hand-derived gradients for the cached forward pass.

    Returns per-layer (dW, db, dgamma, dbeta) plus the gradient with respect
    to the network input (used for the embedding table).
    """
    grads = [None] * net.n_layers
    da = dout
    for i in range(net.n_layers - 1, -1, -1):
        layer = net.layers[i]
        h_in, zn, inv, y = cache[i]
        dy = da * silu_grad(y) if layer.silu else da
        if layer.normalized:
            dgamma = (dy * zn).sum(axis=0)
            dbeta = dy.sum(axis=0)
            dzn = dy * layer.gamma
            # layer-norm backward with biased variance over the feature axis
            dz = inv * (
                dzn
                - dzn.mean(axis=1, keepdims=True)
                - zn * (dzn * zn).mean(axis=1, keepdims=True)
            )
        else:
            dgamma = dbeta = None
            dz = dy
        dW = h_in.T @ dz
        db = dz.sum(axis=0)
        da = dz @ layer.W.T
        grads[i] = (dW, db, dgamma, dbeta)
    return grads, da


def training_loss_and_grads(net: NoisePredictor, x_t: np.ndarray, t_idx: np.ndarray, target: np.ndarray):
    """Mean-squared denoising loss with gradients for every parameter."""
    h0 = net._embed(x_t, t_idx)
    out, cache = _forward_cached(net, h0)
    resid = out - target
    loss = float(np.mean(resid**2))
    dout = 2.0 * resid / resid.size
    grads, dh0 = _backward(net, cache, dout)
    demb = np.zeros_like(net.embedding)
    np.add.at(demb, np.asarray(t_idx, dtype=int) - 1, dh0[:, net.data_dim :])
    return loss, grads, demb


def make_dataset(kind: str, n: int, seed: int) -> np.ndarray:
    """Toy datasets; ``gmm2d`` is an 8-mode Gaussian mixture on a circle."""
    if n < 1:
        raise InvalidInputError("dataset size must be at least 1")
    if kind != "gmm2d":
        raise InvalidConfigError(f"unknown dataset kind {kind!r}")
    rng = np.random.default_rng(seed)
    centers = gmm2d_centers()
    comp = rng.integers(0, len(centers), size=n)
    return centers[comp] + 0.1 * rng.standard_normal((n, 2))


def gmm2d_centers(n_modes: int = 8, radius: float = 2.0) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(n_modes) / n_modes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def train_toy(
    dataset: np.ndarray,
    s,
    epochs: int,
    lr: float,
    seed: int,
    hidden_dims: tuple[int, ...] = (128, 128, 128),
    d_emb: int = 16,
    batch_size: int = 128,
    momentum: float = 0.9,
    lr_decay_epochs: int | None = None,
) -> NoisePredictor:
    """Train a fresh network on the standard denoising objective.

    Plain SGD with momentum; all randomness (init, batching, step and noise
    draws) flows from ``seed``, so identical inputs give bitwise-identical
    weights.  ``epochs=0`` returns the freshly initialized network.
    """
    dataset = np.asarray(dataset, dtype=float)
    if dataset.ndim != 2 or dataset.shape[0] == 0:
        raise InvalidInputError("dataset must be a non-empty (n, d) array")
    if epochs < 0:
        raise InvalidConfigError("epochs must be non-negative")
    net = init_network(
        T=s.T, data_dim=dataset.shape[1], hidden_dims=hidden_dims, d_emb=d_emb, seed=seed
    )
    net.train_config = {
        "epochs": int(epochs),
        "lr": float(lr),
        "seed": int(seed),
        "batch_size": int(batch_size),
        "momentum": float(momentum),
        "hidden_dims": list(hidden_dims),
        "d_emb": int(d_emb),
    }
    rng = np.random.default_rng(seed + 1)
    vel_layers = [
        (np.zeros_like(l.W), np.zeros_like(l.b),
         None if l.gamma is None else np.zeros_like(l.gamma),
         None if l.beta is None else np.zeros_like(l.beta))
        for l in net.layers
    ]
    vel_emb = np.zeros_like(net.embedding)
    n = dataset.shape[0]
    sqrt_abar = np.sqrt(s.alpha_bar)
    sqrt_one_minus = np.sqrt(1.0 - s.alpha_bar)
    for epoch in range(epochs):
        step_lr = lr
        if lr_decay_epochs and epoch >= lr_decay_epochs:
            step_lr = lr * 0.1
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x0 = dataset[idx]
            t_idx = rng.integers(1, s.T + 1, size=idx.size)
            eps = rng.standard_normal(x0.shape)
            x_t = (
                sqrt_abar[t_idx - 1, None] * x0
                + sqrt_one_minus[t_idx - 1, None] * eps
            )
            loss, grads, demb = training_loss_and_grads(net, x_t, t_idx, eps)
            if not np.isfinite(loss):
                raise TrainingFailureError(
                    f"loss became {loss} at epoch {epoch} offset {start}; lr={step_lr}"
                )
            for layer, vel, grad in zip(net.layers, vel_layers, grads):
                vW, vb, vg, vbeta = vel
                dW, db, dgamma, dbeta = grad
                vW *= momentum
                vW -= step_lr * dW
                layer.W += vW
                vb *= momentum
                vb -= step_lr * db
                layer.b += vb
                if layer.normalized:
                    vg *= momentum
                    vg -= step_lr * dgamma
                    layer.gamma += vg
                    vbeta *= momentum
                    vbeta -= step_lr * dbeta
                    layer.beta += vbeta
            vel_emb *= momentum
            vel_emb -= step_lr * demb
            net.embedding += vel_emb
    return net


def make_weight_config(W: np.ndarray, bits: int) -> QuantConfig:
    """Per-output-channel min/max range for a weight matrix."""
    low, high = calibrate_clip_range_per_channel(W, mode="minmax")
    return QuantConfig(bitwidth=bits, clip_low=low, clip_high=high, granularity="per-channel")


def collect_activation_samples(
    net: NoisePredictor,
    s,
    kind: str = "ddpm",
    n_passes: int = 256,
    seed: int = 0,
    steps: np.ndarray | None = None,
) -> list[np.ndarray]:
    """Post-activation tensors recorded along full-precision trajectories.

    One pooled (rows, features) array per layer; with ``steps`` given only
    those step indices contribute rows.
    """
    from .sampler import _STEP_FNS, check_sampler_kind, trajectory_noise  # avoid cycle

    step_fn = _STEP_FNS[check_sampler_kind(kind)]
    wanted = None if steps is None else set(int(t) for t in steps)
    noise = trajectory_noise(n_passes, s.T, net.data_dim, seed)
    x = noise[:, 0, :].copy()
    pools: list[list[np.ndarray]] = [[] for _ in range(net.n_layers)]
    for t in range(s.T, 0, -1):
        eps, tr = net.forward(x, t, trace=True)
        if wanted is None or t in wanted:
            for i, act in enumerate(tr["activations"]):
                pools[i].append(act)
        z = noise[:, s.T - t + 1, :] if t > 1 else np.zeros_like(x)
        x = step_fn(x, t, eps, s, z)
    for i, pool in enumerate(pools):
        if not pool:
            raise InvalidInputError("no activation rows collected; check the step subset")
        pools[i] = np.concatenate(pool, axis=0)
    return pools


def calibrate_assignment(
    net: NoisePredictor,
    s,
    weight_bits: int,
    act_bits: int,
    kind: str = "ddpm",
    n_passes: int = 256,
    seed: int = 0,
    percentile: float = 99.9,
    io_bits: int = 8,
    steps: np.ndarray | None = None,
    activation_samples: list[np.ndarray] | None = None,
) -> LayerQuantAssignment:
    """Build a fully calibrated assignment for one bitwidth setting.

    Weights get per-channel min/max ranges, activations per-tensor
    percentile ranges from sampler trajectories.  The first and last layers
    are pinned to ``io_bits``.  Precomputed ``activation_samples`` can be
    passed to reuse one collection pass across bitwidths.
    """
    if activation_samples is None:
        activation_samples = collect_activation_samples(
            net, s, kind=kind, n_passes=n_passes, seed=seed, steps=steps
        )
    if len(activation_samples) != net.n_layers:
        raise InvalidInputError("activation samples do not match the layer count")
    entries = []
    last = net.n_layers - 1
    for i, layer in enumerate(net.layers):
        w_bits = io_bits if i in (0, last) else weight_bits
        a_bits = io_bits if i in (0, last) else act_bits
        low, high = calibrate_clip_range(
            activation_samples[i], mode="percentile", percentile=percentile
        )
        entries.append(
            LayerQuant(
                weight=make_weight_config(layer.W, w_bits),
                activation=QuantConfig(
                    bitwidth=a_bits,
                    clip_low=np.asarray(low, dtype=float),
                    clip_high=np.asarray(high, dtype=float),
                ),
            )
        )
    return LayerQuantAssignment(layers=entries, weight_bits=weight_bits, activation_bits=act_bits)
