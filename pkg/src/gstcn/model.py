"""GSTCN: input embedding, spatial graph convolution, temporal dependency
extractor (TDE) and a GRU encoder-decoder emitting bivariate Gaussians."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import AdjacencyScheme, DistanceMetric, build_weighted_adjacency, normalize_adjacency

VARIANTS = ("full", "no_gcn", "no_tde", "no_gru")
ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


@dataclass
class ModelConfig:
    past_len: int = 15
    future_len: int = 25
    coord_channels: int = 2
    embed_channels: int = 32
    gcn_layers: int = 1
    tde_layers: int = 5
    tde_kernel: tuple[int, int] = (3, 3)
    tde_padding: int = 1
    gru_hidden: int = 32
    dropout: float = 0.5
    adjacency_scheme: str = "reciprocal"
    distance_metric: str = "euclidean"
    activation: str = "relu"
    variant: str = "full"
    # coordinates are divided by this before the embedding
    input_scale: float = 10.0
    # "last": means are offsets from each vehicle's last observed position;
    # "cv": offsets from a constant-velocity roll-out of the last two frames
    output_anchor: str = "last"
    # meters per unit of the raw mean outputs
    position_scale: float = 10.0
    # multiply mean offsets and sigmas by position_scale * (k + 1) / F at future step k
    horizon_scaling: bool = False

    def __post_init__(self):
        for name in ("past_len", "future_len", "coord_channels", "embed_channels", "tde_layers", "gru_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.gcn_layers < 0:
            raise ValueError("gcn_layers must be non-negative")
        if self.coord_channels != 2:
            raise ValueError("coord_channels must be 2")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_anchor not in ("none", "last", "cv"):
            raise ValueError(f"unknown output anchor {self.output_anchor!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        AdjacencyScheme(self.adjacency_scheme)
        DistanceMetric(self.distance_metric)
        self.tde_kernel = tuple(self.tde_kernel)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tde_kernel"] = list(self.tde_kernel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def ablation_config(config: ModelConfig, remove: str) -> ModelConfig:
    """Copy of ``config`` with one module (gcn, tde or gru) removed."""
    if remove not in ("gcn", "tde", "gru"):
        raise ValueError(f"cannot remove {remove!r}")
    d = config.to_dict()
    d["variant"] = f"no_{remove}"
    return ModelConfig.from_dict(d)


@dataclass
class BiGaussianField:
    """Per-step, per-vehicle bivariate normal parameters; arrays shaped (F, N)."""

    mu_x: np.ndarray
    mu_y: np.ndarray
    sigma_x: np.ndarray
    sigma_y: np.ndarray
    rho: np.ndarray

    def as_array(self) -> np.ndarray:
        """(F, N, 5) stack ordered mu_x, mu_y, sigma_x, sigma_y, rho."""
        return np.stack([self.mu_x, self.mu_y, self.sigma_x, self.sigma_y, self.rho], axis=-1)

    @property
    def mean(self) -> np.ndarray:
        """(2, F, N) mean trajectory."""
        return np.stack([self.mu_x, self.mu_y])

    def take(self, vehicles: Sequence[int]) -> "BiGaussianField":
        idx = list(vehicles)
        return BiGaussianField(*(a[:, idx] for a in (self.mu_x, self.mu_y, self.sigma_x, self.sigma_y, self.rho)))


@dataclass
class FieldTensors:
    """Differentiable output of a batched forward pass; tensors shaped (B, F, N)."""

    mu_x: Tensor
    mu_y: Tensor
    sigma_x: Tensor
    sigma_y: Tensor
    rho: Tensor
    log_sigma_x: Tensor
    log_sigma_y: Tensor


# batching

def canonical_order(past: np.ndarray) -> np.ndarray:
    """Vehicle order used inside the network, independent of input order.

    Vehicles are sorted lexicographically by longitudinal then lateral
    position at the last past frame, then by the remaining history, so the
    TDE convolution sees road neighbours as array neighbours.
    """
    T = past.shape[1]
    keys = [past[c, t] for t in range(T - 1) for c in (1, 0)][::-1]
    keys += [past[0, T - 1], past[1, T - 1]]
    return np.lexsort(keys)


@dataclass
class Batch:
    inputs: np.ndarray        # (B, 2, T, N) positions in meters, canonical order, zero padded
    adjacency: np.ndarray     # (B, T, N, N) normalized adjacency
    mask: np.ndarray          # (B, N) 1 for real vehicles
    orders: list[np.ndarray]  # per scene: canonical position -> original index
    counts: list[int]
    truth: np.ndarray | None = None  # (B, 2, F, N)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def make_batch(segments: Sequence, config: ModelConfig, dtype=np.float32, with_truth: bool = True) -> Batch:
    if not segments:
        raise ValueError("empty batch")
    B = len(segments)
    n_max = max(s.past.shape[2] for s in segments)
    T = config.past_len
    inputs = np.zeros((B, 2, T, n_max), dtype=dtype)
    adj = np.zeros((B, T, n_max, n_max), dtype=dtype)
    mask = np.zeros((B, n_max), dtype=dtype)
    truth = np.zeros((B, 2, config.future_len, n_max), dtype=dtype) if with_truth else None
    orders, counts = [], []
    for b, seg in enumerate(segments):
        past = np.asarray(seg.past, dtype=np.float64)
        if past.shape[1] != T:
            raise ValueError(f"scene has {past.shape[1]} past frames, model expects {T}")
        order = canonical_order(past)
        past = past[:, :, order]
        n = past.shape[2]
        inputs[b, :, :, :n] = past
        for t in range(T):
            a = build_weighted_adjacency(past[:, t, :], config.adjacency_scheme, config.distance_metric)
            adj[b, t, :n, :n] = normalize_adjacency(a)
        mask[b, :n] = 1.0
        if with_truth:
            truth[b, :, :, :n] = np.asarray(seg.future)[:, :, order]
        orders.append(order)
        counts.append(n)
    return Batch(inputs, adj, mask, orders, counts, truth)


# parameters

def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_parameters(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    c, e, T, F, h = config.coord_channels, config.embed_channels, config.past_len, config.future_len, config.gru_hidden
    kh, kw = config.tde_kernel
    p: dict[str, Tensor] = {}
    p["embed.weight"] = _uniform(rng, (c, e), c, dtype)
    p["embed.bias"] = _uniform(rng, (e,), c, dtype)
    if config.variant != "no_gcn":
        for l in range(config.gcn_layers):
            p[f"gcn.{l}.weight"] = _uniform(rng, (e, e), e, dtype)
    if config.variant == "no_tde":
        p["time_map.weight"] = _uniform(rng, (T, F), T, dtype)
        p["time_map.bias"] = _uniform(rng, (F,), T, dtype)
    else:
        for l in range(config.tde_layers):
            cin = T if l == 0 else F
            p[f"tde.{l}.weight"] = _uniform(rng, (F, cin, kh, kw), cin * kh * kw, dtype)
            p[f"tde.{l}.bias"] = _uniform(rng, (F,), cin * kh * kw, dtype)
    if config.variant != "no_gru":
        for part in ("encoder", "decoder"):
            for g in ("z", "r", "n"):
                p[f"{part}.W_{g}"] = _uniform(rng, (e, h), e, dtype)
                p[f"{part}.U_{g}"] = _uniform(rng, (h, h), h, dtype)
                p[f"{part}.b_{g}"] = _uniform(rng, (h,), h, dtype)
        head_in = h
    else:
        head_in = e
    p["head.weight"] = _uniform(rng, (head_in, 5), head_in, dtype)
    p["head.bias"] = _uniform(rng, (5,), head_in, dtype)
    return p


def count_parameters(params: dict[str, Tensor]) -> int:
    return int(sum(t.size for t in params.values()))


def gru_parameter_count(input_size: int, hidden: int) -> int:
    return 3 * (hidden * hidden + hidden * input_size + hidden)


# building blocks

def embed_input(v: Tensor, weight: Tensor, bias: Tensor, activation: str = "relu") -> Tensor:
    """Pointwise 2->C' map of (B, T, N, 2) coordinates, returned as (B, T, N, C')."""
    return ACTIVATIONS[activation](ad.matmul(v, weight) + bias)


def spatial_graph_conv(z: Tensor, adjacency: Tensor, weight: Tensor, activation: str = "relu") -> Tensor:
    """f(A_t Z_t W) for every frame t; ``z`` is (B, T, N, C'), ``adjacency`` (B, T, N, N)."""
    if z.shape[-2] != adjacency.shape[-1]:
        raise ValueError(f"spatial_graph_conv: {z.shape[-2]} vertices but adjacency is {adjacency.shape}")
    return ACTIVATIONS[activation](ad.matmul(ad.matmul(adjacency, z), weight))


def temporal_dependency_extractor(h: Tensor, weights: Sequence[Tensor], biases: Sequence[Tensor],
                                  padding: int = 1, activation: str = "relu",
                                  mask: Tensor | None = None) -> Tensor:
    """Time-as-channels convolution stack over the (C', N) plane.

    ``h`` is (B, T, N, C'); it is transposed to (B, T, C', N) so the T past
    frames are the input channels.  The first layer maps T -> F channels and
    every later layer is a residual block act(conv(x)) + x.  Output is
    (B, F, C', N).  ``mask`` (B, 1, 1, N) zeroes padded vehicle columns
    after each layer.
    """
    act = ACTIVATIONS[activation]
    x = ad.transpose(h, (0, 1, 3, 2))
    for l, (w, b) in enumerate(zip(weights, biases)):
        y = act(ad.conv2d(x, w, b, padding=padding))
        x = y if l == 0 else y + x
        if mask is not None:
            x = x * mask
    return x


def gru_cell(x: Tensor, h: Tensor, w: dict[str, Tensor]) -> Tensor:
    """One GRU update: z/r gates, tanh candidate over r*h, h' = (1-z) n + z h."""
    z = ad.sigmoid(ad.matmul(x, w["W_z"]) + ad.matmul(h, w["U_z"]) + w["b_z"])
    r = ad.sigmoid(ad.matmul(x, w["W_r"]) + ad.matmul(h, w["U_r"]) + w["b_r"])
    n = ad.tanh(ad.matmul(x, w["W_n"]) + ad.matmul(r * h, w["U_n"]) + w["b_n"])
    return n + z * (h - n)


def _gru_run(xs: Sequence[Tensor], h: Tensor, w: dict[str, Tensor]) -> list[Tensor]:
    """Run a GRU over pre-projected inputs; returns every hidden state."""
    out = []
    for xz, xr, xn in xs:
        z = ad.sigmoid(xz + ad.matmul(h, w["U_z"]))
        r = ad.sigmoid(xr + ad.matmul(h, w["U_r"]))
        n = ad.tanh(xn + ad.matmul(r * h, w["U_n"]))
        h = n + z * (h - n)
        out.append(h)
    return out


def _project_sequence(seq: Tensor, w: dict[str, Tensor]) -> list[tuple[Tensor, Tensor, Tensor]]:
    """Input projections of a (M, F, C') sequence for all steps at once."""
    parts = []
    for g in ("z", "r", "n"):
        proj = ad.matmul(seq, w[f"W_{g}"]) + w[f"b_{g}"]
        parts.append(ad.unbind(proj, axis=1))
    return list(zip(*parts))


def encode_decode(features: Tensor, params: dict[str, Tensor], hidden: int, dropout: float,
                  training: bool, rng: np.random.Generator | None) -> Tensor:
    """Shared-weight GRU encoder-decoder over per-vehicle feature sequences.

    ``features`` is (M, F, C') with M = vehicles; returns raw head outputs
    (M, F, 5).
    """
    enc = {k.split(".", 1)[1]: v for k, v in params.items() if k.startswith("encoder.")}
    dec = {k.split(".", 1)[1]: v for k, v in params.items() if k.startswith("decoder.")}
    M = features.shape[0]
    h0 = Tensor(np.zeros((M, hidden), dtype=features.dtype))
    h_enc = _gru_run(_project_sequence(features, enc), h0, enc)[-1]
    states = _gru_run(_project_sequence(features, dec), h_enc, dec)
    hs = ad.stack(states, axis=1)
    hs = ad.dropout(hs, dropout, training, rng)
    return ad.matmul(hs, params["head.weight"]) + params["head.bias"]


class GSTCN:
    """The network together with its parameters."""

    def __init__(self, config: ModelConfig | None = None, params: dict[str, Tensor] | None = None,
                 seed: int = 0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else init_parameters(self.config, seed, self.dtype)

    def num_parameters(self) -> int:
        return count_parameters(self.params)

    def forward_batch(self, batch: Batch, training: bool = False,
                      rng: np.random.Generator | None = None) -> FieldTensors:
        cfg, p = self.config, self.params
        B, _, T, N = batch.inputs.shape
        F = cfg.future_len
        mask_np = batch.mask.astype(self.dtype)
        coords = np.transpose(batch.inputs, (0, 2, 3, 1)).astype(self.dtype)   # (B, T, N, 2)
        v = Tensor(coords / self.dtype.type(cfg.input_scale))
        vmask = Tensor(mask_np[:, None, :, None])
        z = embed_input(v, p["embed.weight"], p["embed.bias"], cfg.activation) * vmask
        if cfg.variant != "no_gcn":
            adj = Tensor(batch.adjacency.astype(self.dtype))
            for l in range(cfg.gcn_layers):
                z = spatial_graph_conv(z, adj, p[f"gcn.{l}.weight"], cfg.activation)
        if cfg.variant == "no_tde":
            # (B, T, N, C') -> (B, N, C', T) @ (T, F) -> (B, F, C', N)
            x = ad.matmul(ad.transpose(z, (0, 2, 3, 1)), p["time_map.weight"]) + p["time_map.bias"]
            feats = ad.transpose(x, (0, 3, 2, 1))
        else:
            ws = [p[f"tde.{l}.weight"] for l in range(cfg.tde_layers)]
            bs = [p[f"tde.{l}.bias"] for l in range(cfg.tde_layers)]
            feats = temporal_dependency_extractor(z, ws, bs, cfg.tde_padding, cfg.activation,
                                                  Tensor(mask_np[:, None, None, :]))
        # per-vehicle sequences: (B, F, C', N) -> (B*N, F, C')
        seq = ad.reshape(ad.transpose(feats, (0, 3, 1, 2)), (B * N, F, cfg.embed_channels))
        if cfg.variant == "no_gru":
            hs = ad.dropout(seq, cfg.dropout, training, rng)
            raw = ad.matmul(hs, p["head.weight"]) + p["head.bias"]
        else:
            raw = encode_decode(seq, p, cfg.gru_hidden, cfg.dropout, training, rng)
        # (B*N, F, 5) -> (B, F, N, 5)
        raw = ad.transpose(ad.reshape(raw, (B, N, F, 5)), (0, 2, 1, 3))
        return self._head(raw, batch)

    def _head(self, raw: Tensor, batch: Batch) -> FieldTensors:
        cfg = self.config
        F = cfg.future_len
        if cfg.horizon_scaling:
            scale = (cfg.position_scale * np.arange(1, F + 1) / F).astype(self.dtype)[:, None]   # (F, 1)
        else:
            scale = np.full((F, 1), cfg.position_scale, dtype=self.dtype)
        mu_x = raw[..., 0] * scale
        mu_y = raw[..., 1] * scale
        if cfg.output_anchor != "none":
            inputs = batch.inputs.astype(self.dtype)
            anchor = np.repeat(inputs[:, :, -1:, :], cfg.future_len, axis=2)    # (B, 2, F, N)
            if cfg.output_anchor == "cv" and cfg.past_len > 1:
                steps = np.arange(1, cfg.future_len + 1, dtype=self.dtype)[:, None]
                anchor = anchor + (inputs[:, :, -1:, :] - inputs[:, :, -2:-1, :]) * steps
            mu_x = mu_x + anchor[:, 0]
            mu_y = mu_y + anchor[:, 1]
        log_sx, log_sy = raw[..., 2], raw[..., 3]
        if cfg.horizon_scaling:
            log_sx, log_sy = log_sx + np.log(scale), log_sy + np.log(scale)
        return FieldTensors(mu_x, mu_y, ad.exp(log_sx), ad.exp(log_sy), ad.tanh(raw[..., 4]), log_sx, log_sy)

    def predict_batch(self, batch: Batch) -> list[BiGaussianField]:
        """Evaluation-mode fields for every scene, in each scene's input vehicle order."""
        with ad.no_grad():
            out = self.forward_batch(batch, training=False)
        arrays = [t.data.astype(np.float64) for t in (out.mu_x, out.mu_y, out.sigma_x, out.sigma_y, out.rho)]
        fields = []
        for b, (order, n) in enumerate(zip(batch.orders, batch.counts)):
            inv = np.empty(n, dtype=np.int64)
            inv[order] = np.arange(n)
            fields.append(BiGaussianField(*(a[b, :, :n][:, inv] for a in arrays)))
        return fields

    def forward(self, segment) -> BiGaussianField:
        """Evaluation-mode prediction for one scene."""
        return self.predict_batch(make_batch([segment], self.config, self.dtype, with_truth=False))[0]

    def predict(self, segments: Sequence, batch_size: int = 64) -> list[BiGaussianField]:
        fields = []
        for i in range(0, len(segments), batch_size):
            chunk = segments[i:i + batch_size]
            fields.extend(self.predict_batch(make_batch(chunk, self.config, self.dtype, with_truth=False)))
        return fields


def sample_trajectory(field: BiGaussianField, seed: int | np.random.Generator) -> np.ndarray:
    """One (2, F, N) draw from the per-step bivariate normals (Cholesky form)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    e = rng.standard_normal((2,) + field.mu_x.shape)
    x = field.mu_x + field.sigma_x * e[0]
    y = field.mu_y + field.sigma_y * (field.rho * e[0] + np.sqrt(1.0 - field.rho**2) * e[1])
    return np.stack([x, y])


# checkpoints

CHECKPOINT_FORMAT = "gstcn-checkpoint"
CHECKPOINT_VERSION = 1


def checkpoint_json(model: GSTCN, seed: int, extra: dict | None = None) -> str:
    """JSON manifest of the parameters (row-major float32) plus config and seed."""
    params = [{"name": k, "shape": list(t.shape), "values": t.data.astype(np.float32).ravel().tolist()}
              for k, t in sorted(model.params.items())]
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "seed": int(seed),
           "config": model.config.to_dict(), "params": params}
    if extra:
        doc["extra"] = extra
    return json.dumps(doc, sort_keys=True)


def save_checkpoint(path: str | Path, model: GSTCN, seed: int, extra: dict | None = None) -> None:
    Path(path).write_text(checkpoint_json(model, seed, extra) + "\n")


def load_checkpoint(path: str | Path, dtype=np.float32) -> tuple[GSTCN, dict]:
    """Rebuild a model from :func:`save_checkpoint` output; returns it with the manifest."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    config = ModelConfig.from_dict(doc["config"])
    model = GSTCN(config, seed=int(doc["seed"]), dtype=dtype)
    stored = {p["name"]: p for p in doc["params"]}
    if set(stored) != set(model.params):
        raise ValueError(f"{path}: parameter names do not match the configured model")
    for name, t in model.params.items():
        p = stored[name]
        values = np.asarray(p["values"], dtype=np.float32).reshape(p["shape"])
        if values.shape != t.shape:
            raise ValueError(f"{path}: {name} has shape {values.shape}, expected {t.shape}")
        t.data = values.astype(dtype)
    return model, doc
