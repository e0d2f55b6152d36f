"""Graph-attention forecaster over the station graph.

Each window's per-station history is flattened, projected, passed
through attention layers whose neighborhoods come from the (optionally
tail-weighted) adjacency, and mapped to per-station multi-day event
probabilities. The adjacency can gate attention two ways: ``mask_only``
restricts the softmax support, ``log_bias`` additionally multiplies the
softmax numerators by the edge weight (a log-domain additive bias).
"""

from __future__ import annotations

import binascii
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, NumericError
from .graph import GraphSpec


class IsolatedNode(DataError):
    pass


class CheckpointError(DataError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "di"
    c_in: int = 10
    c_out: int = 3
    n_features: int = 18
    n_layers: int = 2
    hidden_dim: int = 64
    n_heads: int = 4
    leaky_slope: float = 0.01
    attention_bias: str = "log_bias"
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("baseline", "di"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.attention_bias not in ("mask_only", "log_bias"):
            raise ConfigError(f"unknown attention_bias {self.attention_bias!r}")
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError("hidden_dim must be divisible by n_heads")
        if self.c_in < 1 or self.c_out < 1 or self.n_layers < 1:
            raise ConfigError("c_in, c_out and n_layers must be >= 1")


@dataclass
class TrainedModel:
    config: ModelConfig
    params: dict[str, Tensor]
    norm_mean: np.ndarray
    norm_sd: np.ndarray
    feature_names: list[str]
    graph: GraphSpec

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: np.array(v.value, copy=True)
                for k, v in self.params.items()}

    def load_param_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            self.params[k].value = np.array(v, copy=True)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
            shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, norm_mean, norm_sd, feature_names,
                graph: GraphSpec) -> TrainedModel:
    """Glorot-uniform initialization, deterministic per config.seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    h = config.hidden_dim
    heads = config.n_heads
    d_head = h // heads
    in_dim = config.c_in * config.n_features

    params: dict[str, Tensor] = {
        "proj_w": Tensor(_glorot(rng, in_dim, h, (in_dim, h)),
                         requires_grad=True),
        "proj_b": Tensor(np.zeros(h), requires_grad=True),
    }
    for layer in range(config.n_layers):
        final = layer == config.n_layers - 1
        d_out = h if final else d_head
        params[f"gat{layer}_w"] = Tensor(
            _glorot(rng, h, d_out, (heads, h, d_out)), requires_grad=True)
        a_full = _glorot(rng, 2 * d_out, 1, (heads, 2 * d_out, 1))
        params[f"gat{layer}_a_src"] = Tensor(a_full[:, :d_out, :],
                                             requires_grad=True)
        params[f"gat{layer}_a_dst"] = Tensor(a_full[:, d_out:, :],
                                             requires_grad=True)
    params["head_w"] = Tensor(_glorot(rng, h, config.c_out, (h, config.c_out)),
                              requires_grad=True)
    params["head_b"] = Tensor(np.zeros(config.c_out), requires_grad=True)
    return TrainedModel(config=config, params=params,
                        norm_mean=np.asarray(norm_mean, dtype=float),
                        norm_sd=np.asarray(norm_sd, dtype=float),
                        feature_names=list(feature_names), graph=graph)


def attention_mask_and_bias(a_matrix: np.ndarray, policy: str):
    """Boolean neighborhood mask and the additive log-weight bias.

    Every station must keep at least one positive edge (its self-loop
    counts); otherwise it could attend to nothing.
    """
    a_matrix = np.asarray(a_matrix, dtype=float)
    mask = a_matrix > 0.0
    rows = np.nonzero(~mask.any(axis=1))[0]
    if rows.size:
        raise IsolatedNode(f"stations with no positive edges: {rows.tolist()}")
    if policy == "log_bias":
        bias = np.where(mask, np.log(np.where(mask, a_matrix, 1.0)), 0.0)
    else:
        bias = np.zeros_like(a_matrix)
    return mask, bias


def gat_layer(h: Tensor, w: Tensor, a_src: Tensor, a_dst: Tensor,
              mask: np.ndarray, bias: np.ndarray, slope: float,
              concat_heads: bool) -> tuple[Tensor, Tensor]:
    """One multi-head attention layer.

    h: (B, N, d_in). Returns (output, attention) where attention has
    shape (B, heads, N, N) with rows summing to 1 on the mask support.
    """
    b, n, _ = h.shape
    hb = ad.matmul(ad.reshape(h, (b, 1, n, h.shape[-1])), w)  # (B,heads,N,d)
    s_src = ad.matmul(hb, a_src)                              # (B,heads,N,1)
    s_dst = ad.matmul(hb, a_dst)
    logits = ad.add(s_src, ad.transpose(s_dst, (0, 1, 3, 2)))
    logits = ad.leaky_relu(logits, slope)
    logits = ad.add(logits, Tensor(bias))
    alpha = ad.masked_softmax(logits, mask)
    out = ad.matmul(alpha, hb)                                # (B,heads,N,d)
    if concat_heads:
        heads, d = out.shape[1], out.shape[3]
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, n, heads * d))
    else:
        out = ad.tmean(out, axis=1)
    return out, alpha


def forward(model: TrainedModel, x: np.ndarray,
            graph: GraphSpec | None = None,
            return_attention: bool = False):
    """Window(s) to event probabilities.

    x: (C_in, N, F) or batched (B, C_in, N, F). Returns a Tensor of
    probabilities shaped (B, C_out, N) (leading axis dropped for a
    single window), all values strictly inside (0, 1).
    """
    cfg = model.config
    graph = graph or model.graph
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != cfg.c_in or x.shape[3] != cfg.n_features:
        raise DataError(f"window shape {x.shape} does not match config "
                        f"(c_in={cfg.c_in}, F={cfg.n_features})")
    if x.shape[2] != graph.n:
        raise DataError("station count mismatch between window and graph")
    mask, bias = attention_mask_and_bias(graph.a, cfg.attention_bias)

    b, _, n, f = x.shape
    flat = np.transpose(x, (0, 2, 1, 3)).reshape(b, n, cfg.c_in * f)
    h = ad.add(ad.matmul(Tensor(flat), model.params["proj_w"]),
               model.params["proj_b"])
    h = ad.leaky_relu(h, cfg.leaky_slope)

    attn = None
    for layer in range(cfg.n_layers):
        final = layer == cfg.n_layers - 1
        h, attn = gat_layer(
            h, model.params[f"gat{layer}_w"],
            model.params[f"gat{layer}_a_src"],
            model.params[f"gat{layer}_a_dst"],
            mask, bias, cfg.leaky_slope, concat_heads=not final)
        h = ad.leaky_relu(h, cfg.leaky_slope)

    logits = ad.add(ad.matmul(h, model.params["head_w"]),
                    model.params["head_b"])           # (B, N, C_out)
    probs = ad.sigmoid(ad.transpose(logits, (0, 2, 1)))  # (B, C_out, N)
    if squeeze:
        probs = ad.reshape(probs, probs.shape[1:])
    if return_attention:
        return probs, attn
    return probs


def attention_coefficients(h: np.ndarray, w: np.ndarray, a_src: np.ndarray,
                           a_dst: np.ndarray, a_matrix: np.ndarray,
                           policy: str, slope: float = 0.01) -> np.ndarray:
    """Standalone attention computation for inspection and tests.

    h: (N, d_in). Returns (heads, N, N) row-stochastic coefficients on
    the neighborhoods of a_matrix.
    """
    mask, bias = attention_mask_and_bias(a_matrix, policy)
    out, alpha = gat_layer(Tensor(h[None]), Tensor(w), Tensor(a_src),
                           Tensor(a_dst), mask, bias, slope,
                           concat_heads=False)
    return alpha.value[0]


MAGIC = b"DIGNN1"


def _pack_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        buf.write(struct.pack("<I", dim))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(path: str | Path, model: TrainedModel) -> None:
    """Versioned binary container: magic, JSON config block, named f64
    little-endian tensor blocks, trailing CRC32."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    meta = {
        "config": asdict(model.config),
        "feature_names": model.feature_names,
        "station_ids": model.graph.station_ids,
        "sparsify_threshold": model.graph.sparsify_threshold,
        "tensor_names": sorted(model.params),
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    tensors = {k: v.value for k, v in model.params.items()}
    tensors["norm_mean"] = model.norm_mean
    tensors["norm_sd"] = model.norm_sd
    tensors["graph_rho"] = model.graph.rho
    tensors["graph_w"] = model.graph.w
    tensors["graph_a"] = model.graph.a
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        _pack_tensor(buf, name, tensors[name])
    payload = buf.getvalue()
    checksum = binascii.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(payload + struct.pack("<I", checksum))


def load_checkpoint(path: str | Path) -> TrainedModel:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a tailcast checkpoint")
    payload, stored = data[:-4], struct.unpack("<I", data[-4:])[0]
    if binascii.crc32(payload) & 0xFFFFFFFF != stored:
        raise CheckpointError("checksum mismatch")
    buf = io.BytesIO(payload)
    buf.read(len(MAGIC))
    (meta_len,) = struct.unpack("<I", buf.read(4))
    meta = json.loads(buf.read(meta_len).decode())
    (n_tensors,) = struct.unpack("<I", buf.read(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", buf.read(2))
        name = buf.read(name_len).decode()
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf.read(count * 8), dtype="<f8").reshape(shape)
        tensors[name] = np.array(arr, dtype=np.float64)
    config = ModelConfig(**meta["config"])
    graph = GraphSpec(station_ids=meta["station_ids"],
                      rho=tensors.pop("graph_rho"),
                      w=tensors.pop("graph_w"),
                      a=tensors.pop("graph_a"),
                      sparsify_threshold=meta["sparsify_threshold"])
    norm_mean = tensors.pop("norm_mean")
    norm_sd = tensors.pop("norm_sd")
    params = {name: Tensor(tensors[name], requires_grad=True)
              for name in meta["tensor_names"]}
    return TrainedModel(config=config, params=params, norm_mean=norm_mean,
                        norm_sd=norm_sd, feature_names=meta["feature_names"],
                        graph=graph)
