"""The forecasting network and its parameter plumbing.

The forward pass runs four stages over a (batch, n, m, t) stack of lagged,
normalized frames:

  1. spatial gating: per-channel local Moran's I fields are pushed through a
     depthwise conv + sigmoid to gate a depthwise-convolved copy of the
     position-encoded input (irregular cells get their own gate values);
  2. temporal gating: global avg/max pooling feed two separate two-layer FC
     stacks whose sum, after a sigmoid, weights each input channel;
  3. a multi-scale residual block: parallel 1x1 / 3x3 / 5x5 conv branches
     with skip connections, each reduced to one channel, summed;
  4. an external-feature head (time-of-day / day-of-week / holiday one-hots
     through two FC layers) added cell-wise before a tanh squashes the
     prediction into (-1, 1), matching the scaler range.

Parameters live in a named, ordered ParameterSet so initialization,
checkpoints, and the optimizer all agree on one ordering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ShapeError
from .grid_data import Scaler, write_text_atomic
from .spatial_stats import moran_volume

SAG_KERNEL = 3  # smallest kernel that sees the full queen neighborhood
MSR_SCALES = (1, 3, 5)


@dataclass(frozen=True)
class ModelConfig:
    """Shapes of one model instance; everything else derives from these."""

    n: int
    m: int
    t_closeness: int = 5
    t_periodic: int = 6
    t_trend: int = 4
    interval_minutes: int = 60
    dext: int = 32
    demb: int = 10

    @property
    def t(self) -> int:
        return self.t_closeness + self.t_periodic + self.t_trend

    @property
    def hidden(self) -> int:
        # bottleneck width of the temporal attention FC stacks
        return (self.t + 1) // 2


@dataclass(frozen=True)
class Variant:
    """Which blocks run; disabled blocks are bypassed with neutral values."""

    sag: bool = True
    tag: bool = True
    msr: bool = True


FULL = Variant()


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    k, t, h = SAG_KERNEL, cfg.t, cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "sag_gate_w": (k, k, t),
        "sag_gate_b": (t,),
        "sag_feat_w": (k, k, t),
        "sag_feat_b": (t,),
        "tag_avg_w0": (t, h),
        "tag_avg_b0": (h,),
        "tag_avg_w1": (h, t),
        "tag_avg_b1": (t,),
        "tag_max_w0": (t, h),
        "tag_max_b0": (h,),
        "tag_max_w1": (h, t),
        "tag_max_b1": (t,),
    }
    for s in MSR_SCALES:
        shapes[f"msr{s}_inner_w"] = (s, s, t, t)
        shapes[f"msr{s}_inner_b"] = (t,)
        shapes[f"msr{s}_skip_w"] = (s, s, t, t)
        shapes[f"msr{s}_skip_b"] = (t,)
        shapes[f"msr{s}_outer_w"] = (s, s, t, 1)
        shapes[f"msr{s}_outer_b"] = (1,)
    shapes["ext_fc1_w"] = (cfg.dext, cfg.demb)
    shapes["ext_fc1_b"] = (cfg.demb,)
    shapes["ext_fc2_w"] = (cfg.demb, cfg.n * cfg.m)
    shapes["ext_fc2_b"] = (cfg.n * cfg.m,)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form count: SAG 2(k^2 t + t); TAG 2(2 t h + h + t);
    MSR sum over scales s of 2(s^2 t^2 + t) + s^2 t + 1; external head
    dext*demb + demb + demb*n*m + n*m."""
    k, t, h = SAG_KERNEL, cfg.t, cfg.hidden
    sag = 2 * (k * k * t + t)
    tag = 2 * (2 * t * h + h + t)
    msr = sum(2 * (s * s * t * t + t) + s * s * t + 1 for s in MSR_SCALES)
    ext = cfg.dext * cfg.demb + cfg.demb + cfg.demb * cfg.n * cfg.m + cfg.n * cfg.m
    return sag + tag + msr + ext


def _is_bias(name: str) -> bool:
    return name.rsplit("_", 1)[-1].startswith("b")


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 2:  # fully connected
        return shape[0], shape[1]
    if len(shape) == 3:  # depthwise conv, per-channel k*k filter
        return shape[0] * shape[1], shape[0] * shape[1]
    return shape[0] * shape[1] * shape[2], shape[0] * shape[1] * shape[3]


class ParameterSet:
    """Named trainable tensors in a fixed order."""

    def __init__(self, tensors: dict[str, T.Tensor]):
        self._tensors = dict(tensors)

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int) -> "ParameterSet":
        """Glorot-uniform weights drawn in declaration order, zero biases."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in parameter_shapes(cfg).items():
            if _is_bias(name):
                arr = np.zeros(shape)
            else:
                fan_in, fan_out = _fans(shape)
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                arr = rng.uniform(-limit, limit, shape)
            tensors[name] = T.Tensor(arr, requires_grad=True)
        return cls(tensors)

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "ParameterSet":
        return cls(
            {
                name: T.Tensor(np.zeros(shape), requires_grad=True)
                for name, shape in parameter_shapes(cfg).items()
            }
        )

    def __getitem__(self, name: str) -> T.Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def size(self) -> int:
        return sum(t.value.size for t in self._tensors.values())

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            {n: T.Tensor(t.value.copy(), requires_grad=True) for n, t in self.items()}
        )


@lru_cache(maxsize=8)
def _spe_cached(n: int, m: int, d: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)[:, None, None]
    j = np.arange(m, dtype=np.float64)[None, :, None]
    l = np.arange(d, dtype=np.float64)[None, None, :]
    scale = 10000.0 ** (2.0 * l / d)
    even = (np.arange(d) % 2) == 0
    out = np.where(even[None, None, :], np.sin(i / scale), np.cos(j / scale))
    out.flags.writeable = False
    return out


def spatial_positional_encoding(n: int, m: int, d: int) -> np.ndarray:
    """Sinusoidal cell-address bias: sin(i/10000^(2l/d)) on even encoding
    dimensions, cos(j/10000^(2l/d)) on odd ones, all indices zero-based."""
    return _spe_cached(n, m, d)


def _check_volume(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"{what} must be (batch, n, m, t), got {x.shape}")
    return x


def sag_forward(
    x_raw: np.ndarray,
    x_spe: np.ndarray,
    params: ParameterSet,
    moran: np.ndarray | None = None,
    gate: bool = True,
) -> T.Tensor:
    """Spatially gated features.

    x_raw is the normalized input before positional encoding (the Moran
    statistics come from it), x_spe the same input with the encoding added.
    Pass a precomputed `moran` stack to skip recomputing it per step; the
    values are identical because the statistic ignores parameters.
    """
    x_raw = _check_volume(x_raw, "x_raw")
    x_spe = _check_volume(x_spe, "x_spe")
    if x_raw.shape != x_spe.shape:
        raise ShapeError(f"x_raw {x_raw.shape} and x_spe {x_spe.shape} differ")
    feat = T.conv2d(T.Tensor(x_spe), params["sag_feat_w"], params["sag_feat_b"], mode="depthwise")
    if not gate:
        return feat
    if moran is None:
        moran = moran_volume(x_raw)
    gate_t = T.sigmoid(
        T.conv2d(T.Tensor(moran), params["sag_gate_w"], params["sag_gate_b"], mode="depthwise")
    )
    return T.mul(gate_t, feat)


def tag_forward(
    f_prime: T.Tensor, params: ParameterSet, enabled: bool = True
) -> tuple[T.Tensor, T.Tensor]:
    """Channel attention over the gated features.

    Avg-pool and max-pool views go through separate two-layer FC stacks
    (four distinct weight matrices), are summed, and squashed by a sigmoid
    into per-channel weights. Returns (weighted features, weights).
    """
    b, _, _, t = f_prime.value.shape
    if not enabled:
        return f_prime, T.Tensor(np.ones((b, t)))
    avg = T.reshape(T.global_pool(f_prime, "avg"), (b, t))
    mx = T.reshape(T.global_pool(f_prime, "max"), (b, t))
    avg_out = T.fully_connected(
        T.fully_connected(avg, params["tag_avg_w0"], params["tag_avg_b0"]),
        params["tag_avg_w1"],
        params["tag_avg_b1"],
    )
    max_out = T.fully_connected(
        T.fully_connected(mx, params["tag_max_w0"], params["tag_max_b0"]),
        params["tag_max_w1"],
        params["tag_max_b1"],
    )
    attn = T.sigmoid(T.add(avg_out, max_out))
    f_tag = T.mul(f_prime, T.reshape(attn, (b, 1, 1, t)))
    return f_tag, attn


def _msr_branch(f_tag: T.Tensor, params: ParameterSet, scale: int) -> T.Tensor:
    inner = T.relu(
        T.conv2d(f_tag, params[f"msr{scale}_inner_w"], params[f"msr{scale}_inner_b"])
    )
    skip = T.conv2d(f_tag, params[f"msr{scale}_skip_w"], params[f"msr{scale}_skip_b"])
    merged = T.add(inner, skip)
    return T.relu(
        T.conv2d(merged, params[f"msr{scale}_outer_w"], params[f"msr{scale}_outer_b"])
    )


def msr_forward(
    f_tag: T.Tensor, params: ParameterSet, multi_scale: bool = True
) -> T.Tensor:
    """Multi-scale residual block reducing t channels to one.

    Each scale runs inner conv -> relu, plus a skip conv, then an outer conv
    -> relu emitting a single channel; branch outputs are summed. With
    multi_scale off only the 3x3 branch runs.
    """
    scales = MSR_SCALES if multi_scale else (3,)
    out = _msr_branch(f_tag, params, scales[0])
    for s in scales[1:]:
        out = T.add(out, _msr_branch(f_tag, params, s))
    return out


def external_head(
    features: np.ndarray, params: ParameterSet, n: int, m: int
) -> T.Tensor:
    """(batch, dext) externals to a (batch, n, m, 1) additive map."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"external features must be (batch, dext), got {features.shape}")
    hidden = T.relu(T.fully_connected(T.Tensor(features), params["ext_fc1_w"], params["ext_fc1_b"]))
    flat = T.fully_connected(hidden, params["ext_fc2_w"], params["ext_fc2_b"])
    return T.reshape(flat, (features.shape[0], n, m, 1))


def forward(
    x_raw: np.ndarray,
    ext: np.ndarray,
    params: ParameterSet,
    cfg: ModelConfig,
    moran: np.ndarray | None = None,
    variant: Variant = FULL,
) -> tuple[T.Tensor, T.Tensor]:
    """Full forward pass: (prediction in (-1, 1), attention weights).

    Prediction has shape (batch, n, m); attention (batch, t), aligned with
    the sample channel order.
    """
    x_raw = _check_volume(x_raw, "input")
    b, n, m, t = x_raw.shape
    if (n, m, t) != (cfg.n, cfg.m, cfg.t):
        raise ShapeError(
            f"input {x_raw.shape[1:]} does not match model (n, m, t)="
            f"({cfg.n}, {cfg.m}, {cfg.t})"
        )
    x_spe = x_raw + spatial_positional_encoding(n, m, t)[None]
    f_prime = sag_forward(x_raw, x_spe, params, moran=moran, gate=variant.sag)
    f_tag, attn = tag_forward(f_prime, params, enabled=variant.tag)
    f_msr = msr_forward(f_tag, params, multi_scale=variant.msr)
    f_ext = external_head(ext, params, n, m)
    pred = T.reshape(T.tanh(T.add(f_msr, f_ext)), (b, n, m))
    return pred, attn


@dataclass
class PastaModel:
    """A config, its parameters, and the scaler the inputs were built with."""

    cfg: ModelConfig
    params: ParameterSet
    scaler: Scaler
    seed: int

    @classmethod
    def initialize(cls, cfg: ModelConfig, scaler: Scaler, seed: int) -> "PastaModel":
        return cls(cfg, ParameterSet.initialize(cfg, seed), scaler, seed)

    def forward_graph(
        self,
        x_raw: np.ndarray,
        ext: np.ndarray,
        moran: np.ndarray | None = None,
        variant: Variant = FULL,
    ) -> tuple[T.Tensor, T.Tensor]:
        return forward(x_raw, ext, self.params, self.cfg, moran=moran, variant=variant)

    def predict(
        self,
        x_raw: np.ndarray,
        ext: np.ndarray,
        moran: np.ndarray | None = None,
        variant: Variant = FULL,
    ) -> tuple[np.ndarray, np.ndarray]:
        pred, attn = self.forward_graph(x_raw, ext, moran=moran, variant=variant)
        return pred.value, attn.value

    def save(self, path) -> None:
        """Write a deterministic JSON checkpoint (atomic replace)."""
        doc = {
            "meta": {
                "n": self.cfg.n,
                "m": self.cfg.m,
                "t_closeness": self.cfg.t_closeness,
                "t_periodic": self.cfg.t_periodic,
                "t_trend": self.cfg.t_trend,
                "interval_minutes": self.cfg.interval_minutes,
                "dext": self.cfg.dext,
                "demb": self.cfg.demb,
                "scaler_min": self.scaler.data_min,
                "scaler_max": self.scaler.data_max,
                "seed": self.seed,
            },
            "params": {
                name: {"shape": list(t.value.shape), "values": t.value.ravel().tolist()}
                for name, t in self.params.items()
            },
        }
        write_text_atomic(path, json.dumps(doc, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PastaModel":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        try:
            meta = doc["meta"]
            cfg = ModelConfig(
                n=int(meta["n"]),
                m=int(meta["m"]),
                t_closeness=int(meta["t_closeness"]),
                t_periodic=int(meta["t_periodic"]),
                t_trend=int(meta["t_trend"]),
                interval_minutes=int(meta["interval_minutes"]),
                dext=int(meta["dext"]),
                demb=int(meta["demb"]),
            )
            scaler = Scaler(float(meta["scaler_min"]), float(meta["scaler_max"]))
            seed = int(meta["seed"])
            stored = doc["params"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc

        expected = parameter_shapes(cfg)
        if set(stored) != set(expected):
            missing = sorted(set(expected) - set(stored))
            extra = sorted(set(stored) - set(expected))
            raise CheckpointError(f"{path}: parameter names differ (missing {missing}, extra {extra})")
        tensors = {}
        for name, shape in expected.items():
            entry = stored[name]
            if tuple(entry["shape"]) != shape:
                raise CheckpointError(
                    f"{path}: parameter {name} has shape {entry['shape']}, expected {list(shape)}"
                )
            values = np.asarray(entry["values"], dtype=np.float64)
            if values.size != int(np.prod(shape)):
                raise CheckpointError(f"{path}: parameter {name} has wrong value count")
            tensors[name] = T.Tensor(values.reshape(shape), requires_grad=True)
        return cls(cfg, ParameterSet(tensors), scaler, seed)


def config_for_data(seq, fragments, demb: int = 10) -> ModelConfig:
    """Model shapes implied by a dataset and a fragment layout."""
    from .grid_data import external_dimension

    return ModelConfig(
        n=seq.n,
        m=seq.m,
        t_closeness=fragments.t_closeness,
        t_periodic=fragments.t_periodic,
        t_trend=fragments.t_trend,
        interval_minutes=seq.interval_minutes,
        dext=external_dimension(seq.interval_minutes),
        demb=demb,
    )
