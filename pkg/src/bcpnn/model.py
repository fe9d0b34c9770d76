"""Network data model: hypercolumn geometry, layer-pair parameters, configuration,
model files, and a small Keras-like builder."""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .plasticity import ConnectivityMask, init_mask
from .precision import FORMAT_NAMES, get_arithmetic


@dataclass(frozen=True)
class HypercolumnGeometry:
    """A layer of ``n_hcus`` hypercolumns with ``mcus_per_hcu`` minicolumns each."""

    n_hcus: int
    mcus_per_hcu: int

    def __post_init__(self):
        for name in ("n_hcus", "mcus_per_hcu"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    @property
    def total_units(self) -> int:
        return self.n_hcus * self.mcus_per_hcu

    def hcu_of(self, unit):
        """Hypercolumn index of a unit (or array of units)."""
        return np.asarray(unit) // self.mcus_per_hcu

    def units_of(self, hcu: int) -> range:
        return range(hcu * self.mcus_per_hcu, (hcu + 1) * self.mcus_per_hcu)


def _uniform_prior(geom: HypercolumnGeometry) -> float:
    return 0.5 if geom.mcus_per_hcu == 1 else 1.0 / geom.mcus_per_hcu


@dataclass(eq=False)
class LayerPairState:
    """Weights, biases and probability traces between a pre- and a postsynaptic layer."""

    weights: np.ndarray
    bias: np.ndarray
    trace_ci: np.ndarray
    trace_cj: np.ndarray
    trace_cij: np.ndarray

    @property
    def n_pre(self) -> int:
        return self.weights.shape[0]

    @property
    def n_post(self) -> int:
        return self.weights.shape[1]

    @property
    def dtype(self):
        return self.weights.dtype

    @classmethod
    def independent(cls, pre: HypercolumnGeometry, post: HypercolumnGeometry, k_b: float, arith):
        """Traces at independence: uniform marginals inside every hypercolumn and
        ``C_ij = C_i C_j``, which makes every weight exactly zero.

        A single-unit hypercolumn is a binary feature and starts at 1/2.
        """
        ci = arith.asarray(np.full(pre.total_units, _uniform_prior(pre)))
        cj = arith.asarray(np.full(post.total_units, _uniform_prior(post)))
        cij = arith.mul(ci[:, None], cj[None, :])
        state = cls(
            weights=np.zeros((pre.total_units, post.total_units), arith.dtype),
            bias=np.zeros(post.total_units, arith.dtype),
            trace_ci=ci,
            trace_cj=cj,
            trace_cij=cij,
        )
        from .kernels import update_weights_bias

        update_weights_bias(state, k_b, arith)
        return state

    def arrays(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def copy(self) -> "LayerPairState":
        return LayerPairState(**{k: v.copy() for k, v in self.arrays().items()})

    def __eq__(self, other):
        if not isinstance(other, LayerPairState):
            return NotImplemented
        return all(_bit_equal(a, b) for a, b in zip(self.arrays().values(), other.arrays().values()))


def _bit_equal(a, b) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of both training phases plus execution settings.

    ``k_b`` is the bias gain of the hidden layer; the output layer uses
    ``k_b_output``.  A negative hidden gain penalises frequently winning
    minicolumns and keeps every unit in use.  ``support_noise`` is the
    standard deviation of Gaussian noise added to hidden supports during
    unsupervised training; it decays by ``noise_decay`` per epoch and is what
    breaks the symmetry between minicolumns that start with identical
    (all-zero) weights.  ``mask_update_period`` of ``None`` means one mask
    update every ``n_hidden_hcus`` batches.
    """

    lambda_hidden: float = 0.02
    lambda_output: float = 0.01
    k_b: float = -10.0
    k_b_output: float = 1.0
    n_epochs1: int = 10
    n_epochs2: int = 2
    n_cycles: int = 1
    batch_size: int = 128
    mask_update_period: Optional[int] = None
    fan_in: int = 300
    swaps_per_hcu: int = 1
    support_noise: float = 0.5
    noise_decay: float = 0.0
    n_workers: int = 1
    seed: int = 0
    float_format: str = "f32"
    eps_trace: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("lambda_hidden", "lambda_output"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("n_epochs1", "n_epochs2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("n_cycles", "fan_in", "swaps_per_hcu", "n_workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mask_update_period is not None and self.mask_update_period < 1:
            raise ValueError("mask_update_period must be >= 1")
        if self.support_noise < 0 or self.noise_decay < 0:
            raise ValueError("support_noise and noise_decay must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.float_format.lower().removeprefix("native-") not in FORMAT_NAMES:
            raise ValueError(f"unknown float_format {self.float_format!r}")
        if not self.eps_trace > 0:
            raise ValueError("eps_trace must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def period_for(self, hidden: HypercolumnGeometry) -> int:
        return self.mask_update_period or hidden.n_hcus

    def n_batches(self, n_samples: int) -> int:
        return -(-n_samples // self.batch_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class Network:
    """Three-layer network: input -> hidden (masked, unsupervised) -> output (supervised)."""

    input_geom: HypercolumnGeometry
    hidden_geom: HypercolumnGeometry
    output_geom: HypercolumnGeometry
    config: TrainConfig
    hidden: LayerPairState
    output: LayerPairState
    mask: ConnectivityMask

    def __post_init__(self):
        if self.hidden.weights.shape != (self.input_geom.total_units, self.hidden_geom.total_units):
            raise ValueError("input->hidden weights do not match the layer geometries")
        if self.output.weights.shape != (self.hidden_geom.total_units, self.output_geom.total_units):
            raise ValueError("hidden->output weights do not match the layer geometries")
        if self.mask.active.shape != (self.input_geom.total_units, self.hidden_geom.n_hcus):
            raise ValueError("mask shape does not match (input features, hidden hypercolumns)")

    @property
    def arithmetic(self):
        return get_arithmetic(self.config.float_format)

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return (
            self.input_geom == other.input_geom
            and self.hidden_geom == other.hidden_geom
            and self.output_geom == other.output_geom
            and self.config == other.config
            and self.hidden == other.hidden
            and self.output == other.output
            and self.mask.fan_in == other.mask.fan_in
            and _bit_equal(self.mask.active, other.mask.active)
        )

    def copy(self) -> "Network":
        return dataclasses.replace(
            self, hidden=self.hidden.copy(), output=self.output.copy(), mask=self.mask.copy()
        )


def build_network(
    input_geom: HypercolumnGeometry,
    hidden_geom: HypercolumnGeometry,
    output_geom: HypercolumnGeometry,
    config: TrainConfig = TrainConfig(),
) -> Network:
    """Create an untrained network.

    Traces start at independence, so all weights are zero and biases are
    ``k_b log(1/M)``; the connectivity mask is drawn from ``config.seed``.
    """
    if config.fan_in > input_geom.total_units:
        raise ValueError(
            f"fan_in={config.fan_in} exceeds the {input_geom.total_units} input features"
        )
    arith = get_arithmetic(config.float_format)
    hidden = LayerPairState.independent(input_geom, hidden_geom, config.k_b, arith)
    output = LayerPairState.independent(hidden_geom, output_geom, config.k_b_output, arith)
    mask = init_mask(config.seed, input_geom.total_units, hidden_geom.n_hcus, config.fan_in)
    from .kernels import apply_mask

    apply_mask(hidden, mask)
    return Network(input_geom, hidden_geom, output_geom, config, hidden, output, mask)


# --------------------------------------------------------------------------
# model files
# --------------------------------------------------------------------------

MAGIC = b"BCPNNet\x00"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Base class for unreadable model files."""


class MalformedHeaderError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedPayloadError(ModelFormatError):
    pass


_ARRAY_ORDER = (
    ("hidden", "weights"), ("hidden", "bias"), ("hidden", "trace_ci"),
    ("hidden", "trace_cj"), ("hidden", "trace_cij"),
    ("output", "weights"), ("output", "bias"), ("output", "trace_ci"),
    ("output", "trace_cj"), ("output", "trace_cij"),
)  # fmt: skip


def serialize(network: Network) -> bytes:
    """Encode a network as bytes.

    Layout: 8-byte magic, little-endian u32 version, u32 header length, a UTF-8
    JSON header (geometries, config, storage dtype, array shapes), then every
    array as row-major little-endian float64.  Float32 parameters widen to
    float64 exactly, so a round trip is bit-exact.
    """
    arrays = [getattr(getattr(network, part), name) for part, name in _ARRAY_ORDER]
    arrays.append(network.mask.active)
    header = {
        "geometry": {
            "input": [network.input_geom.n_hcus, network.input_geom.mcus_per_hcu],
            "hidden": [network.hidden_geom.n_hcus, network.hidden_geom.mcus_per_hcu],
            "output": [network.output_geom.n_hcus, network.output_geom.mcus_per_hcu],
        },
        "config": network.config.to_dict(),
        "dtype": network.hidden.dtype.name,
        "fan_in": network.mask.fan_in,
        "shapes": [list(a.shape) for a in arrays],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def deserialize(data: bytes) -> Network:
    """Inverse of :func:`serialize`; raises a :class:`ModelFormatError` subclass on bad input."""
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise MalformedHeaderError("not a model file (bad magic bytes)")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"model file version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + 8
    if len(data) < start + hlen:
        raise TruncatedPayloadError("model file ends inside the header")
    try:
        header = json.loads(data[start : start + hlen].decode())
        geoms = {k: HypercolumnGeometry(*header["geometry"][k]) for k in ("input", "hidden", "output")}
        config = TrainConfig.from_dict(header["config"])
        dtype = np.dtype(header["dtype"])
        shapes = [tuple(s) for s in header["shapes"]]
        fan_in = int(header["fan_in"])
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"unreadable model header: {exc}") from exc
    if len(shapes) != len(_ARRAY_ORDER) + 1:
        raise MalformedHeaderError("model header lists the wrong number of arrays")
    offset = start + hlen
    arrays = []
    for shape in shapes:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if len(data) < offset + nbytes:
            raise TruncatedPayloadError("model file ends inside the parameter payload")
        arrays.append(np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape))
        offset += nbytes
    if offset != len(data):
        raise MalformedHeaderError("trailing bytes after the parameter payload")
    parts = {"hidden": {}, "output": {}}
    for (part, name), a in zip(_ARRAY_ORDER, arrays):
        parts[part][name] = a.astype(dtype)
    mask = ConnectivityMask(arrays[-1] != 0, fan_in)
    return Network(
        geoms["input"], geoms["hidden"], geoms["output"], config,
        LayerPairState(**parts["hidden"]), LayerPairState(**parts["output"]), mask,
    )  # fmt: skip


def save(network: Network, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize(network))


def load(path) -> Network:
    with open(path, "rb") as f:
        return deserialize(f.read())


# --------------------------------------------------------------------------
# builder
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StructuralPlasticityLayer:
    """Hidden layer trained without labels, with a rewired input mask."""

    n_hcus: int
    mcus_per_hcu: int


@dataclass(frozen=True)
class DenseLayer:
    """Supervised output layer: one hypercolumn with one minicolumn per class."""

    n_classes: int


@dataclass
class Model:
    """Keras-style front end::

        model = Model(config)
        model.add(StructuralPlasticityLayer(30, 100))
        model.add(DenseLayer(10))
        model.fit(train)
        model.evaluate(test)

    The input geometry is taken from the first dataset passed to :meth:`fit`
    unless given explicitly.
    """

    config: TrainConfig = field(default_factory=TrainConfig)
    input_geom: Optional[HypercolumnGeometry] = None
    layers: list = field(default_factory=list)
    network: Optional[Network] = None
    history: list = field(default_factory=list)

    def add(self, layer) -> "Model":
        if not self.layers and not isinstance(layer, StructuralPlasticityLayer):
            raise TypeError("the first layer must be a StructuralPlasticityLayer")
        if self.layers and not isinstance(layer, DenseLayer):
            raise TypeError("the second layer must be a DenseLayer")
        if len(self.layers) == 2:
            raise ValueError("only input -> hidden -> output networks are supported")
        self.layers.append(layer)
        return self

    def build(self, input_geom: Optional[HypercolumnGeometry] = None) -> Network:
        if len(self.layers) != 2:
            raise ValueError("add a StructuralPlasticityLayer and a DenseLayer before building")
        geom = input_geom or self.input_geom
        if geom is None:
            raise ValueError("input geometry unknown; pass it or call fit() with a dataset")
        hidden, out = self.layers
        self.input_geom = geom
        self.network = build_network(
            geom,
            HypercolumnGeometry(hidden.n_hcus, hidden.mcus_per_hcu),
            HypercolumnGeometry(1, out.n_classes),
            self.config,
        )
        return self.network

    def fit(self, dataset, callback=None):
        from .trainer import fit_hidden, fit_output

        if self.network is None:
            self.build(dataset.geometry)
        self.history.append(fit_hidden(self.network, dataset, self.config, callback=callback))
        self.history.append(fit_output(self.network, dataset, self.config, callback=callback))
        return self.history[-2:]

    def evaluate(self, dataset) -> float:
        from .trainer import evaluate

        if self.network is None:
            raise ValueError("model has not been built or trained")
        return evaluate(self.network, dataset)

    def predict(self, features):
        from .trainer import predict

        return predict(self.network, features)
