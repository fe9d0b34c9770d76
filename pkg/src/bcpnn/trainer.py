"""Training loops, data-parallel batch execution, evaluation and the cost model."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import kernels
from .model import HypercolumnGeometry, Network, TrainConfig, save
from .plasticity import mi_scores, rewire
from .precision import get_arithmetic

log = logging.getLogger(__name__)

SHUFFLE_STREAM = {"hidden": 1, "output": 2}
NOISE_STREAM = 3
EVAL_CHUNK = 1000


@dataclass
class EpochStats:
    phase: str
    epoch: int
    seconds: float
    images_per_second: float
    mask_swaps: int = 0
    trace_norms: dict = field(default_factory=dict)


@dataclass
class TrainReport:
    phase: str
    epochs: list = field(default_factory=list)
    macs: int = 0
    weights_digest: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def weights_digest(network: Network) -> str:
    """SHA-256 over both weight matrices and bias vectors."""
    h = hashlib.sha256()
    for st in (network.hidden, network.output):
        h.update(st.weights.tobytes())
        h.update(st.bias.tobytes())
    return h.hexdigest()


def _trace_norms(state) -> dict:
    return {
        "ci": float(np.linalg.norm(np.asarray(state.trace_ci, np.float64))),
        "cj": float(np.linalg.norm(np.asarray(state.trace_cj, np.float64))),
        "cij": float(np.linalg.norm(np.asarray(state.trace_cij, np.float64))),
    }


def shuffle_order(seed: int, epoch: int, n: int, phase: str = "hidden") -> np.ndarray:
    """Per-epoch permutation from a PCG64 stream keyed by (phase, seed, epoch)."""
    rng = np.random.default_rng([SHUFFLE_STREAM[phase], seed, epoch])
    return rng.permutation(n)


# --------------------------------------------------------------------------
# data-parallel execution
# --------------------------------------------------------------------------


def split_batch(n: int, n_workers: int) -> list:
    """Contiguous ``(start, stop)`` ranges; sizes differ by at most one."""
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    if n_workers > n:
        raise ValueError(f"cannot split a batch of {n} samples over {n_workers} workers")
    edges = np.linspace(0, n, n_workers + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


class DataParallelExecutor:
    """Fork-join pool standing in for one process per sub-batch.

    Each worker sees a contiguous slice of the batch, computes its activity
    and partial sums into its own buffers, and the coordinator reduces the
    partials in worker order.  With one worker everything runs inline.
    """

    def __init__(self, n_workers: int = 1):
        if n_workers < 1:
            raise ValueError("n_workers must be >= 1")
        self.n_workers = n_workers
        self._pool = ThreadPoolExecutor(n_workers) if n_workers > 1 else None

    def map(self, fn, n: int) -> list:
        parts = split_batch(n, min(self.n_workers, n))
        if self._pool is None or len(parts) == 1:
            return [fn(a, b) for a, b in parts]
        return list(self._pool.map(lambda ab: fn(*ab), parts))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def parallel_step(a_pre_fn, post_fn, n: int, executor: DataParallelExecutor, arith):
    """Run one batch through the workers and reduce their statistics.

    ``a_pre_fn(lo, hi)`` returns the presynaptic activity of samples
    ``lo:hi`` and ``post_fn(a_pre, lo, hi)`` the postsynaptic activity.
    Returns the combined :class:`~bcpnn.kernels.BatchStats`.
    """

    def work(lo, hi):
        a_pre = a_pre_fn(lo, hi)
        a_post = post_fn(a_pre, lo, hi)
        return kernels.batch_statistics(a_pre, a_post, arith)

    return kernels.combine_statistics(executor.map(work, n), arith)


def _hidden_activity(network: Network, x, arith, noise=None):
    s = kernels.compute_support(x, network.hidden, arith)
    if noise is not None:
        s = arith.add(s, noise)
    return kernels.hcu_softmax(s, network.hidden_geom, arith)


def _check_features(network: Network, dataset):
    if dataset.features.shape[1] != network.input_geom.total_units:
        raise ValueError(
            f"dataset has {dataset.features.shape[1]} features, "
            f"network expects {network.input_geom.total_units}"
        )
    if len(dataset) == 0:
        raise ValueError("empty dataset")


def _checkpoint(network, checkpoint_dir, every, phase, epoch):
    if checkpoint_dir and every and (epoch + 1) % every == 0:
        path = Path(checkpoint_dir) / f"{phase}-epoch{epoch + 1:03d}.bcpnn"
        path.parent.mkdir(parents=True, exist_ok=True)
        save(network, path)


def fit_hidden(
    network: Network,
    dataset,
    config: Optional[TrainConfig] = None,
    callback: Optional[Callable] = None,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
) -> TrainReport:
    """Unsupervised training of the input -> hidden weights, in place.

    Per epoch: shuffle; per batch ``i_B`` (counted from 1): every
    ``mask_update_period`` batches rescore and rewire the mask; compute the
    hidden activity; then ``n_cycles`` times update the traces, recompute
    weights and bias, and mask the weights.
    """
    config = config or network.config
    arith = get_arithmetic(config.float_format)
    _check_features(network, dataset)
    if config.n_workers > config.batch_size:
        raise ValueError("n_workers must not exceed batch_size")
    state, mask, hgeom = network.hidden, network.mask, network.hidden_geom
    x_all = arith.asarray(dataset.features)
    n, bs = len(dataset), config.batch_size
    period = config.period_for(hgeom)
    report = TrainReport("hidden")
    macs0 = arith.macs
    with DataParallelExecutor(config.n_workers) as ex:
        for epoch in range(config.n_epochs1):
            t0 = time.perf_counter()
            order = shuffle_order(config.seed, epoch, n, "hidden")
            noise_std = config.support_noise * np.exp(-config.noise_decay * epoch)
            noise_rng = np.random.default_rng([NOISE_STREAM, config.seed, epoch])
            swaps = 0
            for i_b, start in enumerate(range(0, n, bs), start=1):
                if i_b % period == 0:
                    swaps += rewire(mask, mi_scores(state, hgeom), config.swaps_per_hcu)
                x = x_all[order[start : start + bs]]
                noise = None
                if noise_std > 0:
                    noise = arith.asarray(noise_rng.standard_normal((len(x), hgeom.total_units)) * noise_std)
                stats = parallel_step(
                    lambda lo, hi: x[lo:hi],
                    lambda a, lo, hi: _hidden_activity(
                        network, a, arith, None if noise is None else noise[lo:hi]
                    ),
                    len(x),
                    ex,
                    arith,
                )
                for _ in range(config.n_cycles):
                    kernels.apply_statistics(state, stats, config.lambda_hidden, arith, config.eps_trace)
                    kernels.update_weights_bias(state, config.k_b, arith)
                    kernels.apply_mask(state, mask)
            dt = time.perf_counter() - t0
            es = EpochStats("hidden", epoch, dt, n / dt, swaps, _trace_norms(state))
            report.epochs.append(es)
            log.info("hidden epoch %d: %.1fs, %.0f img/s, %d swaps", epoch, dt, n / dt, swaps)
            if callback:
                callback(network, es)
            _checkpoint(network, checkpoint_dir, checkpoint_every, "hidden", epoch)
    report.macs = arith.macs - macs0
    report.weights_digest = weights_digest(network)
    return report


def _one_hot(labels, n_classes, arith):
    out = np.zeros((len(labels), n_classes), dtype=arith.dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def fit_output(
    network: Network,
    dataset,
    config: Optional[TrainConfig] = None,
    callback: Optional[Callable] = None,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
) -> TrainReport:
    """Supervised training of the hidden -> output weights with the hidden layer frozen.

    The hidden activity comes from a plain forward pass and the output
    activity is the one-hot label; there is no mask on this pair.
    """
    config = config or network.config
    arith = get_arithmetic(config.float_format)
    _check_features(network, dataset)
    if dataset.labels is None:
        raise ValueError("fit_output needs labels")
    n_out = network.output_geom.total_units
    labels = np.asarray(dataset.labels)
    if labels.min() < 0 or labels.max() >= n_out:
        raise ValueError(f"labels must lie in [0, {n_out})")
    state = network.output
    x_all = arith.asarray(dataset.features)
    n, bs = len(dataset), config.batch_size
    report = TrainReport("output")
    macs0 = arith.macs
    with DataParallelExecutor(config.n_workers) as ex:
        for epoch in range(config.n_epochs2):
            t0 = time.perf_counter()
            order = shuffle_order(config.seed, epoch, n, "output")
            for start in range(0, n, bs):
                idx = order[start : start + bs]
                x, y = x_all[idx], _one_hot(labels[idx], n_out, arith)
                stats = parallel_step(
                    lambda lo, hi: _hidden_activity(network, x[lo:hi], arith),
                    lambda a, lo, hi: y[lo:hi],
                    len(x),
                    ex,
                    arith,
                )
                for _ in range(config.n_cycles):
                    kernels.apply_statistics(state, stats, config.lambda_output, arith, config.eps_trace)
                    kernels.update_weights_bias(state, config.k_b_output, arith)
            dt = time.perf_counter() - t0
            es = EpochStats("output", epoch, dt, n / dt, 0, _trace_norms(state))
            report.epochs.append(es)
            log.info("output epoch %d: %.1fs, %.0f img/s", epoch, dt, n / dt)
            if callback:
                callback(network, es)
            _checkpoint(network, checkpoint_dir, checkpoint_every, "output", epoch)
    report.macs = arith.macs - macs0
    report.weights_digest = weights_digest(network)
    return report


def forward(network: Network, features, arith=None):
    """Hidden and output activity for a block of samples."""
    arith = arith or network.arithmetic
    x = arith.asarray(features)
    a_hid = _hidden_activity(network, x, arith)
    s_out = kernels.compute_support(a_hid, network.output, arith)
    return a_hid, kernels.hcu_softmax(s_out, network.output_geom, arith)


def predict(network: Network, features, chunk: int = EVAL_CHUNK) -> np.ndarray:
    """Predicted class per sample (argmax of the output hypercolumn)."""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != network.input_geom.total_units:
        raise ValueError(
            f"expected (n, {network.input_geom.total_units}) features, got {features.shape}"
        )
    arith = network.arithmetic
    out = []
    for start in range(0, features.shape[0], chunk):
        _, a_out = forward(network, features[start : start + chunk], arith)
        out.append(kernels.predict_classes(a_out, network.output_geom))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(network: Network, dataset) -> float:
    """Fraction of samples whose predicted class equals the label."""
    if dataset.labels is None:
        raise ValueError("evaluate needs labels")
    _check_features(network, dataset)
    return float(np.mean(predict(network, dataset.features) == dataset.labels))


def estimate_cost(
    config: TrainConfig,
    input_geom: HypercolumnGeometry,
    hidden_geom: HypercolumnGeometry,
    output_geom: HypercolumnGeometry,
    n_samples: int,
) -> int:
    """Multiply-accumulate bound ``n_cycles * N_B * B_S * N_H * (N_F + N_O)`` of one epoch."""
    n_b = config.n_batches(n_samples)
    return (
        config.n_cycles
        * n_b
        * config.batch_size
        * hidden_geom.total_units
        * (input_geom.total_units + output_geom.total_units)
    )
