"""The data-parallel scheme is a mean reduction, not gradient averaging.

Every batch is cut into contiguous sub-batches, each worker sums its own
activity statistics, and the coordinator adds the partial sums in a fixed
order before one shared trace update.  In float64 the result differs from
the single-worker run only by summation-order rounding.
"""
import numpy as np

from bcpnn import HypercolumnGeometry, TrainConfig, build_network, encode_complement, fit_hidden
from bcpnn.data import make_synthetic_clusters
from bcpnn.trainer import split_batch

data = encode_complement(make_synthetic_clusters(seed=5, n_clusters=4, n_samples=1000, n_features=16, spread=0.1))

print("a batch of 64 over 3 workers:", split_batch(64, 3))

runs = {}
for workers in (1, 2, 4, 8):
    config = TrainConfig(float_format="f64", batch_size=64, n_epochs1=1, fan_in=20, n_workers=workers)
    net = build_network(data.geometry, HypercolumnGeometry(4, 8), HypercolumnGeometry(1, 4), config)
    fit_hidden(net, data)
    runs[workers] = net

for workers in (2, 4, 8):
    diff = np.abs(runs[workers].hidden.trace_cij - runs[1].hidden.trace_cij).max()
    print(f"{workers} workers: max |C_ij - C_ij(1 worker)| = {diff:.1e}")
