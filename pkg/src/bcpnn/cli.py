"""Command-line front end: ``train``, ``eval``, ``sweep-precision`` and ``bench``.

Runs are described by an INI-style config file (see ``RunConfig``).  Logs go
to stderr; metrics go to CSV or JSON files in the output directory.

Exit codes: 0 success, 1 runtime failure, 2 config error, 3 dataset error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset, IdxFormatError, encode_complement, load_mnist, make_synthetic_clusters
from .model import HypercolumnGeometry, ModelFormatError, TrainConfig, build_network, load, save
from .precision import FORMAT_NAMES
from .trainer import evaluate, fit_hidden, fit_output, predict

log = logging.getLogger("bcpnn")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATASET = 0, 1, 2, 3
WORKERS_ENV = "BCPNN_WORKERS"

# Column sets of the metrics files.  These are part of the interface.
TRAIN_COLUMNS = (
    "command", "float_format", "n_workers", "batch_size", "hidden_hcus", "hidden_mcus",
    "train_samples", "test_samples", "test_accuracy", "train_seconds",
)
SWEEP_COLUMNS = ("format", "test_accuracy", "train_seconds")
BENCH_COLUMNS = ("batch_size", "train_images_per_second", "inference_images_per_second")


class ConfigError(ValueError):
    pass


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class DataSection:
    source: str = "mnist"  # mnist | synthetic
    mnist_dir: str = ""
    encoding: str = "complement"
    train_samples: int = 0  # 0 means all
    test_samples: int = 0
    n_clusters: int = 10
    n_samples: int = 1000
    n_features: int = 32
    spread: float = 0.1
    test_fraction: float = 0.2
    data_seed: int = 0


@dataclass(frozen=True)
class NetworkSection:
    hidden_hcus: int = 15
    hidden_mcus: int = 200


@dataclass(frozen=True)
class OutputSection:
    output_dir: str = "run"
    checkpoint_every: int = 0
    metrics_format: str = "csv"  # csv | json


_SECTIONS = {"data": DataSection, "network": NetworkSection, "train": TrainConfig, "output": OutputSection}


@dataclass(frozen=True)
class RunConfig:
    """Everything one command needs: dataset, network shape, training and output settings."""

    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def hidden_geometry(self) -> HypercolumnGeometry:
        return HypercolumnGeometry(self.network.hidden_hcus, self.network.hidden_mcus)

    @property
    def output_dir(self) -> Path:
        return Path(self.output.output_dir)


def _convert(name, ftype, raw: str):
    ftype = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    raw = raw.strip()
    try:
        if ftype.startswith("Optional") or ftype.endswith("| None"):
            if raw.lower() in ("", "none"):
                return None
            ftype = ftype.replace("Optional[", "").rstrip("]").replace(" | None", "")
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r} (expected {ftype})") from None


def _section(cls, items: dict, where: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(items) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {k: _convert(f"{where}.{k}", fields[k].type, v) for k, v in items.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def parse_config(text: str, base_dir=".", env=None) -> RunConfig:
    """Parse config text.  Relative paths resolve against ``base_dir``."""
    env = os.environ if env is None else env
    cp = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    unknown = sorted(set(cp.sections()) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    train_items = dict(cp["train"]) if cp.has_section("train") else {}
    if "n_workers" not in train_items and env.get(WORKERS_ENV):
        train_items["n_workers"] = env[WORKERS_ENV]
    parts = {
        name: _section(cls, train_items if name == "train" else (dict(cp[name]) if cp.has_section(name) else {}), name)
        for name, cls in _SECTIONS.items()
    }
    data, out = parts["data"], parts["output"]
    base = Path(base_dir)
    if data.source not in ("mnist", "synthetic"):
        raise ConfigError(f"data.source must be mnist or synthetic, not {data.source!r}")
    if data.encoding not in ("raw", "complement"):
        raise ConfigError(f"data.encoding must be raw or complement, not {data.encoding!r}")
    if out.metrics_format not in ("csv", "json"):
        raise ConfigError(f"output.metrics_format must be csv or json, not {out.metrics_format!r}")
    if data.mnist_dir:
        data = dataclasses.replace(data, mnist_dir=str(base / data.mnist_dir))
    out = dataclasses.replace(out, output_dir=str(base / out.output_dir))
    try:
        HypercolumnGeometry(parts["network"].hidden_hcus, parts["network"].hidden_mcus)
    except ValueError as exc:
        raise ConfigError(f"[network]: {exc}") from None
    return RunConfig(data, parts["network"], parts["train"], out)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base_dir=path.parent)


def load_datasets(cfg: RunConfig):
    """Train and test sets as configured, encoded and truncated."""
    d = cfg.data
    if d.source == "synthetic":
        full = make_synthetic_clusters(d.data_seed, d.n_clusters, d.n_samples, d.n_features, d.spread)
        n_test = int(round(d.test_fraction * len(full)))
        train = Dataset(full.features[n_test:], full.labels[n_test:])
        test = Dataset(full.features[:n_test], full.labels[:n_test])
    else:
        directory = d.mnist_dir or None
        try:
            train = load_mnist(directory, "train")
            test = load_mnist(directory, "test")
        except (OSError, IdxFormatError) as exc:
            raise DatasetError(str(exc)) from exc
    if d.train_samples:
        train = train.take(d.train_samples)
    if d.test_samples:
        test = test.take(d.test_samples)
    if d.encoding == "complement":
        train, test = encode_complement(train), encode_complement(test)
    if len(train) == 0:
        raise DatasetError("training set is empty")
    return train, test


def write_metrics(rows, columns, path_stem: Path, fmt: str) -> Path:
    """Write rows (dicts) with a fixed column order as ``<stem>.csv`` or ``<stem>.json``."""
    path_stem.parent.mkdir(parents=True, exist_ok=True)
    rows = [{c: r[c] for c in columns} for r in rows]
    if fmt == "json":
        path = path_stem.with_suffix(".json")
        path.write_text(json.dumps({"columns": list(columns), "rows": rows}, indent=2) + "\n")
    else:
        path = path_stem.with_suffix(".csv")
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=columns)
            w.writeheader()
            w.writerows(rows)
    return path


def _train_once(cfg: RunConfig, train, test, train_cfg: TrainConfig, checkpoints=True):
    net = build_network(train.geometry, cfg.hidden_geometry, HypercolumnGeometry(1, _n_classes(train, test)), train_cfg)
    ck = dict(checkpoint_dir=cfg.output_dir / "checkpoints", checkpoint_every=cfg.output.checkpoint_every) if checkpoints else {}
    t0 = time.perf_counter()
    reports = [fit_hidden(net, train, train_cfg, **ck), fit_output(net, train, train_cfg, **ck)]
    seconds = time.perf_counter() - t0
    acc = evaluate(net, test) if len(test) else float("nan")
    return net, reports, acc, seconds


def _n_classes(*datasets) -> int:
    return max(ds.n_classes for ds in datasets)


def _train_row(cfg, command, train, test, acc, seconds, tc=None):
    tc = tc or cfg.train
    return dict(
        command=command, float_format=tc.float_format, n_workers=tc.n_workers, batch_size=tc.batch_size,
        hidden_hcus=cfg.network.hidden_hcus, hidden_mcus=cfg.network.hidden_mcus,
        train_samples=len(train), test_samples=len(test), test_accuracy=acc, train_seconds=round(seconds, 3),
    )


def cmd_train(config_path) -> int:
    cfg = load_config(config_path)
    train, test = load_datasets(cfg)
    net, reports, acc, seconds = _train_once(cfg, train, test, cfg.train)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    save(net, out / "model.bcpnn")
    (out / "train_report.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    write_metrics([_train_row(cfg, "train", train, test, acc, seconds)], TRAIN_COLUMNS, out / "metrics", cfg.output.metrics_format)
    log.info("test accuracy %.4f after %.1fs; model written to %s", acc, seconds, out / "model.bcpnn")
    return EXIT_OK


def cmd_eval(config_path, model_path) -> int:
    cfg = load_config(config_path)
    _, test = load_datasets(cfg)
    try:
        net = load(model_path)
    except (OSError, ModelFormatError) as exc:
        raise DatasetError(f"cannot load model {model_path}: {exc}") from exc
    acc = evaluate(net, test)
    row = _train_row(cfg, "eval", Dataset(np.zeros((0, 1))), test, acc, 0.0, net.config)
    write_metrics([row], TRAIN_COLUMNS, cfg.output_dir / "eval_metrics", cfg.output.metrics_format)
    log.info("test accuracy %.4f", acc)
    return EXIT_OK


def cmd_precision_sweep(config_path, formats) -> int:
    bad = [f for f in formats if f not in FORMAT_NAMES]
    if bad or not formats:
        raise ConfigError(f"unknown format(s) {bad}; choose from {', '.join(FORMAT_NAMES)}")
    cfg = load_config(config_path)
    train, test = load_datasets(cfg)
    rows = []
    for fmt in formats:
        _, _, acc, seconds = _train_once(cfg, train, test, cfg.train.replace(float_format=fmt), checkpoints=False)
        log.info("%s: test accuracy %.4f (%.1fs)", fmt, acc, seconds)
        rows.append(dict(format=fmt, test_accuracy=acc, train_seconds=round(seconds, 3)))
    write_metrics(rows, SWEEP_COLUMNS, cfg.output_dir / "precision_sweep", cfg.output.metrics_format)
    return EXIT_OK


def bench_batch_size(cfg: RunConfig, train, batch_size: int) -> dict:
    """Images/second of one hidden-layer training epoch and of inference, at ``batch_size``."""
    tc = cfg.train.replace(batch_size=batch_size, n_epochs1=1, n_workers=min(cfg.train.n_workers, batch_size))
    net = build_network(train.geometry, cfg.hidden_geometry, HypercolumnGeometry(1, max(train.n_classes, 2)), tc)
    rep = fit_hidden(net, train, tc)
    t0 = time.perf_counter()
    predict(net, train.features, chunk=batch_size)
    infer = len(train) / (time.perf_counter() - t0)
    return dict(
        batch_size=batch_size,
        train_images_per_second=rep.epochs[0].images_per_second,
        inference_images_per_second=infer,
    )


def cmd_bench(config_path, batch_sizes) -> int:
    if not batch_sizes or min(batch_sizes) < 1:
        raise ConfigError("batch sizes must be positive integers")
    cfg = load_config(config_path)
    train, _ = load_datasets(cfg)
    rows = []
    for bs in batch_sizes:
        row = bench_batch_size(cfg, train, bs)
        log.info("batch %d: train %.0f img/s, inference %.0f img/s", bs, row["train_images_per_second"], row["inference_images_per_second"])
        rows.append(row)
    write_metrics(rows, BENCH_COLUMNS, cfg.output_dir / "bench", cfg.output.metrics_format)
    return EXIT_OK


def _csv_list(conv):
    def parse(text):
        try:
            return [conv(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None

    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bcpnn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="train a network and evaluate it on the test set")
    t.add_argument("config")
    e = sub.add_parser("eval", help="evaluate a saved model on the configured test set")
    e.add_argument("config")
    e.add_argument("model")
    s = sub.add_parser("sweep-precision", help="train and evaluate once per arithmetic format")
    s.add_argument("config")
    s.add_argument("--formats", type=_csv_list(str), default=list(FORMAT_NAMES), help="comma-separated, e.g. bf14,bf16,f32")
    b = sub.add_parser("bench", help="training and inference throughput per batch size")
    b.add_argument("config")
    b.add_argument("--batch-sizes", type=_csv_list(int), default=[16, 128, 512], help="comma-separated, e.g. 16,512")
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        if args.command == "train":
            return cmd_train(args.config)
        if args.command == "eval":
            return cmd_eval(args.config, args.model)
        if args.command == "sweep-precision":
            return cmd_precision_sweep(args.config, args.formats)
        return cmd_bench(args.config, args.batch_sizes)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DatasetError as exc:
        log.error("dataset error: %s", exc)
        return EXIT_DATASET
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        log.error("runtime error: %s: %s", type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
