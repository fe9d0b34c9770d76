"""How few mantissa bits does training tolerate?

Trains the same small network on a 10k-image MNIST subset once per number
format.  In the emulated formats every multiply, add, divide, log and exp is
rounded to the format, including each step of every dot product and batch
sum, so this takes a few minutes.  Formats down to 7 mantissa bits (bf16)
track float32.  With 5 bits (bf14) a running sum of values in [0, 1] stops
growing near 64, so the statistics of a 512-image batch are lost and
accuracy falls to chance.
"""
from pathlib import Path

from bcpnn import cli

config = cli.load_config(Path(__file__).resolve().parents[1] / "configs" / "precision.ini")
train, test = cli.load_datasets(config)

for fmt in ("f32", "bf28", "bf24", "bf20", "bf16", "bf15", "bf14"):
    _, _, acc, seconds = cli._train_once(config, train, test, config.train.replace(float_format=fmt), checkpoints=False)
    print(f"{fmt:>5}: test accuracy {100 * acc:5.2f}%  ({seconds:.0f} s)")
