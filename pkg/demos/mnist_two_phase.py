"""Two-phase training on MNIST with the builder interface.

Phase one learns the hidden layer without labels: supports, a softmax inside
each hypercolumn, and probability traces that turn into log-odds weights.
Phase two freezes that layer and learns the readout from one-hot labels.
"""
from bcpnn import DenseLayer, Model, StructuralPlasticityLayer, TrainConfig, encode_complement, load_mnist

train = encode_complement(load_mnist(split="train"))
test = encode_complement(load_mnist(split="test"))

# rescore the mask about once per epoch (469 batches of 128)
model = Model(TrainConfig(lambda_output=0.01, mask_update_period=469))
model.add(StructuralPlasticityLayer(n_hcus=15, mcus_per_hcu=200))
model.add(DenseLayer(n_classes=10))

hidden_report, output_report = model.fit(train)
for epoch in hidden_report.epochs:
    print(f"hidden epoch {epoch.epoch}: {epoch.seconds:.1f} s, {epoch.mask_swaps} mask swaps")

print(f"test accuracy: {100 * model.evaluate(test):.2f}%")
