"""Train the toy capsule network on the bundled 8x8 digits."""
import logging
import sys

from redcane import TrainConfig, build_network, digits_split, evaluate, toy_spec, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
train_ds, test_ds = digits_split(seed=0)
model = train(build_network(toy_spec(), seed=0), train_ds, TrainConfig(seed=0))
print(f"test accuracy {evaluate(model, test_ds):.4f} on {len(test_ds)} images")
if len(sys.argv) > 1:
    model.save(sys.argv[1])
    print("saved to", sys.argv[1])
