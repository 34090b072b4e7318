"""Operation counts and energy for the toy network and the DeepCaps reference."""
from redcane import DEEPCAPS_COUNTS, count_ops, energy_estimate, load_catalog, toy_spec

for name, counts in (("toy", count_ops(toy_spec())), ("DeepCaps", DEEPCAPS_COUNTS)):
    e = energy_estimate(counts)
    shares = ", ".join(f"{k} {100 * v:.2f}%" for k, v in e.share.items())
    print(f"{name}: {e.total_j:.4e} J per inference ({shares})")

cat = load_catalog()
for comp in ("NGR", "QKX"):
    e = energy_estimate(DEEPCAPS_COUNTS, catalog=cat, default_component=comp)
    print(f"DeepCaps with every multiplier {comp}: {e.savings_pct:.2f}% saved")
