"""Error profiles of truncated multipliers and the component catalog."""
from redcane import gaussian_likeness, load_catalog, profile, truncated_multiplier
from redcane.approx import uniform_exhaustive

for k in (1, 3, 6):
    prof = profile(truncated_multiplier(k), uniform_exhaustive(), chain_lengths=[1, 9, 81])
    line = "  ".join(f"chain {n}: mean {p.mean:9.1f} std {p.std:8.1f}" for n, p in prof.items())
    print(f"trunc{k}  {line}  gaussian-like at 81: {gaussian_likeness(prof[81]).is_gaussian_like}")

print("\ncatalog (power uW, modeled NM):")
for e in sorted(load_catalog(), key=lambda e: e.power_uw):
    print(f"  {e.name:5s} {e.power_uw:6.1f}  {e.nm_modeled:.4f}")
