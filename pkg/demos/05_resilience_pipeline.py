"""Full analysis: group sweep, layer sweep, component selection, energy."""
import sys

from redcane import RunConfig, TrainConfig, build_network, digits_split, run_pipeline, toy_spec, train
from redcane.methodology import default_workers

train_ds, test_ds = digits_split(seed=0)
model = train(build_network(toy_spec(), seed=0), train_ds, TrainConfig(seed=0))
cfg = RunConfig(seed=0, workers=default_workers(), output_dir=sys.argv[1] if len(sys.argv) > 1 else None)
result = run_pipeline(model, test_ds, cfg)
rep = result.report

print(f"baseline accuracy {rep.baseline:.4f}")
print("group drop (pp) per NM:", "  ".join(f"{nm:g}" for nm in cfg.nm_grid))
for g, mark in sorted(rep.group_marks.items()):
    drops = "  ".join(f"{rep.drop_pp('group', g, nm):5.1f}" for nm in cfg.nm_grid)
    print(f"  {g:14s} {mark.value:13s} {drops}")
print("selection:")
for e in result.plan.entries:
    print(f"  {e.site:20s} {e.component:5s} tolerated NM {e.tolerated_nm:g}")
print(f"energy savings {result.energy.savings_pct:.2f}%")
