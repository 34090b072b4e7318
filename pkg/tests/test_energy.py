import json

import pytest
from hypothesis import given, strategies as st

from redcane.approx import load_catalog
from redcane.capsnet import LayerSpec, NetworkSpec, toy_spec
from redcane.energy import (
    DEEPCAPS_COUNTS,
    OpCounts,
    UnitEnergies,
    count_ops,
    count_ops_by_site,
    energy_estimate,
)
from redcane.methodology import PlanEntry, SelectionPlan

counts_st = st.builds(OpCounts, *(st.integers(0, 10**12) for _ in range(5)))


def test_unit_energy_defaults_and_validation():
    u = UnitEnergies()
    assert (u.additions, u.multiplications, u.divisions, u.exponentials, u.square_roots) == (
        0.0202, 0.5354, 1.0717, 0.1578, 0.7805)
    with pytest.raises(ValueError):
        UnitEnergies(additions=0)
    with pytest.raises(ValueError):
        OpCounts(additions=-1)


def test_deepcaps_fixture():
    assert DEEPCAPS_COUNTS == OpCounts(1_910_000_000, 2_150_000_000, 4_170_000, 175_000, 502_000)


def test_deepcaps_energy_and_share():
    e = energy_estimate(DEEPCAPS_COUNTS)
    assert e.breakdown_j["multiplications"] == pytest.approx(2.15e9 * 0.5354e-12)
    assert e.breakdown_j["multiplications"] == pytest.approx(1.151e-3, rel=1e-3)
    assert e.total_j == pytest.approx(1.1946e-3, rel=1e-3)
    assert 100 * e.share["multiplications"] == pytest.approx(96.4, abs=0.5)
    assert 100 * e.share["additions"] == pytest.approx(3.2, abs=0.5)
    assert sum(e.share.values()) == pytest.approx(1.0)
    assert e.savings_pct == 0.0


def test_zero_counts():
    e = energy_estimate(OpCounts())
    assert e.total_j == 0 and all(v == 0 for v in e.share.values())


def test_single_conv_hand_count():
    spec = NetworkSpec([LayerSpec("Conv2D", "c", 1), LayerSpec("PrimaryCaps", "p", 1, kernel_size=1, capsule_dim=1),
                        LayerSpec("ClassCaps", "k", 2, capsule_dim=1, routing_iters=1)],
                       input_shape=(3, 3, 1), num_classes=2)
    assert count_ops_by_site(spec)["c"] == OpCounts(additions=8, multiplications=9)


def test_toy_counts_hand_derived():
    # conv1: 8*8*16 outputs of 9 taps
    conv1 = OpCounts(additions=1024 * 8, multiplications=1024 * 9)
    # primarycaps: 3*3*32 outputs of 3*3*16 taps; squash of 72 capsules of dim 4
    prim = OpCounts(additions=288 * 143, multiplications=288 * 144)
    prim_sq = OpCounts(additions=72 * 4, multiplications=72 * 8, divisions=144, square_roots=72)
    # classcaps: 72 inputs, 10 outputs, dim 8 from dim 4, 3 iterations
    uhat = OpCounts(additions=72 * 10 * 8 * 3, multiplications=72 * 10 * 8 * 4)
    soft = OpCounts(additions=3 * 72 * 9, divisions=3 * 720, exponentials=3 * 720)
    s = OpCounts(additions=3 * 71 * 80, multiplications=3 * 720 * 8)
    sq = OpCounts(additions=3 * 80 + 70, multiplications=3 * 160 + 80, divisions=3 * 20, square_roots=3 * 10 + 10)
    logits = OpCounts(additions=3 * 5760, multiplications=3 * 5760)
    by_site = count_ops_by_site(toy_spec())
    assert by_site == {
        "conv1": conv1, "primarycaps_conv": prim, "primarycaps_squash": prim_sq,
        "classcaps_uhat": uhat, "classcaps_softmax": soft, "classcaps_s": s,
        "classcaps_squash": sq, "classcaps_logits": logits,
    }
    assert count_ops(toy_spec()).multiplications == 9216 + 41472 + 576 + 23040 + 17280 + 560 + 17280


def test_all_ngr_savings():
    cat = load_catalog()
    e = energy_estimate(DEEPCAPS_COUNTS, catalog=cat, default_component="NGR")
    assert e.savings_pct == pytest.approx(28.0, abs=1.5)
    assert e.savings_pct == pytest.approx(100 * (1 - 276 / 391) * 0.9636, abs=0.05)


def test_plan_scales_only_covered_sites():
    cat = load_catalog()
    sites = count_ops_by_site(toy_spec())
    plan = SelectionPlan([PlanEntry("classcaps_s", "mac_outputs", "QKX", 1.0, 0.0736, 29.0)])
    e = energy_estimate(count_ops(toy_spec()), plan=plan, catalog=cat, site_counts=sites)
    saved_pj = sites["classcaps_s"].multiplications * 0.5354 * (1 - 29 / 391)
    assert e.accurate_total_j - e.total_j == pytest.approx(saved_pj * 1e-12, rel=1e-9)


def test_plan_errors():
    cat = load_catalog()
    plan = SelectionPlan([PlanEntry("conv1", "mac_outputs", "NOPE", 1.0, 0.0, 1.0)])
    with pytest.raises(KeyError):
        energy_estimate(count_ops(toy_spec()), plan=plan, catalog=cat, site_counts=count_ops_by_site(toy_spec()))
    with pytest.raises(ValueError):
        energy_estimate(count_ops(toy_spec()), plan=plan)
    with pytest.raises(ValueError):
        energy_estimate(count_ops(toy_spec()), plan=plan, catalog=cat)


@given(counts_st, counts_st)
def test_energy_linear(a, b):
    ea, eb, eab = energy_estimate(a), energy_estimate(b), energy_estimate(a + b)
    assert eab.total_j == pytest.approx(ea.total_j + eb.total_j, rel=1e-12, abs=1e-30)
    for k in eab.breakdown_j:
        assert eab.breakdown_j[k] == pytest.approx(ea.breakdown_j[k] + eb.breakdown_j[k], rel=1e-12, abs=1e-30)


@given(st.lists(st.sampled_from([e.name for e in load_catalog()]), min_size=8, max_size=8))
def test_plan_never_increases_energy(components):
    cat = load_catalog()
    sites = count_ops_by_site(toy_spec())
    plan = SelectionPlan([PlanEntry(s, "", c, 1.0, 0.0, 1.0) for s, c in zip(sorted(sites), components)])
    e = energy_estimate(count_ops(toy_spec()), plan=plan, catalog=cat, site_counts=sites)
    assert e.total_j <= e.accurate_total_j * (1 + 1e-12)


def test_summary_json(tmp_path):
    energy_estimate(DEEPCAPS_COUNTS).save(tmp_path / "e.json")
    raw = json.loads((tmp_path / "e.json").read_text())
    assert set(raw) == {"total_j", "breakdown_j", "share", "accurate_total_j", "savings_pct"}
