"""Operation counts and computational-path energy of capsule network inference.

Unit energies are per-operation costs of 8-bit fixed-point units synthesized
in 45 nm. Memory traffic is not modelled.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .approx import exact_entry
from .capsnet import LayerKind, Model, NetworkSpec

OP_KINDS = ("additions", "multiplications", "divisions", "exponentials", "square_roots")


@dataclass(frozen=True)
class OpCounts:
    additions: int = 0
    multiplications: int = 0
    divisions: int = 0
    exponentials: int = 0
    square_roots: int = 0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} count must be >= 0")

    def __add__(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(*(getattr(self, k) + getattr(other, k) for k in OP_KINDS))

    def scaled(self, n: int) -> "OpCounts":
        return OpCounts(*(getattr(self, k) * n for k in OP_KINDS))

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


@dataclass(frozen=True)
class UnitEnergies:
    """Energy per operation in pJ."""

    additions: float = 0.0202
    multiplications: float = 0.5354
    divisions: float = 1.0717
    exponentials: float = 0.1578
    square_roots: float = 0.7805

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"unit energy for {f.name} must be > 0")


# DeepCaps inference on CIFAR-10 (computational path only)
DEEPCAPS_COUNTS = OpCounts(
    additions=1_910_000_000,
    multiplications=2_150_000_000,
    divisions=4_170_000,
    exponentials=175_000,
    square_roots=502_000,
)


def _squash_ops(num_caps: int, dim: int) -> OpCounts:
    # |s|^2, sqrt, 1 + |s|^2, two divisions for the scale factor, scale s
    return OpCounts(additions=num_caps * dim, multiplications=num_caps * 2 * dim,
                    divisions=num_caps * 2, square_roots=num_caps)


def _conv_ops(outputs: int, taps: int) -> OpCounts:
    return OpCounts(additions=outputs * (taps - 1), multiplications=outputs * taps)


def count_ops_by_site(spec_or_model) -> dict[str, OpCounts]:
    """Per-sample operation counts attributed to the site that produces them.

    Convolutions cost ``k*k*Cin`` multiplications and ``k*k*Cin - 1``
    additions per output element (bias and ReLU are free). Per routing
    iteration: one exp and one division per coupling coefficient plus
    ``num_out - 1`` additions per input capsule (softmax), a weighted sum per
    output capsule (``s``), a squash, and one dot product accumulated into
    each logit. Class scores add one capsule length per class.
    """
    spec: NetworkSpec = spec_or_model.spec if isinstance(spec_or_model, Model) else spec_or_model
    out: dict[str, OpCounts] = {}
    prev = spec.input_shape
    for layer, shape in zip(spec.layers, spec.shapes()):
        n = layer.name
        if layer.kind is LayerKind.CLASS_CAPS:
            din = prev[-1]
            i = 1
            for d in prev[:-1]:
                i *= d
            j, dout = shape
            r = layer.routing_iters
            out[f"{n}_uhat"] = OpCounts(additions=i * j * dout * (din - 1), multiplications=i * j * dout * din)
            out[f"{n}_softmax"] = OpCounts(additions=i * (j - 1), divisions=i * j, exponentials=i * j).scaled(r)
            out[f"{n}_s"] = OpCounts(additions=(i - 1) * j * dout, multiplications=i * j * dout).scaled(r)
            sq = _squash_ops(j, dout).scaled(r)
            if layer is spec.layers[-1]:
                sq = sq + OpCounts(additions=j * (dout - 1), multiplications=j * dout, square_roots=j)
            out[f"{n}_squash"] = sq
            out[f"{n}_logits"] = OpCounts(additions=i * j * dout, multiplications=i * j * dout).scaled(r)
        else:
            cin = prev[2] if len(prev) == 3 else prev[2] * prev[3]
            taps = layer.kernel_size ** 2 * cin
            if layer.kind is LayerKind.CONV2D:
                h, w, c = shape
                out[n] = _conv_ops(h * w * c, taps)
            else:
                h, w, t, d = shape
                out[f"{n}_conv"] = _conv_ops(h * w * t * d, taps)
                out[f"{n}_squash"] = _squash_ops(h * w * t, d)
        prev = shape
    return out


def count_ops(spec_or_model) -> OpCounts:
    total = OpCounts()
    for c in count_ops_by_site(spec_or_model).values():
        total = total + c
    return total


@dataclass
class EnergySummary:
    total_j: float
    breakdown_j: dict[str, float]
    share: dict[str, float]
    accurate_total_j: float
    savings_pct: float

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _mult_scale(name, catalog_by_name, exact_power):
    if name not in catalog_by_name:
        raise KeyError(f"component {name!r} is not in the catalog")
    return catalog_by_name[name].power_uw / exact_power


def energy_estimate(counts: OpCounts, units: UnitEnergies | None = None, plan=None, catalog=None, *,
                    site_counts: dict[str, OpCounts] | None = None,
                    default_component: str | None = None) -> EnergySummary:
    """Energy of one inference (or of whatever ``counts`` covers).

    With a ``plan`` (a ``SelectionPlan``) and ``site_counts`` every site's
    multiplications are costed at the chosen component's power relative to
    the exact catalog component. ``default_component`` applies to the
    multiplications no plan entry covers.
    """
    units = units or UnitEnergies()
    pj = {k: getattr(counts, k) * getattr(units, k) for k in OP_KINDS}
    accurate = sum(pj.values())
    if plan is not None or default_component is not None:
        if not catalog:
            raise ValueError("a catalog is needed to cost approximate components")
        by_name = {e.name: e for e in catalog}
        exact_power = exact_entry(catalog).power_uw
        covered = 0
        mult_pj = 0.0
        if plan is not None:
            if site_counts is None:
                raise ValueError("per-site counts are needed to apply a selection plan")
            for entry in plan.entries:
                muls = site_counts.get(entry.site, OpCounts()).multiplications
                covered += muls
                mult_pj += muls * units.multiplications * _mult_scale(entry.component, by_name, exact_power)
        rest = counts.multiplications - covered
        scale = _mult_scale(default_component, by_name, exact_power) if default_component else 1.0
        pj["multiplications"] = mult_pj + rest * units.multiplications * scale
    total = sum(pj.values())
    return EnergySummary(
        total_j=total * 1e-12,
        breakdown_j={k: v * 1e-12 for k, v in pj.items()},
        share={k: (v / total if total else 0.0) for k, v in pj.items()},
        accurate_total_j=accurate * 1e-12,
        savings_pct=(100.0 * (1 - total / accurate) if accurate else 0.0),
    )
