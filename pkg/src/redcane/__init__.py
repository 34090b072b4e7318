"""Resilience analysis and approximate-component selection for capsule networks."""
from .approx import (
    CatalogEntry,
    ErrorProfile,
    MultiplierModel,
    exact_multiplier,
    gaussian_likeness,
    load_catalog,
    profile,
    to_nm_na,
    truncated_multiplier,
)
from .capsnet import (
    LayerKind,
    LayerSpec,
    Model,
    NetworkSpec,
    TrainConfig,
    build_network,
    dynamic_routing,
    evaluate,
    forward,
    margin_loss,
    toy_spec,
    train,
)
from .data import LabeledDataset, digits_split, downsample, load_digits, load_idx
from .energy import DEEPCAPS_COUNTS, OpCounts, UnitEnergies, count_ops, energy_estimate
from .methodology import (
    Mark,
    ResilienceReport,
    RunConfig,
    SelectionPlan,
    extract_groups,
    group_sweep,
    layer_sweep,
    mark_resilient,
    run_pipeline,
    select_components,
)
from .noise import Injector, NoiseSpec, QuantParams, dequantize, fixed_point_conv, inject, quantize
from .sites import GroupId, Site
from .tensor import Range, conv2d, matmul, range_of, relu, softmax_axis, squash

__version__ = "0.1.0"
