"""Resilience analysis and approximate-component selection for capsule networks.

The flow runs in six steps:

1. split the inference into operation groups (MAC outputs, activations,
   softmax, logits update) and enumerate their sites;
2. sweep noise magnitude per group, one group at a time;
3. mark each group Resilient / NonResilient from its accuracy drop at a
   probe magnitude;
4. sweep each site of the non-resilient groups separately;
5. mark those sites;
6. pick, per site, the lowest-power library component whose noise magnitude
   the site tolerates.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import approx
from .capsnet import Model, evaluate, extract_sites
from .energy import EnergySummary, count_ops, count_ops_by_site, energy_estimate
from .noise import Injector, NoiseSpec
from .sites import GroupId, Site

log = logging.getLogger(__name__)

DEFAULT_NM_GRID = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5)
DEFAULT_THRESHOLD_PP = 1.0
DEFAULT_PROBE_NM = 0.05
CSV_HEADER = ("target_kind", "target_name", "group", "nm", "na", "rep", "accuracy")


class Mark(str, enum.Enum):
    RESILIENT = "Resilient"
    NON_RESILIENT = "NonResilient"


@dataclass(frozen=True, order=True)
class SweepRow:
    target_kind: str  # "group" or "layer"
    target_name: str
    group: str
    nm: float
    na: float
    rep: int
    accuracy: float


@dataclass
class ResilienceReport:
    baseline: float
    rows: list[SweepRow] = field(default_factory=list)
    group_marks: dict[str, Mark] = field(default_factory=dict)
    layer_marks: dict[str, Mark] = field(default_factory=dict)

    def accuracies(self, kind: str, name: str, nm: float) -> list[float]:
        return [r.accuracy for r in self.rows
                if r.target_kind == kind and r.target_name == name and np.isclose(r.nm, nm, rtol=1e-12, atol=0)]

    def drop_pp(self, kind: str, name: str, nm: float) -> float:
        accs = self.accuracies(kind, name, nm)
        if not accs:
            raise ValueError(f"report has no rows for {kind} {name!r} at NM={nm}")
        return 100.0 * (self.baseline - float(np.mean(accs)))

    def targets(self, kind: str) -> list[str]:
        return sorted({r.target_name for r in self.rows if r.target_kind == kind})

    def grid(self, kind: str, name: str) -> list[float]:
        return sorted({r.nm for r in self.rows if r.target_kind == kind and r.target_name == name})

    def curve(self, kind: str, name: str) -> list[tuple[float, float, float, float]]:
        """``(nm, mean, min, max)`` accuracy per grid point, sorted by NM."""
        out = []
        for nm in self.grid(kind, name):
            a = self.accuracies(kind, name, nm)
            out.append((nm, float(np.mean(a)), min(a), max(a)))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in sorted(self.rows):
            w.writerow([r.target_kind, r.target_name, r.group, repr(r.nm), repr(r.na), r.rep, repr(r.accuracy)])
        return buf.getvalue()

    def marks_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "groups": {k: v.value for k, v in sorted(self.group_marks.items())},
            "layers": {k: v.value for k, v in sorted(self.layer_marks.items())},
        }


def read_report_csv(text: str, baseline: float) -> ResilienceReport:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != CSV_HEADER:
        raise ValueError(f"report header must be {','.join(CSV_HEADER)}, got {header}")
    rows = []
    for lineno, rec in enumerate(reader, 2):
        if not rec:
            continue
        try:
            kind, name, group, nm, na, rep, acc = rec
            row = SweepRow(kind, name, GroupId(group).value, float(nm), float(na), int(rep), float(acc))
        except ValueError as exc:
            raise ValueError(f"report line {lineno}: {exc}") from None
        if kind not in ("group", "layer"):
            raise ValueError(f"report line {lineno}: target_kind must be group or layer, got {kind!r}")
        if not 0.0 <= row.accuracy <= 1.0:
            raise ValueError(f"report line {lineno}: accuracy {row.accuracy} outside [0, 1]")
        rows.append(row)
    return ResilienceReport(baseline, rows)


# --------------------------------------------------------------------------
# sweeps


def extract_groups(model: Model) -> list[Site]:
    """Step 1: every injection site of the network, labelled with its group."""
    return extract_sites(model.spec)


def derived_seed(seed: int, target: str, rep: int) -> int:
    """Noise seed of one (target, repetition); shared across the NM grid."""
    ss = np.random.SeedSequence([seed, zlib.crc32(target.encode()), rep])
    return int(ss.generate_state(1)[0])


_WORKER: dict = {}


def _init_worker(model, dataset):
    _WORKER["model"], _WORKER["dataset"] = model, dataset


def _run_job(job):
    kind, name, group, layer, nm, na, rep, seed = job
    injector = Injector([NoiseSpec(GroupId(group), nm, na, seed=seed, layer=layer)])
    acc = evaluate(_WORKER["model"], _WORKER["dataset"], injector)
    return SweepRow(kind, name, group, nm, na, rep, acc)


def _sweep(model, dataset, targets, nm_grid, na, reps, seed, workers) -> list[SweepRow]:
    if not len(nm_grid):
        raise ValueError("noise magnitude grid is empty")
    if reps < 1:
        raise ValueError("need at least one repetition")
    jobs = []
    for kind, name, group, layer in targets:
        for rep in range(reps):
            s = derived_seed(seed, f"{kind}:{name}", rep)
            jobs += [(kind, name, group, layer, float(nm), float(na), rep, s) for nm in nm_grid]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(model, dataset)) as ex:
            rows = list(ex.map(_run_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        _init_worker(model, dataset)
        rows = [_run_job(j) for j in jobs]
        _WORKER.clear()
    return sorted(rows)


def group_sweep(model: Model, dataset, nm_grid=DEFAULT_NM_GRID, na: float = 0.0, reps: int = 3,
                seed: int = 0, workers: int = 1, groups=None) -> ResilienceReport:
    """Step 2: noise on every site of one group at a time, other groups exact."""
    present = {s.group for s in extract_groups(model)}
    groups = [GroupId(g) for g in (groups or GroupId)]
    targets = [("group", g.value, g.value, None) for g in groups if g in present]
    baseline = evaluate(model, dataset)
    return ResilienceReport(baseline, _sweep(model, dataset, targets, nm_grid, na, reps, seed, workers))


def layer_sweep(model: Model, dataset, group, nm_grid=DEFAULT_NM_GRID, na: float = 0.0, reps: int = 3,
                seed: int = 0, workers: int = 1, marks: Mapping[str, Mark] | None = None) -> list[SweepRow]:
    """Step 4: noise on one site of ``group`` at a time."""
    group = GroupId(group)
    if marks is not None and marks.get(group.value) is not Mark.NON_RESILIENT:
        raise ValueError(f"layer-wise analysis is only run for non-resilient groups, {group} is not")
    sites = [s for s in extract_groups(model) if s.group is group]
    if not sites:
        raise ValueError(f"network has no sites in group {group}")
    targets = [("layer", s.name, group.value, s.name) for s in sites]
    return _sweep(model, dataset, targets, nm_grid, na, reps, seed, workers)


def mark_resilient(report: ResilienceReport, threshold_pp: float = DEFAULT_THRESHOLD_PP,
                   probe_nm: float = DEFAULT_PROBE_NM, kind: str = "group") -> dict[str, Mark]:
    """Steps 3 and 5: Resilient iff the mean drop at ``probe_nm`` is <= ``threshold_pp``."""
    marks = {}
    for name in report.targets(kind):
        drop = report.drop_pp(kind, name, probe_nm)
        marks[name] = Mark.RESILIENT if drop <= threshold_pp else Mark.NON_RESILIENT
    return marks


def tolerated_nm(report: ResilienceReport, kind: str, name: str,
                 threshold_pp: float = DEFAULT_THRESHOLD_PP) -> tuple[float, float]:
    """Largest grid NM up to which every measured drop stays within the threshold.

    Returns ``(nm, drop_pp)``; ``(0.0, 0.0)`` when even the smallest NM is too much.
    """
    best = (0.0, 0.0)
    for nm in report.grid(kind, name):
        drop = report.drop_pp(kind, name, nm)
        if drop > threshold_pp:
            break
        best = (nm, drop)
    return best


def site_tolerances(report: ResilienceReport, sites, threshold_pp: float = DEFAULT_THRESHOLD_PP):
    """Tolerated NM and its measured drop for every site.

    Sites of resilient groups inherit the group's tolerance; sites that were
    swept individually use their own.
    """
    out = {}
    for site in sites:
        if site.name in report.targets("layer"):
            out[site.name] = tolerated_nm(report, "layer", site.name, threshold_pp)
        else:
            out[site.name] = tolerated_nm(report, "group", site.group.value, threshold_pp)
    return out


# --------------------------------------------------------------------------
# selection


@dataclass(frozen=True)
class PlanEntry:
    site: str
    group: str
    component: str
    tolerated_nm: float
    component_nm: float
    power_uw: float
    estimated_drop_pp: float = 0.0


@dataclass
class SelectionPlan:
    entries: list[PlanEntry]
    nm_column: str = "modeled"

    def component_for(self, site: str) -> str:
        return next(e.component for e in self.entries if e.site == site)

    def is_sound(self) -> bool:
        return all(e.component_nm <= e.tolerated_nm for e in self.entries)

    def to_json(self) -> str:
        return json.dumps({"nm_column": self.nm_column, "entries": [asdict(e) for e in self.entries]}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SelectionPlan":
        raw = json.loads(text)
        return cls([PlanEntry(**e) for e in raw["entries"]], raw.get("nm_column", "modeled"))


def choose_component(tolerated: float, catalog, nm_column: str = "modeled") -> approx.CatalogEntry:
    """Lowest-power entry with NM within tolerance; ties by area, then name."""
    if not catalog:
        raise ValueError("component catalog is empty")
    approx.exact_entry(catalog)
    fits = [e for e in catalog if e.nm(nm_column) <= tolerated]
    return min(fits, key=lambda e: (e.power_uw, e.area_um2, e.name))


def select_components(tolerated: Mapping[str, float], catalog, *, groups: Mapping[str, str] | None = None,
                      drops: Mapping[str, float] | None = None, nm_column: str = "modeled") -> SelectionPlan:
    """Step 6: one component per site from its tolerated noise magnitude."""
    if not catalog:
        raise ValueError("component catalog is empty")
    entries = []
    for site in sorted(tolerated):
        e = choose_component(tolerated[site], catalog, nm_column)
        entries.append(PlanEntry(
            site=site,
            group=(groups or {}).get(site, ""),
            component=e.name,
            tolerated_nm=float(tolerated[site]),
            component_nm=e.nm(nm_column),
            power_uw=e.power_uw,
            estimated_drop_pp=float((drops or {}).get(site, 0.0)),
        ))
    return SelectionPlan(entries, nm_column)


# --------------------------------------------------------------------------
# pipeline


def default_workers() -> int:
    return os.cpu_count() or 1


@dataclass
class RunConfig:
    seed: int = 0
    nm_grid: tuple[float, ...] = DEFAULT_NM_GRID
    na: float = 0.0
    reps: int = 3
    threshold_pp: float = DEFAULT_THRESHOLD_PP
    probe_nm: float = DEFAULT_PROBE_NM
    catalog_path: str | None = None
    output_dir: str | None = None
    workers: int = 1
    nm_column: str = "modeled"

    def __post_init__(self):
        self.nm_grid = tuple(float(v) for v in self.nm_grid)
        if any(v < 0 for v in self.nm_grid):
            raise ValueError("noise magnitudes must be >= 0")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.probe_nm not in self.nm_grid:
            raise ValueError(f"probe NM {self.probe_nm} is not on the grid {self.nm_grid}")

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(**json.loads(text))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nm_grid"] = list(self.nm_grid)
        return d


@dataclass
class PipelineResult:
    sites: list[Site]
    report: ResilienceReport
    plan: SelectionPlan
    energy: EnergySummary

    def write(self, out_dir, config: RunConfig | None = None) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "report": out / "report.csv",
            "marks": out / "marks.json",
            "plan": out / "plan.json",
            "energy": out / "energy.json",
        }
        paths["report"].write_text(self.report.to_csv())
        marks = self.report.marks_dict()
        marks["sites"] = [{"name": s.name, "layer": s.layer, "group": s.group.value} for s in self.sites]
        if config is not None:
            marks["config"] = config.to_dict()
        paths["marks"].write_text(json.dumps(marks, indent=2) + "\n")
        paths["plan"].write_text(self.plan.to_json())
        self.energy.save(paths["energy"])
        return paths


def run_pipeline(model: Model, dataset, config: RunConfig | None = None) -> PipelineResult:
    cfg = config or RunConfig()
    catalog = approx.load_catalog(cfg.catalog_path)
    sites = extract_groups(model)
    log.info("step 1: %d sites", len(sites))

    report = group_sweep(model, dataset, cfg.nm_grid, cfg.na, cfg.reps, cfg.seed, cfg.workers)
    report.group_marks = mark_resilient(report, cfg.threshold_pp, cfg.probe_nm, "group")
    log.info("step 3: %s", {k: v.value for k, v in report.group_marks.items()})

    for group, mark in sorted(report.group_marks.items()):
        if mark is Mark.NON_RESILIENT:
            report.rows += layer_sweep(model, dataset, group, cfg.nm_grid, cfg.na, cfg.reps,
                                       cfg.seed, cfg.workers, report.group_marks)
    report.rows.sort()
    report.layer_marks = mark_resilient(report, cfg.threshold_pp, cfg.probe_nm, "layer")

    tol = site_tolerances(report, sites, cfg.threshold_pp)
    plan = select_components(
        {k: v[0] for k, v in tol.items()}, catalog,
        groups={s.name: s.group.value for s in sites},
        drops={k: v[1] for k, v in tol.items()},
        nm_column=cfg.nm_column,
    )
    energy = energy_estimate(count_ops(model), plan=plan, catalog=catalog,
                             site_counts=count_ops_by_site(model))
    result = PipelineResult(sites, report, plan, energy)
    if cfg.output_dir:
        result.write(cfg.output_dir, cfg)
    return result
