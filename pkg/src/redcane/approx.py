"""Behavioral 8-bit unsigned approximate multipliers and their error profiles.

The arithmetic error of a multiplier is ``P'(a, b) - P(a, b)`` over a set of
operand pairs. Profiles are taken for a single multiplier and for chains of
multiply-accumulate units (the error of a chain is the sum of the per-product
errors), which mimics the accumulated error of 3x3 and 9x9 convolutions.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .tensor import Range

WORDLENGTH = 8
MAX_OPERAND = (1 << WORDLENGTH) - 1
LUT_SIZE = 1 << (2 * WORDLENGTH)
DEFAULT_CHAINS = (1, 9, 81)
DEFAULT_CHAIN_SAMPLES = 100_000
HIST_BINS = 64
GAUSSIAN_THRESHOLD = 0.05


# --------------------------------------------------------------------------
# multipliers


@dataclass(frozen=True, eq=False)
class MultiplierModel:
    """An 8x8 -> 16 bit unsigned multiplier.

    kind is one of ``exact``, ``operand_truncate`` (``k`` least significant
    bits of both operands zeroed) or ``lut`` (``table[a * 256 + b]``).
    """

    name: str
    kind: str = "exact"
    k: int = 0
    table: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("exact", "operand_truncate", "lut"):
            raise ValueError(f"unknown multiplier kind {self.kind!r}")
        if self.kind == "operand_truncate" and not 0 <= self.k <= WORDLENGTH:
            raise ValueError(f"truncation width must be in [0, {WORDLENGTH}], got {self.k}")
        if self.kind == "lut":
            if self.table is None or self.table.shape != (LUT_SIZE,):
                raise ValueError(f"lut multiplier needs a {LUT_SIZE}-entry product table")

    def products(self, a, b) -> np.ndarray:
        """Vectorized approximate products of uint8 operand arrays."""
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        if a.size and (a.min() < 0 or a.max() > MAX_OPERAND or b.min() < 0 or b.max() > MAX_OPERAND):
            raise ValueError("multiplier operands must be in [0, 255]")
        if self.kind == "exact":
            return a * b
        if self.kind == "operand_truncate":
            return ((a >> self.k) << self.k) * ((b >> self.k) << self.k)
        return self.table[a * 256 + b].astype(np.int64)

    def full_table(self) -> np.ndarray:
        a, b = np.divmod(np.arange(LUT_SIZE), 256)
        return self.products(a, b).astype(np.uint16)


def exact_multiplier() -> MultiplierModel:
    return MultiplierModel("exact", "exact")


def truncated_multiplier(k: int) -> MultiplierModel:
    return MultiplierModel(f"trunc{k}", "operand_truncate", k=k)


def lut_multiplier(table, name: str = "lut") -> MultiplierModel:
    table = np.asarray(table)
    if table.shape != (LUT_SIZE,):
        raise ValueError(f"product table must have {LUT_SIZE} entries, got shape {table.shape}")
    if table.min() < 0 or table.max() > 0xFFFF:
        raise ValueError("product table entries must fit in 16 bits")
    return MultiplierModel(name, "lut", table=table.astype(np.uint16))


def load_lut(path, name: str | None = None) -> MultiplierModel:
    """Load a raw 131,072-byte little-endian uint16 product table."""
    raw = Path(path).read_bytes()
    if len(raw) != 2 * LUT_SIZE:
        raise ValueError(f"{path}: expected {2 * LUT_SIZE} bytes, found {len(raw)}")
    return lut_multiplier(np.frombuffer(raw, dtype="<u2"), name or Path(path).stem)


def save_lut(model: MultiplierModel, path) -> None:
    Path(path).write_bytes(model.full_table().astype("<u2").tobytes())


def parse_multiplier(text: str) -> MultiplierModel:
    """Parse ``exact``, ``truncK`` / ``truncate:K`` or ``lut:PATH``."""
    if text == "exact":
        return exact_multiplier()
    if text.startswith("lut:"):
        return load_lut(text[4:])
    for prefix in ("truncate:", "trunc"):
        if text.startswith(prefix):
            return truncated_multiplier(int(text[len(prefix):]))
    raise ValueError(f"unknown multiplier {text!r}; use exact, truncK, truncate:K or lut:PATH")


def multiply(model: MultiplierModel, a: int, b: int) -> int:
    return int(model.products(a, b))


# --------------------------------------------------------------------------
# input sources


@dataclass(frozen=True, eq=False)
class InputSource:
    """Where operand pairs come from.

    ``uniform_exhaustive`` enumerates all 65,536 pairs for single products and
    draws uniform pairs for chains; ``uniform_random`` draws ``n`` uniform
    pairs; ``empirical`` resamples observed ``(a, b)`` pairs.
    """

    kind: str
    n: int = 0
    pairs: np.ndarray | None = field(default=None, repr=False)

    def single_pairs(self, rng) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "uniform_exhaustive":
            a, b = np.divmod(np.arange(LUT_SIZE), 256)
            return a, b
        if self.kind == "uniform_random":
            ab = rng.integers(0, 256, size=(self.n, 2))
            return ab[:, 0], ab[:, 1]
        return self.pairs[:, 0], self.pairs[:, 1]

    def chain_pairs(self, rng, chains: int, length: int) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "empirical":
            idx = rng.integers(0, len(self.pairs), size=(chains, length))
            return self.pairs[idx, 0], self.pairs[idx, 1]
        ab = rng.integers(0, 256, size=(chains, length, 2))
        return ab[..., 0], ab[..., 1]


def uniform_exhaustive() -> InputSource:
    return InputSource("uniform_exhaustive")


def uniform_random(n: int) -> InputSource:
    if n < 1:
        raise ValueError("uniform_random needs n >= 1")
    return InputSource("uniform_random", n=n)


def empirical(pairs) -> InputSource:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise ValueError("empirical input source is empty")
    if pairs.min() < 0 or pairs.max() > MAX_OPERAND:
        raise ValueError("empirical operand pairs must be in [0, 255]")
    return InputSource("empirical", pairs=pairs)


# --------------------------------------------------------------------------
# profiles


class RunningStats:
    """Single-pass mean/variance, merged chunk by chunk (Chan et al.)."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.min = math.inf
        self.max = -math.inf

    def update(self, values) -> None:
        values = np.asarray(values, dtype=np.float64).ravel()
        n = values.size
        if n == 0:
            return
        mean = values.mean()
        m2 = ((values - mean) ** 2).sum()
        total = self.count + n
        delta = mean - self.mean
        self.mean += delta * n / total
        self.m2 += m2 + delta * delta * self.count * n / total
        self.count = total
        self.min = min(self.min, float(values.min()))
        self.max = max(self.max, float(values.max()))

    @property
    def std(self) -> float:
        return math.sqrt(self.m2 / self.count) if self.count else 0.0


@dataclass
class ErrorProfile:
    """Distribution of the accumulated error of a MAC chain, in product units."""

    chain_length: int
    count: int
    mean: float
    std: float
    min: float
    max: float
    hist: list[int]
    bin_edges: list[float]

    @classmethod
    def from_samples(cls, deltas, chain_length: int = 1, chunk: int = 1 << 14) -> "ErrorProfile":
        deltas = np.asarray(deltas, dtype=np.float64).ravel()
        if deltas.size == 0:
            raise ValueError("cannot profile an empty error sample")
        stats = RunningStats()
        for start in range(0, deltas.size, chunk):
            stats.update(deltas[start : start + chunk])
        hist, edges = np.histogram(deltas, bins=HIST_BINS, range=(stats.min, stats.max))
        return cls(
            chain_length=chain_length,
            count=stats.count,
            mean=stats.mean,
            std=stats.std,
            min=stats.min,
            max=stats.max,
            hist=hist.tolist(),
            bin_edges=edges.tolist(),
        )

    def to_dict(self) -> dict:
        return asdict(self)


def error_samples(model: MultiplierModel, source: InputSource, chain_length: int,
                  n_chains: int = DEFAULT_CHAIN_SAMPLES, rng=None) -> np.ndarray:
    """Raw accumulated errors; one value per product (chain 1) or per chain."""
    rng = np.random.default_rng(rng)
    if chain_length == 1:
        a, b = source.single_pairs(rng)
        return model.products(a, b) - a.astype(np.int64) * b
    a, b = source.chain_pairs(rng, n_chains, chain_length)
    return (model.products(a, b) - a.astype(np.int64) * b).sum(axis=1)


def profile(model: MultiplierModel, inputs: InputSource, chain_lengths=DEFAULT_CHAINS,
            n_chains: int = DEFAULT_CHAIN_SAMPLES, seed: int = 0) -> dict[int, ErrorProfile]:
    """Error profile per chain length.

    Each chain length gets its own RNG stream derived from ``seed`` so the
    result for one length does not depend on which other lengths are asked for.
    """
    out = {}
    for length in sorted(set(chain_lengths)):
        if length < 1:
            raise ValueError(f"chain length must be >= 1, got {length}")
        rng = np.random.default_rng([seed, length])
        out[length] = ErrorProfile.from_samples(
            error_samples(model, inputs, length, n_chains, rng), chain_length=length
        )
    return out


def to_nm_na(prof: ErrorProfile, rng: Range) -> tuple[float, float]:
    """Return ``(NA, NM)``: mean and std of the error scaled by the value range."""
    if rng.span <= 0:
        raise ValueError("noise magnitude is undefined for a zero-width range")
    return prof.mean / rng.span, prof.std / rng.span


PRODUCT_RANGE = Range(0.0, float(MAX_OPERAND * MAX_OPERAND))


@dataclass(frozen=True)
class GaussianFit:
    is_gaussian_like: bool
    score: float


def gaussian_likeness(prof: ErrorProfile, threshold: float = GAUSSIAN_THRESHOLD) -> GaussianFit:
    """Largest gap between the profile's empirical CDF and N(mean, std).

    The empirical CDF is evaluated at the histogram bin edges. A zero-variance
    profile is Gaussian-like by convention.
    """
    if prof.count < 1000:
        raise ValueError(f"need at least 1000 samples, profile has {prof.count}")
    if prof.std == 0:
        return GaussianFit(True, 0.0)
    edges = np.asarray(prof.bin_edges)
    ecdf = np.concatenate([[0.0], np.cumsum(prof.hist) / prof.count])
    gauss = ndtr((edges - prof.mean) / prof.std)
    # the left edge is the sample minimum; everything strictly below it has ECDF 0
    score = float(np.max(np.abs(ecdf - gauss)))
    return GaussianFit(score <= threshold, score)


# --------------------------------------------------------------------------
# component catalog


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    power_uw: float
    area_um2: float
    na_modeled: float
    nm_modeled: float
    na_real: float
    nm_real: float

    def __post_init__(self):
        if self.power_uw <= 0 or self.area_um2 <= 0:
            raise ValueError(f"{self.name}: power and area must be positive")
        if self.nm_modeled < 0 or self.nm_real < 0:
            raise ValueError(f"{self.name}: noise magnitude must be >= 0")

    def nm(self, column: str = "modeled") -> float:
        return self.nm_modeled if column == "modeled" else self.nm_real


class CatalogError(ValueError):
    pass


_CATALOG_FIELDS = ("name", "power_uw", "area_um2", "na_modeled", "nm_modeled", "na_real", "nm_real")


def parse_catalog(text: str, source: str = "<catalog>") -> list[CatalogEntry]:
    if not text.strip():
        return []
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CatalogError(f"{source}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, list):
        raise CatalogError(f"{source}: line 1: expected a JSON array of entries")
    lines = text.splitlines()
    entries = []
    for i, item in enumerate(raw):
        name = item.get("name") if isinstance(item, dict) else None
        lineno = _line_of(lines, f'"{name}"') if name else None
        where = f"{source}: line {lineno}" if lineno else f"{source}: entry {i}"
        if not isinstance(item, dict):
            raise CatalogError(f"{where}: entry is not an object")
        missing = [f for f in _CATALOG_FIELDS if f not in item]
        if missing:
            raise CatalogError(f"{where}: missing field(s) {', '.join(missing)}")
        try:
            entries.append(CatalogEntry(str(item["name"]), *(float(item[f]) for f in _CATALOG_FIELDS[1:])))
        except (TypeError, ValueError) as exc:
            raise CatalogError(f"{where}: {exc}") from None
    return entries


def _line_of(lines, needle):
    for n, line in enumerate(lines, 1):
        if needle in line:
            return n
    return None


def load_catalog(path=None) -> list[CatalogEntry]:
    """Read a catalog JSON file; ``None`` loads the bundled EvoApprox8B subset."""
    if path is None:
        text = resources.files("redcane._data").joinpath("evoapprox8b_mul8u.json").read_text()
        return parse_catalog(text, "evoapprox8b_mul8u.json")
    return parse_catalog(Path(path).read_text(), str(path))


def save_catalog(entries, path) -> None:
    Path(path).write_text(json.dumps([asdict(e) for e in entries], indent=1) + "\n")


def exact_entry(catalog) -> CatalogEntry:
    zero = [e for e in catalog if e.nm_modeled == 0 and e.na_modeled == 0]
    if not zero:
        raise ValueError("catalog has no zero-noise (exact) component")
    return max(zero, key=lambda e: (e.power_uw, e.name))
