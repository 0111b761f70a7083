"""Transducer layout, path enumeration, damage catalog, and spatial splits.

Everything here is pure geometry / bookkeeping over the normalized unit
square: transducer coordinates, the canonical enumeration of measured
pitch-catch paths, the plate-spanning subset used by the forward branch,
and the spatially held-out train/test split definitions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import CatalogError, ConfigError, InvalidLayoutError

# Out-of-domain regression target assigned to pristine samples. Sits just
# outside the closed unit square so "inside the plate" cleanly separates
# damaged from undamaged predictions.
P_UNDAMAGED = np.array([-0.001, -0.001])

SPLIT_NAMES = ("A", "B")
_SPLIT_TEST_LABELS = {
    "A": ("D21", "D22", "D23", "D24"),
    "B": ("D1", "D2", "D3", "D4", "D21", "D22", "D23", "D24"),
}

PRISTINE_PARTITION = (48, 6, 6)  # train / val / test counts
VALIDATION_FRACTION = 0.2  # of train-pool damaged samples, rounded up, >= 2


@dataclass(frozen=True)
class PlateSpec:
    """Physical plate seen through the normalized unit-square domain."""

    side_length_mm: float = 500.0

    def __post_init__(self):
        if self.side_length_mm <= 0:
            raise ConfigError("side_length_mm must be positive")


@dataclass(frozen=True)
class TransducerLayout:
    """Transducer coordinates plus the two boundary-row index sets."""

    coordinates: np.ndarray  # (N, 2) normalized
    top_row: tuple[int, ...]
    bottom_row: tuple[int, ...]

    def __post_init__(self):
        coords = np.asarray(self.coordinates, dtype=float)
        object.__setattr__(self, "coordinates", coords)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise InvalidLayoutError("coordinates must be an (N, 2) array")
        if set(self.top_row) & set(self.bottom_row):
            raise InvalidLayoutError("top and bottom rows must be disjoint")
        n = coords.shape[0]
        for idx in (*self.top_row, *self.bottom_row):
            if not 0 <= idx < n:
                raise InvalidLayoutError(f"row index {idx} outside 0..{n - 1}")
        if np.any(coords < 0.0) or np.any(coords > 1.0):
            raise InvalidLayoutError("transducer coordinates must lie in [0, 1]^2")

    @property
    def n_transducers(self) -> int:
        return int(self.coordinates.shape[0])


@dataclass(frozen=True)
class PathSet:
    """All measured pitch-catch paths as unordered pairs (i, j), i < j,
    in canonical lexicographic order."""

    pairs: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.pairs)

    def index_of(self, i: int, j: int) -> int:
        key = (i, j) if i < j else (j, i)
        try:
            return self.pairs.index(key)
        except ValueError:
            raise CatalogError(f"path {key} not in path set") from None


@dataclass(frozen=True)
class ForwardPathSet:
    """The plate-spanning subset of paths (one endpoint per boundary row).

    ``indices`` gives the position of each forward path within the parent
    PathSet ordering, so targets can be gathered from full-path arrays.
    """

    pairs: tuple[tuple[int, int], ...]
    indices: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class DamageCatalog:
    """Mapping from damage label (e.g. ``"D21"``) to normalized coordinates."""

    entries: dict[str, np.ndarray]

    def __post_init__(self):
        clean: dict[str, np.ndarray] = {}
        for label, coord in self.entries.items():
            arr = np.asarray(coord, dtype=float).reshape(2)
            if np.any(arr < 0.0) or np.any(arr > 1.0):
                raise CatalogError(f"damage {label} lies outside the unit square")
            clean[label] = arr
        object.__setattr__(self, "entries", clean)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.entries.keys())

    def coordinate(self, label: str) -> np.ndarray:
        if label not in self.entries:
            raise CatalogError(f"unknown damage label {label!r}")
        return self.entries[label]


@dataclass(frozen=True)
class SplitSpec:
    """A spatial hold-out split at the damage-label level.

    Per-sample partitioning (including the seeded pristine 48/6/6 shuffle and
    the reserved damaged validation subset) is done by
    :func:`assign_partitions` against a concrete sample list.
    """

    name: str
    test_damage_labels: tuple[str, ...]
    train_damage_labels: tuple[str, ...]
    pristine_partition: tuple[int, int, int] = PRISTINE_PARTITION

    def __post_init__(self):
        if set(self.test_damage_labels) & set(self.train_damage_labels):
            raise ConfigError("train and test damage labels overlap")


@dataclass(frozen=True)
class PartitionAssignment:
    """Sample-id level train/val/test assignment for one (split, seed)."""

    split: SplitSpec
    seed: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def partition_of(self, sample_id: str) -> str:
        if sample_id in self.train_ids:
            return "train"
        if sample_id in self.val_ids:
            return "val"
        if sample_id in self.test_ids:
            return "test"
        raise CatalogError(f"sample {sample_id!r} not assigned")


def enumerate_paths(n: int) -> PathSet:
    """All unordered transducer pairs in lexicographic order.

    For n transducers this yields n(n-1)/2 measured propagation paths; the
    default 12-transducer layout gives 66.
    """
    if n < 2:
        raise InvalidLayoutError(f"need at least 2 transducers, got {n}")
    pairs = tuple((i, j) for i in range(n) for j in range(i + 1, n))
    assert len(pairs) == math.comb(n, 2)
    return PathSet(pairs=pairs)


def select_forward_paths(paths: PathSet, layout: TransducerLayout) -> ForwardPathSet:
    """Keep the paths with one endpoint in each boundary row.

    Order is inherited from the parent PathSet. The default 6+6 layout yields
    the 36 plate-spanning paths supervised by the forward branch.
    """
    top = set(layout.top_row)
    bottom = set(layout.bottom_row)
    if not top or not bottom:
        raise InvalidLayoutError("both boundary rows must be non-empty")
    pairs = []
    indices = []
    for idx, (i, j) in enumerate(paths.pairs):
        endpoints = {i, j}
        if endpoints & top and endpoints & bottom:
            pairs.append((i, j))
            indices.append(idx)
    if not pairs:
        raise InvalidLayoutError("no plate-spanning paths between the two rows")
    return ForwardPathSet(pairs=tuple(pairs), indices=tuple(indices))


def make_split(name: str, catalog: DamageCatalog, seed: int) -> SplitSpec:
    """Build the label-level hold-out split.

    Split A holds out the D21-D24 zone, split B additionally holds out
    D1-D4; everything else forms the damaged training pool. ``seed`` is
    carried by the per-sample assignment (see :func:`assign_partitions`);
    label membership itself is deterministic.
    """
    if name not in SPLIT_NAMES:
        raise ConfigError(f"split must be one of {SPLIT_NAMES}, got {name!r}")
    test_labels = _SPLIT_TEST_LABELS[name]
    for label in test_labels:
        if label not in catalog.entries:
            raise CatalogError(f"catalog missing held-out label {label!r}")
    train_labels = tuple(l for l in catalog.labels if l not in test_labels)
    return SplitSpec(
        name=name,
        test_damage_labels=test_labels,
        train_damage_labels=train_labels,
    )


def assign_partitions(
    split: SplitSpec,
    damaged_ids: dict[str, str],
    pristine_ids: list[str],
    seed: int,
) -> PartitionAssignment:
    """Assign concrete sample ids to train/val/test.

    ``damaged_ids`` maps sample id -> damage label. All samples of a held-out
    label go to test. Of the train-pool damaged samples, 20% (rounded up, at
    least 2) are reserved as the validation subset via a seeded shuffle; the
    pristine samples are partitioned 48/6/6 (scaled down proportionally when
    fewer are available) by an independently seeded shuffle.
    """
    test_label_set = set(split.test_damage_labels)
    pool_ids = sorted(sid for sid, lab in damaged_ids.items() if lab not in test_label_set)
    test_damaged = sorted(sid for sid, lab in damaged_ids.items() if lab in test_label_set)
    for lab in set(damaged_ids.values()):
        if lab not in split.test_damage_labels and lab not in split.train_damage_labels:
            raise CatalogError(f"sample label {lab!r} not covered by split {split.name}")

    rng = np.random.default_rng(seed)
    pool = list(pool_ids)
    rng.shuffle(pool)
    n_val = max(2, math.ceil(VALIDATION_FRACTION * len(pool))) if pool else 0
    val_damaged = sorted(pool[:n_val])
    train_damaged = sorted(pool[n_val:])

    n_train, n_val_p, n_test_p = split.pristine_partition
    total = n_train + n_val_p + n_test_p
    if len(pristine_ids) != total:
        # Scale the 48/6/6 convention to the available pristine count.
        frac = len(pristine_ids) / total
        n_val_p = max(1, round(n_val_p * frac))
        n_test_p = max(1, round(n_test_p * frac))
        n_train = len(pristine_ids) - n_val_p - n_test_p
        if n_train < 0:
            raise ConfigError("too few pristine samples to partition")
    pristine = sorted(pristine_ids)
    rng_p = np.random.default_rng(seed + 1)
    rng_p.shuffle(pristine)
    train_pristine = sorted(pristine[:n_train])
    val_pristine = sorted(pristine[n_train : n_train + n_val_p])
    test_pristine = sorted(pristine[n_train + n_val_p :])

    return PartitionAssignment(
        split=split,
        seed=seed,
        train_ids=tuple(train_damaged + train_pristine),
        val_ids=tuple(val_damaged + val_pristine),
        test_ids=tuple(test_damaged + test_pristine),
    )


def load_layout_file(path: str | Path) -> tuple[TransducerLayout, DamageCatalog, PlateSpec]:
    """Read the layout/catalog metadata JSON shipped with a store or the repo."""
    with open(path) as fh:
        payload = json.load(fh)
    return _layout_from_payload(payload)


def default_layout() -> tuple[TransducerLayout, DamageCatalog, PlateSpec]:
    """The packaged default layout (two rows of 6, 28-entry catalog)."""
    ref = resources.files("wgnet.resources").joinpath("ogw1_layout.json")
    payload = json.loads(ref.read_text())
    return _layout_from_payload(payload)


def _layout_from_payload(payload: dict) -> tuple[TransducerLayout, DamageCatalog, PlateSpec]:
    try:
        layout = TransducerLayout(
            coordinates=np.asarray(payload["transducers"], dtype=float),
            top_row=tuple(payload["top_row"]),
            bottom_row=tuple(payload["bottom_row"]),
        )
        catalog = DamageCatalog(entries={k: np.asarray(v) for k, v in payload["damage"].items()})
    except KeyError as exc:
        raise ConfigError(f"layout metadata missing field {exc}") from exc
    plate = PlateSpec(side_length_mm=float(payload.get("side_length_mm", 500.0)))
    return layout, catalog, plate
