"""Data model, file formats and patient-level cohort splitting."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

LATERALITIES = ("L", "R")
VIEWS = ("CC", "MLO")
LESION_CLASSES = ("benign", "cancer")
LESION_KINDS = ("mass", "architectural_distortion")
GROUPS = ("normal", "actionable", "benign", "cancer")
# Higher-priority groups are split first; see split_cohort.
GROUP_PRIORITY = ("cancer", "benign", "actionable", "normal")

VOXEL_DTYPES = {"uint16": "<u2", "float32": "<f4"}

CSV_COLUMNS = (
    "patient_id", "study_id", "laterality", "view", "slice",
    "x", "y", "width", "height", "class", "kind",
)


class VolumeKey(NamedTuple):
    patient_id: str
    study_id: str
    laterality: str
    view: str

    @property
    def breast(self) -> tuple[str, str, str]:
        return (self.patient_id, self.study_id, self.laterality)


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned box, top-left origin, in pixel units."""

    x: float
    y: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"box dimensions must be positive, got {self.width}x{self.height}")

    @classmethod
    def from_center(cls, cx: float, cy: float, width: float, height: float) -> "Box2D":
        return cls(cx - width / 2, cy - height / 2, width, height)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.width / 2, self.y + self.height / 2)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    @property
    def area(self) -> float:
        return self.width * self.height

    def scaled(self, factor: float) -> "Box2D":
        return Box2D(self.x * factor, self.y * factor, self.width * factor, self.height * factor)

    def translated(self, dx: float, dy: float) -> "Box2D":
        return Box2D(self.x + dx, self.y + dy, self.width, self.height)


@dataclass(frozen=True)
class VolumeMeta:
    patient_id: str
    study_id: str
    laterality: str
    view: str
    window_center: float
    window_width: float
    slices: int
    rows: int
    cols: int
    scale_factor: int = 1

    def __post_init__(self):
        if self.laterality not in LATERALITIES:
            raise ValueError(f"laterality must be one of {LATERALITIES}, got {self.laterality!r}")
        if self.view not in VIEWS:
            raise ValueError(f"view must be one of {VIEWS}, got {self.view!r}")
        if not self.window_width > 0:
            raise ValueError("window_width must be positive")
        if min(self.slices, self.rows, self.cols) < 1:
            raise ValueError("volume dimensions must be >= 1")
        if self.scale_factor < 1:
            raise ValueError("scale_factor must be >= 1")

    @property
    def key(self) -> VolumeKey:
        return VolumeKey(self.patient_id, self.study_id, self.laterality, self.view)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.slices, self.rows, self.cols)

    @classmethod
    def from_dict(cls, d: dict) -> "VolumeMeta":
        try:
            return cls(
                patient_id=str(d["patient_id"]),
                study_id=str(d["study_id"]),
                laterality=d["laterality"],
                view=d["view"],
                window_center=float(d["window_center"]),
                window_width=float(d["window_width"]),
                slices=int(d["slices"]),
                rows=int(d["rows"]),
                cols=int(d["cols"]),
                scale_factor=int(d.get("scale_factor", 1)),
            )
        except KeyError as e:
            raise ValueError(f"volume meta is missing field {e.args[0]!r}") from None


@dataclass(frozen=True, eq=False)
class Volume:
    meta: VolumeMeta
    voxels: np.ndarray

    def __post_init__(self):
        if self.voxels.shape != self.meta.shape:
            raise ValueError(
                f"voxel array shape {self.voxels.shape} does not match meta {self.meta.shape}"
            )
        self.voxels.flags.writeable = False


@dataclass(frozen=True)
class GroundTruthLesion:
    volume_key: VolumeKey
    box: Box2D
    center_slice: int
    lesion_class: str
    kind: str

    def __post_init__(self):
        if self.lesion_class not in LESION_CLASSES:
            raise ValueError(f"unknown lesion class {self.lesion_class!r}")
        if self.kind not in LESION_KINDS:
            raise ValueError(f"unknown lesion kind {self.kind!r}")
        if self.center_slice < 0:
            raise ValueError("center_slice must be >= 0")


@dataclass(frozen=True)
class Prediction:
    """A scored box.  ``scale_factor`` > 1 marks coordinates on a downscaled grid."""

    volume_key: VolumeKey
    box: Box2D
    center_slice: int
    score: float
    scale_factor: int = 1

    def __post_init__(self):
        if not 0 < self.score <= 1:
            raise ValueError(f"score must be in (0, 1], got {self.score}")

    def to_original(self) -> "Prediction":
        if self.scale_factor == 1:
            return self
        return Prediction(self.volume_key, self.box.scaled(self.scale_factor),
                          self.center_slice, self.score, 1)


@dataclass(frozen=True)
class CohortEntry:
    patient_id: str
    group: str
    study_ids: tuple[str, ...]
    lesion_kinds: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "study_ids", tuple(self.study_ids))
        object.__setattr__(self, "lesion_kinds", tuple(self.lesion_kinds))
        if self.group not in GROUPS:
            raise ValueError(f"unknown group {self.group!r}")
        if not self.study_ids:
            raise ValueError(f"patient {self.patient_id}: study_ids must be non-empty")
        if any(k not in ("mass", "AD") for k in self.lesion_kinds):
            raise ValueError(f"patient {self.patient_id}: lesion kinds must be 'mass' or 'AD'")
        biopsied = self.group in ("benign", "cancer")
        if biopsied != bool(self.lesion_kinds):
            raise ValueError(
                f"patient {self.patient_id}: lesion_kinds must be non-empty exactly "
                "for benign and cancer groups"
            )

    @property
    def masses(self) -> int:
        return self.lesion_kinds.count("mass")


# ---------------------------------------------------------------------------
# Volume container: <stem>.json sidecar + <stem>.raw little-endian voxels


def _volume_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".raw")


def save_volume(volume: Volume, path: str | Path) -> Path:
    """Write ``volume`` and return the sidecar path.

    Integer voxels are stored as uint16, everything else as float32.
    """
    meta_path, raw_path = _volume_paths(path)
    if np.issubdtype(volume.voxels.dtype, np.integer) or volume.voxels.dtype == bool:
        if volume.voxels.size and (volume.voxels.min() < 0 or volume.voxels.max() > 65535):
            raise ValueError("integer voxels out of uint16 range")
        dtype = "uint16"
    else:
        dtype = "float32"
    d = asdict(volume.meta)
    d["dtype"] = dtype
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    meta_path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    raw_path.write_bytes(np.ascontiguousarray(volume.voxels, dtype=VOXEL_DTYPES[dtype]).tobytes())
    return meta_path


def load_volume(path: str | Path) -> Volume:
    meta_path, raw_path = _volume_paths(path)
    try:
        d = json.loads(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValueError(f"missing volume sidecar {meta_path}") from None
    meta = VolumeMeta.from_dict(d)
    dtype = d.get("dtype", "uint16")
    if dtype not in VOXEL_DTYPES:
        raise ValueError(f"unsupported voxel dtype {dtype!r}")
    data = raw_path.read_bytes()
    itemsize = np.dtype(VOXEL_DTYPES[dtype]).itemsize
    expected = meta.slices * meta.rows * meta.cols * itemsize
    if len(data) != expected:
        raise ValueError(
            f"size mismatch: {raw_path} holds {len(data)} bytes, meta implies {expected}"
        )
    voxels = np.frombuffer(data, dtype=VOXEL_DTYPES[dtype]).reshape(meta.shape)
    return Volume(meta, voxels.astype(dtype))


def save_volume_index(metas: Iterable[VolumeMeta], path: str | Path) -> None:
    """Write the JSON list of volume metadata consumed by ``eval --volumes``."""
    Path(path).write_text(
        json.dumps([asdict(m) for m in metas], indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_volume_index(path: str | Path) -> list[VolumeMeta]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(d, dict):
        d = d.get("volumes", [d])
    return [VolumeMeta.from_dict(item) for item in d]


# ---------------------------------------------------------------------------
# Annotation / prediction CSV


def _format_number(value: float) -> str:
    return repr(float(value)) if not float(value).is_integer() else str(int(value))


def _records_to_csv(rows: Iterable[Sequence], with_score: bool, header_lines: Sequence[str]) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS + (("score",) if with_score else ()))
    writer.writerows(rows)
    return buf.getvalue()


def _box_fields(key: VolumeKey, center_slice: int, box: Box2D) -> list[str]:
    return [*key, str(center_slice), *(_format_number(v) for v in (box.x, box.y, box.width, box.height))]


def annotations_to_csv(lesions: Iterable[GroundTruthLesion], header_lines: Sequence[str] = ()) -> str:
    rows = (_box_fields(g.volume_key, g.center_slice, g.box) + [g.lesion_class, g.kind] for g in lesions)
    return _records_to_csv(rows, False, header_lines)


def predictions_to_csv(preds: Iterable[Prediction], header_lines: Sequence[str] = ()) -> str:
    rows = []
    for p in preds:
        p = p.to_original()
        rows.append(_box_fields(p.volume_key, p.center_slice, p.box) + ["", "", repr(float(p.score))])
    return _records_to_csv(rows, True, header_lines)


def save_annotations(lesions: Iterable[GroundTruthLesion], path: str | Path) -> None:
    Path(path).write_text(annotations_to_csv(lesions), encoding="utf-8", newline="")


def save_predictions(preds: Iterable[Prediction], path: str | Path) -> None:
    Path(path).write_text(predictions_to_csv(preds), encoding="utf-8", newline="")


def _read_rows(path: str | Path, required: Sequence[str]):
    with open(path, encoding="utf-8", newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    reader = csv.DictReader(lines)
    missing = [c for c in required if c not in (reader.fieldnames or ())]
    if missing:
        raise ValueError(f"{path}: missing CSV columns {missing}")
    # header is row 1
    for rownum, row in enumerate(reader, start=2):
        yield rownum, row


def _parse_common(row: dict) -> tuple[VolumeKey, Box2D, int]:
    key = VolumeKey(row["patient_id"], row["study_id"], row["laterality"], row["view"])
    if key.laterality not in LATERALITIES or key.view not in VIEWS:
        raise ValueError(f"bad laterality/view {key.laterality!r}/{key.view!r}")
    box = Box2D(float(row["x"]), float(row["y"]), float(row["width"]), float(row["height"]))
    return key, box, int(row["slice"])


def load_annotations(path: str | Path) -> list[GroundTruthLesion]:
    out = []
    for rownum, row in _read_rows(path, CSV_COLUMNS):
        try:
            key, box, center_slice = _parse_common(row)
            out.append(GroundTruthLesion(key, box, center_slice, row["class"], row["kind"]))
        except (ValueError, TypeError) as e:
            raise ValueError(f"{path}: row {rownum}: {e}") from None
    return out


def load_predictions(path: str | Path) -> list[Prediction]:
    out = []
    for rownum, row in _read_rows(path, CSV_COLUMNS + ("score",)):
        try:
            key, box, center_slice = _parse_common(row)
            out.append(Prediction(key, box, center_slice, float(row["score"])))
        except (ValueError, TypeError) as e:
            raise ValueError(f"{path}: row {rownum}: {e}") from None
    return out


# ---------------------------------------------------------------------------
# Cohort split


def _is_counts(spec) -> bool:
    return all(isinstance(v, (int, np.integer)) for v in spec)


def _subset_sizes(spec, n: int, group: str) -> tuple[int, int]:
    """Return (val, test) sizes for a group of ``n`` patients."""
    if len(spec) != 3:
        raise ValueError(f"group {group}: expected (train, val, test) targets")
    if _is_counts(spec):
        if any(v < 0 for v in spec):
            raise ValueError(f"group {group}: counts must be non-negative")
        if sum(spec) > n:
            raise ValueError(f"group {group} has {n} patients, fewer than requested {sum(spec)}")
        return int(spec[1]), int(spec[2])
    if any(v < 0 for v in spec) or sum(spec) > 1 + 1e-9:
        raise ValueError(f"group {group}: proportions must be non-negative and sum to <= 1")
    n_val, n_test = round(n * spec[1]), round(n * spec[2])
    if n_val + n_test > n:
        raise ValueError(f"group {group} has {n} patients, fewer than requested {n_val + n_test}")
    return n_val, n_test


def _balanced_pick(pool: list, k: int, offset: int, score) -> list:
    """Pick ``k`` items from ``pool`` keeping ``offset + sum(score)`` near zero.

    Greedy sign balancing followed by best-swap local search.  ``pool`` order
    breaks ties, so a pre-shuffled pool gives a random but balanced pick.
    """
    remaining = list(pool)
    chosen = []
    total = offset
    for _ in range(k):
        best = min(range(len(remaining)), key=lambda i: abs(total + score(remaining[i])))
        total += score(remaining[best])
        chosen.append(remaining.pop(best))
    while chosen and remaining:
        best_gain, best_swap = 0, None
        for i, a in enumerate(chosen):
            for j, b in enumerate(remaining):
                gain = abs(total) - abs(total - score(a) + score(b))
                if gain > best_gain:
                    best_gain, best_swap = gain, (i, j)
        if best_swap is None:
            break
        i, j = best_swap
        total += score(remaining[j]) - score(chosen[i])
        chosen[i], remaining[j] = remaining[j], chosen[i]
    return chosen


def split_cohort(entries: Sequence[CohortEntry], fractions, seed: int):
    """Split patients into (train, val, test) lists of patient ids.

    ``fractions`` is either one ``(train, val, test)`` triple applied to
    every group or a mapping ``group -> triple``.  Triples of ints are
    patient counts, triples of floats are proportions.  Validation and test
    sizes are honoured exactly; the training set receives every remaining
    patient.  With proportions, patients placed through an earlier group may
    push a later group's subset above its share; with counts that is an error.

    A patient may appear in several groups (one entry per group).  Groups
    are split in the order cancer, benign, actionable, normal; a patient
    already placed by an earlier group counts toward the targets of later
    groups.  Within benign and cancer groups the validation and test picks
    are balanced so their mass fraction tracks the group's global fraction.
    """
    by_group: dict[str, dict[str, CohortEntry]] = {g: {} for g in GROUPS}
    studies_seen: dict[str, str] = {}
    for e in entries:
        if e.patient_id in by_group[e.group]:
            raise ValueError(f"patient {e.patient_id} listed twice in group {e.group}")
        by_group[e.group][e.patient_id] = e
        for s in e.study_ids:
            owner = studies_seen.setdefault(s, e.patient_id)
            if owner != e.patient_id:
                raise ValueError(f"study {s} belongs to patients {owner} and {e.patient_id}")

    placement: dict[str, str] = {}
    for gi, group in enumerate(GROUP_PRIORITY):
        members = by_group[group]
        if not members:
            continue
        spec = fractions.get(group, (1.0, 0.0, 0.0)) if isinstance(fractions, dict) else fractions
        n_val, n_test = _subset_sizes(spec, len(members), group)
        ids = sorted(members)
        pre = {s: [p for p in ids if placement.get(p) == s] for s in ("train", "val", "test")}
        need_val, need_test = n_val - len(pre["val"]), n_test - len(pre["test"])
        if need_val < 0 or need_test < 0:
            if _is_counts(spec):
                raise ValueError(
                    f"group {group}: patients placed via other groups exceed the requested counts"
                )
            # a proportion is a target share; pre-placed patients may overshoot it
            need_val, need_test = max(need_val, 0), max(need_test, 0)
        pool = [p for p in ids if p not in placement]
        rng = np.random.default_rng([seed, gi])
        pool = [pool[i] for i in rng.permutation(len(pool))]

        if group in ("benign", "cancer"):
            masses = sum(members[p].masses for p in ids)
            lesions = sum(len(members[p].lesion_kinds) for p in ids)

            # integer deviation of a patient from the global mass fraction, scaled by `lesions`
            def score(p):
                e = members[p]
                return e.masses * lesions - len(e.lesion_kinds) * masses

            picks = {}
            for subset, need in (("val", need_val), ("test", need_test)):
                offset = sum(score(p) for p in pre[subset])
                picks[subset] = _balanced_pick(pool, need, offset, score)
                chosen = set(picks[subset])
                pool = [p for p in pool if p not in chosen]
            val, test = picks["val"], picks["test"]
        else:
            val, test = pool[:need_val], pool[need_val:need_val + need_test]
            pool = pool[need_val + need_test:]
        for p in val:
            placement[p] = "val"
        for p in test:
            placement[p] = "test"
        for p in pool:
            placement[p] = "train"

    out = {"train": [], "val": [], "test": []}
    for p in sorted(placement):
        out[placement[p]].append(p)
    return out["train"], out["val"], out["test"]


def mass_fraction_deviation(entries: Sequence[CohortEntry], subset: Iterable[str], group: str) -> float:
    """|masses - global_fraction * lesions| over ``subset``, in lesions."""
    members = {e.patient_id: e for e in entries if e.group == group}
    lesions = sum(len(e.lesion_kinds) for e in members.values())
    if lesions == 0:
        return 0.0
    frac = sum(e.masses for e in members.values()) / lesions
    chosen = [members[p] for p in subset if p in members]
    return abs(sum(e.masses for e in chosen) - frac * sum(len(e.lesion_kinds) for e in chosen))


def load_cohort(path: str | Path) -> list[CohortEntry]:
    """Read a JSON list of ``{patient_id, group, study_ids, lesion_kinds}``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [
        CohortEntry(str(d["patient_id"]), d["group"], tuple(d["study_ids"]),
                    tuple(d.get("lesion_kinds", ())))
        for d in data
    ]
