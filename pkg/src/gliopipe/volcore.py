"""Volume and mask containers, GVOL file I/O and the synthetic case generator.

Arrays are held as ``(nz, ny, nx)`` C-ordered numpy arrays so the flat
memory layout is x-fastest, which is also the on-disk order.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

CLASS_NAMES = ("background", "necrosis", "edema", "enhancing", "non_enhancing")
DEFAULT_MODALITIES = ("t1ce", "flair", "t2")
MIN_SYNTH_DIM = 16


class Stage(str, enum.Enum):
    RAW = "raw"
    FUSED = "fused"
    PREPROCESSED = "preprocessed"


class Grade(str, enum.Enum):
    LGG = "LGG"
    HGG = "HGG"


class GvolError(ValueError):
    """Malformed or inconsistent GVOL header/payload."""


def _as_zyx(data, dims):
    nx, ny, nz = dims
    return np.asarray(data).reshape(nz, ny, nx)


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense 3D scalar field. ``data`` has shape ``(nz, ny, nx)``."""

    data: np.ndarray
    stage: Stage = Stage.RAW

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume contains non-finite intensities")
        stage = Stage(self.stage)
        if stage is Stage.PREPROCESSED and data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("preprocessed volume intensities must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "stage", stage)

    @classmethod
    def from_flat(cls, flat, dims, stage=Stage.RAW):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != int(np.prod(dims)):
            raise ValueError(f"data length {flat.size} != prod(dims) {int(np.prod(dims))}")
        return cls(_as_zyx(flat, dims), stage)

    @property
    def dims(self):
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def flat(self):
        return self.data.ravel()

    def with_data(self, data, stage=None):
        return Volume(data, self.stage if stage is None else stage)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.stage == other.stage and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class LabelMask:
    labels: np.ndarray
    class_names: tuple = CLASS_NAMES

    def __post_init__(self):
        labels = np.array(self.labels, order="C")
        if labels.ndim != 3:
            raise ValueError("mask must be 3D")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise ValueError(f"labels must lie in [0, {len(self.class_names) - 1}]")
        labels = labels.astype(np.uint8)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def dims(self):
        nz, ny, nx = self.labels.shape
        return (nx, ny, nz)

    @property
    def n_classes(self):
        return len(self.class_names)

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        return self.class_names == other.class_names and np.array_equal(self.labels, other.labels)


@dataclass(frozen=True)
class CaseRecord:
    modalities: dict
    mask: LabelMask
    grade: Grade | None = None

    def __post_init__(self):
        dims = {v.dims for v in self.modalities.values()}
        if len(dims) != 1:
            raise ValueError(f"modality volumes disagree on dims: {sorted(dims)}")
        if self.mask.dims not in dims:
            raise ValueError("mask dims do not match modality dims")
        if self.grade is not None:
            object.__setattr__(self, "grade", Grade(self.grade))

    @property
    def dims(self):
        return self.mask.dims

    def __eq__(self, other):
        if not isinstance(other, CaseRecord):
            return NotImplemented
        return (
            list(self.modalities) == list(other.modalities)
            and all(self.modalities[k] == other.modalities[k] for k in self.modalities)
            and self.mask == other.mask
            and self.grade == other.grade
        )


# ---------------------------------------------------------------------------
# GVOL v1
# ---------------------------------------------------------------------------

_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


def _header_paths(path):
    path = Path(path)
    if path.suffix != ".gvol":
        path = path.with_suffix(".gvol")
    return path, path.with_suffix(".raw")


def _write_gvol(path, flat, dims, dtype, extra):
    header_path, raw_path = _header_paths(path)
    lines = [
        "format = GVOL",
        "version = 1",
        "dims = {},{},{}".format(*dims),
        f"dtype = {dtype}",
        "order = x-fastest",
    ]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    lines.append(f"data = {raw_path.name}")
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    raw_path.write_bytes(np.ascontiguousarray(flat, dtype=_DTYPES[dtype]).tobytes())
    return header_path


def read_gvol_header(path):
    header_path, _ = _header_paths(path)
    if not header_path.exists():
        raise FileNotFoundError(header_path)
    fields = {}
    for lineno, line in enumerate(header_path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise GvolError(f"{header_path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key] = value
    if fields.get("format") != "GVOL" or fields.get("version") != "1":
        raise GvolError(f"{header_path}: not a GVOL v1 header")
    if fields.get("order") != "x-fastest":
        raise GvolError(f"{header_path}: unsupported order {fields.get('order')!r}")
    if fields.get("dtype") not in _DTYPES:
        raise GvolError(f"{header_path}: unsupported dtype {fields.get('dtype')!r}")
    try:
        dims = tuple(int(s) for s in fields["dims"].split(","))
    except (KeyError, ValueError):
        raise GvolError(f"{header_path}: bad or missing dims") from None
    if len(dims) != 3 or min(dims) < 1:
        raise GvolError(f"{header_path}: dims must be three positive integers")
    fields["dims"] = dims
    return header_path, fields


def _read_payload(path):
    header_path, fields = read_gvol_header(path)
    raw_path = header_path.parent / fields.get("data", header_path.with_suffix(".raw").name)
    if not raw_path.exists():
        raise FileNotFoundError(raw_path)
    dtype = _DTYPES[fields["dtype"]]
    raw = raw_path.read_bytes()
    n = int(np.prod(fields["dims"]))
    if len(raw) != n * dtype.itemsize:
        raise GvolError(
            f"{raw_path}: size mismatch, header dims {fields['dims']} need "
            f"{n * dtype.itemsize} bytes, file has {len(raw)}"
        )
    return fields, np.frombuffer(raw, dtype=dtype)


def save_volume(v: Volume, path):
    """Write ``v`` as GVOL v1 (header + little-endian float32 payload)."""
    return _write_gvol(path, v.flat(), v.dims, "f32le", {"stage": v.stage.value})


def load_volume(path) -> Volume:
    fields, flat = _read_payload(path)
    if fields["dtype"] != "f32le":
        raise GvolError(f"{path}: expected dtype f32le for a volume")
    if not np.isfinite(flat).all():
        raise GvolError(f"{path}: payload contains non-finite values")
    stage = fields.get("stage", Stage.RAW.value)
    return Volume.from_flat(flat.astype(np.float64), fields["dims"], Stage(stage))


def save_mask(m: LabelMask, path):
    return _write_gvol(path, m.labels.ravel(), m.dims, "u8",
                       {"classes": ",".join(m.class_names)})


def load_mask(path) -> LabelMask:
    fields, flat = _read_payload(path)
    if fields["dtype"] != "u8":
        raise GvolError(f"{path}: expected dtype u8 for a mask")
    names = tuple(fields["classes"].split(",")) if "classes" in fields else CLASS_NAMES
    return LabelMask(_as_zyx(flat.copy(), fields["dims"]), names)


def minmax_normalize(v: Volume, stage: Stage | None = None) -> Volume:
    """Affine rescale to [0, 1]; a constant volume maps to all zeros."""
    lo, hi = v.data.min(), v.data.max()
    if hi > lo:
        out = (v.data - lo) / (hi - lo)
    else:
        out = np.zeros_like(v.data)
    return Volume(out, v.stage if stage is None else stage)


# ---------------------------------------------------------------------------
# synthetic cases
# ---------------------------------------------------------------------------

# Generator constants. Radii of the nested shells are fractions of the outer
# (edema) radius; intensities are per-modality tissue means before texture
# and noise.
SYNTH = {
    "head_radius": 0.47,             # fraction of each axis extent
    "tumor_radius": (0.30, 0.36),    # outer radius, fraction of min(dims)
    "tumor_anisotropy": (0.9, 1.1),  # per-axis radius multiplier
    "center_jitter": 0.06,           # fraction of each axis extent
    "shell_fraction": {
        "non_enhancing": 0.78,
        "enhancing": 0.60,
        "necrosis": {Grade.LGG: 0.22, Grade.HGG: 0.38},
    },
    "intensity": {
        # tissue:      (t1ce, flair, t2)
        "brain":         (0.35, 0.35, 0.35),
        "edema":         (0.45, 0.85, 0.65),
        "non_enhancing": (0.40, 0.55, 0.55),
        "enhancing":     (1.00, 0.70, 0.85),
        "necrosis":      (0.10, 0.15, 0.20),
    },
    "contrast_jitter": 0.03,
    "texture_sigma": 2.0,
    "texture_amplitude": 0.03,
    "noise_std": 0.02,
}


def _ellipsoid_radius(shape, center, radii):
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    return np.sqrt(sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii)))


def generate_synthetic_case(seed: int, dims=(32, 32, 32), grade=Grade.HGG,
                            modalities=DEFAULT_MODALITIES) -> CaseRecord:
    """Build a deterministic three-modality case with a nested-shell tumor mask.

    Shells from the outside in: edema, non-enhancing, enhancing, necrosis.
    HGG cases get a larger necrotic core than LGG cases.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < MIN_SYNTH_DIM:
        raise ValueError(f"dims must be at least {(MIN_SYNTH_DIM,) * 3}, got {dims}")
    grade = Grade(grade)
    if len(modalities) != 3:
        raise ValueError("generator models exactly three modalities")
    rng = np.random.default_rng(seed)
    nx, ny, nz = dims
    shape = (nz, ny, nx)
    ext = np.array(shape, dtype=np.float64)
    mid = (ext - 1) / 2

    head = _ellipsoid_radius(shape, mid, SYNTH["head_radius"] * ext) <= 1.0
    center = mid + rng.uniform(-1, 1, 3) * SYNTH["center_jitter"] * ext
    r_outer = rng.uniform(*SYNTH["tumor_radius"]) * min(shape)
    radii = r_outer * rng.uniform(*SYNTH["tumor_anisotropy"], 3)
    rho = _ellipsoid_radius(shape, center, radii)

    fr = SYNTH["shell_fraction"]
    labels = np.zeros(shape, dtype=np.uint8)
    labels[rho <= 1.0] = CLASS_NAMES.index("edema")
    labels[rho <= fr["non_enhancing"]] = CLASS_NAMES.index("non_enhancing")
    labels[rho <= fr["enhancing"]] = CLASS_NAMES.index("enhancing")
    labels[rho <= fr["necrosis"][grade]] = CLASS_NAMES.index("necrosis")
    labels[~head] = 0

    tissue = {
        "brain": head & (labels == 0),
        "edema": labels == CLASS_NAMES.index("edema"),
        "non_enhancing": labels == CLASS_NAMES.index("non_enhancing"),
        "enhancing": labels == CLASS_NAMES.index("enhancing"),
        "necrosis": labels == CLASS_NAMES.index("necrosis"),
    }
    vols = {}
    for m, name in enumerate(modalities):
        img = np.zeros(shape)
        for t, region in tissue.items():
            level = SYNTH["intensity"][t][m] + rng.uniform(-1, 1) * SYNTH["contrast_jitter"]
            img[region] = level
        texture = ndimage.gaussian_filter(rng.standard_normal(shape), SYNTH["texture_sigma"])
        texture *= SYNTH["texture_amplitude"] / max(texture.std(), 1e-12)
        img += np.where(head, texture, 0.0)
        img += rng.normal(0.0, SYNTH["noise_std"], shape)
        # float32-representable so cases round-trip through GVOL unchanged
        vols[name] = Volume(img.astype(np.float32).astype(np.float64), Stage.RAW)
    return CaseRecord(vols, LabelMask(labels), grade)


HGG_FRACTION = 0.75  # 3:1 HGG:LGG


def cohort_grades(n, seed):
    """Exactly round(0.75 n) HGG labels, the rest LGG, in seeded random order."""
    n_hgg = int(np.floor(n * HGG_FRACTION + 0.5))
    grades = np.array([Grade.HGG] * n_hgg + [Grade.LGG] * (n - n_hgg), dtype=object)
    return list(grades[np.random.default_rng([seed, 5]).permutation(n)])


def synthetic_cohort(n, seed, dims=(32, 32, 32), modalities=DEFAULT_MODALITIES):
    """``n`` cases as (case_id, CaseRecord) pairs; ids are case_000, case_001, ..."""
    if n < 1:
        raise ValueError("need at least one case")
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [
        (f"case_{i:03d}", generate_synthetic_case(int(s), dims, g, modalities))
        for i, (s, g) in enumerate(zip(seeds, cohort_grades(n, seed)))
    ]


# ---------------------------------------------------------------------------
# on-disk cohorts: <root>/manifest.csv + <root>/<case_id>/{<modality>,mask}.gvol
# ---------------------------------------------------------------------------

MANIFEST = "manifest.csv"


def save_case(case: CaseRecord, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, v in case.modalities.items():
        save_volume(v, d / f"{name}.gvol")
    save_mask(case.mask, d / "mask.gvol")


def load_case(directory, modalities=DEFAULT_MODALITIES, grade=None) -> CaseRecord:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"case directory not found: {d}")
    vols = {m: load_volume(d / f"{m}.gvol") for m in modalities}
    return CaseRecord(vols, load_mask(d / "mask.gvol"), grade)


def save_cohort(cases, root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["case_id,grade"]
    for cid, case in cases:
        save_case(case, root / cid)
        lines.append(f"{cid},{'' if case.grade is None else case.grade.value}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_cohort(root, modalities=DEFAULT_MODALITIES):
    """Inverse of :func:`save_cohort`; returns [(case_id, CaseRecord), ...]."""
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    rows = path.read_text(encoding="utf-8").splitlines()
    if not rows or rows[0].strip() != "case_id,grade":
        raise GvolError(f"{path}: expected header 'case_id,grade'")
    out = []
    for ln, row in enumerate(rows[1:], 2):
        if not row.strip():
            continue
        parts = row.split(",")
        if len(parts) != 2 or not parts[0]:
            raise GvolError(f"{path}:{ln}: malformed row {row!r}")
        cid, grade = parts
        out.append((cid, load_case(root / cid, modalities, grade or None)))
    return out
