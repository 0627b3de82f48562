"""Volumes, preprocessing, co-centric patch extraction, samplers and phantoms.

Volumes are expected to be bias-field corrected already; a correction step
would run before :func:`preprocess_volume`.
"""
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BoundsError, ParameterError, ShapeError, VersionError
from .tensor import new_rng

log = logging.getLogger(__name__)

MODALITIES = ("T1", "T1c", "T2", "T2-Flair")
LABELS = {0: "healthy", 1: "necrosis", 2: "edema", 3: "non-enhancing", 4: "enhancing"}
N_CLASSES = 5
BIG, SMALL = 33, 15
PAD = BIG // 2  # 16
_CROP = (BIG - SMALL) // 2  # offset of the small patch inside the big one

VOLUME_MAGIC = b"NXV1"
VOLUME_VERSION = 1


@dataclass
class VolumeSet:
    modalities: np.ndarray | None  # [4, D, H, W]; None for a label-only map
    labels: np.ndarray | None = None  # [D, H, W] uint8 in 0..4
    mask: np.ndarray | None = None  # brain pixels; derived from nonzero intensities when absent

    def __post_init__(self):
        if self.modalities is None and self.labels is None:
            raise ShapeError("a volume needs modalities or labels")
        if self.modalities is not None and self.modalities.ndim != 4:
            raise ShapeError(f"modalities must be [M, D, H, W], got {self.modalities.shape}")
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if self.modalities is not None and labels.shape != self.modalities.shape[1:]:
                raise ShapeError(f"labels {labels.shape} do not match modalities {self.modalities.shape[1:]}")
            if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
                raise ParameterError("labels must take values 0..4")
            self.labels = labels.astype(np.uint8)

    @property
    def shape(self):
        return self.labels.shape if self.modalities is None else self.modalities.shape[1:]

    def brain(self):
        if self.mask is not None:
            return self.mask
        if self.modalities is None:
            return np.ones(self.shape, dtype=bool)
        return np.any(self.modalities != 0, axis=0)


# file format -----------------------------------------------------------------

def write_volume(path, vol):
    """NXV1: magic, u32 version, u32 D,H,W, u8 modality count, u8 has-labels,
    binary32 modalities, u8 labels; little-endian."""
    d, h, w = vol.shape
    mods = vol.modalities
    count = 0 if mods is None else mods.shape[0]
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<IIIIBB", VOLUME_VERSION, d, h, w, count, vol.labels is not None))
        if mods is not None:
            fh.write(np.ascontiguousarray(mods, dtype="<f4").tobytes())
        if vol.labels is not None:
            fh.write(np.ascontiguousarray(vol.labels, dtype=np.uint8).tobytes())


def read_volume(path):
    with open(path, "rb") as fh:
        if fh.read(4) != VOLUME_MAGIC:
            raise VersionError(f"{path} is not an NXV1 volume")
        version, d, h, w, count, has_labels = struct.unpack("<IIIIBB", fh.read(18))
        if version != VOLUME_VERSION:
            raise VersionError(f"unsupported volume version {version}")
        n = d * h * w
        mods = None
        if count:
            raw = fh.read(4 * n * count)
            if len(raw) != 4 * n * count:
                raise VersionError(f"{path}: truncated modality data")
            mods = np.frombuffer(raw, dtype="<f4").reshape(count, d, h, w).astype(np.float32)
        labels = None
        if has_labels:
            raw = fh.read(n)
            if len(raw) != n:
                raise VersionError(f"{path}: truncated label data")
            labels = np.frombuffer(raw, dtype=np.uint8).reshape(d, h, w).copy()
    return VolumeSet(mods, labels)


def write_label_map(path, labels):
    write_volume(path, VolumeSet(None, np.asarray(labels, dtype=np.uint8)))


# preprocessing -------------------------------------------------------------------

def clip_percentiles(values, low=1.0, high=99.0):
    lo, hi = np.percentile(values, [low, high])
    return np.clip(values, lo, hi)


def normalize_slice(x, clip=True, mask=None):
    """Z-score a 2D slice over its brain (nonzero) pixels.

    Brain intensities are first clamped to their 1st/99th percentiles.  Pixels
    outside the brain stay 0; a slice with (near) zero spread maps to zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    mask = x != 0 if mask is None else mask
    out = np.zeros_like(x)
    vals = x[mask]
    if vals.size == 0:
        return out
    if clip:
        vals = clip_percentiles(vals)
    sd = vals.std()
    if sd < 1e-8:
        return out
    out[mask] = (vals - vals.mean()) / sd
    return out


def preprocess_volume(vol, per_volume=False, clip=True):
    """Normalize every modality slice by slice (or over the whole volume)."""
    mask = vol.brain()
    mods = np.asarray(vol.modalities, dtype=np.float64)
    out = np.zeros_like(mods)
    for m in range(mods.shape[0]):
        if per_volume:
            out[m] = normalize_slice(mods[m].reshape(-1, mods.shape[-1]), clip, mask.reshape(-1, mods.shape[-1])).reshape(mods.shape[1:])
        else:
            for z in range(mods.shape[1]):
                out[m, z] = normalize_slice(mods[m, z], clip, mask[z])
    return VolumeSet(out, vol.labels, mask)


# patches ------------------------------------------------------------------

@dataclass
class PatchPair:
    big: np.ndarray  # [4, 33, 33]
    small: np.ndarray  # [4, 15, 15]
    center: tuple  # (slice, row, col)
    label: int | None = None


def standardize_planes(p):
    """Per-plane mean 0 / variance 1 over the trailing two axes; constant planes -> 0."""
    p = np.asarray(p, dtype=np.float64)
    mean = p.mean(axis=(-2, -1), keepdims=True)
    sd = p.std(axis=(-2, -1), keepdims=True)
    ok = sd >= 1e-8
    return np.where(ok, (p - mean) / np.where(ok, sd, 1.0), 0.0)


class PatchSource:
    """Zero-padded view of one volume for fast batched patch cuts."""

    def __init__(self, vol):
        if vol.modalities is None:
            raise ShapeError("patch extraction needs modalities")
        self.vol = vol
        mods = np.asarray(vol.modalities, dtype=np.float64)
        self.padded = np.pad(mods, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
        self.windows = sliding_window_view(self.padded, (BIG, BIG), axis=(2, 3))

    def cut(self, centers, standardize=True):
        """``centers`` is an int array ``[N, 3]`` of (slice, row, col)."""
        c = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
        d, h, w = self.vol.shape
        if (c < 0).any() or (c >= np.array([d, h, w])).any():
            raise BoundsError(f"patch centre outside volume of shape {(d, h, w)}")
        big = self.windows[:, c[:, 0], c[:, 1], c[:, 2]].transpose(1, 0, 2, 3)
        small = big[:, :, _CROP : _CROP + SMALL, _CROP : _CROP + SMALL]
        if standardize:
            return standardize_planes(big), standardize_planes(small)
        return np.array(big), np.array(small)


def extract_patch_pair(vol, center, standardize=True):
    p33, p15 = PatchSource(vol).cut([center], standardize)
    label = None if vol.labels is None else int(vol.labels[tuple(center)])
    return PatchPair(p33[0], p15[0], tuple(int(v) for v in center), label)


# sampling ----------------------------------------------------------------------

@dataclass
class SamplerSpec:
    mode: str = "balanced"  # or "true"
    count: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("balanced", "true"):
            raise ParameterError(f"unknown sampler mode {self.mode!r}")
        if self.count < 1:
            raise ParameterError("sample count must be positive")


@dataclass
class Samples:
    """Sampled centres: ``index[i] = (volume, slice, row, col)`` with ``labels[i]``."""

    index: np.ndarray
    labels: np.ndarray
    absent: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


def _eligible(vols):
    """Per class, the flat list of (volume, z, y, x) brain voxels with that label."""
    per_class = {c: [] for c in range(N_CLASSES)}
    for vi, vol in enumerate(vols):
        if vol.labels is None:
            raise ParameterError("sampling needs labelled volumes")
        brain = vol.brain() | (vol.labels > 0)
        coords = np.argwhere(brain)
        labs = vol.labels[brain]
        for c in range(N_CLASSES):
            sel = coords[labs == c]
            if len(sel):
                per_class[c].append(np.column_stack([np.full(len(sel), vi), sel]))
    return {c: np.concatenate(v) if v else np.empty((0, 4), np.int64) for c, v in per_class.items()}


def sample_centers(vols, spec):
    rng = new_rng(spec.seed)
    pools = _eligible(vols)
    if spec.mode == "true":
        allc = np.concatenate([pools[c] for c in range(N_CLASSES)])
        labs = np.concatenate([np.full(len(pools[c]), c) for c in range(N_CLASSES)])
        if not len(allc):
            raise ParameterError("no brain voxels to sample from")
        pick = rng.integers(0, len(allc), size=spec.count)
        return Samples(allc[pick], labs[pick].astype(np.int64))
    present = [c for c in range(N_CLASSES) if len(pools[c])]
    absent = [c for c in range(N_CLASSES) if not len(pools[c])]
    if absent:
        log.warning("classes %s absent from the volumes; their share is redistributed", absent)
    if not present:
        raise ParameterError("no labelled voxels to sample from")
    base, extra = divmod(spec.count, len(present))
    idx, labs = [], []
    for i, c in enumerate(present):
        n = base + (1 if i < extra else 0)
        pick = rng.integers(0, len(pools[c]), size=n)
        idx.append(pools[c][pick])
        labs.append(np.full(n, c, dtype=np.int64))
    order = rng.permutation(spec.count)
    return Samples(np.concatenate(idx)[order], np.concatenate(labs)[order], absent)


def sample_patches(vols, spec, standardize=True):
    """Sample centres per ``spec`` and cut their patch pairs."""
    s = sample_centers(vols, spec)
    sources = [PatchSource(v) for v in vols]
    out = []
    for (vi, z, y, x), lab in zip(s.index, s.labels):
        big, small = sources[vi].cut([(z, y, x)], standardize)
        out.append(PatchPair(big[0], small[0], (int(z), int(y), int(x)), int(lab)))
    return out


def cut_batch(sources, index, standardize=True):
    """Patch pairs for rows of ``index`` = (volume, slice, row, col), order kept."""
    index = np.asarray(index)
    p33 = np.empty((len(index), 4, BIG, BIG))
    p15 = np.empty((len(index), 4, SMALL, SMALL))
    for vi in np.unique(index[:, 0]):
        sel = index[:, 0] == vi
        p33[sel], p15[sel] = sources[vi].cut(index[sel, 1:], standardize)
    return p33, p15


# phantoms ------------------------------------------------------------------------

# per-modality intensities (T1, T1c, T2, Flair) in arbitrary scanner units
TISSUE = {
    "csf": (30.0, 30.0, 180.0, 40.0),
    "gm": (80.0, 80.0, 110.0, 100.0),
    "wm": (110.0, 110.0, 80.0, 90.0),
}
TUMOR = {
    1: (50.0, 60.0, 170.0, 120.0),  # necrosis
    4: (90.0, 200.0, 120.0, 140.0),  # enhancing
    3: (70.0, 90.0, 140.0, 150.0),  # non-enhancing
    2: (85.0, 90.0, 150.0, 175.0),  # edema
}


@dataclass
class TumorSpec:
    radius: tuple = (0.5, 0.4, 0.4)  # fraction of the head radii per axis; 0 disables the tumour
    offset: tuple | None = None  # centre offset as fraction of head radii; None draws one
    max_offset: float = 0.25
    # outer normalized radius of each zone, innermost first
    zones: tuple = ((1, 0.3), (4, 0.5), (3, 0.65), (2, 1.0))


def generate_phantom(seed, size=(64, 64, 64), tumor=None, noise_std=4.0):
    """Synthetic labelled 4-modality head volume.

    An ellipsoidal head with concentric WM/GM/CSF bands and, unless the tumour
    radius is zero, an ellipsoidal tumour of concentric zones: necrotic core,
    enhancing rim, non-enhancing band and edema.  Each modality gets a random
    gain in [0.8, 1.2]; Gaussian noise is added inside the head.
    """
    tumor = tumor or TumorSpec()
    rng = new_rng(seed)
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 1:
        raise ParameterError(f"bad phantom size {size}")
    grid = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in size], indexing="ij")
    center = np.array([(s - 1) / 2 for s in size])
    radii = 0.45 * np.array(size, dtype=np.float64)
    r = np.sqrt(sum(((g - c) / rad) ** 2 for g, c, rad in zip(grid, center, radii)))

    labels = np.zeros(size, dtype=np.uint8)
    tissue = np.full(size, -1, dtype=np.int64)  # -1 air, 0 csf, 1 gm, 2 wm, 10+label tumour
    tissue[r <= 1.0] = 0
    tissue[r <= 0.85] = 1
    tissue[r <= 0.65] = 2

    trad = np.broadcast_to(np.asarray(tumor.radius, dtype=np.float64), (3,))
    if tumor.offset is None:
        offset = rng.uniform(-tumor.max_offset, tumor.max_offset, size=3)
    else:
        offset = np.asarray(tumor.offset, dtype=np.float64)
    if np.all(trad > 0):
        tc = center + offset * radii
        tr = trad * radii
        rho = np.sqrt(sum(((g - c) / rad) ** 2 for g, c, rad in zip(grid, tc, tr)))
        inside_head = r <= 1.0
        for lab, outer in reversed(tumor.zones):
            zone = (rho <= outer) & inside_head
            labels[zone] = lab
            tissue[zone] = 10 + lab

    gains = rng.uniform(0.8, 1.2, size=4)
    mods = np.zeros((4,) + size, dtype=np.float64)
    table = {0: TISSUE["csf"], 1: TISSUE["gm"], 2: TISSUE["wm"]}
    table.update({10 + k: v for k, v in TUMOR.items()})
    for code, vals in table.items():
        sel = tissue == code
        for m in range(4):
            mods[m][sel] = vals[m] * gains[m]
    head = tissue >= 0
    if noise_std > 0:
        noise = rng.normal(0.0, noise_std, size=mods.shape)
        mods = np.where(head, np.maximum(mods + noise, 1.0), 0.0)
    return VolumeSet(mods.astype(np.float32), labels)
