"""Dataset model, JSONL storage, anomaly-map pooling, two-view augmentation
and synthetic generators with known ground truth."""

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument, ValidationError
from .numerics import normalize_unit

SPLITS = ("labeled", "unlabeled", "ood")
DATASET_FORMAT = "protoncd-dataset"
DATASET_VERSION = 1


@dataclass
class Sample:
    """One inspected item.

    ``label`` is the training label and is only set on labeled samples.
    ``gt_label`` is evaluation ground truth (synthetic data); training code
    never reads it.
    """

    id: str
    split: str
    patches: np.ndarray  # (P, P, d_in)
    label: int | None = None
    anomaly_map: np.ndarray | None = None  # (H, W) in [0, 1]
    foreground_mask: np.ndarray | None = None  # (H, W) of {0, 1}
    gt_label: int | None = None


@dataclass
class Dataset:
    samples: list
    k_base: int
    d_in: int
    P: int
    H: int
    W: int
    k_new_true: int | None = None
    normal_label: int | None = None

    def by_split(self, split):
        return [s for s in self.samples if s.split == split]

    def validate(self):
        if self.k_base < 0:
            raise ValidationError("k_base must be >= 0")
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ValidationError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if s.split not in SPLITS:
                raise ValidationError(f"sample {s.id}: unknown split {s.split!r}")
            if s.patches.shape != (self.P, self.P, self.d_in):
                raise ValidationError(
                    f"sample {s.id}: patch grid {s.patches.shape} != {(self.P, self.P, self.d_in)}"
                )
            if not np.all(np.isfinite(s.patches)):
                raise ValidationError(f"sample {s.id}: non-finite patch features")
            if s.split == "labeled":
                if s.label is None:
                    raise ValidationError(f"sample {s.id}: labeled sample without label")
                if not (0 <= s.label < self.k_base or s.label == self.normal_label):
                    raise ValidationError(
                        f"sample {s.id}: label {s.label} outside base classes [0, {self.k_base})"
                        f" and normal label {self.normal_label}"
                    )
            elif s.label is not None:
                raise ValidationError(f"sample {s.id}: only labeled samples may carry a label")
            for name in ("anomaly_map", "foreground_mask"):
                grid = getattr(s, name)
                if grid is None:
                    continue
                if grid.shape != (self.H, self.W):
                    raise ValidationError(f"sample {s.id}: {name} shape {grid.shape} != {(self.H, self.W)}")
                if not np.all(np.isfinite(grid)) or grid.min() < 0 or grid.max() > 1:
                    raise ValidationError(f"sample {s.id}: {name} entries must lie in [0, 1]")
        return self


@dataclass
class AugmentParams:
    noise_sigma: float = 0.05
    scale_jitter: float = 0.1
    crop_fraction: float = 0.9
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.scale_jitter < 0:
            raise InvalidArgument("noise_sigma and scale_jitter must be >= 0")
        if not 0 < self.crop_fraction <= 1:
            raise InvalidArgument("crop_fraction must lie in (0, 1]")
        if not 0 <= self.flip_prob <= 1:
            raise InvalidArgument("flip_prob must lie in [0, 1]")


@dataclass
class ViewPair:
    view_a: Sample
    view_b: Sample


# --------------------------------------------------------------------------
# storage
# --------------------------------------------------------------------------


def _grid_to_json(grid):
    return None if grid is None else np.asarray(grid, dtype=np.float64).tolist()


def _sample_to_record(s):
    return {
        "id": s.id,
        "split": s.split,
        "label": s.label,
        "gt_label": s.gt_label,
        "patches": _grid_to_json(s.patches),
        "anomaly_map": _grid_to_json(s.anomaly_map),
        "foreground_mask": _grid_to_json(s.foreground_mask),
    }


def dumps_dataset(ds):
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "k_base": ds.k_base,
        "k_new_true": ds.k_new_true,
        "normal_label": ds.normal_label,
        "d_in": ds.d_in,
        "P": ds.P,
        "H": ds.H,
        "W": ds.W,
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(_sample_to_record(s), sort_keys=True) for s in ds.samples]
    return "\n".join(lines) + "\n"


def save_dataset(ds, path):
    Path(path).write_text(dumps_dataset(ds))


def dataset_digest(ds):
    return hashlib.sha256(dumps_dataset(ds).encode()).hexdigest()


def _read_grid(value, base_dir, lineno, name):
    if value is None:
        return None
    if isinstance(value, dict):
        # sidecar reference: {"path": "maps/x.json"} holding a nested list
        if "path" not in value:
            raise FormatError(f"line {lineno}: {name} object must carry 'path'")
        sidecar = Path(base_dir) / value["path"]
        try:
            value = json.loads(sidecar.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"line {lineno}: cannot read sidecar {sidecar}: {exc}") from exc
    try:
        return np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"line {lineno}: {name} is not a numeric grid") from exc


def load_dataset(path):
    """Read and validate a JSONL dataset."""
    path = Path(path)
    with path.open() as fh:
        lines = [ln for ln in fh.read().splitlines()]
    if not lines:
        raise FormatError("line 1: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"line 1: {exc}") from exc
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise FormatError(f"line 1: unsupported dataset header {header.get('format')}/{header.get('version')}")
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            patches = _read_grid(rec["patches"], path.parent, lineno, "patches")
            sample = Sample(
                id=str(rec["id"]),
                split=rec["split"],
                patches=patches,
                label=rec.get("label"),
                anomaly_map=_read_grid(rec.get("anomaly_map"), path.parent, lineno, "anomaly_map"),
                foreground_mask=_read_grid(rec.get("foreground_mask"), path.parent, lineno, "foreground_mask"),
                gt_label=rec.get("gt_label"),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
        samples.append(sample)
    try:
        ds = Dataset(
            samples=samples,
            k_base=int(header["k_base"]),
            d_in=int(header["d_in"]),
            P=int(header["P"]),
            H=int(header["H"]),
            W=int(header["W"]),
            k_new_true=header.get("k_new_true"),
            normal_label=header.get("normal_label"),
        )
    except KeyError as exc:
        raise FormatError(f"line 1: header missing {exc}") from exc
    return ds.validate()


# --------------------------------------------------------------------------
# pooling and augmentation
# --------------------------------------------------------------------------


def pad_to_multiple(grid, grid_n):
    """Edge-replicate a 2-D grid so both sides are multiples of ``grid_n``."""
    h, w = grid.shape
    ph = -h % grid_n
    pw = -w % grid_n
    if ph or pw:
        grid = np.pad(grid, ((0, ph), (0, pw)), mode="edge")
    return grid


def pool_anomaly_map(amap, grid_n):
    """Average-pool an H x W map to a row-major vector of ``grid_n**2`` cells."""
    amap = np.asarray(amap, dtype=np.float64)
    if amap.ndim != 2 or amap.size == 0:
        raise InvalidArgument("anomaly map must be a non-empty 2-D grid")
    if grid_n < 1:
        raise InvalidArgument("grid_n must be positive")
    amap = pad_to_multiple(amap, grid_n)
    h, w = amap.shape
    cells = amap.reshape(grid_n, h // grid_n, grid_n, w // grid_n)
    return cells.mean(axis=(1, 3)).reshape(-1)


def pool_anomaly_maps(maps, grid_n):
    """Batched ``pool_anomaly_map`` over an (B, H, W) array."""
    maps = np.asarray(maps, dtype=np.float64)
    b, h, w = maps.shape
    ph, pw = -h % grid_n, -w % grid_n
    if ph or pw:
        maps = np.pad(maps, ((0, 0), (0, ph), (0, pw)), mode="edge")
        h, w = h + ph, w + pw
    cells = maps.reshape(b, grid_n, h // grid_n, grid_n, w // grid_n)
    return cells.mean(axis=(2, 4)).reshape(b, grid_n * grid_n)


def _crop_index(n_src, n_crop, offset, n_out):
    # nearest-neighbour resize of [offset, offset + n_crop) back to n_out cells
    pos = (np.arange(n_out) + 0.5) * n_crop / n_out
    return offset + np.minimum(np.floor(pos).astype(int), n_crop - 1)


def augment_arrays(patches, maps, params, rng):
    """Apply one random view transform to a batch.

    patches: (B, P, P, d_in); maps: (B, ..., H, W) or None, transformed with
    the same geometry as the patch grid. Draws a fixed number of
    random values per sample so streams stay aligned across parameter
    settings.
    """
    patches = np.asarray(patches, dtype=np.float64)
    b, p, _, d = patches.shape
    noise = rng.standard_normal(patches.shape)
    scale_u = rng.uniform(-1.0, 1.0, size=b)
    flip_u = rng.uniform(size=b)
    off_u = rng.uniform(size=(b, 2))

    out = patches * (1.0 + params.scale_jitter * scale_u)[:, None, None, None]
    if params.noise_sigma > 0:
        out = out + params.noise_sigma * noise
    out_maps = None if maps is None else np.array(maps, dtype=np.float64)

    flip = flip_u < params.flip_prob
    if flip.any():
        out[flip] = out[flip][:, :, ::-1, :]
        if out_maps is not None:
            out_maps[flip] = out_maps[flip][..., ::-1]

    n_crop = max(1, int(round(p * params.crop_fraction)))
    if n_crop < p:
        offs = np.floor(off_u * (p - n_crop + 1)).astype(int)
        cropped = np.empty_like(out)
        new_maps = None if out_maps is None else np.empty_like(out_maps)
        for i in range(b):
            ri = _crop_index(p, n_crop, offs[i, 0], p)
            ci = _crop_index(p, n_crop, offs[i, 1], p)
            cropped[i] = out[i][np.ix_(ri, ci)]
            if new_maps is not None:
                h, w = out_maps.shape[-2:]
                # the same crop window expressed in pixel units
                hr = _crop_index(h, n_crop * h // p, offs[i, 0] * h // p, h)
                wr = _crop_index(w, n_crop * w // p, offs[i, 1] * w // p, w)
                new_maps[i] = out_maps[i][..., hr[:, None], wr[None, :]]
        out, out_maps = cropped, new_maps
    return out, out_maps


def _view_of(sample, params, rng):
    grids = [g for g in (sample.anomaly_map, sample.foreground_mask) if g is not None]
    maps = np.stack(grids)[None] if grids else None
    patches, new_maps = augment_arrays(sample.patches[None], maps, params, rng)
    out = {"patches": patches[0]}
    k = 0
    for name in ("anomaly_map", "foreground_mask"):
        if getattr(sample, name) is not None:
            out[name] = new_maps[0, k]
            k += 1
    return replace(sample, **out)


def make_views(sample, params, rng):
    """Two independent stochastic views of ``sample`` (id and labels kept)."""
    return ViewPair(_view_of(sample, params, rng), _view_of(sample, params, rng))


# --------------------------------------------------------------------------
# synthetic generators
# --------------------------------------------------------------------------


def sample_vmf(mu, kappa, n, rng):
    """Draw ``n`` unit vectors from vMF(mu, kappa) with Wood's rejection scheme."""
    mu = normalize_unit(mu)
    d = mu.size
    dm1 = d - 1.0
    b = dm1 / (2.0 * kappa + math.sqrt(4.0 * kappa**2 + dm1**2))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + dm1 * math.log(1.0 - x0**2)
    w = np.empty(0)
    while w.size < n:
        m = max(2 * (n - w.size), 16)
        z = rng.beta(dm1 / 2.0, dm1 / 2.0, size=m)
        cand = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=m)
        ok = kappa * cand + dm1 * np.log(1.0 - x0 * cand) - c >= np.log(u)
        w = np.concatenate([w, cand[ok]])
    w = w[:n]
    v = rng.standard_normal((n, d))
    v -= np.outer(v @ mu, mu)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return w[:, None] * mu[None, :] + np.sqrt(np.clip(1.0 - w**2, 0.0, None))[:, None] * v


def synth_vmf_mixture(
    k_classes,
    d_in,
    kappa,
    n_per_class,
    seed,
    k_base=None,
    labeled_fraction=0.5,
    n_ood_classes=0,
    include_normal=False,
):
    """Mixture of vMF classes embedded as 1x1 patch grids.

    Classes ``0..k_base-1`` are base classes: ``labeled_fraction`` of their
    samples are labeled, the rest unlabeled. Classes ``k_base..k_classes-1``
    are novel and fully unlabeled. ``n_ood_classes`` extra directions are
    emitted with split ``ood``. Anomalous samples carry a 1x1 anomaly map of
    1.0. With ``include_normal`` one more direction is drawn for the normal
    class (label ``k_classes``, anomaly map 0.0), split like a base class.
    """
    if k_classes < 2 or n_per_class < 1:
        raise InvalidArgument("need k_classes >= 2 and n_per_class >= 1")
    if k_base is None:
        k_base = (k_classes + 1) // 2
    if not 0 <= k_base <= k_classes:
        raise InvalidArgument("k_base must lie in [0, k_classes]")
    n_dirs = k_classes + n_ood_classes + int(include_normal)
    if d_in < n_dirs:
        raise InvalidArgument(f"d_in={d_in} too small for {n_dirs} orthogonal class means")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d_in, n_dirs)))
    means = q.T
    normal_label = k_classes
    # direction order: anomaly classes, then normal (optional), then ood
    classes = list(range(k_classes)) + ([normal_label] if include_normal else [])
    classes += [k_classes + 1 + j for j in range(n_ood_classes)]
    samples = []
    for c, mean in zip(classes, means):
        x = sample_vmf(mean, kappa, n_per_class, rng)
        is_normal = c == normal_label
        n_lab = int(round(labeled_fraction * n_per_class)) if (c < k_base or is_normal) else 0
        for i in range(n_per_class):
            if c > k_classes:
                split, label = "ood", None
            elif i < n_lab:
                split, label = "labeled", c
            else:
                split, label = "unlabeled", None
            samples.append(
                Sample(
                    id=f"c{c}-{i}",
                    split=split,
                    patches=x[i].reshape(1, 1, d_in),
                    label=label,
                    anomaly_map=np.full((1, 1), 0.0 if is_normal else 1.0),
                    gt_label=c,
                )
            )
    order = rng.permutation(len(samples))
    samples = [samples[i] for i in order]
    return Dataset(
        samples=samples,
        k_base=k_base,
        d_in=d_in,
        P=1,
        H=1,
        W=1,
        k_new_true=k_classes - k_base,
        normal_label=normal_label,
    ).validate()


@dataclass
class ToyImageConfig:
    pixels_per_patch: int = 4
    d_in: int = 8
    implant_patches: int = 2
    object_margin: int = 1
    blur_radius: int = 1
    n_per_class: int = 20
    k_base: int | None = None
    labeled_fraction: float = 0.5
    noise: float = 0.1
    fixed_locations: bool = False
    signatures: dict = field(default_factory=dict)


def _box_blur(grid, r):
    if r <= 0:
        return grid
    k = 2 * r + 1
    padded = np.pad(grid, r)
    out = np.zeros_like(grid)
    for dy in range(k):
        for dx in range(k):
            out += padded[dy : dy + grid.shape[0], dx : dx + grid.shape[1]]
    return out / (k * k)


def synth_toy_images(k_anomaly_types, grid, seed, config=None):
    """Object-on-background patch grids with one implanted anomaly per sample.

    Classes ``0..k_anomaly_types-1`` are anomaly types; class
    ``k_anomaly_types`` is the normal class (empty anomaly map). The anomaly
    map is the implant footprint box-blurred by ``blur_radius`` pixels and
    clipped to [0, 1].
    """
    cfg = config or ToyImageConfig()
    p = int(grid)
    if p < 4 or k_anomaly_types < 2:
        raise InvalidArgument("need grid >= 4 and k_anomaly_types >= 2")
    obj_side = p - 2 * cfg.object_margin
    if cfg.implant_patches > obj_side or cfg.implant_patches < 1:
        raise InvalidArgument(
            f"implant of {cfg.implant_patches} patches does not fit the {obj_side}-patch object region"
        )
    k_base = cfg.k_base if cfg.k_base is not None else (k_anomaly_types + 1) // 2
    pp = cfg.pixels_per_patch
    h = w = p * pp
    rng = np.random.default_rng(seed)
    d = cfg.d_in
    bg_sig = rng.standard_normal(d)
    obj_sig = rng.standard_normal(d)
    type_sig = normalize_unit(rng.standard_normal((k_anomaly_types, d))) * 3.0

    fg = np.zeros((h, w))
    lo, hi = cfg.object_margin * pp, (p - cfg.object_margin) * pp
    fg[lo:hi, lo:hi] = 1.0
    slots = obj_side - cfg.implant_patches + 1
    # two-patch gaps keep blurred footprints of different types in disjoint cells
    fixed = [divmod(t * (cfg.implant_patches + 2), slots) for t in range(k_anomaly_types)]
    normal_label = k_anomaly_types

    samples = []
    for c in range(k_anomaly_types + 1):
        for i in range(cfg.n_per_class):
            feats = np.where(
                fg.reshape(p, pp, p, pp).mean(axis=(1, 3))[..., None] > 0.5, obj_sig, bg_sig
            ) + cfg.noise * rng.standard_normal((p, p, d))
            amap = np.zeros((h, w))
            if c < k_anomaly_types:
                if cfg.fixed_locations:
                    oy, ox = fixed[c]
                else:
                    oy, ox = rng.integers(0, slots, size=2)
                py, px = cfg.object_margin + oy, cfg.object_margin + ox
                k = cfg.implant_patches
                feats[py : py + k, px : px + k] += type_sig[c]
                footprint = np.zeros((h, w))
                footprint[py * pp : (py + k) * pp, px * pp : (px + k) * pp] = 1.0
                amap = np.clip(_box_blur(footprint, cfg.blur_radius) * 1.5, 0.0, 1.0)
            labeled = (c < k_base or c == normal_label) and i < round(cfg.labeled_fraction * cfg.n_per_class)
            samples.append(
                Sample(
                    id=f"t{c}-{i}",
                    split="labeled" if labeled else "unlabeled",
                    patches=feats,
                    label=c if labeled else None,
                    anomaly_map=amap,
                    foreground_mask=fg.copy(),
                    gt_label=c,
                )
            )
    order = rng.permutation(len(samples))
    return Dataset(
        samples=[samples[i] for i in order],
        k_base=k_base,
        d_in=d,
        P=p,
        H=h,
        W=w,
        k_new_true=k_anomaly_types - k_base,
        normal_label=normal_label,
    ).validate()
