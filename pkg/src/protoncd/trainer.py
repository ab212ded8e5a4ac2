"""Deterministic mini-batch training loop, checkpoints and training logs."""

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import AugmentParams, augment_arrays, pool_anomaly_maps
from .encoder import (
    EncoderConfig,
    EncoderParams,
    RegionGuidanceParams,
    arrays_from_json,
    arrays_to_json,
    build_guidance_vector,
    encoder_backward,
    encoder_forward,
    init_encoder,
    param_shapes,
)
from .errors import ConfigError, FormatError, InvalidArgument, NumericalAbort
from .losses import (
    COMPONENTS,
    BatchViews,
    LossWeights,
    normalize_backward,
    posterior_backward,
    teacher_targets,
    total_loss,
)
from .numerics import normalize_unit, softmax
from .protohead import PrototypeSet, TeacherStudentState, Temperatures, ema_update, init_prototypes

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "protoncd-checkpoint"
CHECKPOINT_VERSION = 1
LOG_FIELDS = ("step", *COMPONENTS, "total", "lr")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.05
    lr_schedule: str = "cosine"
    optimizer_momentum: float = 0.9
    ema_momentum: float = 0.99
    seed: int = 0
    k_new: int | str = 1
    budget_mode: bool = False
    budget_steps: int = 300
    weights: LossWeights = field(default_factory=LossWeights)
    temps: Temperatures = field(default_factory=Temperatures)
    rg: RegionGuidanceParams = field(default_factory=RegionGuidanceParams)
    augment: AugmentParams = field(default_factory=AugmentParams)
    d_model: int = 32
    d_h: int = 16
    layers: int = 2
    heads: int = 4
    ffn_hidden: int = 64
    score_reduction: str = "max"
    label_blend: float = 0.5
    include_own_view: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2 or self.budget_steps < 1:
            raise ConfigError("epochs, budget_steps must be >= 1 and batch_size >= 2")
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be 'constant' or 'cosine'")
        if not 0 <= self.optimizer_momentum < 1 or not 0 <= self.ema_momentum < 1:
            raise ConfigError("momenta must lie in [0, 1)")
        if self.score_reduction not in ("max", "mean"):
            raise ConfigError("score_reduction must be 'max' or 'mean'")
        if not (self.k_new == "estimate" or (isinstance(self.k_new, int) and self.k_new >= 0)):
            raise ConfigError("k_new must be a non-negative integer or 'estimate'")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        """Strict construction: unknown keys raise ``ConfigError``."""
        nested = {"weights": LossWeights, "temps": Temperatures, "rg": RegionGuidanceParams, "augment": AugmentParams}
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        kwargs = {}
        try:
            for key, value in raw.items():
                if key in nested:
                    sub_known = {f.name for f in fields(nested[key])}
                    bad = set(value) - sub_known
                    if bad:
                        raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")
                    kwargs[key] = nested[key](**value)
                else:
                    kwargs[key] = value
            return cls(**kwargs)
        except (TypeError, InvalidArgument) as exc:
            raise ConfigError(str(exc)) from exc

    def encoder_config(self, d_in):
        return EncoderConfig(
            d_in=d_in, d_model=self.d_model, d_h=self.d_h, layers=self.layers, heads=self.heads,
            ffn_hidden=self.ffn_hidden,
        )

    def total_steps(self, n_train):
        if self.budget_mode:
            return self.budget_steps
        return self.epochs * max(1, math.ceil(n_train / self.batch_size))


def benchmark_config(seed=0, k_new=2, **overrides):
    """Settings tuned for the synthetic vMF discovery benchmark.

    Differs from the ``TrainConfig`` defaults in a sharper entropy posterior
    (``tau_base=0.1``), softer teacher targets (``tau_sup=0.5``), a stronger
    entropy weight, a smaller supervised share, heavier feature noise and a
    longer schedule.
    """
    base = dict(
        epochs=200,
        seed=seed,
        k_new=k_new,
        temps=Temperatures(tau_base=0.1, tau_sup=0.5),
        weights=LossWeights(lambda_sup=0.2, lambda_entropy=2.0),
        augment=AugmentParams(noise_sigma=0.3),
    )
    base.update(overrides)
    return TrainConfig(**base)


def estimation_config(seed=0, **overrides):
    """Benchmark settings for the novel-class-count sweep.

    Each candidate trains for ``budget_steps=1000`` with ``lambda_entropy=5``.
    A flatter marginal penalizes unused prototypes, so surplus candidates lose
    labeled accuracy instead of leaving prototypes empty.
    """
    base = dict(budget_steps=1000, weights=LossWeights(lambda_sup=0.2, lambda_entropy=5.0))
    base.update(overrides)
    return benchmark_config(seed, **base)


@dataclass
class PreparedData:
    """Array view of a dataset for training. Built from labels of labeled
    samples only."""

    patches: np.ndarray  # (n, N, d_in)
    maps: np.ndarray  # (n, H, W); zeros where a sample has no map
    has_map: np.ndarray  # (n,) bool
    labels: np.ndarray  # (n,) training label, -1 unless labeled
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    grid_n: int
    k_base: int
    k_new: int

    @property
    def K(self):
        return self.k_base + self.k_new + 1


def prepare(dataset, k_new, splits=("labeled", "unlabeled")):
    samples = [s for s in dataset.samples if s.split in splits]
    if not samples:
        raise ConfigError("dataset has no samples in the requested splits")
    normal_index = dataset.k_base + k_new
    patches = np.stack([s.patches.reshape(-1, dataset.d_in) for s in samples])
    maps = np.zeros((len(samples), dataset.H, dataset.W))
    has_map = np.zeros(len(samples), dtype=bool)
    labels = np.full(len(samples), -1, dtype=int)
    for i, s in enumerate(samples):
        if s.anomaly_map is not None:
            maps[i] = s.anomaly_map
            has_map[i] = True
        if s.split == "labeled":
            lab = s.label
            labels[i] = normal_index if (dataset.normal_label is not None and lab == dataset.normal_label) else lab
    return PreparedData(
        patches=patches,
        maps=maps,
        has_map=has_map,
        labels=labels,
        labeled_idx=np.flatnonzero(labels >= 0),
        unlabeled_idx=np.flatnonzero(labels < 0),
        grid_n=dataset.P,
        k_base=dataset.k_base,
        k_new=k_new,
    )


@dataclass
class Checkpoint:
    state: TeacherStudentState
    velocity: dict
    step: int
    total_steps: int
    config: dict
    rng_state: dict


# --------------------------------------------------------------------------
# model helpers
# --------------------------------------------------------------------------


def view_guidance(maps, has_map, grid_n, rg, reduction="max"):
    """Pooled patch scores, logit offsets and the image-level score per view."""
    scores = pool_anomaly_maps(maps, grid_n)
    guidance = build_guidance_vector(scores, rg)
    s = scores.max(axis=1) if reduction == "max" else scores.mean(axis=1)
    return guidance, np.where(has_map, s, 0.0)


def embed(params, data, rg, idx=None, chunk=256):
    """Unaugmented unit features ``z`` for the rows ``idx`` of prepared data."""
    idx = np.arange(data.patches.shape[0]) if idx is None else np.asarray(idx)
    out = []
    for start in range(0, idx.size, chunk):
        sel = idx[start : start + chunk]
        guidance, _ = view_guidance(data.maps[sel], data.has_map[sel], data.grid_n, rg)
        enc, _ = encoder_forward(params, data.patches[sel], guidance, rg, keep_cache=False)
        out.append(enc.z)
    if not out:
        return np.zeros((0, params.config.d_model))
    return np.concatenate(out)


def init_state(data, config):
    enc_cfg = config.encoder_config(data.patches.shape[-1])
    student = init_encoder(enc_cfg, config.seed)
    means = {}
    if data.labeled_idx.size:
        z = embed(student, data, config.rg, data.labeled_idx)
        lab = data.labels[data.labeled_idx]
        for c in np.unique(lab):
            means[int(c)] = z[lab == c].mean(axis=0)
    protos = init_prototypes(data.k_base, data.k_new, enc_cfg.d_model, config.seed + 1, class_means=means)
    return TeacherStudentState(student, protos, student.copy(), protos.copy(), config.ema_momentum)


def lr_at(config, step, total_steps):
    if config.lr_schedule == "constant":
        return config.lr
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * step / max(total_steps, 1)))


def sample_batch(data, batch_size, rng):
    """Stratified batch: labeled share proportional to the labeled pool."""
    n_l, n_u = data.labeled_idx.size, data.unlabeled_idx.size
    b = min(batch_size, n_l + n_u)
    b_l = int(round(b * n_l / (n_l + n_u)))
    b_l = min(b_l, n_l)
    b_u = min(b - b_l, n_u)
    lab = data.labeled_idx[rng.choice(n_l, b_l, replace=False)] if b_l else np.zeros(0, dtype=int)
    unl = data.unlabeled_idx[rng.choice(n_u, b_u, replace=False)] if b_u else np.zeros(0, dtype=int)
    return np.concatenate([lab, unl])


def _student_forward(params, protos, patches, guidance, config):
    out, cache = encoder_forward(params, patches, guidance, config.rg)
    hnorm = np.linalg.norm(out.h, axis=1, keepdims=True)
    h = out.h / hnorm
    cos = out.z @ protos.mu.T
    p = softmax(cos, config.temps.tau_stu)
    pe = softmax(cos, config.temps.tau_base)
    return {"out": out, "cache": cache, "hnorm": hnorm, "h": h, "p": p, "pe": pe}


def batch_objective(state, data, idx, views, config):
    """Forward both views, build targets, evaluate the objective and its
    gradients w.r.t. the student encoder arrays and prototypes.

    ``views`` is a list of two (patches, maps) pairs produced by
    ``augment_arrays``. Returns ``(TotalLoss, encoder_grads, proto_grad)``.
    """
    temps = config.temps
    labels = data.labels[idx]
    has_map = data.has_map[idx]
    stu, tgt, svals = [], [], []
    for patches, maps in views:
        guidance, s = view_guidance(maps, has_map, data.grid_n, config.rg, config.score_reduction)
        stu.append(_student_forward(state.student, state.student_protos, patches, guidance, config))
        t_out, _ = encoder_forward(state.teacher, patches, guidance, config.rg, keep_cache=False)
        q = softmax(t_out.z @ state.teacher_protos.mu.T, temps.tau)
        tgt.append(
            teacher_targets(q, s, labels, state.teacher_protos.normal_index, temps.tau_sup, config.label_blend)
        )
        svals.append(s)
    batch = BatchViews(
        p_a=stu[0]["p"], p_b=stu[1]["p"], q_a=tgt[0], q_b=tgt[1],
        h_a=stu[0]["h"], h_b=stu[1]["h"], labels=labels,
        pe_a=stu[0]["pe"], pe_b=stu[1]["pe"], s_a=svals[0], s_b=svals[1],
    )
    mu = state.student_protos.mu
    loss = total_loss(batch, mu, config.weights, temps, config.include_own_view)

    enc_grads = None
    dmu = loss.grads["mu"].copy()
    for v, tag in zip(stu, ("a", "b")):
        dcos = posterior_backward(v["p"], loss.grads["p_" + tag], temps.tau_stu) + posterior_backward(
            v["pe"], loss.grads["pe_" + tag], temps.tau_base
        )
        z = v["out"].z
        dmu += dcos.T @ z
        dz = dcos @ mu
        dh = normalize_backward(v["h"], v["hnorm"], loss.grads["h_" + tag])
        g = encoder_backward(state.student, v["cache"], dz, dh)
        enc_grads = g if enc_grads is None else {k: enc_grads[k] + g[k] for k in g}
    return loss, enc_grads, dmu


def make_batch_views(data, idx, config, rng):
    views = []
    for _ in range(2):
        p, m = augment_arrays(
            data.patches[idx].reshape(idx.size, data.grid_n, data.grid_n, -1), data.maps[idx], config.augment, rng
        )
        views.append((p.reshape(idx.size, data.grid_n * data.grid_n, -1), m))
    return views


def train_step(state, velocity, data, idx, config, rng, step, total_steps):
    """One optimization step. Returns ``(state, velocity, log_row)``."""
    views = make_batch_views(data, idx, config, rng)
    loss, enc_grads, dmu = batch_objective(state, data, idx, views, config)
    if not math.isfinite(loss.value):
        raise NumericalAbort(f"non-finite loss at step {step}")
    lr = lr_at(config, step, total_steps)
    mom = config.optimizer_momentum
    new_arrays = {}
    new_vel = {}
    for name, w in state.student.arrays.items():
        v = mom * velocity[name] + enc_grads[name]
        new_vel[name] = v
        new_arrays[name] = w - lr * v
    v = mom * velocity["prototypes"] + dmu
    new_vel["prototypes"] = v
    mu = normalize_unit(state.student_protos.mu - lr * v)
    student = EncoderParams(state.student.config, new_arrays)
    protos = PrototypeSet(mu, state.student_protos.k_base, state.student_protos.k_new)
    new_state = ema_update(TeacherStudentState(student, protos, state.teacher, state.teacher_protos, state.momentum))
    row = {"step": step + 1, **loss.components, "total": loss.value, "lr": lr}
    return new_state, new_vel, row


def zero_velocity(state):
    vel = {k: np.zeros_like(v) for k, v in state.student.arrays.items()}
    vel["prototypes"] = np.zeros_like(state.student_protos.mu)
    return vel


def train(dataset, config, resume=None, max_steps=None, log_rows=None):
    """Train on ``dataset`` with a fixed ``config.k_new``.

    ``resume`` continues from a checkpoint; ``max_steps`` stops early (the
    returned checkpoint can be resumed). Returns ``(Checkpoint, log_rows)``.
    """
    if config.k_new == "estimate":
        raise ConfigError("train() needs a concrete k_new; run the estimator first")
    data = prepare(dataset, config.k_new)
    if config.weights.lambda_sup > 0 and data.labeled_idx.size == 0:
        raise ConfigError("lambda_sup > 0 but the dataset has no labeled samples")
    total = config.total_steps(data.patches.shape[0])
    rows = [] if log_rows is None else log_rows
    if resume is None:
        state = init_state(data, config)
        velocity = zero_velocity(state)
        rng = np.random.default_rng(config.seed)
        step = 0
    else:
        state, velocity, step = resume.state, resume.velocity, resume.step
        rng = np.random.default_rng()
        rng.bit_generator.state = copy.deepcopy(resume.rng_state)
        total = resume.total_steps
    end = total if max_steps is None else min(total, step + max_steps)
    last_good = None
    while step < end:
        idx = sample_batch(data, config.batch_size, rng)
        try:
            state, velocity, row = train_step(state, velocity, data, idx, config, rng, step, total)
        except NumericalAbort as exc:
            last_good = Checkpoint(state, velocity, step, total, config.to_dict(), copy.deepcopy(rng.bit_generator.state))
            raise NumericalAbort(str(exc), last_good) from exc
        step += 1
        rows.append(row)
        if step % 50 == 0:
            log.debug("step %d total %.5f", step, row["total"])
    ckpt = Checkpoint(state, velocity, step, total, config.to_dict(), copy.deepcopy(rng.bit_generator.state))
    return ckpt, rows


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def checkpoint_to_json(ckpt):
    st = ckpt.state
    arrays = {}
    for prefix, params in (("student.", st.student), ("teacher.", st.teacher)):
        arrays.update({prefix + k: v for k, v in params.arrays.items()})
    arrays.update({"velocity." + k: v for k, v in ckpt.velocity.items()})
    arrays["prototypes"] = st.student_protos.mu
    arrays["teacher_prototypes"] = st.teacher_protos.mu
    manifest, data = arrays_to_json(arrays)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "encoder_config": asdict(st.student.config),
        "k_base": st.student_protos.k_base,
        "k_new": st.student_protos.k_new,
        "ema_momentum": st.momentum,
        "step": ckpt.step,
        "total_steps": ckpt.total_steps,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "manifest": manifest,
        "arrays": data,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_checkpoint(ckpt, path):
    Path(path).write_text(checkpoint_to_json(ckpt))


def checkpoint_from_json(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint is not valid JSON: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint format/version {doc.get('format')}/{doc.get('version')}")
    try:
        enc_cfg = EncoderConfig(**doc["encoder_config"])
        k_base, k_new = int(doc["k_base"]), int(doc["k_new"])
        manifest, data = doc["manifest"], doc["arrays"]
        expected = param_shapes(enc_cfg)
        K = k_base + k_new + 1
        want = {}
        for prefix in ("student.", "teacher.", "velocity."):
            want.update({prefix + k: list(v) for k, v in expected.items()})
        for name in ("prototypes", "teacher_prototypes", "velocity.prototypes"):
            want[name] = [K, enc_cfg.d_model]
        if manifest != want:
            missing = sorted(set(want) ^ set(manifest)) or [k for k in want if manifest.get(k) != want[k]]
            raise FormatError(f"checkpoint manifest mismatch: {missing[:5]}")
        arrays = arrays_from_json(manifest, data)
        state = TeacherStudentState(
            EncoderParams(enc_cfg, {k[8:]: v for k, v in arrays.items() if k.startswith("student.")}),
            PrototypeSet(arrays["prototypes"], k_base, k_new),
            EncoderParams(enc_cfg, {k[8:]: v for k, v in arrays.items() if k.startswith("teacher.")}),
            PrototypeSet(arrays["teacher_prototypes"], k_base, k_new),
            float(doc["ema_momentum"]),
        )
        velocity = {k[9:]: v for k, v in arrays.items() if k.startswith("velocity.")}
        return Checkpoint(state, velocity, int(doc["step"]), int(doc["total_steps"]), doc["config"], doc["rng_state"])
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"corrupted checkpoint: {exc}") from exc


def load_checkpoint(path):
    return checkpoint_from_json(Path(path).read_text())


def write_log_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in LOG_FIELDS})
