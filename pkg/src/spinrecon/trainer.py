"""Joint optimization of the radiance field and the camera attitude.

Per step: sample a pixel batch uniformly from the active view set, render it
through the coarse/fine pipeline, accumulate all loss terms, run one reverse
pass, then apply Adam updates with separate learning rates for hash tables,
MLPs + appearance, and pose parameters.  Pose updates are frozen for a short
warmup and their learning rate follows a cosine decay (larger steps early,
while the coarse-to-fine schedule keeps gradients smooth).

Experiment modes:
    baseline : ground-truth poses, no pose optimization
    indep    : per-image rotation corrections on perturbed priors
    global   : a single 3-parameter uniform rotation rate from zero init,
               with views introduced incrementally

The run is fully determined by the seed: identical configs reproduce CSV
logs and checkpoints bit for bit.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from . import diffcore as dc
from . import field as field_mod
from . import geometry as geo
from . import losses as losses_mod
from . import pose as pose_mod
from . import renderer as ren
from .diffcore import Tensor
from .encoders import ScheduleConfig, schedule_weights, sh_encode_tensor
from .field import FieldConfig
from .losses import LossWeights
from .pose import IncrementalSchedule
from .renderer import RenderConfig
from .synthdata import DatasetManifest

CSV_HEADER = ("step,psnr_train,loss_total,loss_photo,loss_opacity,loss_radiance,"
              "loss_distortion,loss_pose_l1,active_views,median_pose_error_deg")

MODE_TO_POSE = {
    "baseline": pose_mod.MODE_FIXED,
    "indep": pose_mod.MODE_INDEPENDENT,
    "global": pose_mod.MODE_GLOBAL,
}


@dataclass
class TrainConfig:
    mode: str = "baseline"
    total_steps: int = 6000
    batch_rays: int = 512
    lr_hash: float = 1e-2
    lr_mlp: float = 1e-3
    lr_pose: float = 5e-3
    pose_freeze_steps: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-10
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 2000
    perturb_mean_deg: float = 0.0
    perturb_std_deg: float = 0.0
    perturb_seed: int = 0
    use_incremental: bool | None = None   # default: only in global mode
    freeze_schedule_step: int | None = None  # pin level weights to one step's values
    schedule: ScheduleConfig = dc_field(default_factory=ScheduleConfig)
    incremental: IncrementalSchedule = dc_field(default_factory=IncrementalSchedule)
    render: RenderConfig = dc_field(default_factory=RenderConfig)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    loss_weights: LossWeights = dc_field(default_factory=LossWeights)

    def __post_init__(self):
        if self.mode not in MODE_TO_POSE:
            raise ValueError(f"unknown mode {self.mode!r}")
        if min(self.lr_hash, self.lr_mlp, self.lr_pose) <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def np_dtype(self):
        return {"float64": np.float64, "float32": np.float32}[self.dtype]

    def incremental_active(self) -> bool:
        if self.use_incremental is None:
            return self.mode == "global"
        return self.use_incremental


class TrainingDiverged(RuntimeError):
    pass


class AdamState:
    """Per-parameter first/second moment buffers with bias correction."""

    def __init__(self, params: list[Tensor], beta1, beta2, eps):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0


def adam_step(params: list[Tensor], state: AdamState, lr: float):
    """One Adam update; parameters with missing gradients are skipped, and a
    non-finite gradient skips the whole group with a warning."""
    grads = [p.grad for p in params]
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            warnings.warn("non-finite gradient: skipping update for this group",
                          RuntimeWarning)
            return
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = 0.0
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def _cosine_lr(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + np.cos(np.pi * min(step / max(total, 1), 1.0)))


@dataclass
class TrainResult:
    out_dir: str
    checkpoint_path: str
    log_path: str
    final_psnr_train: float
    final_median_pose_error: float | None
    field: field_mod.FieldParams
    pose_model: pose_mod.PoseModel


def _median_pose_error(model: pose_mod.PoseModel, gt: np.ndarray | None) -> float:
    if gt is None:
        return float("nan")
    est = model.estimated_rotations()
    rel_est = np.einsum("nij,kj->nik", est, est[0])
    rel_gt = np.einsum("nij,kj->nik", gt, gt[0])
    errs = [geo.angular_distance(rel_est[i], rel_gt[i]) for i in range(len(gt))]
    return float(np.median(errs))


def train(config: TrainConfig, manifest: DatasetManifest, out_dir: str,
          step_callback=None) -> TrainResult:
    """Run one experiment; writes log.csv, checkpoints and estimated poses."""
    os.makedirs(out_dir, exist_ok=True)
    dtype = config.np_dtype
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    init_rng = np.random.default_rng(seeds[0])
    loop_rng = np.random.default_rng(seeds[1])

    train_idx = manifest.indices("train")
    n_train = len(train_idx)
    targets = np.stack([manifest.load_image_tonemapped(i) for i in train_idx])
    gt_rots = manifest.gt_rotations()[train_idx] if manifest.has_ground_truth else None
    times = manifest.times[train_idx]

    params = field_mod.create_field(config.field, n_train, init_rng, dtype)
    perturbation = None
    if config.mode == "indep" and (config.perturb_mean_deg or config.perturb_std_deg):
        perturbation = (config.perturb_mean_deg, config.perturb_std_deg,
                        config.perturb_seed)
    model = pose_mod.init_pose_model(
        MODE_TO_POSE[config.mode], gt_rots, times, manifest.camera_distance,
        perturbation=perturbation, dtype=dtype)

    named = params.named_parameters()
    hash_params = [named["hash_tables"]]
    mlp_params = [t for k, t in named.items() if k != "hash_tables"]
    pose_params = list(model.learnable_parameters().values())
    adam_hash = AdamState(hash_params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    adam_mlp = AdamState(mlp_params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    adam_pose = AdamState(pose_params, config.adam_beta1, config.adam_beta2, config.adam_eps)

    h, w = manifest.height, manifest.width
    intr = manifest.intrinsics
    use_incr = config.incremental_active()
    log_path = os.path.join(out_dir, "log.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    parts = {}
    psnr = float("nan")

    with open(os.path.join(out_dir, "train_config.json"), "w") as fh:
        json.dump(asdict(config), fh, indent=1, sort_keys=True)

    log_fh = open(log_path, "w")
    log_fh.write(CSV_HEADER + "\n")

    for step in range(config.total_steps):
        m = pose_mod.active_views(step, config.incremental, n_train) if use_incr \
            else n_train
        sched_step = step if config.freeze_schedule_step is None \
            else config.freeze_schedule_step
        level_w = schedule_weights(sched_step, config.schedule, config.field.grid)

        # pixel batch, uniform over the active views
        b = config.batch_rays
        img_local = loop_rng.integers(0, m, size=b)
        rows = loop_rng.integers(0, h, size=b)
        cols = loop_rng.integers(0, w, size=b)
        target = targets[img_local, rows, cols]
        pix_dirs = intr.pixel_dirs(rows, cols)

        # per-ray integration bounds from the detached current poses
        est = model.estimated_rotations()
        d_det = np.einsum("nij,nj->ni", est[img_local], pix_dirs)
        d_det /= np.linalg.norm(d_det, axis=1, keepdims=True)
        o_det = np.einsum("nij,j->ni", est[img_local],
                          np.array([0.0, 0.0, -manifest.camera_distance]))
        t0, t1, hit = geo.ray_box_range(o_det, d_det, -0.5, 0.5)
        mid = manifest.camera_distance
        near_r = np.where(hit, np.maximum(t0, manifest.near), mid - 1e-3)
        far_r = np.where(hit, np.minimum(t1, manifest.far), mid + 1e-3)

        with dc.Tape():
            r9 = model.rotations_tensor(m, dtype)
            r9_ray = dc.gather(r9, img_local)
            d_raw = pose_mod.rot9_rotate(r9_ray, pix_dirs, dtype)
            n2 = dc.tsum(dc.mul(d_raw, d_raw), axis=1, keepdims=True)
            d_unit = dc.mul(d_raw, dc.div(Tensor(np.ones((b, 1), dtype=dtype)),
                                          dc.sqrt(n2)))
            centers = pose_mod.rot9_camera_centers(r9, manifest.camera_distance)
            o = dc.gather(centers, img_local)

            sh = sh_encode_tensor(dc.slice_axis(d_unit, 1, 0, 1),
                                  dc.slice_axis(d_unit, 1, 1, 2),
                                  dc.slice_axis(d_unit, 1, 2, 3),
                                  config.field.sh_degree)
            fe = field_mod.make_field_eval(params, level_w, sh_per_ray=sh,
                                           app_index_per_ray=img_local)
            out = ren.render_rays(o, d_unit, near_r, far_r, fe, config.render,
                                  loop_rng)

            photo = losses_mod.photometric_l2(out["radiance"], target.astype(dtype))
            opa = losses_mod.opacity_loss(out["acc"])
            rad = losses_mod.radiance_loss(out["c"])
            dist = losses_mod.distortion_loss(out["weights"], out["s_mid"],
                                              out["delta_s"])
            pose_reg = None
            if config.mode == "indep":
                pose_reg = losses_mod.pose_l1(model.corrections)
            total, parts = losses_mod.total_loss(
                photo, config.loss_weights, opacity=opa, rad=rad,
                distortion=dist, pose_reg=pose_reg)

            if not np.isfinite(parts["total"]):
                dump = os.path.join(out_dir, "diagnostic_dump.npz")
                np.savez(dump, step=step, img_local=img_local, rows=rows,
                         cols=cols, target=target, **{k: float(v) for k, v in parts.items()})
                raise TrainingDiverged(f"non-finite loss at step {step}; "
                                       f"batch dumped to {dump}")
            dc.backward(total)

        if step_callback is not None:
            step_callback(step, {
                "parts": parts, "active_views": m,
                "pose_grad": None if not pose_params or pose_params[0].grad is None
                else pose_params[0].grad.copy(),
            })

        adam_step(hash_params, adam_hash, config.lr_hash)
        adam_step(mlp_params, adam_mlp, config.lr_mlp)
        if pose_params and step >= config.pose_freeze_steps:
            adam_step(pose_params, adam_pose,
                      _cosine_lr(config.lr_pose, step, config.total_steps))
        for p in hash_params + mlp_params + pose_params:
            p.zero_grad()

        psnr = -10.0 * np.log10(parts["photo"]) if parts["photo"] > 0 else float("inf")
        med = _median_pose_error(model, gt_rots)
        log_fh.write(
            f"{step},{psnr:.10g},{parts['total']:.10g},{parts['photo']:.10g},"
            f"{parts['opacity']:.10g},{parts['radiance']:.10g},"
            f"{parts['distortion']:.10g},{parts['pose_l1']:.10g},{m},{med:.10g}\n")
        if step % 100 == 0:
            log_fh.flush()

        if (step + 1) % config.checkpoint_every == 0 and step + 1 < config.total_steps:
            _save(ckpt_path, config, manifest, params, model, train_idx, step + 1)

    _save(ckpt_path, config, manifest, params, model, train_idx, config.total_steps)
    log_fh.close()
    model.export_json(os.path.join(out_dir, "estimated_poses.json"))

    return TrainResult(
        out_dir=out_dir, checkpoint_path=ckpt_path, log_path=log_path,
        final_psnr_train=float(psnr),
        final_median_pose_error=_median_pose_error(model, gt_rots),
        field=params, pose_model=model)


def _save(path, config, manifest, params, model, train_idx, step):
    meta = {
        "field": field_mod.field_meta(params),
        "pose_mode": model.mode,
        "camera_distance": model.camera_distance,
        "step": step,
        "mode": config.mode,
        "dtype": config.dtype,
        "train_indices": [int(i) for i in train_idx],
    }
    arrays = dict(field_mod.field_to_arrays(params))
    arrays["pose.priors"] = model.priors
    arrays["pose.times"] = model.times
    if model.corrections is not None:
        arrays["pose.corrections"] = model.corrections.data
    if model.omega is not None:
        arrays["pose.omega"] = model.omega.data
    field_mod.save_checkpoint(path, meta, arrays)


def load_run(checkpoint_path: str):
    """Rebuild field and pose model from a checkpoint."""
    meta, arrays = field_mod.load_checkpoint(checkpoint_path)
    params = field_mod.field_from_arrays(meta["field"], arrays)
    model = pose_mod.PoseModel(meta["pose_mode"], arrays["pose.priors"],
                               arrays["pose.times"], meta["camera_distance"],
                               dtype=arrays["hash_tables"].dtype)
    if model.corrections is not None:
        model.corrections.data = arrays["pose.corrections"].copy()
    if model.omega is not None:
        model.omega.data = arrays["pose.omega"].copy()
    return params, model, meta
