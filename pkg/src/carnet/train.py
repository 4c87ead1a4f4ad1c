"""Desk-scale training for the offset candidate network.

One frame per optimization step: the frame is compressed by the transform
distorter, the network proposes offset candidates on the compressed
attributes, the per-frame mix coefficients come from an exact least-squares
solve, and the squared residual of the combined correction against the true
distortion is driven down.  The coefficients are held constant during the
backward pass, so gradients refine the candidates around the solver's
current optimum rather than differentiating through the solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import raht
from .combine import lse_solve
from .layers import Adam, Tape
from .model import (
    COMPONENTS,
    GeometryPlan,
    FilterModel,
    assemble_component_input,
    build_model,
    profile_config,
    save_weights,
)
from .pcio import PointCloudFrame, rgb_to_yuv
from .sparse import SparseTensor

BASE_LR = 1e-4
CALIBRATION_TARGET = 8.0 / 128.0
_SURFACES = ("sphere", "box", "union")
_PERMS = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))
NUM_AUGMENTS = 6 * 8  # axis permutations x axis flips


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 200
    q: float = 0.1
    component: str = "Y"
    profile: str = "desk"
    checkpoint_every: int = 0  # steps between checkpoints; 0 = final only
    epoch_frames: int | None = None  # steps per lr epoch; None = one set pass
    augment: int = 0  # extra octahedral variants packed per frame
    calibrate: bool = True  # rescale the head for the quantizer after training

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.q <= 0:
            raise ValueError("q must be positive")
        if self.component not in COMPONENTS:
            raise ValueError(f"unknown component {self.component!r}")
        if self.epoch_frames is not None and self.epoch_frames < 1:
            raise ValueError("epoch_frames must be >= 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if not 0 <= self.augment < NUM_AUGMENTS:
            raise ValueError(f"augment must be in [0, {NUM_AUGMENTS})")


def lr_schedule(step: int, epoch_frames: int) -> float:
    """Tenfold decay spread over the first ten epochs, then flat."""
    epoch = step // epoch_frames
    return BASE_LR * 0.1 ** (min(epoch, 10) / 10.0)


@dataclass(frozen=True)
class SyntheticCloudSpec:
    """Recipe for a colored voxel shell on a 2^bits grid."""

    bits: int = 5
    surface: str = "sphere"
    edge: bool = True
    noise: float = 2.0

    def __post_init__(self):
        # dense grid generation; 7 bits (128^3 candidates) is the desk ceiling
        if not 4 <= self.bits <= 7:
            raise ValueError("bits must be in [4, 7]")
        if self.surface not in _SURFACES:
            raise ValueError(f"unknown surface {self.surface!r}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def _shell_mask(grid, center, size, kind):
    rel = grid - center
    if kind == "sphere":
        dist = np.sqrt(np.sum(rel**2, axis=1))
    else:
        dist = np.max(np.abs(rel), axis=1)
    return np.abs(dist - size) <= 0.5


def generate_cloud(spec: SyntheticCloudSpec, seed: int) -> PointCloudFrame:
    """Deterministic colored shell: smooth polynomial RGB, optional edge."""
    rng = np.random.default_rng(seed)
    g = 2**spec.bits
    axes = np.arange(g, dtype=np.float64)
    grid = np.stack(np.meshgrid(axes, axes, axes, indexing="ij"), axis=-1)
    grid = grid.reshape(-1, 3)
    center = np.full(3, (g - 1) / 2.0)

    if spec.surface == "union":
        mask = np.zeros(len(grid), dtype=bool)
        for kind in ("sphere", "box"):
            off = rng.uniform(-g / 8, g / 8, size=3)
            size = rng.uniform(g / 5, g / 3)
            mask |= _shell_mask(grid, center + off, size, kind)
    else:
        size = rng.uniform(g / 4, g / 2 - 2)
        mask = _shell_mask(grid, center, size, spec.surface)
    pts = grid[mask]
    if len(pts) < 64:
        raise ValueError(f"degenerate spec: shell has {len(pts)} points (< 64)")

    p = (pts - center) / (g / 2.0)
    terms = np.stack(
        [
            np.ones(len(p)),
            p[:, 0], p[:, 1], p[:, 2],
            p[:, 0] * p[:, 1], p[:, 1] * p[:, 2], p[:, 2] * p[:, 0],
            p[:, 0] ** 2, p[:, 1] ** 2, p[:, 2] ** 2,
        ],
        axis=1,
    )
    coef = rng.uniform(-1.0, 1.0, size=(terms.shape[1], 3))
    field = terms @ coef
    span = np.ptp(field, axis=0)
    span[span == 0] = 1.0
    colors = 32.0 + 192.0 * (field - field.min(axis=0)) / span

    if spec.edge:
        axis = rng.integers(3)
        thresh = rng.uniform(-0.3, 0.3)
        channel = rng.integers(3)
        jump = rng.uniform(20.0, 60.0) * rng.choice([-1.0, 1.0])
        colors[p[:, axis] > thresh, channel] += jump
    if spec.noise > 0:
        colors += rng.normal(0.0, spec.noise, size=colors.shape)
    colors = np.clip(colors, 0.0, 255.0)
    return PointCloudFrame(
        pts.astype(np.int64), colors, "rgb",
        source=f"synthetic-{spec.surface}-{seed}",
    )


def make_training_set(count: int, seed: int, bits: int = 5, **kw) -> list:
    """Deterministic list of frames cycling through the shell types."""
    sub = np.random.SeedSequence(seed).generate_state(count)
    return [
        generate_cloud(
            SyntheticCloudSpec(bits=bits, surface=_SURFACES[i % 3], **kw), int(s)
        )
        for i, s in enumerate(sub)
    ]


def augment_frame(frame: PointCloudFrame, code: int) -> PointCloudFrame:
    """One of 48 octahedral geometry variants; code 0 is the identity.

    The distorter's merge order is axis-dependent, so each variant yields a
    genuinely different compression artifact pattern for the same colors.
    """
    if not 0 <= code < NUM_AUGMENTS:
        raise ValueError(f"code must be in [0, {NUM_AUGMENTS})")
    coords = frame.coords[:, _PERMS[code % 6]].copy()
    flips = code // 6
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    for axis in range(3):
        if (flips >> axis) & 1:
            coords[:, axis] = hi[axis] + lo[axis] - coords[:, axis]
    return PointCloudFrame(
        coords, frame.attrs, frame.colorspace, frame.bitdepth, frame.source
    )


@dataclass(frozen=True)
class FramePack:
    """Per-frame training quantities, fixed once the distorter has run."""

    plan: GeometryPlan
    feats_in: SparseTensor
    distortion: np.ndarray  # (F - F_hat) / peak for the trained component
    num_points: int
    bpp: float


def pack_frame(model: FilterModel, frame: PointCloudFrame, q: float) -> FramePack:
    yuv = rgb_to_yuv(frame) if frame.colorspace == "rgb" else frame
    hat, bpp = raht.distort(frame.coords, yuv.attrs, q, peak=frame.peak)
    ch = COMPONENTS.index(model.cfg.component)
    d = (yuv.attrs[:, ch] - hat[:, ch]) / frame.peak
    feats = assemble_component_input(frame.coords, hat, model.cfg.component)
    return FramePack(model.plan(frame.coords), feats, d, len(d), bpp)


def step_loss(model, params, pack: FramePack, coeffs=None, tape: Tape | None = None):
    """Mean squared residual of the combined offsets against the distortion.

    Solves for the mix coefficients when none are supplied.  With a tape the
    candidate gradients are seeded with the coefficients held constant.
    Returns (loss, coeffs).
    """
    r = model.forward(params, pack.feats_in, pack.plan, tape)
    a = lse_solve(r.feats, pack.distortion) if coeffs is None else coeffs
    resid = r.feats @ a - pack.distortion
    loss = float(resid @ resid) / pack.num_points
    if tape is not None:
        tape.backward(r.feats, (2.0 / pack.num_points) * np.outer(resid, a))
    return loss, a


def train_step(model, params, opt: Adam, frame: PointCloudFrame, q: float):
    """Distort one frame and apply one optimizer step.

    Returns (loss, applied); a non-finite loss or gradient leaves the
    parameters untouched and reports applied=False.
    """
    pack = pack_frame(model, frame, q)
    return _apply_step(model, params, opt, pack)


def _apply_step(model, params, opt, pack):
    tape = Tape()
    loss, _ = step_loss(model, params, pack, tape=tape)
    if not np.isfinite(loss):
        opt.skipped += 1
        return loss, False
    return loss, opt.step(tape.param_grads)


@dataclass
class TrainResult:
    model: FilterModel
    params: dict
    losses: list
    skipped: int


def calibrate_head(model, params, packs, target: float = CALIBRATION_TARGET) -> float:
    """Rescale the head so solved per-frame mixes sit mid-range of the
    5-bit quantizer.

    Scaling the head by gamma maps R to gamma R and the solved mix to
    a / gamma, leaving R a (and therefore the loss) untouched; only the
    quantizer's operating point moves.  Returns the applied gamma.
    """
    mags = []
    for p in packs:
        r = model.forward(params, p.feats_in, p.plan).feats
        mags.append(np.abs(lse_solve(r, p.distortion)))
    med = float(np.median(np.concatenate(mags)))
    if not np.isfinite(med) or med <= 0.0:
        return 1.0
    gamma = med / target
    params[model.head.weight_name] *= gamma
    params[model.head.bias_name] *= gamma
    return gamma


def train(cfg: TrainConfig, frames, out_path=None, log=None) -> TrainResult:
    """Run the loop, cycling the packed frame list one frame per step.

    Frames are distorted once up front; the distorter is deterministic, so
    reusing the packed result step-to-step changes nothing but wall time.
    With cfg.augment > 0 each frame is additionally packed under that many
    distinct octahedral variants, and the pack order is shuffled once.
    """
    if not frames:
        raise ValueError("no training frames")
    init_ss, aug_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    model = build_model(profile_config(cfg.profile, cfg.component))
    params = model.init_params(np.random.default_rng(init_ss))
    opt = Adam(params)
    aug_rng = np.random.default_rng(aug_ss)
    packs = []
    for frame in frames:
        codes = [0]
        if cfg.augment:
            codes += list(
                aug_rng.choice(np.arange(1, NUM_AUGMENTS), cfg.augment, replace=False)
            )
        packs.extend(
            pack_frame(model, augment_frame(frame, int(c)), cfg.q) for c in codes
        )
    if cfg.augment:
        packs = [packs[i] for i in aug_rng.permutation(len(packs))]
    epoch_frames = cfg.epoch_frames or len(packs)

    losses = []
    skipped = 0
    for step in range(cfg.steps):
        opt.lr = lr_schedule(step, epoch_frames)
        loss, applied = _apply_step(model, params, opt, packs[step % len(packs)])
        if not applied:
            skipped += 1
        losses.append(loss)
        if log is not None:
            flag = "" if applied else " skipped"
            print(f"step {step + 1} loss {loss:.6e} lr {opt.lr:.3e}{flag}", file=log)
        if (
            out_path
            and cfg.checkpoint_every
            and (step + 1) % cfg.checkpoint_every == 0
        ):
            save_weights(out_path, model.cfg, params, opt.state_dict())
    if cfg.calibrate:
        calibrate_head(model, params, packs)
    if out_path:
        save_weights(out_path, model.cfg, params, opt.state_dict())
    return TrainResult(model, params, losses, skipped)
