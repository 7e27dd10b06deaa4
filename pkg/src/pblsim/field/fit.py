"""Joint optimization of field contents, sensor parameters and pose offsets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from ..geometry import Pose, RangeImage, SensorIntrinsics, right_jacobian, rotvec_to_matrix, sensor_rays
from ..normals import incidence_from_depth
from ..optim import Adam, OptimizerConfig
from ..sensor_model import (EFFECTS, DistanceParams, IntensityParams, LossWeights, MaskSet,
                            apply_model_grad, intensity_loss_mask, lower_median_index)
from .grid import CHANNELS, VALUE_CHANNELS, VoxelField
from .render import (PoseOffset, accumulation_matrix, backprop_rays, column_frames, default_step,
                     render_rays)

FREE_KEYS = frozenset(CHANNELS) | {"field", "distance", "laser", "incidence", "pose_offsets"}
# learning rates used when the optimizer config names none for a group
DEFAULT_GROUP_LR = {"density": 1e-2, "intensity": 1e-2, "reflectivity": 1e-2, "drop": 1e-2,
                    "distance": 1e-3, "laser": 1e-3, "incidence": 1e-3,
                    "pose_rot": 1e-3, "pose_trans": 1e-3}
BCE_EPS = 1e-12
_CH_EPS = 1e-10


def expand_free(free: Iterable[str]) -> frozenset:
    free = set(free)
    unknown = free - FREE_KEYS
    if unknown:
        raise ValueError(f"unknown free parameter group(s): {sorted(unknown)}")
    if "field" in free:
        free.discard("field")
        free |= set(CHANNELS)
    return frozenset(free)


@dataclass
class Observation:
    image: RangeImage
    p0: Pose
    p1: Optional[Pose] = None
    # cos(phi_n) from the observed depth; computed when omitted
    cos_incidence: Optional[np.ndarray] = None
    edge_mask: Optional[np.ndarray] = None


@dataclass
class FitConfig:
    free: Iterable[str] = ("laser",)
    weights: LossWeights = field(default_factory=LossWeights)
    effects: frozenset = EFFECTS
    shutter: bool = True
    reverse: bool = False
    step: Optional[float] = None
    max_range: float = np.inf
    # frames whose pose offsets are optimized (all when None)
    pose_frames: Optional[Sequence[int]] = None
    workers: int = 1


@dataclass
class FitResult:
    field: VoxelField
    params: IntensityParams
    offsets: List[PoseOffset]
    history: List[Dict[str, float]]
    best_iteration: int
    best_loss: float

    def history_csv(self, path):
        keys = ["iteration", "total", "depth", "intensity", "raydrop", "reflectivity", "laser", "best"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for row in self.history:
                w.writerow([row["iteration"]] + [repr(float(row[k])) for k in keys[1:]])


class FitDiverged(RuntimeError):
    def __init__(self, message, state: FitResult):
        super().__init__(message)
        self.state = state


# ---------------------------------------------------------------------------
# reparameterization
# ---------------------------------------------------------------------------

def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    y = np.maximum(y, 1e-9)
    return y + np.log(-np.expm1(-y))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _logit(v):
    v = np.clip(v, _CH_EPS, 1.0 - _CH_EPS)
    return np.log(v) - np.log1p(-v)


def _distance_keys(p: DistanceParams):
    if p.near_model == "lens_defocus":
        return ("s", "q", "d_near", "k_steep", "lens_scale", "lens_offset")
    return ("s", "q", "d_near", "s_eta", "q_eta", "k_steep")


class _Codec:
    """Maps the free parameters to unconstrained arrays and back."""

    def __init__(self, free, fld: VoxelField, params: IntensityParams, n_frames, pose_frames):
        self.free = free
        self.fld = fld
        self.params = params
        self.n_frames = n_frames
        self.pose_frames = np.asarray(sorted(pose_frames), dtype=np.int64)
        self.dkeys = _distance_keys(params.distance)

    def encode(self, offsets=None) -> Dict[str, np.ndarray]:
        raw = {}
        f, p = self.fld, self.params
        if "density" in self.free:
            raw["density"] = _softplus_inv(f.flat("density"))
        for c in VALUE_CHANNELS:
            if c in self.free:
                raw[c] = _logit(f.flat(c))
        if "distance" in self.free:
            vals = [getattr(p.distance, k) for k in self.dkeys]
            raw["distance"] = np.array([v if k == "lens_offset" else math.log(max(v, 1e-12))
                                        for k, v in zip(self.dkeys, vals)])
        if "laser" in self.free:
            raw["laser"] = np.log(p.laser_powers)
        if "incidence" in self.free:
            raw["incidence"] = np.log(np.maximum([p.incidence_a, p.incidence_b], 1e-12))
        if "pose_offsets" in self.free:
            n = len(self.pose_frames)
            raw["pose_rot"] = np.zeros((n, 3))
            raw["pose_trans"] = np.zeros((n, 3))
        return raw

    def decode(self, raw):
        f = self.fld
        chans = {}
        if "density" in raw:
            chans["density"] = _softplus(raw["density"]).reshape(f.dims)
        for c in VALUE_CHANNELS:
            if c in raw:
                chans[c] = _sigmoid(raw[c]).reshape(f.dims)
        fld = f.with_channels(**chans) if chans else f
        p = self.params
        if "distance" in raw:
            kw = {k: float(v if k == "lens_offset" else math.exp(v)) for k, v in zip(self.dkeys, raw["distance"])}
            p = p.replace(distance=replace(p.distance, **kw))
        if "laser" in raw:
            p = p.replace(laser_powers=np.exp(raw["laser"]))
        if "incidence" in raw:
            a, b = np.exp(raw["incidence"])
            p = p.replace(incidence_a=float(a), incidence_b=float(b))
        offsets = [PoseOffset.zero() for _ in range(self.n_frames)]
        if "pose_rot" in raw:
            for k, fr in enumerate(self.pose_frames):
                offsets[fr] = PoseOffset(raw["pose_rot"][k], raw["pose_trans"][k])
        return fld, p, offsets

    def chain(self, raw, fld, params, g) -> Dict[str, np.ndarray]:
        """Gradients w.r.t. the raw arrays from natural-parameter gradients ``g``."""
        out = {}
        if "density" in raw:
            out["density"] = g["density"] * _sigmoid(raw["density"])
        for c in VALUE_CHANNELS:
            if c in raw:
                v = fld.flat(c)
                out[c] = g[c] * v * (1.0 - v)
        if "distance" in raw:
            out["distance"] = np.array([g["distance"][k] * (1.0 if key == "lens_offset" else
                                                            getattr(params.distance, key))
                                        for k, key in enumerate(self.dkeys)])
        if "laser" in raw:
            out["laser"] = g["laser"] * params.laser_powers
        if "incidence" in raw:
            out["incidence"] = g["incidence"] * np.array([params.incidence_a, params.incidence_b])
        if "pose_rot" in raw:
            out["pose_rot"] = g["pose_rot"]
            out["pose_trans"] = g["pose_trans"]
        return out


# ---------------------------------------------------------------------------
# per-frame state
# ---------------------------------------------------------------------------

class _Frame:
    def __init__(self, k, obs: Observation, intr: SensorIntrinsics, masks: MaskSet, cfg: FitConfig):
        H, W = intr.height, intr.width
        img = obs.image
        if img.depth.shape != (H, W):
            raise ValueError(f"observation {k} is {img.depth.shape}, sensor is {(H, W)}")
        self.k = k
        self.p0 = obs.p0
        self.p1 = obs.p0 if obs.p1 is None else obs.p1
        if obs.cos_incidence is None:
            cos, edges = incidence_from_depth(img.depth, intr, masks.incidence_threshold)
        else:
            cos = np.asarray(obs.cos_incidence, dtype=np.float64)
            edges = (np.zeros((H, W), bool) if obs.edge_mask is None
                     else np.asarray(obs.edge_mask, bool))
        self.cos = np.nan_to_num(cos, nan=1.0).ravel()
        use_inc = "incidence" in cfg.effects
        self.imask = intensity_loss_mask(img.valid, masks, cos if use_inc else None,
                                         edges if use_inc else None).ravel()
        self.dmask = (img.valid & ~masks.drop_mask).ravel()
        self.mmask = (~masks.drop_mask).ravel()
        self.valid = img.valid.ravel()
        self.depth_obs = img.depth.ravel()
        self.inten_obs = img.intensity.ravel()
        self.ring = np.repeat(np.arange(H), W)
        Rc, tc = column_frames(intr, self.p0, self.p1, cfg.shutter, cfg.reverse)
        o, d = sensor_rays(intr)
        self.a = np.einsum("wab,hwb->hwa", Rc, o).reshape(-1, 3)
        self.b = np.einsum("wab,hwb->hwa", Rc, d).reshape(-1, 3)
        self.tc = np.broadcast_to(tc[None], (H, W, 3)).reshape(-1, 3)
        self.n = H * W
        self.A = None
        self.cached = None

    def rays(self, off: Optional[PoseOffset], sel):
        a, b, tc = self.a[sel], self.b[sel], self.tc[sel]
        if off is None:
            return a + tc, b, None
        E = rotvec_to_matrix(off.rotation)
        return a @ E.T + tc + off.translation, b @ E.T, E


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _bce(p, y):
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    val = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    live = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    grad = np.where(live, (pc - y) / (pc * (1.0 - pc)), 0.0)
    return val, grad


class _Problem:
    def __init__(self, observations, intr, fld, params, masks, opt, cfg, free):
        self.intr = intr
        self.cfg = cfg
        self.opt = opt
        self.free = free
        self.step = cfg.step if cfg.step is not None else default_step(fld)
        self.frames = [_Frame(k, o, intr, masks, cfg) for k, o in enumerate(observations)]
        nf = len(self.frames)
        pose_frames = range(nf) if cfg.pose_frames is None else cfg.pose_frames
        self.pose_frames = sorted(int(k) for k in pose_frames) if "pose_offsets" in free else []
        if any(not 0 <= k < nf for k in self.pose_frames):
            raise ValueError("pose_frames outside the observation range")
        self.codec = _Codec(free, fld, params, nf, self.pose_frames)
        self.value_free = [c for c in VALUE_CHANNELS if c in free]
        self.field_free = [c for c in CHANNELS if c in free]
        self.use_drop_loss = cfg.weights.raydrop > 0 and ("drop" in free or "density" in free)
        self.rng = np.random.default_rng(opt.seed)
        self._prepare_static(fld)

    def dynamic(self, fr: _Frame) -> bool:
        return "density" in self.free or fr.k in self.pose_frames

    def _prepare_static(self, fld):
        for fr in self.frames:
            if self.dynamic(fr):
                continue
            o, d, _ = fr.rays(None, slice(None))
            if self.value_free:
                fr.A, out = accumulation_matrix(fld, o, d, self.step, self.cfg.max_range)
            else:
                out = render_rays(fld, o, d, self.step, self.cfg.max_range, workers=self.cfg.workers)
            fr.cached = out

    def _select(self, fr):
        b = self.opt.batch_rays
        if b is None or b >= fr.n or not self.dynamic(fr):
            return np.arange(fr.n)
        return np.sort(self.rng.choice(fr.n, size=b, replace=False))

    def evaluate(self, raw, need_grad=True):
        fld, params, offsets = self.codec.decode(raw)
        w = self.cfg.weights
        eff = self.cfg.effects
        per = []
        for fr in self.frames:
            sel = self._select(fr)
            off = offsets[fr.k] if fr.k in self.pose_frames else None
            if self.dynamic(fr):
                o, d, E = fr.rays(off, sel)
                out = render_rays(fld, o, d, self.step, self.cfg.max_range,
                                  skip_empty="density" not in self.free, workers=self.cfg.workers)
                vals = {c: out.channel(c) for c in VALUE_CHANNELS}
                depth, resid = out.depth, out.residual
            else:
                c0 = fr.cached
                depth, resid = c0.depth, c0.residual
                vals = {c: (fr.A @ fld.flat(c) if c in self.value_free else c0.channel(c))
                        for c in VALUE_CHANNELS}
                o = d = E = None
            istar, part = apply_model_grad(vals["intensity"], depth, fr.cos[sel], vals["reflectivity"],
                                           fr.ring[sel], params, eff)
            per.append(dict(fr=fr, sel=sel, off=off, o=o, d=d, E=E, depth=depth, resid=resid,
                            vals=vals, istar=istar, part=part))

        nI = sum(int(np.count_nonzero(x["fr"].imask[x["sel"]])) for x in per)
        nD = sum(int(np.count_nonzero(x["fr"].dmask[x["sel"]])) for x in per)
        nM = sum(int(np.count_nonzero(x["fr"].mmask[x["sel"]])) for x in per)
        comp = {"depth": 0.0, "intensity": 0.0, "raydrop": 0.0, "reflectivity": 0.0, "laser": 0.0}
        for x in per:
            fr, sel = x["fr"], x["sel"]
            mI, mD, mM = fr.imask[sel], fr.dmask[sel], fr.mmask[sel]
            rI = np.where(mI, x["istar"] - fr.inten_obs[sel], 0.0)
            rD = np.where(mD, x["depth"] - fr.depth_obs[sel], 0.0)
            x["rI"], x["rD"] = rI, rD
            if nI:
                comp["intensity"] += float(np.sum(rI * rI)) / nI
            if nD:
                comp["depth"] += float(np.sum(rD * rD)) / nD
            if self.use_drop_loss and nM:
                p = x["vals"]["drop"] + x["resid"]
                y = (~fr.valid[sel]).astype(np.float64)
                bv, bg = _bce(p, y)
                comp["raydrop"] += float(np.sum(np.where(mM, bv, 0.0))) / nM
                x["gp"] = np.where(mM, bg, 0.0) / nM
        lp = params.laser_powers
        comp["laser"] = float(np.mean(np.maximum(lp - 1.0, 0.0)))
        med_ref = None
        if w.reflectivity > 0 and params.reflect_target > 0:
            R_all = np.concatenate([x["vals"]["reflectivity"][x["fr"].valid[x["sel"]]] for x in per])
            if R_all.size:
                k = lower_median_index(R_all)
                med = R_all[k]
                comp["reflectivity"] = max(params.reflect_target - float(med), 0.0)
                med_ref = (k, med)
        if not self.use_drop_loss:
            comp["raydrop"] = 0.0
        total = sum(getattr(w, k) * v for k, v in comp.items())
        if not need_grad or not np.isfinite(total):
            return total, comp, None, (fld, params, offsets)
        return total, comp, self._backward(per, fld, params, offsets, raw, nI, nD, med_ref), \
            (fld, params, offsets)

    def _backward(self, per, fld, params, offsets, raw, nI, nD, med_ref):
        w = self.cfg.weights
        g = {c: np.zeros(fld.size) for c in self.field_free}
        H = self.intr.height
        dk = self.codec.dkeys
        g["distance"] = np.zeros(len(dk))
        g["laser"] = np.zeros(H)
        g["incidence"] = np.zeros(2)
        npf = len(self.pose_frames)
        g["pose_rot"] = np.zeros((npf, 3))
        g["pose_trans"] = np.zeros((npf, 3))
        depth_var = "density" in self.free or bool(self.pose_frames)

        # median pixel of the reflectivity regularizer, located in frame order
        med_frame, med_pix = None, None
        if med_ref is not None and w.reflectivity > 0 and params.reflect_target > med_ref[1]:
            k = med_ref[0]
            for x in per:
                vi = np.flatnonzero(x["fr"].valid[x["sel"]])
                if k < len(vi):
                    med_frame, med_pix = x["fr"].k, vi[k]
                    break
                k -= len(vi)

        for x in per:
            fr, sel, part = x["fr"], x["sel"], x["part"]
            gI = 2.0 * w.intensity * x["rI"] / nI if nI else np.zeros(len(sel))
            up = {
                "intensity": gI * part["I"],
                "reflectivity": gI * part["R"],
                "depth": (2.0 * w.depth * x["rD"] / nD if nD else 0.0) + gI * part["d"],
            }
            if fr.k == med_frame:
                up["reflectivity"] = up["reflectivity"].copy()
                up["reflectivity"][med_pix] -= w.reflectivity
            if "gp" in x:
                up["drop"] = w.raydrop * x["gp"]
                up["residual"] = w.raydrop * x["gp"]
            for k, key in enumerate(dk):
                if key in part:
                    g["distance"][k] += float(np.sum(gI * part[key]))
            if "laser" in part:
                g["laser"] += np.bincount(fr.ring[sel], gI * part["laser"], minlength=H)
            for k, key in enumerate(("incidence_a", "incidence_b")):
                if key in part:
                    g["incidence"][k] += float(np.sum(gI * part[key]))

            if self.dynamic(fr):
                if not depth_var:
                    up.pop("depth")
                want_rays = fr.k in self.pose_frames
                gb = backprop_rays(fld, x["o"], x["d"], up, self.step, self.cfg.max_range,
                                   want=self.field_free, want_rays=want_rays, workers=self.cfg.workers)
                for c in self.field_free:
                    g[c] += gb[c]
                if want_rays:
                    idx = self.pose_frames.index(fr.k)
                    off = x["off"]
                    E = x["E"]
                    gO, gD = gb["origins"], gb["dirs"]
                    a = fr.a[sel]
                    b = fr.b[sel]
                    v = np.cross(a, gO @ E) + np.cross(b, gD @ E)
                    g["pose_rot"][idx] += right_jacobian(off.rotation).T @ v.sum(axis=0)
                    g["pose_trans"][idx] += gO.sum(axis=0)
            else:
                for c in self.value_free:
                    if c in up:
                        g[c] += fr.A.T @ up[c]
        g["laser"] += w.laser * (params.laser_powers > 1.0) / H
        return self.codec.chain(raw, fld, params, g)


def fit(observations: Sequence[Observation], intr: SensorIntrinsics, init_field: VoxelField,
        init_params: IntensityParams, masks: Optional[MaskSet] = None,
        opt: Optional[OptimizerConfig] = None, config: Optional[FitConfig] = None,
        free: Optional[Iterable[str]] = None, callback=None) -> FitResult:
    """Minimize the weighted loss over the selected parameter groups.

    ``free`` (or ``config.free``) selects among ``density``, ``intensity``,
    ``reflectivity``, ``drop`` (``field`` selects all four), ``distance``,
    ``laser``, ``incidence`` and ``pose_offsets``. Learning rates per group
    come from ``opt.group_lr`` (keys as in :data:`DEFAULT_GROUP_LR`), falling
    back to ``opt.lr``. The history holds one row per iteration plus a final
    evaluation; the returned state is the best one seen.
    """
    if not observations:
        raise ValueError("need at least one observation")
    cfg = config or FitConfig()
    opt = opt or OptimizerConfig()
    free = expand_free(cfg.free if free is None else free)
    if not free:
        raise ValueError("no free parameters")
    masks = masks or MaskSet.empty(intr.height, intr.width)
    masks.check(intr.height, intr.width)
    if len(init_params.laser_powers) != intr.height:
        raise ValueError("laser_powers length does not match the sensor height")
    prob = _Problem(observations, intr, init_field, init_params, masks, opt, cfg, free)
    raw = prob.codec.encode()
    adam = Adam(opt)
    history: List[Dict[str, float]] = []
    best = (np.inf, -1, None)

    def snapshot(state):
        fld, params, offsets = state
        return FitResult(fld, params, offsets, history, best[1], best[0])

    initial = prob.codec.decode(raw)
    for it in range(opt.iterations + 1):
        need = it < opt.iterations
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                total, comp, grads, state = prob.evaluate(raw, need_grad=need)
        except (OverflowError, FloatingPointError, ValueError) as exc:
            raise FitDiverged(f"invalid state at iteration {it}: {exc}", snapshot(best[2] or initial))
        if not np.isfinite(total):
            raise FitDiverged(f"non-finite loss at iteration {it}", snapshot(best[2] or state))
        if total < best[0]:
            best = (total, it, state)
        history.append(dict(iteration=it, total=total, best=best[0], **comp))
        if callback is not None:
            callback(it, total, comp)
        if opt.log_every and it % opt.log_every == 0:
            print(f"iter {it:5d}  loss {total:.6e}")
        if not need:
            break
        if any(not np.all(np.isfinite(v)) for v in grads.values()):
            raise FitDiverged(f"non-finite gradient at iteration {it}", snapshot(best[2]))
        adam.step(raw, grads)
    fld, params, offsets = best[2]
    return FitResult(fld, params, offsets, history, best[1], best[0])


def evaluate_loss(observations, intr, fld, params, masks=None, config: Optional[FitConfig] = None,
                  free=("laser",)):
    """Loss and components at the given state (no optimization)."""
    cfg = config or FitConfig()
    masks = masks or MaskSet.empty(intr.height, intr.width)
    prob = _Problem(observations, intr, fld, params, masks, OptimizerConfig(), cfg, expand_free(free))
    total, comp, _, _ = prob.evaluate(prob.codec.encode(), need_grad=False)
    return total, comp
