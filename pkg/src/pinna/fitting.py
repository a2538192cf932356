"""Per-image analysis-by-synthesis fitting of latent codes and camera.

The optimization runs in two stages: first the camera alone against the
landmark and regularization terms with the latents pinned at zero, then
every parameter against the full weighted loss. Batched fitting couples
the samples through the similarity term and jitters the shape codes at
the start of stage two so identical inputs can still diverge.

The camera scale is optimized in log space so it stays positive; all
reported results use the plain scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import gradients as gr
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from .losses import (
    LandmarkSet2D,
    LossComponents,
    LossWeights,
    camera_loss,
    contour_loss,
    landmark_loss,
    photometric_loss,
    reg_loss,
    resample_polyline,
    similarity_loss,
    total_loss,
)
from .meshes import TriMesh, smooth_loss
from .morphable import EarShapeModel, LatentCode, TextureModel, decode_texture, decode_vertices, landmark_positions
from .optim import adam_init, adam_step
from .render import CameraParams, landmark_mask, project_orthographic, rasterize


class FitDivergenceError(RuntimeError):
    """Loss blew up or became non-finite; carries the trace so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class FitConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    stage1_fraction: float = 0.2
    total_iterations: int = 600
    learning_rate: float = 0.03
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    gradient_mode: str = "analytic"  # or "finite-difference"
    fd_rel_step: float = 1e-4
    contour_samples: int = 128
    seed: int = 0
    batch_init_sigma: float = 0.01
    convergence_tol: float = 1e-6
    convergence_window: int = 20
    divergence_threshold: float = 1e12
    # step-decay milestones as fractions of the full run
    lr_decay_points: tuple = (0.5, 0.75, 0.9)
    lr_decay_factor: float = 0.2
    # the contour term stays off for this share of stage 2, letting the
    # landmark term pick the basin before the chamfer landscape applies;
    # 1.0 defers the contour entirely to the polish phase
    contour_warmup_fraction: float = 0.25
    # correspondence-freezing quasi-Newton refinement after the Adam stages;
    # each round freezes the chamfer matches and minimizes the resulting
    # smooth surrogate, like ICP. Only an improving result is kept. Skipped
    # when the photometric term is active (its surface is piecewise constant).
    polish_rounds: int = 6
    polish_maxiter: int = 100

    def lr_at(self, iteration: int) -> float:
        passed = sum(iteration >= p * self.total_iterations for p in self.lr_decay_points)
        return self.learning_rate * self.lr_decay_factor**passed

    def contour_ramp(self, stage2_iteration: int, stage2_total: int) -> float:
        warmup = self.contour_warmup_fraction * stage2_total
        return 0.0 if stage2_iteration < warmup else 1.0

    def __post_init__(self):
        if not 0.0 <= self.stage1_fraction < 1.0:
            raise ValueError("stage1_fraction must lie in [0, 1)")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")
        if self.gradient_mode not in ("analytic", "finite-difference"):
            raise ValueError(f"unknown gradient_mode {self.gradient_mode!r}")


@dataclass(frozen=True)
class FitResult:
    latent: LatentCode
    camera: CameraParams
    loss_trace: list  # one dict of components + total per executed iteration
    converged: bool
    best_iteration: int

    def to_dict(self) -> dict:
        return {
            "beta": self.latent.shape.tolist(),
            "theta": self.latent.texture.tolist(),
            "camera": {
                "scale": self.camera.scale,
                "rotation": self.camera.rotation.tolist(),
                "translation": self.camera.translation.tolist(),
            },
            "converged": self.converged,
            "best_iteration": self.best_iteration,
            "loss_trace": self.loss_trace,
        }


# ---------------------------------------------------------------------------
# parameter packing: [beta | theta | log_scale, ax, ay, az, tx, ty]


class _ParamLayout:
    def __init__(self, shape_dim: int, texture_dim: int):
        self.shape_dim = shape_dim
        self.texture_dim = texture_dim
        self.camera_start = shape_dim + texture_dim
        self.size = self.camera_start + 6

    def pack(self, beta, theta, cam: CameraParams) -> np.ndarray:
        return np.concatenate(
            [beta, theta, [np.log(cam.scale)], cam.rotation, cam.translation]
        )

    def beta(self, x):
        return x[: self.shape_dim]

    def theta(self, x):
        return x[self.shape_dim : self.camera_start]

    def camera(self, x) -> CameraParams:
        c = x[self.camera_start :]
        return CameraParams(scale=float(np.exp(c[0])), rotation=c[1:4], translation=c[4:6])

    def camera_slice(self):
        return slice(self.camera_start, self.size)


def init_camera(model: EarShapeModel, gt: LandmarkSet2D) -> CameraParams:
    """Deterministic starting camera: mid-range yaw, bbox-matched scale,
    centroid-aligned translation."""
    rotation = np.array([0.0, -1.0, 0.0])
    base = CameraParams(scale=1.0, rotation=rotation, translation=np.zeros(2))
    lm3d = landmark_positions(model, decode_vertices(model, np.zeros(model.n_components)))
    pred0 = project_orthographic(lm3d, base)
    d_pred = float(np.linalg.norm(np.ptp(pred0, axis=0)))
    d_gt = float(np.linalg.norm(np.ptp(gt.points, axis=0)))
    scale = d_gt / d_pred if d_pred > 0 else 1.0
    scale = float(np.clip(scale, 0.05, 100.0))
    translation = gt.points.mean(axis=0) - scale * pred0.mean(axis=0)
    return CameraParams(scale=scale, rotation=rotation, translation=translation)


# ---------------------------------------------------------------------------
# single-sample objective


class _SampleProblem:
    """Loss and gradient evaluation for one image's parameters."""

    def __init__(self, gt, image, shape_model, texture_model, config):
        if shape_model.landmarks is None:
            raise ValueError("fitting requires a shape model with a landmark embedding")
        self.gt = gt
        self.image = image
        self.model = shape_model
        self.texture_model = texture_model
        self.config = config
        self.layout = _ParamLayout(
            shape_model.n_components,
            texture_model.n_components if texture_model is not None else 0,
        )
        self.use_photo = config.weights.photo > 0
        if self.use_photo:
            if image is None:
                raise ValueError("photometric weight is positive but no image was given")
            if texture_model is None:
                raise ValueError("photometric term needs a texture model")
            self.photo_mask = landmark_mask(gt, image.shape[:2])
        self.gt_samples = [
            resample_polyline(gt.points[g], config.contour_samples) for g in gt.groups
        ]

    def components(self, x: np.ndarray, include_photo=True) -> LossComponents:
        lay = self.layout
        beta, theta, cam = lay.beta(x), lay.theta(x), lay.camera(x)
        verts = decode_vertices(self.model, beta)
        lm3d = landmark_positions(self.model, verts)
        pred2d = project_orthographic(lm3d, cam)
        pred_set = self.gt.with_points(pred2d)
        photo = 0.0
        if self.use_photo and include_photo:
            photo = self._photo(x)
        theta_for_reg = theta if lay.texture_dim else np.zeros(1)
        return LossComponents(
            contour=contour_loss(pred_set, self.gt, self.config.contour_samples),
            sim=0.0,
            cam=camera_loss(cam),
            lmk=landmark_loss(pred2d, self.gt),
            photo=photo,
            smooth=smooth_loss(TriMesh(verts, self.model.faces)),
            reg=reg_loss(beta, theta_for_reg),
        )

    def _photo(self, x: np.ndarray) -> float:
        lay = self.layout
        beta, theta, cam = lay.beta(x), lay.theta(x), lay.camera(x)
        mesh = TriMesh(decode_vertices(self.model, beta), self.model.faces, self.model.uv)
        texture = decode_texture(self.texture_model, theta)
        rendered = rasterize(mesh, cam, texture, self.image.shape[:2])
        return photometric_loss(self.image, rendered, self.photo_mask)

    def stage1_value(self, x: np.ndarray) -> float:
        lay = self.layout
        w = self.config.weights
        beta, theta, cam = lay.beta(x), lay.theta(x), lay.camera(x)
        verts = decode_vertices(self.model, beta)
        pred2d = project_orthographic(landmark_positions(self.model, verts), cam)
        theta_for_reg = theta if lay.texture_dim else np.zeros(1)
        return w.lmk * landmark_loss(pred2d, self.gt) + w.reg * reg_loss(
            beta, theta_for_reg
        )

    def stage1_grad_camera(self, x: np.ndarray) -> np.ndarray:
        """Gradient of the stage-1 objective w.r.t. the 6 camera parameters."""
        if self.config.gradient_mode == "finite-difference":
            sl = self.layout.camera_slice()

            def f(c):
                y = x.copy()
                y[sl] = c
                return self.stage1_value(y)

            return gr.finite_difference_gradient(f, x[sl], self.config.fd_rel_step)
        lay = self.layout
        w = self.config.weights
        cam = lay.camera(x)
        verts = decode_vertices(self.model, lay.beta(x))
        lm3d = landmark_positions(self.model, verts)
        pred2d = project_orthographic(lm3d, cam)
        g2d = w.lmk * gr.landmark_loss_grad(pred2d, self.gt)
        _, g_s, g_ang, g_tr = gr.project_orthographic_backprop(lm3d, cam, g2d)
        return np.concatenate([[g_s * cam.scale], g_ang, g_tr])  # chain through log scale

    def full_value(self, x: np.ndarray, contour_scale: float = 1.0) -> float:
        comps = self.components(x)
        base = total_loss(comps, self.config.weights)
        return base - (1.0 - contour_scale) * self.config.weights.contour * comps.contour

    def full_grad(self, x: np.ndarray, contour_scale: float = 1.0) -> np.ndarray:
        if self.config.gradient_mode == "finite-difference":
            return gr.finite_difference_gradient(
                lambda y: self.full_value(y, contour_scale), x, self.config.fd_rel_step
            )
        lay = self.layout
        w = self.config.weights
        beta, theta, cam = lay.beta(x), lay.theta(x), lay.camera(x)
        verts = decode_vertices(self.model, beta)
        lm3d = landmark_positions(self.model, verts)
        pred2d = project_orthographic(lm3d, cam)
        pred_set = self.gt.with_points(pred2d)

        g2d = w.lmk * gr.landmark_loss_grad(pred2d, self.gt)
        g2d += (contour_scale * w.contour) * gr.contour_loss_grad(
            pred_set, self.gt, self.config.contour_samples
        )
        g_lm3d, g_s, g_ang, g_tr = gr.project_orthographic_backprop(lm3d, cam, g2d)

        g_verts = gr.landmark_positions_backprop(self.model, g_lm3d)
        g_verts += w.smooth * gr.smooth_loss_grad(TriMesh(verts, self.model.faces))
        g_beta = gr.decode_shape_backprop(self.model, g_verts)

        theta_for_reg = theta if lay.texture_dim else np.zeros(1)
        g_reg_beta, g_reg_theta = gr.reg_loss_grad(beta, theta_for_reg)
        g_beta += w.reg * g_reg_beta
        g_theta = w.reg * g_reg_theta if lay.texture_dim else np.zeros(0)

        dc_s, dc_ry = gr.camera_loss_grad(cam)
        g_cam = np.concatenate([[(g_s + w.cam * dc_s) * cam.scale], g_ang, g_tr])
        g_cam[2] += w.cam * dc_ry

        grad = np.concatenate([g_beta, g_theta, g_cam])
        if self.use_photo:
            grad += w.photo * gr.finite_difference_gradient(
                self._photo, x, self.config.fd_rel_step
            )
        return grad

    # -- correspondence-frozen surrogate for the polish phase ----------------

    def _geometry(self, x: np.ndarray):
        lay = self.layout
        cam = lay.camera(x)
        verts = decode_vertices(self.model, lay.beta(x))
        lm3d = landmark_positions(self.model, verts)
        return verts, cam, lm3d, project_orthographic(lm3d, cam)

    def contour_matches(self, x: np.ndarray):
        """Current nearest-neighbour pairing between resampled contours."""
        _, _, _, p2d = self._geometry(x)
        n = self.config.contour_samples
        matches = []
        for gi, g in enumerate(self.gt.groups):
            ps = resample_polyline(p2d[g], n)
            qs = self.gt_samples[gi]
            matches.append((cKDTree(qs).query(ps)[1], cKDTree(ps).query(qs)[1]))
        return matches

    def frozen_value_grad(self, x: np.ndarray, matches):
        """Full geometric loss with the chamfer matches held fixed.

        Upper-bounds the true loss (which re-minimizes over matches), so
        alternating match updates with surrogate minimization descends.
        """
        lay = self.layout
        w = self.config.weights
        n = self.config.contour_samples
        verts, cam, lm3d, p2d = self._geometry(x)
        value = 0.0
        g2d = np.zeros((len(p2d), 2))
        for gi, g in enumerate(self.gt.groups):
            ps = resample_polyline(p2d[g], n)
            qs = self.gt_samples[gi]
            a, b = matches[gi]
            da = np.linalg.norm(ps - qs[a], axis=1)
            db = np.linalg.norm(ps[b] - qs, axis=1)
            value += 0.5 * (da.mean() + db.mean()) / 4.0
            gs = 0.5 / n * np.divide(
                ps - qs[a], da[:, None], out=np.zeros_like(ps), where=da[:, None] > 0
            )
            np.add.at(
                gs,
                b,
                0.5 / n * np.divide(
                    ps[b] - qs, db[:, None], out=np.zeros_like(qs), where=db[:, None] > 0
                ),
            )
            g2d[g] += gr.resample_polyline_backprop(p2d[g], n, gs / 4.0)
        value *= w.contour
        g2d *= w.contour

        theta = lay.theta(x)
        theta_for_reg = theta if lay.texture_dim else np.zeros(1)
        mesh = TriMesh(verts, self.model.faces)
        value += (
            w.lmk * landmark_loss(p2d, self.gt)
            + w.cam * camera_loss(cam)
            + w.reg * reg_loss(lay.beta(x), theta_for_reg)
            + w.smooth * smooth_loss(mesh)
        )
        g2d += w.lmk * gr.landmark_loss_grad(p2d, self.gt)
        g_lm3d, g_s, g_ang, g_tr = gr.project_orthographic_backprop(lm3d, cam, g2d)
        g_verts = gr.landmark_positions_backprop(self.model, g_lm3d)
        g_verts += w.smooth * gr.smooth_loss_grad(mesh)
        g_beta = gr.decode_shape_backprop(self.model, g_verts)
        g_reg_beta, g_reg_theta = gr.reg_loss_grad(lay.beta(x), theta_for_reg)
        g_beta += w.reg * g_reg_beta
        g_theta = w.reg * g_reg_theta if lay.texture_dim else np.zeros(0)
        dc_s, dc_ry = gr.camera_loss_grad(cam)
        g_cam = np.concatenate([[(g_s + w.cam * dc_s) * cam.scale], g_ang, g_tr])
        g_cam[2] += w.cam * dc_ry
        return value, np.concatenate([g_beta, g_theta, g_cam])


def _polish(problems, lay, joint, config, use_sim):
    """Rounds of match-freezing quasi-Newton descent on the joint objective."""
    n = len(problems)
    w = config.weights

    def true_total(vec):
        total = 0.0
        for k, prob in enumerate(problems):
            total += prob.full_value(vec[k * lay.size : (k + 1) * lay.size])
        if use_sim:
            betas = np.stack([lay.beta(vec[k * lay.size : (k + 1) * lay.size]) for k in range(n)])
            if (np.linalg.norm(betas, axis=1) > 0).all():
                total += w.sim * similarity_loss(betas)
        return total

    best_vec = joint.copy()
    best_val = true_total(best_vec)
    current = joint.copy()
    for _ in range(config.polish_rounds):
        matches = [
            prob.contour_matches(current[k * lay.size : (k + 1) * lay.size])
            for k, prob in enumerate(problems)
        ]

        def objective(vec):
            value = 0.0
            grad = np.empty_like(vec)
            for k, prob in enumerate(problems):
                seg = slice(k * lay.size, (k + 1) * lay.size)
                v, g = prob.frozen_value_grad(vec[seg], matches[k])
                value += v
                grad[seg] = g
            if use_sim:
                betas = np.stack([lay.beta(vec[k * lay.size : (k + 1) * lay.size]) for k in range(n)])
                if (np.linalg.norm(betas, axis=1) > 0).all():
                    value += w.sim * similarity_loss(betas)
                    sg = w.sim * gr.similarity_loss_grad(betas)
                    for k in range(n):
                        grad[k * lay.size : k * lay.size + lay.shape_dim] += sg[k]
            return value, grad

        out = minimize(
            objective,
            current,
            jac=True,
            method="L-BFGS-B",
            options=dict(maxiter=config.polish_maxiter, ftol=1e-18, gtol=1e-14),
        )
        current = out.x
        val = true_total(current)
        if val < best_val:
            best_val, best_vec = val, current.copy()
    return best_vec, best_val


def _check_finite(value, trace, where, threshold=1e12):
    if not np.isfinite(value) or value > threshold:
        raise FitDivergenceError(f"loss diverged during {where} ({value})", trace)


def _converged(totals, config) -> bool:
    w = config.convergence_window
    if len(totals) <= w:
        return False
    prev, last = totals[-w - 1], totals[-1]
    return abs(last - prev) / max(abs(prev), 1e-12) < config.convergence_tol


# ---------------------------------------------------------------------------
# public entry points


def fit_image(
    landmarks: LandmarkSet2D,
    image: Optional[np.ndarray],
    shape_model: EarShapeModel,
    texture_model: Optional[TextureModel],
    config: FitConfig,
) -> FitResult:
    """Fit one image's landmarks (and optionally pixels). Deterministic."""
    return fit_batch([landmarks], [image], shape_model, texture_model, config)[0]


def fit_batch(
    landmark_sets: Sequence[LandmarkSet2D],
    images: Sequence[Optional[np.ndarray]],
    shape_model: EarShapeModel,
    texture_model: Optional[TextureModel],
    config: FitConfig,
) -> list[FitResult]:
    """Fit several samples jointly; the similarity term couples their shape
    codes during stage two (it needs at least two samples to act)."""
    if len(landmark_sets) != len(images):
        raise ValueError("need one image slot per landmark set")
    if not landmark_sets:
        return []
    problems = [
        _SampleProblem(lms, img, shape_model, texture_model, config)
        for lms, img in zip(landmark_sets, images)
    ]
    lay = problems[0].layout
    n = len(problems)
    w = config.weights
    use_sim = w.sim > 0 and n >= 2

    stage1_iters = int(round(config.stage1_fraction * config.total_iterations))
    stage2_iters = config.total_iterations - stage1_iters

    xs = []
    traces: list[list] = [[] for _ in range(n)]

    # --- stage 1: camera only, latents pinned at zero -----------------------
    for i, prob in enumerate(problems):
        x = lay.pack(
            np.zeros(lay.shape_dim), np.zeros(lay.texture_dim), init_camera(shape_model, prob.gt)
        )
        sl = lay.camera_slice()
        state = adam_init(6)
        for it in range(stage1_iters):
            g = prob.stage1_grad_camera(x)
            value = prob.stage1_value(x)
            comps = prob.components(x, include_photo=False)
            traces[i].append({**comps.as_dict(), "total": total_loss(comps, w), "stage": 1})
            _check_finite(value, traces[i], "stage 1", config.divergence_threshold)
            x[sl], state = adam_step(
                x[sl], g, state, config.lr_at(it),
                config.adam_beta1, config.adam_beta2, config.adam_eps,
            )
        xs.append(x)

    # --- stage 2: all parameters, full loss ---------------------------------
    rng = np.random.default_rng(config.seed)
    if n >= 2 and config.batch_init_sigma > 0:
        for x in xs:
            x[: lay.shape_dim] = rng.normal(0.0, config.batch_init_sigma, lay.shape_dim)

    joint = np.concatenate(xs)
    state = adam_init(joint.size)
    best = (np.inf, joint.copy(), max(stage1_iters - 1, 0))
    batch_totals = []
    for it in range(stage2_iters):
        ramp = config.contour_ramp(it, stage2_iters)
        grads = np.empty_like(joint)
        batch_total = 0.0
        betas = np.stack([lay.beta(joint[k * lay.size : (k + 1) * lay.size]) for k in range(n)])
        sim_active = use_sim and (np.linalg.norm(betas, axis=1) > 0).all()
        sim_value = similarity_loss(betas) if sim_active else 0.0
        sim_grads = (
            w.sim * gr.similarity_loss_grad(betas) if sim_active else np.zeros_like(betas)
        )
        for k, prob in enumerate(problems):
            seg = slice(k * lay.size, (k + 1) * lay.size)
            x = joint[seg]
            comps = replace(prob.components(x), sim=sim_value)
            t_val = total_loss(comps, w)
            traces[k].append({**comps.as_dict(), "total": t_val, "stage": 2})
            _check_finite(t_val, traces[k], "stage 2", config.divergence_threshold)
            batch_total += t_val
            g = prob.full_grad(x, contour_scale=ramp)
            g[: lay.shape_dim] += sim_grads[k]
            grads[seg] = g
        # the batch shares one sim term; don't double count it in the best-loss
        batch_total -= (n - 1) * w.sim * sim_value
        batch_totals.append(batch_total)
        if batch_total < best[0]:
            best = (batch_total, joint.copy(), stage1_iters + it)
        joint, state = adam_step(
            joint, grads, state, config.lr_at(stage1_iters + it),
            config.adam_beta1, config.adam_beta2, config.adam_eps,
        )

    if not np.isfinite(best[0]):
        best = (0.0, joint.copy(), config.total_iterations - 1)
    converged = _converged(batch_totals, config)

    any_photo = any(p.use_photo for p in problems)
    if config.polish_rounds > 0 and stage2_iters > 0 and not any_photo:
        # refine from both the best-loss and the final iterate; the final one
        # is where the landmark term has converged when the contour was deferred
        candidates = [best[1]]
        if not np.array_equal(joint, best[1]):
            candidates.append(joint)
        for cand in candidates:
            polished, value = _polish(problems, lay, cand, config, use_sim)
            if value < best[0]:
                best = (value, polished, best[2])

    results = []
    for k in range(n):
        x = best[1][k * lay.size : (k + 1) * lay.size]
        theta = lay.theta(x) if lay.texture_dim else np.zeros(0)
        results.append(
            FitResult(
                latent=LatentCode(lay.beta(x), theta),
                camera=lay.camera(x),
                loss_trace=traces[k],
                converged=converged,
                best_iteration=best[2],
            )
        )
    return results
