"""Training loops: Gaussian fitting passes, texture-stage reconstruction, and
texture-space fine-tuning.

Gradients are assembled by hand from the module-level backward functions;
splatmesh.optim.fd_check arbitrates the full chains. All loops are
single-threaded and deterministic under their seeds.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix

from . import boundary as BD
from . import losses as LS
from .bvh import Bvh
from .gaussians import GaussianSet, FrameSet, globalize, globalize_bwd, scale_loss, \
    world_frames, uvw_frames, _sigmoid
from .lighting import SHLighting, occlusion_map, pixel_normal, pixel_normal_bwd, \
    rotation_reg, lighting_reg
from .mesh import Mesh, EdgeAdjacency, build_adjacency, augment_cross_group, \
    face_normals, face_centroids
from .optim import Adam, DEFAULT_RATES
from .render import Camera, composite, composite_bwd, depth_order, project, \
    project_bwd, view_colors, view_colors_bwd, visible_triangles, make_gbuffer, \
    render_ortho_uvw
from .rotations import normalize_quats, wrap_axis_angle
from .sh import sh_basis, sh_eval, sh_eval_bwd, n_coeffs
from .texture import PcaTexture, bilinear_setup, bilinear_sample, bilinear_adjoint, \
    composed_pixel, composed_pixel_bwd, delit_pixel, blending_loss, view_color_loss


def uv_frame_drop_pairs(adj: EdgeAdjacency, frames: FrameSet, max_angle_deg: float) -> EdgeAdjacency:
    """Copy of the adjacency with pairs of strongly disagreeing UV frames
    removed (texture-chart discontinuities)."""
    cos_thresh = np.cos(np.deg2rad(max_angle_deg))
    u = frames.R[:, :, 0]
    out = []
    for i, nbrs in enumerate(adj.neighbors):
        out.append([j for j in nbrs if float(u[i] @ u[j]) >= cos_thresh])
    return EdgeAdjacency(out)


@dataclass
class FitContext:
    """Static per-stage data for the Gaussian fitting passes."""

    mesh: Mesh
    frames: FrameSet
    adj: tuple                 # adjacency arrays for center/boundary losses
    adj_normal: tuple          # chart-filtered variant for the normal loss
    nbrs: np.ndarray           # UV kNN table for boundary extraction
    tri_normals: np.ndarray
    tri_centroids: np.ndarray
    onehot: np.ndarray         # (N, L) fixed label one-hots
    n_labels: int
    targets: list              # (H, W, 3) per view
    label_images: list         # (H, W) per view
    ignore_label: int
    socket_idx: np.ndarray     # Gaussian indices (socket group)
    eyeball_idx: np.ndarray
    tau: float = 0.5
    p_drop: float = 0.9
    background_label: int = 0
    view_batch: np.ndarray = None   # capture-batch id per view
    view_weights: np.ndarray = None  # sampling weights per view


def build_fit_context(mesh: Mesh, targets, label_images, n_labels: int,
                      ignore_label: int = 255, tau: float = 0.5, k_nbrs: int = 8,
                      p_drop: float = 0.9, uv_drop_deg: float = 60.0,
                      view_batch=None, view_weights=None) -> FitContext:
    frames = world_frames(mesh, "uv")
    adj = build_adjacency(mesh)
    if mesh.groups.get("face") and mesh.groups.get("eyeball"):
        adj = augment_cross_group(adj, mesh, "face", "eyeball")
    adj_normal = uv_frame_drop_pairs(adj, frames, uv_drop_deg)
    onehot = np.zeros((mesh.num_triangles, n_labels))
    onehot[np.arange(mesh.num_triangles), mesh.labels] = 1.0
    n_views = len(targets)
    return FitContext(
        mesh=mesh,
        frames=frames,
        adj=LS.adjacency_arrays(adj),
        adj_normal=LS.adjacency_arrays(adj_normal),
        nbrs=BD.knn_uv(mesh, k_nbrs),
        tri_normals=face_normals(mesh),
        tri_centroids=face_centroids(mesh),
        onehot=onehot,
        n_labels=n_labels,
        targets=targets,
        label_images=label_images,
        ignore_label=ignore_label,
        socket_idx=np.asarray(mesh.groups.get("socket", []), dtype=np.int64),
        eyeball_idx=np.asarray(mesh.groups.get("eyeball", []), dtype=np.int64),
        tau=tau,
        p_drop=p_drop,
        view_batch=np.zeros(n_views, dtype=np.int64) if view_batch is None else np.asarray(view_batch),
        view_weights=np.full(n_views, 1.0 / n_views) if view_weights is None else
        np.asarray(view_weights, dtype=np.float64) / np.sum(view_weights),
    )


def _zero_grads(gs: GaussianSet) -> dict:
    return {
        "mu_local": np.zeros_like(gs.mu_local),
        "rot_local": np.zeros_like(gs.rot_local),
        "log_scale": np.zeros_like(gs.log_scale),
        "opacity_logit": np.zeros_like(gs.opacity_logit),
        "sh_color": np.zeros_like(gs.sh_color),
        "albedo": np.zeros_like(gs.albedo),
        "beta_logit": np.zeros_like(gs.beta_logit),
        "normal_rot": np.zeros_like(gs.normal_rot),
    }


def local_normal_feature(gs: GaussianSet):
    """Third column of the local covariance (the Gaussian's local normal)."""
    from .rotations import quat_to_rot
    Rq = quat_to_rot(gs.rot_local)
    S2 = np.exp(2.0 * gs.log_scale)
    sigma = (Rq * S2[:, None, :]) @ np.swapaxes(Rq, 1, 2)
    return sigma[:, :, 2], {"Rq": Rq, "S2": S2}


def local_normal_feature_bwd(gs: GaussianSet, cache, dz):
    """Backward of local_normal_feature onto (rot_local, log_scale)."""
    from .rotations import quat_to_rot_bwd
    Rq, S2 = cache["Rq"], cache["S2"]
    n = len(gs.rot_local)
    dsig = np.zeros((n, 3, 3))
    dsig[:, :, 2] = dz
    A = Rq * np.sqrt(S2)[:, None, :]
    dA = (dsig + np.swapaxes(dsig, 1, 2)) @ A
    dRq = dA * np.sqrt(S2)[:, None, :]
    dS_sqrt = np.einsum("njk,njk->nk", Rq, dA)
    dlog_scale = dS_sqrt * np.sqrt(S2)  # d/dls sqrt(exp(2 ls)) = exp(ls)
    dquat = quat_to_rot_bwd(gs.rot_local, dRq)
    return dquat, dlog_scale


def fit_forward_backward(gs: GaussianSet, cam: Camera, view: int, ctx: FitContext,
                         weights: LS.LossWeights, variant: str,
                         active: np.ndarray | None = None,
                         optimize_camera: bool = False,
                         terms: set | None = None):
    """One view's full fit loss with gradients.

    variant selects the camera/geometry values of the center and boundary
    weights; terms (None = all) restricts the loss terms, which the gradient
    checker uses to validate each in isolation. Returns (parts, grads,
    cam_grads)."""
    all_terms = {"img", "seg", "scale", "center", "normal", "boundary", "eyes"}
    terms = all_terms if terms is None else set(terms)
    lam_center = weights.center_camera if variant == "camera" else weights.center_geometry
    lam_boundary = weights.boundary_camera if variant == "camera" else weights.boundary_geometry

    n = len(gs)
    grads = _zero_grads(gs)
    cam_grads = {"rot": np.zeros(3), "trans": np.zeros(3)}
    parts = {}

    mu, cov, g_cache = globalize(gs, ctx.frames)
    alpha = gs.opacity()
    dmu = np.zeros_like(mu)
    dcov = np.zeros_like(cov)
    dalpha = np.zeros(n)

    # rendered terms
    if terms & {"img", "seg"}:
        mu2d, cov2d, depth, p_tape = project(mu, cov, cam)
        batch = int(ctx.view_batch[view])
        colors, vc_cache = view_colors(gs.sh_color[:, batch], mu, cam.center(), gs.sh_degree)
        channels = np.concatenate([colors, ctx.onehot, np.ones((n, 1))], axis=1)
        valid = p_tape.valid.copy()
        if active is not None:
            valid &= active
        order = depth_order(depth, valid)
        H, W = cam.height, cam.width
        out, c_tape = composite(mu2d, cov2d, alpha, channels, order, W, H)
        color_img = out[..., :3]
        seg_img = out[..., 3:3 + ctx.n_labels]
        alpha_img = out[..., -1]

        d_out = np.zeros_like(out)
        if "img" in terms:
            l_img, d_color = LS.image_loss(color_img, ctx.targets[view], weights.dssim)
            parts["img"] = l_img
            d_out[..., :3] += d_color
        if "seg" in terms:
            lab = ctx.label_images[view]
            ignore = lab == ctx.ignore_label
            l_seg, d_seg, d_alpha_img = LS.segmentation_loss(
                seg_img, alpha_img, np.where(ignore, 0, lab), ignore, ctx.background_label)
            parts["seg"] = l_seg
            d_out[..., 3:3 + ctx.n_labels] += weights.seg * d_seg
            d_out[..., -1] += weights.seg * d_alpha_img

        c_grads = composite_bwd(c_tape, channels, d_out)
        d_colors = c_grads["dchannels"][:, :3]
        dsh, dmu_vc, dcenter = view_colors_bwd(vc_cache, d_colors)
        grads["sh_color"][:, batch] += dsh
        dmu += dmu_vc
        dalpha += c_grads["dalpha"]
        dmu_p, dcov_p, drot, dtrans = project_bwd(p_tape, c_grads["dmu2d"], c_grads["dcov2d"])
        dmu += dmu_p
        dcov += dcov_p
        if optimize_camera:
            R = p_tape.R
            cam_grads["rot"] += drot
            cam_grads["trans"] += dtrans
            # camera center feeds the view directions: center = -R^T t
            from .rotations import axis_angle_to_rot_bwd
            cam_grads["rot"] += axis_angle_to_rot_bwd(cam.rot, -np.outer(cam.trans, dcenter))
            cam_grads["trans"] += -R @ dcenter

    if "scale" in terms:
        l_scale, d_ls = scale_loss(gs)
        parts["scale"] = l_scale
        grads["log_scale"] += weights.scale * d_ls

    if "center" in terms:
        z = mu - ctx.tri_centroids[gs.tri]
        l_center, dz = LS.laplacian_feature_loss(z, ctx.adj)
        parts["center"] = l_center
        dmu += lam_center * dz

    if "normal" in terms:
        z, nf_cache = local_normal_feature(gs)
        l_normal, dz = LS.laplacian_feature_loss(z, ctx.adj_normal)
        parts["normal"] = l_normal
        dq, dls = local_normal_feature_bwd(gs, nf_cache, weights.normal * dz)
        grads["rot_local"] += dq
        grads["log_scale"] += dls

    if terms & {"boundary", "eyes"}:
        normals = ctx.tri_normals[gs.tri]
        res = BD.boundary_max(mu, cov, alpha, normals, ctx.nbrs, ctx.tau)
        dx_star = np.zeros((n, 3))
        if "boundary" in terms:
            z = res.x - ctx.tri_centroids[gs.tri]
            l_bnd, dz = LS.laplacian_feature_loss(z, ctx.adj)
            parts["boundary"] = l_bnd
            dx_star += lam_boundary * dz
        if "eyes" in terms and len(ctx.socket_idx) and len(ctx.eyeball_idx):
            l_eyes, ds, de = LS.eyes_loss(res.x[ctx.socket_idx], res.x[ctx.eyeball_idx])
            parts["eyes"] = l_eyes
            np.add.at(dx_star, ctx.socket_idx, weights.eyes * ds)
            np.add.at(dx_star, ctx.eyeball_idx, weights.eyes * de)
        dmu_b, dcov_b, dalpha_b = BD.boundary_max_bwd(res, dx_star)
        dmu += dmu_b
        dcov += dcov_b
        dalpha += dalpha_b

    # shared chains
    dml, dq, dls = globalize_bwd(gs, g_cache, dmu, dcov)
    grads["mu_local"] += dml
    grads["rot_local"] += dq
    grads["log_scale"] += dls
    grads["opacity_logit"] += dalpha * alpha * (1.0 - alpha)

    weights_map = {"img": 1.0, "seg": weights.seg, "scale": weights.scale,
                   "center": lam_center, "normal": weights.normal,
                   "boundary": lam_boundary, "eyes": weights.eyes}
    parts["total"] = sum(weights_map[k] * v for k, v in parts.items() if k != "total")
    return parts, grads, cam_grads


def _post_step(gs: GaussianSet) -> None:
    gs.rot_local = normalize_quats(gs.rot_local)
    gs.normal_rot = wrap_axis_angle(gs.normal_rot)
    np.clip(gs.albedo, 0.0, 1.0, out=gs.albedo)


def run_fit_stage(gs: GaussianSet, cams: list[Camera], ctx: FitContext,
                  weights: LS.LossWeights, variant: str, iterations: int,
                  optimize_cameras: bool, seed: int, log_path=None,
                  rates: dict | None = None, visibility_refresh: int = 500,
                  mesh_bvh: Bvh | None = None):
    """One Gaussian optimization pass (camera or geometry variant).

    Each iteration renders one sampled view; visibility dropout uses the
    per-view visible-triangle sets, refreshed periodically because the
    cameras move during the camera pass. Returns the per-iteration log."""
    rng = np.random.default_rng(seed)
    rates = dict(DEFAULT_RATES if rates is None else rates)
    params = {"mu_local": gs.mu_local, "rot_local": gs.rot_local,
              "log_scale": gs.log_scale, "opacity_logit": gs.opacity_logit,
              "sh_color": gs.sh_color, "albedo": gs.albedo,
              "beta_logit": gs.beta_logit, "normal_rot": gs.normal_rot}
    group_of = {"mu_local": "gaussians", "rot_local": "gaussians",
                "opacity_logit": "gaussians", "sh_color": "gaussians",
                "albedo": "gaussians", "normal_rot": "gaussians",
                "log_scale": "scale", "beta_logit": "blend"}
    opt = Adam(params, {k: rates[group_of[k]] for k in params})
    cam_opts = None
    if optimize_cameras:
        cam_opts = [Adam({"rot": c.rot, "trans": c.trans},
                         {"rot": rates["camera"], "trans": rates["camera"]})
                    for c in cams]

    if mesh_bvh is None:
        mesh_bvh = Bvh(ctx.mesh)
    visible: list[np.ndarray] = [None] * len(cams)
    log = []
    t0 = time.time()
    for it in range(iterations):
        view = int(rng.choice(len(cams), p=ctx.view_weights))
        if visible[view] is None or (it > 0 and it % visibility_refresh == 0):
            visible[view] = visible_triangles(ctx.mesh, cams[view], mesh_bvh)
        active = LS.visibility_dropout(visible[view], gs.tri, ctx.p_drop,
                                       seed=seed * 1000003 + it)
        parts, grads, cam_grads = fit_forward_backward(
            gs, cams[view], view, ctx, weights, variant, active,
            optimize_camera=optimize_cameras)
        opt.step(grads)
        _post_step(gs)
        if optimize_cameras:
            cam_opts[view].step(cam_grads)
        row = {"iteration": it, "view": view, **{k: float(v) for k, v in parts.items()},
               "wall_time": time.time() - t0}
        log.append(row)
    if log_path is not None and log:
        keys = sorted({k for r in log for k in r})
        with open(log_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=keys)
            w.writeheader()
            for r in log:
                w.writerow({k: r.get(k, "") for k in keys})
    return log


# ---------------------------------------------------------------------------
# texture / lighting stage


@dataclass
class ViewCache:
    """Fixed per-view data for the texture stage (geometry frozen)."""

    cam: Camera
    gbuffer: object
    pix_idx: tuple            # mesh-pixel indices into the image
    weight_matrix: csr_matrix  # (P, N) compositing weights T_i w_i
    alpha: np.ndarray          # (P,)
    alpha_ok: np.ndarray       # (P,) alpha above the normalization floor
    sh_basis_view: np.ndarray  # (N, K) per-Gaussian SH basis at the view dir
    tex_idx: np.ndarray        # bilinear indices into the texture
    tex_w: np.ndarray
    target: np.ndarray         # (H, W, 3)
    target_masked: np.ndarray
    occlusion: np.ndarray = None   # (P, 3)


def _composite_weight_matrix(mu2d, cov2d, alpha, order, width, height, pix_map):
    """Sparse (mesh pixels x Gaussians) matrix of compositing weights."""
    ones = np.ones((len(alpha), 1))
    out, tape = composite(mu2d, cov2d, alpha, ones, order, width, height)
    rows, cols, vals = [], [], []
    for i, sl, dx, dy, w, T_before in tape.entries:
        pm = pix_map[sl]
        tw = (T_before * w).ravel()
        pmr = pm.ravel()
        keep = (pmr >= 0) & (tw > 0)
        rows.append(pmr[keep])
        cols.append(np.full(int(keep.sum()), i, dtype=np.int64))
        vals.append(tw[keep])
    n_pix = int(pix_map.max()) + 1 if (pix_map >= 0).any() else 0
    if rows:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
    return csr_matrix((vals, (rows, cols)), shape=(n_pix, len(alpha)))


class TextureStage:
    """Joint lighting / de-lit texture reconstruction on frozen geometry.

    Learnable: per-Gaussian albedo, view-dependent SH color, blend logits,
    normal rotations; global SH lighting; active PCA texture coefficients.
    Opacity, position, rotation, and scale stay fixed."""

    def __init__(self, gs: GaussianSet, mesh: Mesh, cams: list[Camera],
                 targets: list, tex_basis: PcaTexture, lighting: SHLighting,
                 weights: LS.LossWeights, seed: int = 0,
                 occlusion_samples: int = 64, occlusion_refresh: int = 500,
                 rates: dict | None = None, view_batch=None,
                 compute_occlusion: bool = True):
        self.gs = gs
        self.mesh = mesh
        self.weights = weights
        self.basis = tex_basis
        self.l = lighting.l.copy()
        self.seed = seed
        self.occ_samples = occlusion_samples
        self.occ_refresh = occlusion_refresh
        self.bvh = Bvh(mesh)
        self.view_batch = (np.zeros(len(cams), dtype=np.int64) if view_batch is None
                           else np.asarray(view_batch))

        frames = world_frames(mesh, "uv")
        mu, cov, _ = globalize(gs, frames)
        self.mu = mu
        alpha = gs.opacity()
        R = tex_basis.resolution
        self.n_active = tex_basis.n_active
        self.coeffs = tex_basis.coeffs[:tex_basis.n_active].copy()
        self.views: list[ViewCache] = []
        for v, cam in enumerate(cams):
            gb = make_gbuffer(mesh, cam, self.bvh)
            idx = np.nonzero(gb.mask)
            pix_map = np.full(gb.mask.shape, -1, dtype=np.int64)
            pix_map[idx] = np.arange(len(idx[0]))
            mu2d, cov2d, depth, ptape = project(mu, cov, cam)
            order = depth_order(depth, ptape.valid)
            Wmat = _composite_weight_matrix(mu2d, cov2d, alpha, order,
                                            cam.width, cam.height, pix_map)
            al = np.asarray(Wmat.sum(axis=1)).ravel()
            bidx, bw = bilinear_setup(gb.uv[idx], R)
            d = mu - cam.center()
            vdir = d / np.linalg.norm(d, axis=1, keepdims=True)
            Y = sh_basis(vdir, gs.sh_degree)
            tgt = targets[v]
            tgt_masked = np.where(gb.mask[..., None], tgt, 0.0)
            self.views.append(ViewCache(cam, gb, idx, Wmat, al, al > 1e-4, Y,
                                        bidx, bw, tgt, tgt_masked))
        # sampled texture basis per view (mean and active modes at mesh pixels)
        self._base_samples = []
        self._mode_samples = []
        for vc in self.views:
            self._base_samples.append(bilinear_sample(self.basis.mean, vc.tex_idx, vc.tex_w))
            modes = np.stack([bilinear_sample(self.basis.modes[m], vc.tex_idx, vc.tex_w)
                              for m in range(self.n_active)], axis=1)  # (P, M, 3)
            self._mode_samples.append(modes)
        self.rates = dict(DEFAULT_RATES if rates is None else rates)
        if compute_occlusion:
            self.refresh_occlusion()
        else:
            for vc in self.views:
                vc.occlusion = np.ones((len(vc.alpha), 3))

    def refresh_occlusion(self):
        """Recompute per-view occlusion maps with the current (lagged) l."""
        for v, vc in enumerate(self.views):
            om = occlusion_map(vc.gbuffer, self.bvh, self.l,
                               samples=self.occ_samples, seed=self.seed + 77 * v)
            vc.occlusion = om.f_visible[vc.pix_idx]

    def view_forward(self, v: int):
        """Per-pixel quantities for view v under current parameters."""
        vc = self.views[v]
        gs = self.gs
        batch = int(self.view_batch[v])
        Wm = vc.weight_matrix
        albedo_p = Wm @ gs.albedo
        colors = np.einsum("nk,nck->nc", vc.sh_basis_view, gs.sh_color[:, batch])
        c_p = Wm @ colors
        beta = gs.beta()
        beta_p = np.where(vc.alpha_ok, (Wm @ beta) / np.maximum(vc.alpha, 1e-12), 0.0)
        nrot_p = np.where(vc.alpha_ok[:, None],
                          (Wm @ gs.normal_rot) / np.maximum(vc.alpha, 1e-12)[:, None], 0.0)
        n_interp = vc.gbuffer.normal[vc.pix_idx]
        n_p, pn_cache = pixel_normal(n_interp, nrot_p)
        irr = sh_eval(self.l, n_p)
        light = vc.occlusion * irr
        tex = self._base_samples[v] + np.einsum("m,pmc->pc", self.coeffs, self._mode_samples[v])
        out_p = composed_pixel(tex, light, albedo_p, c_p, beta_p)
        return {"vc": vc, "batch": batch, "albedo_p": albedo_p, "colors": colors,
                "c_p": c_p, "beta_p": beta_p, "nrot_p": nrot_p, "n_p": n_p,
                "pn_cache": pn_cache, "irr": irr, "light": light, "tex": tex,
                "out_p": out_p, "beta": beta}

    def loss_and_grads(self, v: int, terms: set | None = None):
        """Image loss plus texture-stage regularizers with full gradients."""
        all_terms = {"img", "lighting", "rotation", "blending", "view"}
        terms = all_terms if terms is None else set(terms)
        w = self.weights
        st = self.view_forward(v)
        vc = st["vc"]
        gs = self.gs
        H, W = vc.target.shape[:2]
        parts = {}
        grads = {"albedo": np.zeros_like(gs.albedo),
                 "sh_color": np.zeros_like(gs.sh_color),
                 "beta_logit": np.zeros_like(gs.beta_logit),
                 "normal_rot": np.zeros_like(gs.normal_rot),
                 "l": np.zeros((9, 3)),
                 "coeffs": np.zeros(self.n_active)}

        d_out_p = np.zeros_like(st["out_p"])
        d_beta_p = np.zeros(len(st["beta_p"]))
        d_nrot_p = np.zeros_like(st["nrot_p"])
        d_colors = np.zeros_like(st["colors"])

        if "img" in terms:
            img = np.zeros((H, W, 3))
            img[vc.pix_idx] = st["out_p"]
            l_img, d_img = LS.image_loss(img, vc.target_masked, w.dssim)
            parts["img"] = l_img
            d_out_p += d_img[vc.pix_idx]

        dtex, dlight, dalbedo_p, dview_p, dbeta_img = composed_pixel_bwd(
            st["tex"], st["light"], st["albedo_p"], st["c_p"], st["beta_p"], d_out_p)
        d_beta_p += dbeta_img

        if "blending" in terms:
            l_blend, d_b = blending_loss(st["beta_p"])
            parts["blending"] = l_blend
            d_beta_p += w.blending * d_b
        if "view" in terms:
            l_view, d_v = view_color_loss(st["colors"])
            parts["view"] = l_view
            d_colors += w.view * d_v
        if "rotation" in terms:
            l_rot, d_r = rotation_reg(st["nrot_p"])
            parts["rotation"] = l_rot
            d_nrot_p += w.rotation * d_r
        if "lighting" in terms:
            l_l, d_l = lighting_reg(self.l)
            parts["lighting"] = l_l
            grads["l"] += w.lighting * d_l

        # light = occlusion * sh_eval(l, n_p)
        d_irr = dlight * vc.occlusion
        dl_sh, dn_p = sh_eval_bwd(self.l, st["n_p"], d_irr)
        grads["l"] += dl_sh
        d_nrot_p += pixel_normal_bwd(st["pn_cache"], dn_p)

        # texture: base + modes @ coeffs
        grads["coeffs"] += np.einsum("pc,pmc->m", dtex, self._mode_samples[v])

        Wm = vc.weight_matrix
        grads["albedo"] += Wm.T @ dalbedo_p
        d_colors += Wm.T @ dview_p
        grads["sh_color"][:, st["batch"]] += np.einsum("nc,nk->nck", d_colors, vc.sh_basis_view)
        inv_alpha = np.where(vc.alpha_ok, 1.0 / np.maximum(vc.alpha, 1e-12), 0.0)
        d_beta_chan = Wm.T @ (d_beta_p * inv_alpha)
        grads["beta_logit"] += d_beta_chan * st["beta"] * (1.0 - st["beta"])
        grads["normal_rot"] += Wm.T @ (d_nrot_p * inv_alpha[:, None])

        weights_map = {"img": 1.0, "lighting": w.lighting, "rotation": w.rotation,
                       "blending": w.blending, "view": w.view}
        parts["total"] = sum(weights_map[k] * vv for k, vv in parts.items() if k != "total")
        return parts, grads

    def run(self, iterations: int, log_path=None):
        rng = np.random.default_rng(self.seed)
        params = {"albedo": self.gs.albedo, "sh_color": self.gs.sh_color,
                  "beta_logit": self.gs.beta_logit, "normal_rot": self.gs.normal_rot,
                  "l": self.l, "coeffs": self.coeffs}
        group_of = {"albedo": "gaussians", "sh_color": "gaussians",
                    "normal_rot": "gaussians", "beta_logit": "blend",
                    "l": "lighting", "coeffs": "texture_pca"}
        opt = Adam(params, {k: self.rates[group_of[k]] for k in params})
        log = []
        t0 = time.time()
        for it in range(iterations):
            if it > 0 and it % self.occ_refresh == 0:
                self.refresh_occlusion()
            v = int(rng.integers(len(self.views)))
            parts, grads = self.loss_and_grads(v)
            opt.step(grads)
            _post_step(self.gs)
            log.append({"iteration": it, "view": v,
                        **{k: float(x) for k, x in parts.items()},
                        "wall_time": time.time() - t0})
        if log_path is not None and log:
            keys = sorted({k for r in log for k in r})
            with open(log_path, "w", newline="") as f:
                wcsv = csv.DictWriter(f, fieldnames=keys)
                wcsv.writeheader()
                for r in log:
                    wcsv.writerow({k: r.get(k, "") for k in keys})
        return log

    def lighting_model(self) -> SHLighting:
        return SHLighting(self.l.copy())

    def delit_render(self, v: int) -> np.ndarray:
        """De-lit view: lighting forced to one, view-dependent color dropped.

        Bitwise independent of the lighting coefficients by construction."""
        vc = self.views[v]
        st_basis = self._base_samples[v] + np.einsum(
            "m,pmc->pc", self.coeffs, self._mode_samples[v])
        Wm = vc.weight_matrix
        albedo_p = Wm @ self.gs.albedo
        beta = self.gs.beta()
        beta_p = np.where(vc.alpha_ok, (Wm @ beta) / np.maximum(vc.alpha, 1e-12), 0.0)
        out = np.zeros(vc.target.shape)
        out[vc.pix_idx] = delit_pixel(st_basis, albedo_p, beta_p)
        return out

    def composed_render(self, v: int) -> np.ndarray:
        st = self.view_forward(v)
        vc = st["vc"]
        out = np.zeros(vc.target.shape)
        out[vc.pix_idx] = st["out_p"]
        return out


# ---------------------------------------------------------------------------
# texture-space (UVW) fine-tuning


@dataclass
class BakeContext:
    mesh: Mesh
    frames_world: FrameSet
    frames_uvw: FrameSet
    resolution: int
    views: list  # dicts with cam, target_masked, mask idx, bilinear setup


def build_bake_context(mesh: Mesh, cams: list[Camera], targets: list,
                       resolution: int) -> BakeContext:
    fw = world_frames(mesh, "uv")
    fu = uvw_frames(mesh, fw)
    bvh = Bvh(mesh)
    views = []
    for cam, tgt in zip(cams, targets):
        gb = make_gbuffer(mesh, cam, bvh)
        idx = np.nonzero(gb.mask)
        bidx, bw = bilinear_setup(gb.uv[idx], resolution)
        views.append({"cam": cam, "pix_idx": idx,
                      "target_masked": np.where(gb.mask[..., None], tgt, 0.0),
                      "tex_idx": bidx, "tex_w": bw})
    return BakeContext(mesh, fw, fu, resolution, views)


def bake_texture_view(gs: GaussianSet, ctx: BakeContext, view: int,
                      with_tape: bool = False):
    """Ortho UVW texture for one view's direction plus the mesh-sampled image."""
    v = ctx.views[view]
    mu_w, _, _ = globalize(gs, ctx.frames_world)
    mu_u, cov_u, gu_cache = globalize(gs, ctx.frames_uvw)
    colors, vc_cache = view_colors(gs.sh_color[:, 0], mu_w, v["cam"].center(), gs.sh_degree)
    alpha = gs.opacity()
    channels = np.concatenate([colors, np.ones((len(gs), 1))], axis=1)
    tex, tape = render_ortho_uvw(mu_u, cov_u, alpha, channels, ctx.resolution)
    img = np.zeros(v["target_masked"].shape)
    img[v["pix_idx"]] = bilinear_sample(tex[..., :3], v["tex_idx"], v["tex_w"])
    if not with_tape:
        return tex, img
    return tex, img, {"tape": tape, "channels": channels, "vc_cache": vc_cache,
                      "gu_cache": gu_cache, "alpha": alpha, "view": v}


def run_bake_finetune(gs: GaussianSet, ctx: BakeContext, iterations: int,
                      weights: LS.LossWeights, seed: int = 0,
                      rates: dict | None = None, log_path=None):
    """Fine-tune the UVW Gaussians against the original views through the
    texture-space render path (warm start from the world-space solution)."""
    rng = np.random.default_rng(seed)
    rates = dict(DEFAULT_RATES if rates is None else rates)
    params = {"mu_local": gs.mu_local, "rot_local": gs.rot_local,
              "log_scale": gs.log_scale, "opacity_logit": gs.opacity_logit,
              "sh_color": gs.sh_color}
    group_of = {"mu_local": "gaussians", "rot_local": "gaussians",
                "opacity_logit": "gaussians", "sh_color": "gaussians",
                "log_scale": "scale"}
    opt = Adam(params, {k: rates[group_of[k]] for k in params})
    log = []
    t0 = time.time()
    for it in range(iterations):
        view = int(rng.integers(len(ctx.views)))
        tex, img, cache = bake_texture_view(gs, ctx, view, with_tape=True)
        v = cache["view"]
        l_img, d_img = LS.image_loss(img, v["target_masked"], weights.dssim)
        d_tex = bilinear_adjoint(d_img[v["pix_idx"]], v["tex_idx"], v["tex_w"],
                                 ctx.resolution, 3)
        d_tex = np.concatenate([d_tex, np.zeros(d_tex.shape[:2] + (1,))], axis=2)
        cg = composite_bwd(cache["tape"], cache["channels"], d_tex)
        grads = _zero_grads(gs)
        d_colors = cg["dchannels"][:, :3]
        dsh, dmu_w, _ = view_colors_bwd(cache["vc_cache"], d_colors)
        grads["sh_color"][:, 0] += dsh
        # ortho screen chain: mu2d = res * uv - 0.5; cov2d = res^2 * cov_uv
        dmu_u = np.zeros((len(gs), 3))
        dmu_u[:, :2] = cg["dmu2d"] * ctx.resolution
        dcov_u = np.zeros((len(gs), 3, 3))
        dcov_u[:, :2, :2] = cg["dcov2d"] * ctx.resolution ** 2
        dml_u, dq_u, dls_u = globalize_bwd(gs, cache["gu_cache"], dmu_u, dcov_u)
        grads["mu_local"] += dml_u
        grads["rot_local"] += dq_u
        grads["log_scale"] += dls_u
        # world positions only feed the view directions
        mu_w, _, gw_cache = globalize(gs, ctx.frames_world)
        dml_w, dq_w, dls_w = globalize_bwd(gs, gw_cache, dmu_w, np.zeros((len(gs), 3, 3)))
        grads["mu_local"] += dml_w
        grads["rot_local"] += dq_w
        grads["log_scale"] += dls_w
        grads["opacity_logit"] += cg["dalpha"] * cache["alpha"] * (1.0 - cache["alpha"])
        opt.step({k: grads[k] for k in params})
        _post_step(gs)
        log.append({"iteration": it, "view": view, "img": float(l_img),
                    "total": float(l_img), "wall_time": time.time() - t0})
    if log_path is not None and log:
        with open(log_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(log[0].keys()))
            w.writeheader()
            w.writerows(log)
    return log
