"""Stage orchestration: each stage reads prior artifacts, writes versioned
outputs, CSV logs, and preview PNGs into its own directory under out_dir."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import synth as SY
from . import train as TR
from .boundary import boundary_sum, knn_uv, FLAG_DEGENERATE
from .bvh import Bvh
from .config import PipelineConfig
from .gaussians import GaussianSet, create_on_mesh, densify_split, globalize, \
    load_ckpt, save_ckpt, world_frames, uvw_frames
from .imgio import read_pfm, write_pfm, write_png, write_label_png, read_label_png
from .lighting import SHLighting
from .mesh import Mesh, load_obj, save_obj, face_normals
from .optim import schedule
from .refine import DeformBasis, refine
from .render import Camera, composite, depth_order, project, render_sum2d, \
    render_ortho_uvw, view_colors
from .texture import PcaTexture, highfreq_restore, inpaint_pca, rasterize_uv, uv_gather


class PipelineError(RuntimeError):
    pass


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing artifact {path}; run `splatmesh {producer}` first")
    return path


def _load_cameras(path: Path):
    with open(path) as f:
        d = json.load(f)
    return [Camera.from_json(c) for c in d["train"]], Camera.from_json(d["holdout"])


def _load_scene(cfg: PipelineConfig, initial: bool = True):
    scene = Path(cfg.scene_dir)
    _require(scene / "manifest.json", "synth")
    with open(scene / "manifest.json") as f:
        manifest = json.load(f)
    mesh = load_obj(scene / ("mesh_init.obj" if initial else "mesh_gt.obj"))
    cams_path = scene / "cameras_init.json"
    if not cams_path.exists():
        cams_path = scene / "cameras.json"
    train_cams, holdout = _load_cameras(cams_path)
    targets = [read_pfm(scene / "images" / f"view_{i:02d}.pfm")
               for i in range(manifest["n_train_views"])]
    labels = [read_label_png(scene / "labels" / f"view_{i:02d}.png")
              for i in range(manifest["n_train_views"])]
    return manifest, mesh, train_cams, holdout, targets, labels


def _fit_context(cfg: PipelineConfig, mesh: Mesh, manifest, targets, labels):
    b = cfg.batches
    return TR.build_fit_context(
        mesh, targets, labels, n_labels=manifest["n_labels"],
        ignore_label=manifest["labels"]["ignore"], tau=cfg.boundary.tau,
        k_nbrs=cfg.boundary.k, p_drop=cfg.p_drop,
        uv_drop_deg=cfg.uv_normal_drop_deg,
        view_batch=b.view_batch, view_weights=b.view_weights)


def _save_cameras(path, cams, holdout):
    with open(path, "w") as f:
        json.dump({"train": [c.to_json() for c in cams],
                   "holdout": holdout.to_json()}, f, indent=1)


def _stages(cfg: PipelineConfig):
    return {s.name: s for s in schedule(cfg.schedule_scale)}


def stage_synth(cfg: PipelineConfig) -> None:
    SY.generate(cfg.scene_dir, cfg.synth, seed=cfg.seed)


def stage_fit(cfg: PipelineConfig) -> None:
    manifest, mesh, cams, holdout, targets, labels = _load_scene(cfg)
    out = Path(cfg.out_dir) / "fit"
    out.mkdir(parents=True, exist_ok=True)
    ctx = _fit_context(cfg, mesh, manifest, targets, labels)
    n_batches = (max(ctx.view_batch) + 1) if cfg.batches.per_batch_color else 1
    gs = create_on_mesh(mesh, sh_degree=cfg.sh_degree, n_batches=int(n_batches),
                        seed=cfg.seed)
    plan = _stages(cfg)["camera_pass"]
    TR.run_fit_stage(gs, cams, ctx, cfg.weights, "camera", plan.iterations,
                     optimize_cameras=True, seed=cfg.seed,
                     log_path=out / "fit_log.csv", rates=cfg.rates,
                     visibility_refresh=cfg.visibility_refresh)
    save_ckpt(out / "gaussians.ckpt", gs)
    _save_cameras(out / "cameras_opt.json", cams, holdout)
    img = render_view(gs, mesh, cams[0], ctx.n_labels)
    write_png(out / "preview.png", img["color"])


def _boundary_targets(gs: GaussianSet, mesh: Mesh, cfg: PipelineConfig):
    frames = world_frames(mesh, "uv")
    mu, cov, _ = globalize(gs, frames)
    nbrs = knn_uv(mesh, cfg.boundary.k)
    res = boundary_sum(mu, cov, gs.opacity(), face_normals(mesh)[gs.tri], nbrs,
                       cfg.boundary.tau, tol=1e-6 * mesh.bbox_diagonal())
    targets = np.empty((mesh.num_triangles, 3))
    skip = np.empty(mesh.num_triangles, dtype=bool)
    targets[gs.tri] = res.x
    skip[gs.tri] = res.flag == FLAG_DEGENERATE
    return targets, skip


def stage_refine_mesh(cfg: PipelineConfig) -> None:
    manifest, mesh, _, holdout, targets_img, labels = _load_scene(cfg)
    out_fit = Path(cfg.out_dir) / "fit"
    gs = load_ckpt(_require(out_fit / "gaussians.ckpt", "fit"))
    cams, holdout = _load_cameras(_require(out_fit / "cameras_opt.json", "fit"))
    out = Path(cfg.out_dir) / "refine"
    out.mkdir(parents=True, exist_ok=True)
    basis = DeformBasis.load(_require(Path(cfg.scene_dir) / "deform_basis.npz", "synth"))
    plan = _stages(cfg)

    current = mesh
    for round_no, mode in ((1, "pca"), (2, "vertex")):
        ctx = _fit_context(cfg, current, manifest, targets_img, labels)
        TR.run_fit_stage(gs, cams, ctx, cfg.weights, "geometry",
                         plan[f"geometry_pass_{round_no}"].iterations,
                         optimize_cameras=False, seed=cfg.seed + round_no,
                         log_path=out / f"reopt_{round_no}.csv", rates=cfg.rates,
                         visibility_refresh=cfg.visibility_refresh)
        targets, skip = _boundary_targets(gs, current, cfg)
        new_v, coeffs, _ = refine(current, targets, skip, mode, basis,
                                  iters=plan[f"refine_{mode}"].iterations,
                                  log_path=out / f"refine_{mode}.csv")
        current = Mesh(new_v, current.triangles, current.uvs, current.labels,
                       current.groups)
        if mode == "pca" and coeffs is not None:
            with open(out / "pca_coeffs.json", "w") as f:
                json.dump(coeffs.tolist(), f)
    save_obj(out / "mesh_refined.obj", current)
    save_ckpt(out / "gaussians.ckpt", gs)


def stage_lighting(cfg: PipelineConfig) -> None:
    manifest, _, _, holdout, targets, labels = _load_scene(cfg)
    out_ref = Path(cfg.out_dir) / "refine"
    mesh = load_obj(_require(out_ref / "mesh_refined.obj", "refine-mesh"))
    gs = load_ckpt(_require(out_ref / "gaussians.ckpt", "refine-mesh"))
    cams, holdout = _load_cameras(_require(Path(cfg.out_dir) / "fit" / "cameras_opt.json", "fit"))
    out = Path(cfg.out_dir) / "lighting"
    out.mkdir(parents=True, exist_ok=True)
    plan = _stages(cfg)

    # densify 1 -> 4 and refine the densified model on the frozen mesh
    gs, mesh, _ = densify_split(gs, mesh)
    ctx = _fit_context(cfg, mesh, manifest, targets, labels)
    TR.run_fit_stage(gs, cams, ctx, cfg.weights, "geometry",
                     plan["densify_refine"].iterations, optimize_cameras=False,
                     seed=cfg.seed + 11, log_path=out / "densify_refine.csv",
                     rates=cfg.rates, visibility_refresh=cfg.visibility_refresh)
    save_obj(out / "mesh_dense.obj", mesh)
    # appearance model before the texture-stage re-initialization; the
    # neural-texture bake warm-starts from this
    save_ckpt(out / "gaussians_fit.ckpt", gs)

    basis = PcaTexture.load(_require(Path(cfg.scene_dir) / "texture_basis", "synth"))
    rng = np.random.default_rng(cfg.seed + 13)
    # texture-stage initialization: random albedo and view color, blend 0.05,
    # identity normal rotations
    gs.albedo = rng.uniform(0.2, 0.8, size=gs.albedo.shape)
    gs.sh_color = rng.normal(scale=0.2, size=gs.sh_color.shape)
    gs.beta_logit[:] = np.log(0.05 / 0.95)
    gs.normal_rot[:] = 0.0
    stage = TR.TextureStage(gs, mesh, cams, targets, basis,
                            SHLighting.gray(1.0), cfg.weights, seed=cfg.seed + 17,
                            occlusion_samples=cfg.occlusion.samples,
                            occlusion_refresh=cfg.occlusion.refresh,
                            rates=cfg.rates,
                            view_batch=ctx.view_batch if cfg.batches.per_batch_color else None)
    stage.run(plan["texture"].iterations, log_path=out / "texture_log.csv")
    save_ckpt(out / "gaussians_dense.ckpt", gs)
    with open(out / "lighting.json", "w") as f:
        json.dump(stage.lighting_model().to_json(), f, indent=1)
    with open(out / "texture_coeffs.json", "w") as f:
        json.dump(stage.coeffs.tolist(), f)
    write_png(out / "occlusion_preview.png", stage.views[0].gbuffer.mask[..., None] *
              _scatter(stage.views[0], stage.views[0].occlusion, targets[0].shape))
    write_png(out / "composed_preview.png", stage.composed_render(0))


def _scatter(vc, values, shape):
    img = np.zeros(shape)
    img[vc.pix_idx] = values
    return img


def _texture_stage_from_artifacts(cfg: PipelineConfig):
    manifest, _, _, holdout, targets, labels = _load_scene(cfg)
    out_l = Path(cfg.out_dir) / "lighting"
    mesh = load_obj(_require(out_l / "mesh_dense.obj", "lighting"))
    gs = load_ckpt(_require(out_l / "gaussians_dense.ckpt", "lighting"))
    cams, holdout = _load_cameras(_require(Path(cfg.out_dir) / "fit" / "cameras_opt.json", "fit"))
    basis = PcaTexture.load(Path(cfg.scene_dir) / "texture_basis")
    with open(_require(out_l / "lighting.json", "lighting")) as f:
        light = SHLighting.from_json(json.load(f))
    with open(out_l / "texture_coeffs.json") as f:
        coeffs = np.asarray(json.load(f))
    stage = TR.TextureStage(gs, mesh, cams, targets, basis, light, cfg.weights,
                            seed=cfg.seed + 17, occlusion_samples=cfg.occlusion.samples,
                            occlusion_refresh=cfg.occlusion.refresh, rates=cfg.rates,
                            compute_occlusion=False)
    stage.coeffs = coeffs
    return manifest, mesh, gs, cams, holdout, targets, stage, basis


def stage_texture(cfg: PipelineConfig) -> None:
    manifest, mesh, gs, cams, holdout, targets, stage, basis = \
        _texture_stage_from_artifacts(cfg)
    out = Path(cfg.out_dir) / "texture"
    out.mkdir(parents=True, exist_ok=True)
    delits = []
    for v in range(len(cams)):
        delit = stage.delit_render(v)
        restored = highfreq_restore(delit, stage.views[v].target_masked,
                                    cfg.highpass_sigma)
        restored = np.where(stage.views[v].gbuffer.mask[..., None], restored, 0.0)
        delits.append(restored)
        write_pfm(out / f"delit_view_{v:02d}.pfm", delit)
        if v == 0:
            write_png(out / "delit_view_00.png", delit)
            write_png(out / "restored_view_00.png", restored)
    res = manifest["texture_resolution"]
    texels = rasterize_uv(mesh, res)
    gathered, confidence = uv_gather(delits, cams, mesh, res, texels=texels)
    write_pfm(out / "texture_gathered.pfm", gathered)
    write_pfm(out / "confidence.pfm", confidence)
    mask = np.zeros((res, res), dtype=bool)
    group = mesh.groups.get(cfg.texture_mask_group, [])
    if len(group):
        mask |= np.isin(texels.tri, np.asarray(group))
    final, fit_coeffs = inpaint_pca(gathered, confidence, mask, basis,
                                    feather_band=cfg.feather_band)
    write_pfm(out / "texture_final.pfm", final)
    write_png(out / "texture_final.png", final)
    with open(out / "inpaint_coeffs.json", "w") as f:
        json.dump(fit_coeffs.tolist(), f)


def stage_bake_uv(cfg: PipelineConfig) -> None:
    out_l = Path(cfg.out_dir) / "lighting"
    mesh = load_obj(_require(out_l / "mesh_dense.obj", "lighting"))
    gs = load_ckpt(_require(out_l / "gaussians_fit.ckpt", "lighting"))
    cams, holdout = _load_cameras(_require(Path(cfg.out_dir) / "fit" / "cameras_opt.json", "fit"))
    manifest, _, _, _, targets, _ = _load_scene(cfg)
    out = Path(cfg.out_dir) / "bake"
    out.mkdir(parents=True, exist_ok=True)
    ctx = TR.build_bake_context(mesh, cams, targets, cfg.bake.resolution)
    tex0, img0 = TR.bake_texture_view(gs, ctx, 0)
    write_pfm(out / "texture_prefinetune_view00.pfm", tex0[..., :3])
    write_png(out / "render_prefinetune_view00.png", img0)
    iters = max(1, int(round(cfg.bake.iterations * cfg.schedule_scale)))
    TR.run_bake_finetune(gs, ctx, iters, cfg.weights, seed=cfg.seed + 23,
                         rates=cfg.rates, log_path=out / "bake_log.csv")
    save_ckpt(out / "gaussians_uvw.ckpt", gs)
    tex1, img1 = TR.bake_texture_view(gs, ctx, 0)
    write_pfm(out / "texture_view00.pfm", tex1[..., :3])
    write_png(out / "render_view00.png", img1)


def render_view(gs: GaussianSet, mesh: Mesh, cam: Camera, n_labels: int,
                mode: str = "world", resolution: int = 256):
    """Channel images for one checkpoint + camera: color, seg, beta, normal
    rotation, alpha. Blended beta/nrot are normalized by alpha above 1e-4."""
    frames = world_frames(mesh, "uv")
    onehot = np.zeros((len(gs), n_labels))
    onehot[np.arange(len(gs)), gs.label] = 1.0
    alpha = gs.opacity()
    if mode == "world":
        mu, cov, _ = globalize(gs, frames)
        mu2d, cov2d, depth, tape = project(mu, cov, cam)
        colors, _ = view_colors(gs.sh_color[:, 0], mu, cam.center(), gs.sh_degree)
        channels = np.concatenate([colors, onehot, gs.beta()[:, None],
                                   gs.normal_rot, np.ones((len(gs), 1))], axis=1)
        order = depth_order(depth, tape.valid)
        out, _ = composite(mu2d, cov2d, alpha, channels, order, cam.width, cam.height)
    elif mode == "uvw":
        mu_u, cov_u, _ = globalize(gs, uvw_frames(mesh, frames))
        mu_w, _, _ = globalize(gs, frames)
        colors, _ = view_colors(gs.sh_color[:, 0], mu_w, cam.center(), gs.sh_degree)
        channels = np.concatenate([colors, onehot, gs.beta()[:, None],
                                   gs.normal_rot, np.ones((len(gs), 1))], axis=1)
        out, _ = render_ortho_uvw(mu_u, cov_u, alpha, channels, resolution)
    elif mode == "sum2d":
        mu_u, cov_u, _ = globalize(gs, uvw_frames(mesh, frames))
        mu_w, _, _ = globalize(gs, frames)
        colors, _ = view_colors(gs.sh_color[:, 0], mu_w, cam.center(), gs.sh_degree)
        channels = np.concatenate([colors, onehot, gs.beta()[:, None],
                                   gs.normal_rot, np.ones((len(gs), 1))], axis=1)
        mu2d = mu_u[:, :2] * resolution - 0.5
        cov2d = cov_u[:, :2, :2] * resolution ** 2
        cov2d[:, 0, 0] += 0.3
        cov2d[:, 1, 1] += 0.3
        out, _ = render_sum2d(mu2d, cov2d, alpha, channels, resolution, resolution,
                              keys=gs.tri)
    else:
        raise ValueError(f"unknown render mode {mode!r}")
    L = n_labels
    alpha_img = out[..., -1]
    safe = np.where(alpha_img > 1e-4, alpha_img, 1.0)
    norm = alpha_img > 1e-4
    return {
        "color": out[..., :3],
        "seg": out[..., 3:3 + L],
        "beta": np.where(norm, out[..., 3 + L] / safe, 0.0),
        "nrot": np.where(norm[..., None], out[..., 4 + L:7 + L] / safe[..., None], 0.0),
        "alpha": alpha_img,
    }


def stage_render(cfg: PipelineConfig, ckpt: str, camera_index: int = 0,
                 mode: str = "world", out_name: str = "render") -> None:
    gs = load_ckpt(_require(Path(ckpt), "fit"))
    manifest, mesh_init, cams, holdout, targets, labels = _load_scene(cfg)
    mesh = mesh_init
    for candidate in (Path(cfg.out_dir) / "lighting" / "mesh_dense.obj",
                      Path(cfg.out_dir) / "refine" / "mesh_refined.obj"):
        if candidate.exists() and load_obj(candidate).num_triangles == len(gs):
            mesh = load_obj(candidate)
            break
    opt_cams = Path(cfg.out_dir) / "fit" / "cameras_opt.json"
    if opt_cams.exists():
        cams, holdout = _load_cameras(opt_cams)
    all_cams = cams + [holdout]
    cam = all_cams[camera_index]
    out = Path(cfg.out_dir) / out_name
    out.mkdir(parents=True, exist_ok=True)
    ch = render_view(gs, mesh, cam, manifest["n_labels"], mode=mode,
                     resolution=cfg.bake.resolution)
    write_pfm(out / "color.pfm", ch["color"])
    write_png(out / "color.png", ch["color"])
    write_label_png(out / "seg.png", np.where(ch["alpha"] > 0.5,
                                              np.argmax(ch["seg"], axis=-1), 0))
    write_pfm(out / "beta.pfm", ch["beta"])
    write_pfm(out / "nrot.pfm", ch["nrot"])
    write_pfm(out / "alpha.pfm", ch["alpha"])


def stage_gradcheck(cfg: PipelineConfig, corrupt: str | None = None) -> bool:
    """Finite-difference audit of every registered loss; returns pass/fail."""
    from . import losses as LS
    from .optim import fd_check
    from .synth import make_fd_scene

    mesh, gs, cam, target, labimg = make_fd_scene(seed=3)
    ctx = TR.build_fit_context(mesh, [target], [labimg], n_labels=4)
    w = cfg.weights
    results = {}

    def fit_loss(terms):
        def fn(params):
            parts, grads, cam_grads = TR.fit_forward_backward(
                gs, cam, 0, ctx, w, "camera", optimize_camera=True, terms=terms)
            out = {k: grads[k] for k in ("mu_local", "rot_local", "log_scale",
                                         "opacity_logit", "sh_color")}
            out["cam_rot"] = cam_grads["rot"]
            out["cam_trans"] = cam_grads["trans"]
            if corrupt in terms:
                out["mu_local"] = out["mu_local"] + 0.1
            return parts["total"], out
        return fn

    params = {"mu_local": gs.mu_local, "rot_local": gs.rot_local,
              "log_scale": gs.log_scale, "opacity_logit": gs.opacity_logit,
              "sh_color": gs.sh_color, "cam_rot": cam.rot, "cam_trans": cam.trans}
    for name in ("img", "seg", "scale", "center", "normal", "boundary", "eyes"):
        results[name] = fd_check(fit_loss({name}), params, h=1e-4)

    ok = all(r.passed for r in results.values())
    for name, rep in results.items():
        print(f"{name:10s} {rep}")
    return ok
