"""Synthetic ground-truth scenes: a deformed-sphere "head" with a detached
eyeball, labeled regions, SH-lit procedural albedo, and a ring of cameras.

Target images come from direct mesh ray casting with the same diffuse SH
model the pipeline estimates, never from the splat renderer, so end-to-end
reconstruction cannot be satisfied by self-consistency. Everything is a
pure function of the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bvh import Bvh
from .imgio import write_pfm, write_png, write_label_png
from .mesh import Mesh, icosphere, save_obj
from .refine import DeformBasis, make_smooth_basis
from .render import Camera, make_gbuffer
from .rotations import rot_to_axis_angle
from .sh import sh_eval
from .texture import PcaTexture, make_pca_texture_basis, bilinear_setup, bilinear_sample

LABEL_BACKGROUND = 0
LABEL_FACE = 1
LABEL_SOCKET = 2
LABEL_EYEBALL = 3
LABEL_IGNORE = 255


@dataclass
class SynthConfig:
    head_subdiv: int = 2
    head_radius: float = 1.0
    eyeball_subdiv: int = 1
    eyeball_radius: float = 0.18
    eyeball_dir: tuple = (0.33, 0.22, 0.92)
    eyeball_embed: float = 0.92      # eyeball center at embed * head radius
    socket_angle_deg: float = 22.0
    scalp_y: float = 0.72            # image-label ignore region above this
    deform_modes: int = 32
    deform_amplitude: float = 1.0    # scales the ground-truth coefficients
    texture_modes: int = 64
    texture_active: int = 20
    texture_resolution: int = 256
    image_size: int = 256
    n_train_views: int = 11
    fov_deg: float = 32.0
    camera_distance: float = 3.3
    camera_noise: float = 0.0

    @staticmethod
    def from_json(d: dict) -> "SynthConfig":
        allowed = set(SynthConfig().__dict__)
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        if "eyeball_dir" in d:
            d = dict(d)
            d["eyeball_dir"] = tuple(d["eyeball_dir"])
        return SynthConfig(**d)


def _azimuthal_uvs(verts: np.ndarray, tris: np.ndarray, axis: np.ndarray,
                   center_uv: tuple, radius_uv: float, origin: np.ndarray) -> np.ndarray:
    """Per-corner UVs from an azimuthal-equidistant chart about `axis`.

    Continuous everywhere but the far pole; corners at the pole take the
    azimuth of their triangle mates."""
    axis = axis / np.linalg.norm(axis)
    # frame with axis as +z
    h = np.array([0.0, 1.0, 0.0]) if abs(axis[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    t1 = np.cross(axis, h)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(axis, t1)
    d = verts - origin
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    z = d @ axis
    x = d @ t1
    y = d @ t2
    theta = np.arccos(np.clip(z, -1.0, 1.0))
    phi = np.arctan2(y, x)
    at_pole = np.hypot(x, y) < 1e-9
    uvs = np.zeros((len(tris), 3, 2))
    for t, tri in enumerate(tris):
        phis = phi[tri].copy()
        pole = at_pole[tri]
        if pole.any() and not pole.all():
            phis[pole] = np.arctan2(y[tri][~pole].mean(), x[tri][~pole].mean())
        r = radius_uv * theta[tri] / np.pi
        uvs[t, :, 0] = center_uv[0] + r * np.cos(phis)
        uvs[t, :, 1] = center_uv[1] + r * np.sin(phis)
    return uvs


def build_scene_mesh(cfg: SynthConfig):
    """Undeformed head + eyeball with labels, groups, and UV charts."""
    hv, hf = icosphere(cfg.head_subdiv, cfg.head_radius)
    e_dir = np.asarray(cfg.eyeball_dir, dtype=np.float64)
    e_dir /= np.linalg.norm(e_dir)
    e_center = e_dir * cfg.eyeball_embed * cfg.head_radius
    ev, ef = icosphere(cfg.eyeball_subdiv, cfg.eyeball_radius, e_center)

    verts = np.concatenate([hv, ev])
    tris = np.concatenate([hf, ef + len(hv)])
    n_head = len(hf)

    labels = np.full(len(tris), LABEL_FACE, dtype=np.int64)
    labels[n_head:] = LABEL_EYEBALL
    head_cen = hv[hf].mean(axis=1)
    head_dirs = head_cen / np.linalg.norm(head_cen, axis=1, keepdims=True)
    socket = np.arccos(np.clip(head_dirs @ e_dir, -1, 1)) < np.deg2rad(cfg.socket_angle_deg)
    labels[:n_head][socket] = LABEL_SOCKET

    head_uvs = _azimuthal_uvs(verts, tris[:n_head], np.array([0.0, 0.0, 1.0]),
                              (0.5, 0.5), 0.46, np.zeros(3))
    eye_uvs = _azimuthal_uvs(verts, tris[n_head:], e_dir, (0.88, 0.88), 0.09, e_center)
    uvs = np.concatenate([head_uvs, eye_uvs])

    groups = {
        "face": list(range(n_head)),
        "socket": np.nonzero(labels == LABEL_SOCKET)[0].tolist(),
        "eyeball": list(range(n_head, len(tris))),
        "scalp": np.nonzero((labels[:n_head] == LABEL_FACE) & (head_cen[:, 1] > cfg.scalp_y))[0].tolist(),
    }
    return Mesh(verts, tris, uvs, labels, groups)


def make_cameras(cfg: SynthConfig, n_total: int | None = None) -> list[Camera]:
    """Cameras on an arc over the front hemisphere, all aimed at the origin."""
    n = (cfg.n_train_views + 1) if n_total is None else n_total
    size = cfg.image_size
    f = size / (2.0 * np.tan(np.deg2rad(cfg.fov_deg) / 2.0))
    cams = []
    for i in range(n):
        frac = i / max(n - 1, 1)
        az = np.deg2rad(-60.0 + 120.0 * frac)
        el = np.deg2rad(20.0 * np.sin(3.1 * np.pi * frac))
        p = cfg.camera_distance * np.array([np.sin(az) * np.cos(el), np.sin(el),
                                            np.cos(az) * np.cos(el)])
        z_c = -p / np.linalg.norm(p)
        up = np.array([0.0, 1.0, 0.0])
        x_c = np.cross(z_c, up)
        x_c /= np.linalg.norm(x_c)
        y_c = np.cross(z_c, x_c)
        R = np.stack([x_c, y_c, z_c], axis=0)
        cams.append(Camera(f, f, size / 2.0, size / 2.0, size, size,
                           rot_to_axis_angle(R), -R @ p))
    return cams


def shade_mesh(mesh: Mesh, cam: Camera, albedo_tex: np.ndarray, l: np.ndarray,
               bvh: Bvh | None = None):
    """Diffuse SH render by ray casting: albedo(uv) * sum l A Y(n).

    Returns (color (H,W,3), gbuffer)."""
    gb = make_gbuffer(mesh, cam, bvh)
    H, W = gb.mask.shape
    img = np.zeros((H, W, 3))
    idx = np.nonzero(gb.mask)
    if len(idx[0]):
        irr = sh_eval(l, gb.normal[idx])
        bidx, bw = bilinear_setup(gb.uv[idx], albedo_tex.shape[0])
        alb = bilinear_sample(albedo_tex, bidx, bw)
        img[idx] = alb * irr
    return img, gb


def label_image(mesh: Mesh, gb, scalp_tris: np.ndarray) -> np.ndarray:
    """Per-pixel semantic labels with the scalp override marked as ignore."""
    lab = np.full(gb.tri.shape, LABEL_BACKGROUND, dtype=np.int64)
    hit = gb.tri >= 0
    lab[hit] = mesh.labels[gb.tri[hit]]
    if len(scalp_tris):
        lab[hit & np.isin(gb.tri, scalp_tris)] = LABEL_IGNORE
    return lab


def ground_truth_lighting() -> np.ndarray:
    l = np.zeros((9, 3))
    l[0] = [1.12, 1.05, 0.98]
    l[1] = [0.10, 0.09, 0.07]   # mild sky-ish gradient
    l[2] = [0.16, 0.15, 0.13]
    l[3] = [-0.07, -0.06, -0.05]
    l[6] = [0.04, 0.04, 0.03]
    return l


def make_fd_scene(n_tris: int = 10, image_size: int = 8, seed: int = 0,
                  n_labels: int = 4):
    """Small randomized instance for gradient checking.

    A 10-triangle cap cut from an icosphere, randomized Gaussian parameters,
    one camera, and random target/label images. Returns
    (mesh, gaussians, camera, target, label_image)."""
    from .gaussians import create_on_mesh
    rng = np.random.default_rng(seed)
    hv, hf = icosphere(0, 1.0)
    cen = hv[hf].mean(axis=1)
    pick = np.argsort(-cen @ np.array([0.0, 0.0, 1.0]), kind="stable")[:n_tris]
    tris = hf[np.sort(pick)]
    uvs = _azimuthal_uvs(hv, tris, np.array([0.0, 0.0, 1.0]), (0.5, 0.5), 0.46,
                         np.zeros(3))
    labels = np.full(len(tris), LABEL_FACE, dtype=np.int64)
    labels[-3:] = LABEL_EYEBALL
    labels[:2] = LABEL_SOCKET
    groups = {"face": list(range(len(tris) - 3)),
              "socket": [0, 1],
              "eyeball": list(range(len(tris) - 3, len(tris)))}
    mesh = Mesh(hv, tris, uvs, labels, groups)

    gs = create_on_mesh(mesh, sh_degree=3, seed=seed)
    n = len(gs)
    gs.mu_local += rng.normal(size=(n, 3)) * 0.1
    gs.rot_local = rng.normal(size=(n, 4))
    gs.rot_local /= np.linalg.norm(gs.rot_local, axis=1, keepdims=True)
    gs.log_scale = rng.normal(np.log(0.35), 0.15, size=(n, 3))
    gs.opacity_logit = rng.normal(0.5, 0.5, size=n)
    gs.sh_color += rng.normal(size=gs.sh_color.shape) * 0.15
    gs.albedo = rng.uniform(0.2, 0.8, size=(n, 3))
    gs.beta_logit = rng.normal(-1.0, 0.5, size=n)
    gs.normal_rot = rng.normal(size=(n, 3)) * 0.2

    size = image_size
    f = size / (2.0 * np.tan(np.deg2rad(35.0) / 2.0))
    cam_pos = np.array([0.15, -0.1, 3.0])
    z_c = -cam_pos / np.linalg.norm(cam_pos)
    up = np.array([0.0, 1.0, 0.0])
    x_c = np.cross(z_c, up)
    x_c /= np.linalg.norm(x_c)
    y_c = np.cross(z_c, x_c)
    R = np.stack([x_c, y_c, z_c], axis=0)
    cam = Camera(f, f, size / 2.0, size / 2.0, size, size,
                 rot_to_axis_angle(R), -R @ cam_pos)
    target = rng.uniform(0.1, 0.9, size=(size, size, 3))
    label_img = rng.integers(0, n_labels, size=(size, size))
    label_img[rng.random((size, size)) < 0.1] = LABEL_IGNORE
    return mesh, gs, cam, target, label_img


def generate(out_dir, cfg: SynthConfig, seed: int = 0) -> dict:
    """Write the complete synthetic scene; returns the manifest dict."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)

    mesh_init = build_scene_mesh(cfg)
    basis = make_smooth_basis(mesh_init.vertices, cfg.deform_modes, seed=seed + 1,
                              length_scale=0.55 * cfg.head_radius)
    c_gt = rng.uniform(-0.7, 0.7, size=cfg.deform_modes) * cfg.deform_amplitude
    v_gt = basis.reconstruct(c_gt)
    mesh_gt = Mesh(v_gt, mesh_init.triangles, mesh_init.uvs, mesh_init.labels,
                   mesh_init.groups)

    tex_basis = make_pca_texture_basis(cfg.texture_resolution, cfg.texture_modes,
                                       seed=seed + 2, n_active=cfg.texture_active)
    tc_gt = np.zeros(cfg.texture_modes)
    tc_gt[:cfg.texture_active] = rng.uniform(-0.5, 0.5, size=cfg.texture_active) * \
        0.06 * cfg.texture_resolution / 16.0
    albedo_gt = np.clip(tex_basis.reconstruct(tc_gt), 0.05, 0.95)

    l_gt = ground_truth_lighting()
    cams = make_cameras(cfg)
    train_cams, holdout_cam = cams[:cfg.n_train_views], cams[cfg.n_train_views]

    bvh = Bvh(mesh_gt)
    scalp = np.asarray(mesh_gt.groups.get("scalp", []), dtype=np.int64)
    for i, cam in enumerate(train_cams):
        img, gb = shade_mesh(mesh_gt, cam, albedo_gt, l_gt, bvh)
        write_pfm(out / "images" / f"view_{i:02d}.pfm", img)
        write_png(out / "images" / f"view_{i:02d}.png", img)
        write_label_png(out / "labels" / f"view_{i:02d}.png", label_image(mesh_gt, gb, scalp))
    img_h, _ = shade_mesh(mesh_gt, holdout_cam, albedo_gt, l_gt, bvh)
    write_pfm(out / "images" / "holdout.pfm", img_h)
    write_png(out / "images" / "holdout.png", img_h)

    save_obj(out / "mesh_gt.obj", mesh_gt)
    save_obj(out / "mesh_init.obj", mesh_init)
    basis.save(out / "deform_basis.npz")
    tex_basis.save(out / "texture_basis")
    write_pfm(out / "albedo_gt.pfm", albedo_gt)
    write_png(out / "albedo_gt.png", albedo_gt)

    cams_json = {"train": [c.to_json() for c in train_cams],
                 "holdout": holdout_cam.to_json()}
    with open(out / "cameras.json", "w") as f:
        json.dump(cams_json, f, indent=1)
    if cfg.camera_noise > 0:
        noisy = []
        for c in train_cams:
            cj = c.to_json()
            cj["rot"] = (np.asarray(cj["rot"]) + rng.normal(size=3) * cfg.camera_noise).tolist()
            cj["trans"] = (np.asarray(cj["trans"]) + rng.normal(size=3) * cfg.camera_noise).tolist()
            noisy.append(cj)
        with open(out / "cameras_init.json", "w") as f:
            json.dump({"train": noisy, "holdout": holdout_cam.to_json()}, f, indent=1)

    with open(out / "deform_coeffs_gt.json", "w") as f:
        json.dump(c_gt.tolist(), f)
    with open(out / "texture_coeffs_gt.json", "w") as f:
        json.dump(tc_gt.tolist(), f)
    with open(out / "lighting_gt.json", "w") as f:
        json.dump({"l": l_gt.tolist()}, f)

    manifest = {
        "format_version": 1,
        "seed": seed,
        "labels": {"background": LABEL_BACKGROUND, "face": LABEL_FACE,
                   "socket": LABEL_SOCKET, "eyeball": LABEL_EYEBALL,
                   "ignore": LABEL_IGNORE},
        "n_labels": 4,
        "n_train_views": cfg.n_train_views,
        "image_size": cfg.image_size,
        "texture_resolution": cfg.texture_resolution,
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in cfg.__dict__.items()},
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest
