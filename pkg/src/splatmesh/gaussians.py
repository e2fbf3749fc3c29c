"""Triangle-bound Gaussian parameters and their world / texture-space forms.

Exactly one Gaussian per triangle. Local parameters live in the parent
triangle's frame; globalization follows mu = R mu_local + T and
cov = s^2 R Sigma_local R^T. The same transform applied to frames built on
the UV-lifted mesh moves the set into 3D UVW texture space, with positions
bridged by the ratio of texture-space to world-space frame scales so a
trained world model is a warm start for texture-space fine-tuning.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import rotations as rot
from .mesh import Mesh, all_frames, uv_lifted_mesh
from .sh import n_coeffs

_CKPT_MAGIC = b"GSPL"
_CKPT_VERSION = 1


@dataclass
class GaussianSet:
    """Struct-of-arrays Gaussian parameters; row i is bound to triangle tri[i].

    sh_color is (N, batches, 3, K) to support a separate view-dependent color
    bank per capture batch (shared geometry).
    """

    mu_local: np.ndarray        # (N, 3) offsets in the parent frame
    rot_local: np.ndarray       # (N, 4) unit quaternions (w, x, y, z)
    log_scale: np.ndarray       # (N, 3) log of local diagonal scales
    opacity_logit: np.ndarray   # (N,)
    sh_color: np.ndarray        # (N, B, 3, K)
    albedo: np.ndarray          # (N, 3) in [0, 1]
    beta_logit: np.ndarray      # (N,)
    normal_rot: np.ndarray      # (N, 3) axis-angle
    label: np.ndarray           # (N,)
    tri: np.ndarray             # (N,)

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.ascontiguousarray(getattr(self, f.name)))
        n = len(self.mu_local)
        if len(np.unique(self.tri)) != n:
            raise ValueError("exactly one Gaussian per triangle required")

    def __len__(self) -> int:
        return len(self.mu_local)

    @property
    def sh_degree(self) -> int:
        return int(np.sqrt(self.sh_color.shape[-1])) - 1

    @property
    def n_batches(self) -> int:
        return self.sh_color.shape[1]

    def opacity(self) -> np.ndarray:
        return _sigmoid(self.opacity_logit)

    def beta(self) -> np.ndarray:
        return _sigmoid(self.beta_logit)

    def copy(self) -> "GaussianSet":
        return GaussianSet(**{f.name: getattr(self, f.name).copy() for f in fields(self)})


def create_on_mesh(mesh: Mesh, sh_degree: int = 3, n_batches: int = 1,
                   seed: int = 0) -> GaussianSet:
    """One Gaussian per triangle: centered, isotropic, half-frame-scale."""
    rng = np.random.default_rng(seed)
    n = mesh.num_triangles
    K = n_coeffs(sh_degree)
    sh_color = np.zeros((n, n_batches, 3, K))
    sh_color[:, :, :, 0] = 0.5 / 0.28209479177387814  # mid-gray DC
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianSet(
        mu_local=np.zeros((n, 3)),
        rot_local=quats,
        log_scale=np.full((n, 3), np.log(0.5)),
        opacity_logit=np.zeros(n),
        sh_color=sh_color,
        albedo=rng.uniform(0.3, 0.7, size=(n, 3)),
        beta_logit=np.full(n, _logit(0.05)),
        normal_rot=np.zeros((n, 3)),
        label=mesh.labels.copy(),
        tri=np.arange(n, dtype=np.int64),
    )


@dataclass
class FrameSet:
    """Batched triangle frames plus cached ratios used by globalization."""

    R: np.ndarray  # (F, 3, 3)
    T: np.ndarray  # (F, 3)
    s: np.ndarray  # (F,)
    pos_scale: np.ndarray = None  # per-frame multiplier on R mu_local

    def __post_init__(self):
        if self.pos_scale is None:
            self.pos_scale = np.ones(len(self.s))


def world_frames(mesh: Mesh, kind: str = "uv") -> FrameSet:
    R, T, s = all_frames(mesh, kind)
    return FrameSet(R, T, s)


def uvw_frames(mesh: Mesh, world: FrameSet | None = None, kind: str = "uv") -> FrameSet:
    """Texture-space frames built on the UV-lifted mesh.

    Positions are bridged by s_uv / s_world so the Gaussian's offset keeps
    its proportion to the (differently sized) texture-space triangle.
    """
    if world is None:
        world = world_frames(mesh, kind)
    lifted = uv_lifted_mesh(mesh)
    R, T, s = all_frames(lifted, kind)
    return FrameSet(R, T, s, pos_scale=s / world.s)


def globalize(gs: GaussianSet, frames: FrameSet):
    """Local -> world (or UVW): returns (mu (N,3), cov (N,3,3), cache)."""
    idx = gs.tri
    Rf = frames.R[idx]
    Tf = frames.T[idx]
    sf = frames.s[idx]
    ps = frames.pos_scale[idx]
    Rq = rot.quat_to_rot(gs.rot_local)
    S = np.exp(gs.log_scale)
    A = (Rf @ Rq) * S[:, None, :]          # R_f R_q diag(S)
    # positions bridge by pos_scale (s_uv / s_world for texture space);
    # covariance scales with the frame scale alone: s^2 R Sigma_local R^T.
    mu = ps[:, None] * np.einsum("nij,nj->ni", Rf, gs.mu_local) + Tf
    scale2 = sf ** 2
    cov = scale2[:, None, None] * (A @ np.swapaxes(A, 1, 2))
    cache = {"Rf": Rf, "Rq": Rq, "S": S, "A": A, "sf": sf, "ps": ps, "scale2": scale2}
    return mu, cov, cache


def globalize_bwd(gs: GaussianSet, cache: dict, dmu: np.ndarray, dcov: np.ndarray):
    """Backward of globalize onto (mu_local, rot_local quats, log_scale)."""
    Rf, Rq, S = cache["Rf"], cache["Rq"], cache["S"]
    A, scale2, ps = cache["A"], cache["scale2"], cache["ps"]
    dmu_local = ps[:, None] * np.einsum("nji,nj->ni", Rf, dmu)
    sym = dcov + np.swapaxes(dcov, 1, 2)
    dA = scale2[:, None, None] * (sym @ A)
    # A = Rf Rq diag(S): dRq = Rf^T dA diag(S); dS_k = [(Rf Rq)^T dA]_kk
    dRq = np.einsum("nji,njk->nik", Rf, dA) * S[:, None, :]
    dS = np.einsum("njk,njk->nk", Rf @ Rq, dA)
    dlog_scale = dS * S
    dquat = rot.quat_to_rot_bwd(gs.rot_local, dRq)
    return dmu_local, dquat, dlog_scale


def globalize_uvw(gs: GaussianSet, mesh: Mesh, world: FrameSet | None = None):
    """Gaussians in 3D UVW texture space; W is the scaled normal offset."""
    return globalize(gs, uvw_frames(mesh, world))


def scale_loss(gs: GaussianSet, eps: float = 0.6):
    """Sum over Gaussians of || max(S_kk, eps) e_k ||_2 on local scales.

    Entries below the floor contribute the floor value but no gradient.
    Returns (loss, dloss/dlog_scale).
    """
    S = np.exp(gs.log_scale)
    clamped = np.maximum(S, eps)
    per = np.linalg.norm(clamped, axis=1)
    grad_S = np.where(S > eps, clamped / per[:, None], 0.0)
    return float(per.sum()), grad_S * S


def densify_split(gs: GaussianSet, mesh: Mesh, frames: FrameSet | None = None):
    """Split each triangle (and its Gaussian) into four.

    Children sit at the sub-triangle centers, inherit all parent attributes,
    and halve the parent's world-space scale exactly: the child log_scale is
    set against the child frame so s_child * exp(ls_child) = s_parent *
    exp(ls_parent) / 2 regardless of which edge the child frame picks.
    Returns (gs', mesh', frames').
    """
    from .mesh import subdivide_midpoint

    if frames is None:
        frames = world_frames(mesh)
    mesh2, parent = subdivide_midpoint(mesh)
    frames2 = world_frames(mesh2)
    order = np.argsort(gs.tri)
    by_tri = {int(gs.tri[i]): i for i in order}
    src = np.array([by_tri[int(p)] for p in parent], dtype=np.int64)
    n2 = len(parent)
    parent_world = frames.s[gs.tri[src]][:, None] * np.exp(gs.log_scale[src])
    log_scale = np.log(parent_world / 2.0) - np.log(frames2.s)[:, None]
    return GaussianSet(
        mu_local=np.zeros((n2, 3)),
        rot_local=gs.rot_local[src].copy(),
        log_scale=log_scale,
        opacity_logit=gs.opacity_logit[src].copy(),
        sh_color=gs.sh_color[src].copy(),
        albedo=gs.albedo[src].copy(),
        beta_logit=gs.beta_logit[src].copy(),
        normal_rot=gs.normal_rot[src].copy(),
        label=mesh2.labels.copy(),
        tri=np.arange(n2, dtype=np.int64),
    ), mesh2, frames2


def save_ckpt(path, gs: GaussianSet) -> None:
    """Versioned little-endian binary: magic, version, JSON channel header,
    then the raw arrays in header order. Round trips are bit-exact."""
    channels = []
    blobs = []
    for f in fields(gs):
        arr = getattr(gs, f.name)
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float64:
            dtype = "<f8"
        elif arr.dtype == np.int64:
            dtype = "<i8"
        else:
            arr = arr.astype(np.float64)
            dtype = "<f8"
        channels.append({"name": f.name, "dtype": dtype, "shape": list(arr.shape)})
        blobs.append(arr.astype(dtype).tobytes())
    header = json.dumps({"count": len(gs), "channels": channels}).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


class CkptError(ValueError):
    pass


def load_ckpt(path) -> GaussianSet:
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)
    magic = buf.read(4)
    if magic != _CKPT_MAGIC:
        raise CkptError(f"bad checkpoint magic {magic!r}")
    version, hlen = struct.unpack("<II", buf.read(8))
    if version != _CKPT_VERSION:
        raise CkptError(f"unsupported checkpoint version {version}")
    header = json.loads(buf.read(hlen).decode())
    expected = {f.name for f in fields(GaussianSet)}
    present = {c["name"] for c in header["channels"]}
    missing = sorted(expected - present)
    if missing:
        raise CkptError(f"checkpoint missing channels: {', '.join(missing)}")
    arrays = {}
    for c in header["channels"]:
        n_items = int(np.prod(c["shape"])) if c["shape"] else 1
        dt = np.dtype(c["dtype"])
        data = buf.read(n_items * dt.itemsize)
        if len(data) != n_items * dt.itemsize:
            raise CkptError("truncated checkpoint file")
        arrays[c["name"]] = np.frombuffer(data, dtype=dt).reshape(c["shape"]).copy()
    arrays = {k: v for k, v in arrays.items() if k in expected}
    return GaussianSet(**arrays)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))
