"""Forward and backward splatting of a GaussianScene through a pinhole camera.

Forward: project every Gaussian to an image-space ellipse (EWA affine
approximation), sort by camera-frame depth, then alpha-blend front to back
over each Gaussian's conservative bounding box while tracking per-pixel
transmittance.  The bounding box is sized so that everything outside it
contributes less than ``ALPHA_FLOOR`` opacity, which keeps the result within
1e-9 of an unwindowed per-pixel evaluation and keeps the rendered map smooth
enough for finite-difference gradient checks.

Backward: analytic gradients of an upstream per-pixel loss gradient with
respect to a 6-vector pose increment ``xi = (rotation, translation)``
left-multiplied onto the view transform, and optionally with respect to all
per-Gaussian parameters (used by the canonical-frame fitter).  The per-pixel
reductions run in compiled kernels; the small-matrix chain rules are batched
numpy over the visible Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import CameraIntrinsics, Se3Pose, quat_to_matrix
from .scene import GaussianScene, PlanarMap, as_map_data, sigmoid

NEAR_PLANE = 0.01
COV_DILATION = 0.3          # px^2 low-pass added to the diagonal of cov2d
ALPHA_CLAMP = 0.99          # per-Gaussian per-pixel opacity ceiling
TRANSMITTANCE_MIN = 1e-4    # per-pixel accumulation stops below this
ALPHA_FLOOR = 1e-12         # support cutoff defining the conservative extent


def build_covariance(rot, scale) -> np.ndarray:
    """3x3 covariance R diag(s^2) R^T from a unit quaternion and per-axis std-devs."""
    scale = np.asarray(scale, dtype=np.float64)
    if scale.shape != (3,) or not np.all(np.isfinite(scale)):
        raise ValueError("scale must be a finite 3-vector")
    if np.any(scale <= 0):
        raise ValueError("scale components must be positive")
    R = quat_to_matrix(rot)
    return (R * scale**2) @ R.T


def _batch_quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray      # pixels
    cov2d: np.ndarray       # 2x2, px^2, low-pass dilated
    depth: float            # camera-frame z
    opacity: float
    payload: np.ndarray
    radius_px: float        # conservative extent used for binning


class _Projection:
    """Packed projection of all visible Gaussians plus their depth order."""

    __slots__ = ("idx", "cam", "depth", "mean2d", "conic", "cov2d", "M", "J",
                 "opacity", "payload", "bbox", "order")

    def __init__(self, **kw):
        for name in self.__slots__:
            setattr(self, name, kw[name])


def _project_scene(scene: GaussianScene, view: Se3Pose, K: CameraIntrinsics,
                   near_plane: float = NEAR_PLANE) -> _Projection:
    Rw = view.rotation_matrix()
    cam = scene.means @ Rw.T + view.translation
    idx = np.flatnonzero(cam[:, 2] > near_plane)
    cam = cam[idx]

    iz = 1.0 / cam[:, 2]
    mean2d = np.stack([K.fx * cam[:, 0] * iz + K.cx, K.fy * cam[:, 1] * iz + K.cy], axis=1)

    s2 = np.exp(2.0 * scene.log_scales[idx])
    Rg = _batch_quat_to_matrix(scene.rotations[idx])
    cov3 = np.einsum("nij,nj,nkj->nik", Rg, s2, Rg)
    M = np.einsum("ij,njk,lk->nil", Rw, cov3, Rw)

    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = K.fx * iz
    J[:, 0, 2] = -K.fx * cam[:, 0] * iz**2
    J[:, 1, 1] = K.fy * iz
    J[:, 1, 2] = -K.fy * cam[:, 1] * iz**2
    cov2d = np.einsum("nab,nbc,ndc->nad", J, M, J)
    cov2d[:, 0, 0] += COV_DILATION
    cov2d[:, 1, 1] += COV_DILATION

    opacity = sigmoid(scene.opacity_logits[idx])
    # support level: alpha falls below ALPHA_FLOOR outside this Mahalanobis bound
    with np.errstate(divide="ignore"):
        lsup = 2.0 * np.maximum(np.log(opacity / ALPHA_FLOOR), 0.0)
    ex = np.sqrt(lsup * cov2d[:, 0, 0])
    ey = np.sqrt(lsup * cov2d[:, 1, 1])

    x0 = np.maximum(np.ceil(mean2d[:, 0] - ex), 0).astype(np.int64)
    x1 = np.minimum(np.floor(mean2d[:, 0] + ex), K.width - 1).astype(np.int64) + 1
    y0 = np.maximum(np.ceil(mean2d[:, 1] - ey), 0).astype(np.int64)
    y1 = np.minimum(np.floor(mean2d[:, 1] + ey), K.height - 1).astype(np.int64) + 1
    keep = np.flatnonzero((x0 < x1) & (y0 < y1) & (lsup > 0))

    cov2d = cov2d[keep]
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov2d[:, 0, 1] / det

    depth = cam[keep, 2]
    return _Projection(
        idx=idx[keep], cam=cam[keep], depth=depth, mean2d=mean2d[keep],
        conic=conic, cov2d=cov2d, M=M[keep], J=J[keep],
        opacity=opacity[keep], payload=scene.payloads[idx[keep]],
        bbox=np.stack([y0[keep], y1[keep], x0[keep], x1[keep]], axis=1),
        order=np.argsort(depth, kind="stable"),
    )


def project_gaussian(g, view: Se3Pose, K: CameraIntrinsics, near_plane: float = NEAR_PLANE):
    """Project a single Gaussian3D; returns None when culled."""
    scene = GaussianScene(
        g.mean[None], g.rot[None], g.log_scale[None], np.array([g.opacity_logit]), g.payload[None]
    )
    proj = _project_scene(scene, view, K, near_plane=near_plane)
    if proj.idx.size == 0:
        return None
    c = proj.cov2d[0]
    mid = 0.5 * (c[0, 0] + c[1, 1])
    det = c[0, 0] * c[1, 1] - c[0, 1] ** 2
    lam_max = mid + np.sqrt(max(mid * mid - det, 0.0))
    lsup = 2.0 * max(np.log(proj.opacity[0] / ALPHA_FLOOR), 0.0)
    return ProjectedGaussian(
        mean2d=proj.mean2d[0], cov2d=c, depth=float(proj.depth[0]),
        opacity=float(proj.opacity[0]), payload=proj.payload[0],
        radius_px=float(np.sqrt(lsup * lam_max)),
    )


@njit(cache=True, nogil=True)
def _blend_forward(order, bbox, mean2d, conic, opacity, payload,
                   out, trans, alpha_buf, offsets, alpha_clamp, t_min):
    k = payload.shape[1]
    for oi in range(order.size):
        s = order[oi]
        y0, y1, x0, x1 = bbox[s, 0], bbox[s, 1], bbox[s, 2], bbox[s, 3]
        mx, my = mean2d[s, 0], mean2d[s, 1]
        a00, a01, a11 = conic[s, 0, 0], conic[s, 0, 1], conic[s, 1, 1]
        o = opacity[s]
        pos = offsets[oi]
        for yy in range(y0, y1):
            dy = yy - my
            for xx in range(x0, x1):
                dx = xx - mx
                t = trans[yy, xx]
                if t >= t_min:
                    sig = 0.5 * (a00 * dx * dx + a11 * dy * dy) + a01 * dx * dy
                    a = o * np.exp(-sig)
                    if a > alpha_clamp:
                        a = alpha_clamp
                    w = a * t
                    for c in range(k):
                        out[yy, xx, c] += w * payload[s, c]
                    trans[yy, xx] = t * (1.0 - a)
                else:
                    a = 0.0
                alpha_buf[pos] = a
                pos += 1


@njit(cache=True, nogil=True)
def _blend_backward(order, bbox, mean2d, conic, opacity, payload,
                    upstream, alpha_buf, offsets, trans_run, behind,
                    alpha_clamp, red, dc):
    k = payload.shape[1]
    for oi in range(order.size - 1, -1, -1):
        s = order[oi]
        y0, y1, x0, x1 = bbox[s, 0], bbox[s, 1], bbox[s, 2], bbox[s, 3]
        mx, my = mean2d[s, 0], mean2d[s, 1]
        a00, a01, a11 = conic[s, 0, 0], conic[s, 0, 1], conic[s, 1, 1]
        o = opacity[s]
        pos = offsets[oi]
        gmu_x = 0.0
        gmu_y = 0.0
        sxx = 0.0
        sxy = 0.0
        syy = 0.0
        dl_do = 0.0
        for yy in range(y0, y1):
            dy = yy - my
            for xx in range(x0, x1):
                dx = xx - mx
                a = alpha_buf[pos]
                pos += 1
                one_minus = 1.0 - a
                t_i = trans_run[yy, xx] / one_minus
                trans_run[yy, xx] = t_i
                if a == 0.0:
                    continue
                w = a * t_i
                upc = 0.0
                upb = 0.0
                for c in range(k):
                    u = upstream[yy, xx, c]
                    upc += u * payload[s, c]
                    upb += u * behind[yy, xx, c]
                    behind[yy, xx, c] += w * payload[s, c]
                    dc[oi, c] += u * w
                dl_da = t_i * upc - upb / one_minus
                if a < alpha_clamp:
                    dl_dsig = -dl_da * a
                    gmu_x -= dl_dsig * (a00 * dx + a01 * dy)
                    gmu_y -= dl_dsig * (a01 * dx + a11 * dy)
                    sxx += dl_dsig * dx * dx
                    sxy += dl_dsig * dx * dy
                    syy += dl_dsig * dy * dy
                    dl_do += dl_da * (a / o)
        red[oi, 0] = gmu_x
        red[oi, 1] = gmu_y
        red[oi, 2] = sxx
        red[oi, 3] = sxy
        red[oi, 4] = syy
        red[oi, 5] = dl_do


class RenderAux:
    """Blend records from a forward pass, consumed by rasterize_backward."""

    def __init__(self, alpha_buf, offsets, final_transmittance, fingerprint):
        self.alpha_buf = alpha_buf
        self.offsets = offsets
        self.final_transmittance = final_transmittance
        self.fingerprint = fingerprint


@dataclass(frozen=True)
class RenderOutput:
    map: PlanarMap
    alpha: PlanarMap
    aux: RenderAux | None


@dataclass(frozen=True)
class SceneGradients:
    means: np.ndarray           # (n, 3)
    rot_tangents: np.ndarray    # (n, 3) left-increment axis-angle per Gaussian
    log_scales: np.ndarray      # (n, 3)
    opacity_logits: np.ndarray  # (n,)
    payloads: np.ndarray        # (n, k)


def _fingerprint(scene, view, K):
    return (
        len(scene), scene.payload_dim,
        tuple(view.rotation.tolist()), tuple(view.translation.tolist()),
        K.fx, K.fy, K.cx, K.cy, K.width, K.height,
    )


def _record_offsets(proj) -> np.ndarray:
    areas = (proj.bbox[:, 1] - proj.bbox[:, 0]) * (proj.bbox[:, 3] - proj.bbox[:, 2])
    offsets = np.zeros(proj.order.size + 1, dtype=np.int64)
    np.cumsum(areas[proj.order], out=offsets[1:])
    return offsets


def rasterize(scene: GaussianScene, view: Se3Pose, K: CameraIntrinsics,
              background=0.0, record_aux: bool = True,
              near_plane: float = NEAR_PLANE) -> RenderOutput:
    """Render the scene from a world-to-camera view transform.

    ``background`` is a scalar or k-vector composited with the remaining
    transmittance.  Pure function of its inputs; the scene is never written.
    """
    k = scene.payload_dim
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (k,))
    proj = _project_scene(scene, view, K, near_plane=near_plane)

    out = np.zeros((K.height, K.width, k))
    trans = np.ones((K.height, K.width))
    offsets = _record_offsets(proj)
    alpha_buf = np.zeros(offsets[-1])
    _blend_forward(proj.order, proj.bbox, proj.mean2d, proj.conic, proj.opacity,
                   proj.payload, out, trans, alpha_buf, offsets,
                   ALPHA_CLAMP, TRANSMITTANCE_MIN)
    out += trans[:, :, None] * bg
    aux = None
    if record_aux:
        aux = RenderAux(alpha_buf, offsets, trans.copy(), _fingerprint(scene, view, K))
    return RenderOutput(map=PlanarMap(out), alpha=PlanarMap(1.0 - trans), aux=aux)


def rasterize_backward(scene: GaussianScene, view: Se3Pose, K: CameraIntrinsics,
                       upstream, aux: RenderAux, background=0.0,
                       wrt_gaussians: bool = False,
                       near_plane: float = NEAR_PLANE):
    """Backpropagate d(loss)/d(rendered map) to a pose increment.

    Returns ``(pose_grad, scene_grads)``: ``pose_grad`` is the 6-vector
    d(loss)/d(xi) for ``view' = exp(xi) o view`` with xi = (3 rotation,
    3 translation); ``scene_grads`` is a SceneGradients when
    ``wrt_gaussians`` is set (requires an unfrozen scene), else None.
    """
    if aux is None:
        raise ValueError("missing aux records; run rasterize with record_aux=True")
    if aux.fingerprint != _fingerprint(scene, view, K):
        raise ValueError("aux records do not match this scene/view/intrinsics")
    if wrt_gaussians and scene.frozen:
        raise ValueError("scene is frozen; per-Gaussian gradients unavailable")

    k = scene.payload_dim
    up = np.ascontiguousarray(as_map_data(upstream, channels=k))
    if up.shape[:2] != (K.height, K.width):
        raise ValueError("upstream gradient dimensions do not match intrinsics")
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (k,))

    proj = _project_scene(scene, view, K, near_plane=near_plane)
    offsets = _record_offsets(proj)
    if offsets[-1] != aux.alpha_buf.size:
        raise ValueError("aux records do not match this scene/view/intrinsics")

    n_rec = proj.order.size
    trans_run = aux.final_transmittance.copy()
    behind = trans_run[:, :, None] * bg  # composite behind the current record
    red = np.zeros((n_rec, 6))
    dc = np.zeros((n_rec, k))
    _blend_backward(proj.order, proj.bbox, proj.mean2d, proj.conic, proj.opacity,
                    proj.payload, up, aux.alpha_buf, offsets, trans_run,
                    np.ascontiguousarray(behind), ALPHA_CLAMP, red, dc)

    # batched chain rules over the depth-ordered records
    ordered = proj.order
    conic = proj.conic[ordered]
    J = proj.J[ordered]
    M = proj.M[ordered]
    cam = proj.cam[ordered]
    iz = 1.0 / cam[:, 2]
    iz2 = iz * iz

    g_mu = red[:, 0:2]
    g_conic = 0.5 * np.stack(
        [np.stack([red[:, 2], red[:, 3]], axis=1), np.stack([red[:, 3], red[:, 4]], axis=1)],
        axis=1,
    )
    g_cov2d = -np.einsum("rab,rbc,rcd->rad", conic, g_conic, conic)
    g_J = 2.0 * np.einsum("rab,rbc,rcd->rad", g_cov2d, J, M)
    g_M = np.einsum("rba,rbc,rcd->rad", J, g_cov2d, J)

    g_m = np.einsum("rba,rb->ra", J, g_mu)
    g_m[:, 0] += g_J[:, 0, 2] * (-K.fx * iz2)
    g_m[:, 1] += g_J[:, 1, 2] * (-K.fy * iz2)
    g_m[:, 2] += (
        g_J[:, 0, 0] * (-K.fx * iz2)
        + g_J[:, 1, 1] * (-K.fy * iz2)
        + g_J[:, 0, 2] * (2.0 * K.fx * cam[:, 0] * iz2 * iz)
        + g_J[:, 1, 2] * (2.0 * K.fy * cam[:, 1] * iz2 * iz)
    )

    pose_grad = np.zeros(6)
    pose_grad[3:] = g_m.sum(axis=0)
    pose_grad[:3] = np.cross(cam, g_m).sum(axis=0)
    Q = np.einsum("rab,rbc->rac", M, g_M)
    pose_grad[0] += 2.0 * np.sum(Q[:, 1, 2] - Q[:, 2, 1])
    pose_grad[1] += 2.0 * np.sum(Q[:, 2, 0] - Q[:, 0, 2])
    pose_grad[2] += 2.0 * np.sum(Q[:, 0, 1] - Q[:, 1, 0])

    sg = None
    if wrt_gaussians:
        Rw = view.rotation_matrix()
        gidx = proj.idx[ordered]
        sg = SceneGradients(
            means=np.zeros((len(scene), 3)),
            rot_tangents=np.zeros((len(scene), 3)),
            log_scales=np.zeros((len(scene), 3)),
            opacity_logits=np.zeros(len(scene)),
            payloads=np.zeros((len(scene), k)),
        )
        np.add.at(sg.payloads, gidx, dc)
        o = proj.opacity[ordered]
        np.add.at(sg.opacity_logits, gidx, red[:, 5] * o * (1.0 - o))
        np.add.at(sg.means, gidx, g_m @ Rw)
        g_cov3 = np.einsum("ba,rbc,cd->rad", Rw, g_M, Rw)
        Rg = _batch_quat_to_matrix(scene.rotations[gidx])
        s2 = np.exp(2.0 * scene.log_scales[gidx])
        np.add.at(sg.log_scales, gidx,
                  2.0 * s2 * np.einsum("ria,rij,rja->ra", Rg, g_cov3, Rg))
        cov3 = np.einsum("rij,rj,rkj->rik", Rg, s2, Rg)
        Q3 = np.einsum("rab,rbc->rac", cov3, g_cov3)
        rot_t = 2.0 * np.stack(
            [Q3[:, 1, 2] - Q3[:, 2, 1], Q3[:, 2, 0] - Q3[:, 0, 2], Q3[:, 0, 1] - Q3[:, 1, 0]],
            axis=1,
        )
        np.add.at(sg.rot_tangents, gidx, rot_t)

    return pose_grad, sg
