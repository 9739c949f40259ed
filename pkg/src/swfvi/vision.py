"""Stereo pinhole camera model and the anchored-inverse-depth visual error.

Measurements live in normalized image coordinates; the pixel intrinsics are
used to convert the pixel-noise sigma into normalized units and to decide
visibility against the pixel plane. Landmarks are parameterized by
(alpha, beta, lambda): normalized coordinates and inverse depth in the
anchor state's left camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lie
from .state import Param, landmark_to_world

Z_MIN = 1e-3  # m, projection validity floor


class BehindCameraError(ValueError):
    """Point at or behind the image plane; the measurement is dropped."""


@dataclass(frozen=True)
class Camera:
    f_u: float
    f_v: float
    c_u: float
    c_v: float
    width: int
    height: int
    C_bc: np.ndarray  # columns are the camera axes expressed in the body
    t_bc: np.ndarray  # camera origin in the body frame, m

    def __post_init__(self):
        if self.f_u <= 0 or self.f_v <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    def to_pixels(self, y):
        return np.array([
            self.f_u * y[0] + self.c_u,
            self.f_v * y[1] + self.c_v,
        ])

    def from_pixels(self, p):
        return np.array([
            (p[0] - self.c_u) / self.f_u,
            (p[1] - self.c_v) / self.f_v,
        ])

    def in_pixel_plane(self, y):
        u, v = self.to_pixels(y)
        return 0.0 <= u <= self.width and 0.0 <= v <= self.height


@dataclass(frozen=True)
class CameraRig:
    left: Camera
    right: Camera
    pixel_sigma: float

    @property
    def baseline(self):
        # separation along the left camera's x axis
        d = self.right.t_bc - self.left.t_bc
        return float(self.left.C_bc[:, 0] @ d)

    def camera(self, side):
        if side == "left":
            return self.left
        if side == "right":
            return self.right
        raise ValueError(f"unknown camera side {side!r}")

    def measurement_cov(self, side):
        cam = self.camera(side)
        return np.diag([
            (self.pixel_sigma / cam.f_u) ** 2,
            (self.pixel_sigma / cam.f_v) ** 2,
        ])


def default_rig(f_u=385.75, f_v=385.75, c_u=323.12, c_v=236.74,
                width=640, height=480, baseline=0.15, pixel_sigma=1.0):
    """Stereo rig with the optical axis along the body x axis."""
    # camera x right, y down, z forward; body x forward, z up
    C_bc = np.array([
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ])
    left = Camera(f_u, f_v, c_u, c_v, width, height, C_bc, np.zeros(3))
    right = Camera(f_u, f_v, c_u, c_v, width, height, C_bc,
                   C_bc @ np.array([baseline, 0.0, 0.0]))
    return CameraRig(left, right, pixel_sigma)


@dataclass(frozen=True)
class VisualMeasurement:
    y: np.ndarray  # normalized image coordinates
    landmark_id: int
    state_id: int
    camera: str = "left"


def to_camera_frame(world_pt, X_k, cam):
    """World point expressed in a camera attached to state X_k."""
    return cam.C_bc.T @ (
        X_k.rotation.T @ (world_pt - X_k.position) - cam.t_bc
    )


def project(r_c, z_min=Z_MIN):
    """Normalized image coordinates of a camera-frame point."""
    if r_c[2] <= z_min:
        raise BehindCameraError(f"depth {r_c[2]:.4g} <= {z_min}")
    return r_c[:2] / r_c[2]


def projection_jacobian(r_c, z_min=Z_MIN):
    x, y, z = r_c
    if z <= z_min:
        raise BehindCameraError(f"depth {z:.4g} <= {z_min}")
    return np.array([
        [1.0 / z, 0.0, -x / (z * z)],
        [0.0, 1.0 / z, -y / (z * z)],
    ])


def triangulate_stereo(y_left, y_right, rig):
    """Anchored inverse-depth parameters from a normalized stereo pair.

    Uses the disparity along the stereo baseline; returns (alpha, beta,
    lambda) in the left camera.
    """
    disparity = y_left[0] - y_right[0]
    if disparity <= 0.0:
        raise ValueError(f"non-positive disparity {disparity:.4g}")
    depth = rig.baseline / disparity
    if depth <= Z_MIN:
        raise BehindCameraError(f"triangulated depth {depth:.4g}")
    return float(y_left[0]), float(y_left[1]), float(1.0 / depth)


def _world_point_jacobians(z, X_i, cam_anchor):
    """Jacobians of the landmark's world position.

    Returns (r_w, D r_w / D X_i (3x15), D r_w / D z (3x3)). The anchor is
    always the left camera.
    """
    r_w = landmark_to_world(z, X_i, cam_anchor.C_bc, cam_anchor.t_bc)
    D_i = np.zeros((3, 15))
    if X_i.tag is Param.SEPARATE:
        p_c = np.array([z.alpha, z.beta, 1.0]) / z.lam
        p_b = cam_anchor.C_bc @ p_c + cam_anchor.t_bc
        D_i[:, 0:3] = -lie.so3_wedge(X_i.rotation @ p_b)
    else:
        D_i[:, 0:3] = -lie.so3_wedge(r_w)
    D_i[:, 6:9] = np.eye(3)
    lam = z.lam
    D_z = X_i.rotation @ cam_anchor.C_bc @ np.array([
        [1.0 / lam, 0.0, -z.alpha / (lam * lam)],
        [0.0, 1.0 / lam, -z.beta / (lam * lam)],
        [0.0, 0.0, -1.0 / (lam * lam)],
    ])
    return r_w, D_i, D_z


def visual_residual(meas, z, X_anchor, X_k, rig):
    """Reprojection error only (no Jacobians), for cost queries."""
    cam = rig.camera(meas.camera)
    r_w = landmark_to_world(z, X_anchor, rig.left.C_bc, rig.left.t_bc)
    return meas.y - project(to_camera_frame(r_w, X_k, cam))


def visual_error(meas, z, X_anchor, X_k, rig):
    """Reprojection error and its Jacobian blocks.

    Returns ``(e, W, J_k, J_i, J_z)``: the 2-vector error y - g(r_c), the
    2x2 weight, and Jacobians with respect to the observing state, the
    anchoring state, and the landmark parameters. Raises
    :class:`BehindCameraError` when the point does not project.
    """
    if X_anchor.tag is not X_k.tag:
        raise ValueError("parameterization mismatch between states")
    cam = rig.camera(meas.camera)
    r_w, D_rw_i, D_rw_z = _world_point_jacobians(z, X_anchor, rig.left)
    r_c = to_camera_frame(r_w, X_k, cam)
    e = meas.y - project(r_c)
    P = projection_jacobian(r_c)
    M = cam.C_bc.T @ X_k.rotation.T
    D_rc_k = np.zeros((3, 15))
    if X_k.tag is Param.SEPARATE:
        D_rc_k[:, 0:3] = M @ lie.so3_wedge(r_w - X_k.position)
    else:
        D_rc_k[:, 0:3] = M @ lie.so3_wedge(r_w)
    D_rc_k[:, 6:9] = -M
    J_k = -P @ D_rc_k
    J_i = -P @ M @ D_rw_i
    J_z = -P @ M @ D_rw_z
    W = np.diag([(cam.f_u / rig.pixel_sigma) ** 2,
                 (cam.f_v / rig.pixel_sigma) ** 2])
    return e, W, J_k, J_i, J_z
