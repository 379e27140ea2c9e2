"""Pinhole cameras.

Camera frame: x right, y down, z forward.  Pixel ``(u, v)`` is continuous with
pixel ``j`` covering ``[j, j + 1)``, so the image spans ``[0, W) x [0, H)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ValidationError

Z_NEAR = 1e-4
Z_FAR = 4.8


@dataclass(frozen=True)
class CameraModel:
    """Intrinsics ``K`` (3x3), world-to-camera extrinsics ``E`` (3x4), image ``H x W``."""

    K: np.ndarray
    E: np.ndarray
    H: int
    W: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        E = np.asarray(self.E, dtype=np.float64).reshape(3, 4)
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(E))):
            raise ValidationError("camera matrices must be finite")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValidationError("K must be upper-triangular with positive focal lengths")
        Rwc = E[:, :3]
        if np.abs(Rwc @ Rwc.T - np.eye(3)).max() > 1e-6:
            raise ValidationError("rotation block of E must be orthonormal")
        if int(self.H) <= 0 or int(self.W) <= 0:
            raise ValidationError("image size must be positive")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "H", int(self.H))
        object.__setattr__(self, "W", int(self.W))

    @property
    def position(self):
        """Camera center in world coordinates."""
        return -self.E[:, :3].T @ self.E[:, 3]

    def world_to_camera(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.E[:, :3].T + self.E[:, 3]

    def compose(self, pose):
        """Camera whose world frame is ``pose`` (4x4 local-to-world) applied first."""
        pose = np.asarray(pose, dtype=np.float64)
        E4 = np.vstack([self.E, [0.0, 0.0, 0.0, 1.0]])
        return CameraModel(self.K, (E4 @ pose)[:3], self.H, self.W)

    def to_dict(self):
        return {"K": self.K.reshape(-1).tolist(), "E": self.E.reshape(-1).tolist(), "H": self.H, "W": self.W}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["K"], dtype=np.float64), np.asarray(d["E"], dtype=np.float64), d["H"], d["W"])


def intrinsics(H, W, fov_deg=60.0):
    """Square-pixel intrinsics with horizontal field of view ``fov_deg``."""
    f = 0.5 * W / np.tan(np.radians(fov_deg) / 2)
    return np.array([[f, 0.0, W / 2], [0.0, f, H / 2], [0.0, 0.0, 1.0]])


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera extrinsics for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        raise ValidationError("look direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return np.hstack([R, (-R @ eye)[:, None]])


def project(points, cam, z_near=Z_NEAR, z_far=None):
    """Project world points to pixels.

    Returns ``(pixels, valid)`` where ``pixels`` is ``(..., 2)`` as ``(u, v)``
    and ``valid`` marks points in front of the camera (``z > z_near``, and
    ``z < z_far`` when given) that land inside the image.
    """
    points = np.asarray(points, dtype=np.float64)
    xc = cam.world_to_camera(points)
    z = xc[..., 2]
    in_front = z > z_near
    safe_z = np.where(in_front, z, 1.0)
    uvw = (xc / safe_z[..., None]) @ cam.K.T
    pixels = uvw[..., :2]
    valid = in_front & (pixels[..., 0] >= 0) & (pixels[..., 0] < cam.W) & (pixels[..., 1] >= 0) & (pixels[..., 1] < cam.H)
    if z_far is not None:
        valid &= z < z_far
    pixels = np.where(in_front[..., None], pixels, np.nan)
    return pixels, valid


def pixel_rays(cam):
    """Camera-frame ray directions through pixel centers, ``(H, W, 3)`` with unit z."""
    v, u = np.meshgrid(np.arange(cam.H) + 0.5, np.arange(cam.W) + 0.5, indexing="ij")
    pix = np.stack([u, v, np.ones_like(u)], axis=-1)
    return pix @ np.linalg.inv(cam.K).T
