"""Planar pose algebra shared by the data, model, solver and runtime layers.

States are arrays whose last axis is ``(x, y, theta, v_x, v_y, omega)``;
poses are the first three components. Velocities are body-frame quantities and
pass through frame changes unchanged.
"""

from typing import Tuple

import numpy as np

STATE_DIM = 6
CONTROL_DIM = 2
STATE_FIELDS = ("x", "y", "theta", "v_x", "v_y", "omega")
CONTROL_FIELDS = ("delta", "psi")


def wrap_angle(angle):
    """Wrap angle(s) into (-pi, pi]. In-range values are returned untouched."""
    a = np.asarray(angle, dtype=float)
    wrapped = np.pi - np.mod(np.pi - a, 2.0 * np.pi)
    out = np.where((a > -np.pi) & (a <= np.pi), a, wrapped)
    return float(out) if out.ndim == 0 else out


def relative_pose(reference, target) -> np.ndarray:
    """
    Express ``target`` in the body frame of ``reference``.

    Both arguments broadcast along their leading axes; components past the
    pose (velocities) are copied from ``target``.

    Args:
        reference: Array (..., >=3) holding the frame pose
        target: Array (..., >=3) to re-express

    Returns:
        Array shaped like ``target``
    """
    ref = np.asarray(reference, dtype=float)
    out = np.array(target, dtype=float, copy=True)
    c = np.cos(ref[..., 2])
    s = np.sin(ref[..., 2])
    dx = out[..., 0] - ref[..., 0]
    dy = out[..., 1] - ref[..., 1]
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    out[..., 2] = wrap_angle(out[..., 2] - ref[..., 2])
    return out


def compose_pose(reference, local) -> np.ndarray:
    """Inverse of :func:`relative_pose`: map ``local`` from the frame of ``reference`` to world."""
    ref = np.asarray(reference, dtype=float)
    out = np.array(local, dtype=float, copy=True)
    c = np.cos(ref[..., 2])
    s = np.sin(ref[..., 2])
    lx = out[..., 0].copy()
    ly = out[..., 1].copy()
    out[..., 0] = ref[..., 0] + c * lx - s * ly
    out[..., 1] = ref[..., 1] + s * lx + c * ly
    out[..., 2] = wrap_angle(ref[..., 2] + out[..., 2])
    return out


def relative_pose_tangent(anchor: np.ndarray, body: np.ndarray, d_anchor: np.ndarray,
                          d_target: np.ndarray) -> np.ndarray:
    """
    Forward-mode derivative of ``body = relative_pose(anchor, target)``.

    Args:
        anchor: Frame state (6,)
        body: Result of relative_pose (W, 6)
        d_anchor: Tangents of the anchor (6, C)
        d_target: Tangents of the target states (W, 6, C)

    Returns:
        Tangents of ``body`` (W, 6, C)
    """
    c = np.cos(anchor[2])
    s = np.sin(anchor[2])
    d_dx = d_target[:, 0, :] - d_anchor[0]
    d_dy = d_target[:, 1, :] - d_anchor[1]
    d_th = d_anchor[2]
    d_body = np.empty_like(d_target)
    d_body[:, 0, :] = c * d_dx + s * d_dy + body[:, 1:2] * d_th
    d_body[:, 1, :] = -s * d_dx + c * d_dy - body[:, 0:1] * d_th
    d_body[:, 2, :] = d_target[:, 2, :] - d_th
    d_body[:, 3:, :] = d_target[:, 3:, :]
    return d_body


def compose_pose_tangent(anchor: np.ndarray, world: np.ndarray, d_anchor: np.ndarray,
                         d_local: np.ndarray) -> np.ndarray:
    """Forward-mode derivative of ``world = compose_pose(anchor, local)``; shapes as in relative_pose_tangent."""
    c = np.cos(anchor[2])
    s = np.sin(anchor[2])
    d_th = d_anchor[2]
    d_world = np.empty_like(d_local)
    d_world[:, 0, :] = (d_anchor[0] + c * d_local[:, 0, :] - s * d_local[:, 1, :]
                        - (world[:, 1:2] - anchor[1]) * d_th)
    d_world[:, 1, :] = (d_anchor[1] + s * d_local[:, 0, :] + c * d_local[:, 1, :]
                        + (world[:, 0:1] - anchor[0]) * d_th)
    d_world[:, 2, :] = d_th + d_local[:, 2, :]
    d_world[:, 3:, :] = d_local[:, 3:, :]
    return d_world


def relative_pose_vjp(anchor: np.ndarray, body: np.ndarray,
                      g_body: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Reverse-mode derivative of a batched ``body = relative_pose(anchor[:, None], target)``.

    Args:
        anchor: Frame states (B, 6)
        body: Result of relative_pose (B, W, 6)
        g_body: Upstream gradient w.r.t. body (B, W, 6)

    Returns:
        (gradient w.r.t. anchor (B, 6), gradient w.r.t. target (B, W, 6))
    """
    c = np.cos(anchor[:, 2])[:, None]
    s = np.sin(anchor[:, 2])[:, None]
    gx = g_body[..., 0]
    gy = g_body[..., 1]
    g_dx = c * gx - s * gy
    g_dy = s * gx + c * gy
    g_target = g_body.copy()
    g_target[..., 0] = g_dx
    g_target[..., 1] = g_dy
    g_anchor = np.zeros_like(anchor)
    g_anchor[:, 0] = -g_dx.sum(axis=1)
    g_anchor[:, 1] = -g_dy.sum(axis=1)
    g_anchor[:, 2] = (gx * body[..., 1] - gy * body[..., 0] - g_body[..., 2]).sum(axis=1)
    return g_anchor, g_target
