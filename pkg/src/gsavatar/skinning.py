"""Forward kinematics and linear blend skinning, with analytic gradients
for canonical geometry and pose parameters.

Joint j with parent p carries the local transform T(offset_j) R(theta_j),
offset_j being the rest-space displacement from parent to child; the root
additionally gets the pose's global translation.  The skinning matrix is
G_j = W_j A_j^-1 with W_j the posed world transform and A_j the rest world
transform (a pure translation, since rest rotations are the identity), so
the identity pose skins every point to itself.

Points blend full transforms; direction vectors blend only the rotation
blocks and are renormalized afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .scene import Pose, SkinnedTemplate

_EPS_ANGLE = 1e-8


def _skew(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3) by the
    exponential map, with a series fallback near zero angle."""
    v = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    k = _skew(v)
    k2 = k @ k
    small = theta < _EPS_ANGLE
    t = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(t)) / t**2)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * k2


def so3_left_jacobian(axis_angle: np.ndarray) -> np.ndarray:
    """Left Jacobian of the exponential map: dR/dtheta_i = [J_l e_i]x R."""
    v = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    k = _skew(v)
    k2 = k @ k
    small = theta < _EPS_ANGLE
    t = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(t)) / t**2)
    b = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (t - np.sin(t)) / t**3)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * k2


def _translation(t) -> np.ndarray:
    out = np.eye(4)
    out[:3, 3] = t
    return out


def _rigid_inverse(m: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    r = m[:3, :3]
    out[:3, :3] = r.T
    out[:3, 3] = -r.T @ m[:3, 3]
    return out


@dataclass
class FKResult:
    """Per-joint transforms of one posed skeleton."""

    world: np.ndarray      # (J, 4, 4) W_j
    skin: np.ndarray       # (J, 4, 4) G_j = W_j A_j^-1
    prefix: np.ndarray     # (J, 4, 4) everything left of R(theta_j) in W_j
    rot_local: np.ndarray  # (J, 3, 3) R(theta_j)
    order: np.ndarray      # parent-before-child joint ordering

    @property
    def joint_positions(self) -> np.ndarray:
        """Posed world positions of the joints."""
        return self.world[:, :3, 3].copy()


def forward_kinematics(template: SkinnedTemplate, pose: Pose) -> FKResult:
    j_count = template.joint_count
    if pose.joint_count != j_count:
        raise ValidationError(
            f"pose has {pose.joint_count} joints, template has {j_count}")
    parents = template.joint_parents
    rest = np.asarray(template.rest_joints, dtype=np.float64)
    order = template.topological_order()
    rot = rodrigues(pose.joint_rotations)

    world = np.zeros((j_count, 4, 4))
    prefix = np.zeros((j_count, 4, 4))
    skin = np.zeros((j_count, 4, 4))
    for j in order:
        p = int(parents[j])
        if p < 0:
            base = _translation(pose.root_translation)
            offset = rest[j]
        else:
            base = world[p]
            offset = rest[j] - rest[p]
        pre = base @ _translation(offset)
        r_hat = np.eye(4)
        r_hat[:3, :3] = rot[j]
        prefix[j] = pre
        world[j] = pre @ r_hat
        skin[j] = world[j] @ _translation(-rest[j])
    return FKResult(world=world, skin=skin, prefix=prefix, rot_local=rot, order=order)


# ---------------------------------------------------------------------------
# blending
# ---------------------------------------------------------------------------

def lbs_points(weights: np.ndarray, points: np.ndarray, fk: FKResult) -> np.ndarray:
    """Blend-skin points (K, 3) with weights (K, J)."""
    weights = np.asarray(weights, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    rot = fk.skin[:, :3, :3]
    trans = fk.skin[:, :3, 3]
    # (J, K, 3) per-joint rigid placements, then blend
    per_joint = np.einsum("jab,kb->jka", rot, points) + trans[:, None, :]
    return np.einsum("kj,jka->ka", weights, per_joint)


def lbs_normals(weights: np.ndarray, normals: np.ndarray, fk: FKResult) -> np.ndarray:
    """Blend only rotations, then renormalize; returns unit vectors."""
    weights = np.asarray(weights, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    rot = fk.skin[:, :3, :3]
    blended = np.einsum("kj,jab,kb->ka", weights, rot, normals)
    norms = np.linalg.norm(blended, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValidationError("blended normal collapsed to zero length")
    return blended / norms


@dataclass
class SkinGrads:
    """Gradients of a functional of posed geometry."""

    d_points: np.ndarray            # (K, 3) wrt canonical points
    d_joint_rotations: np.ndarray   # (J, 3) wrt axis-angle pose
    d_root_translation: np.ndarray  # (3,)
    d_normals: np.ndarray | None = None  # (K, 3) wrt canonical normals


def lbs_backward(template: SkinnedTemplate, weights: np.ndarray,
                 points: np.ndarray, pose: Pose, fk: FKResult,
                 d_posed_points: np.ndarray,
                 normals: np.ndarray | None = None,
                 d_posed_normals: np.ndarray | None = None) -> SkinGrads:
    """Pull gradients on posed points (and optionally posed unit normals)
    back to canonical geometry and pose parameters.

    Pose gradients use the adjoint along the kinematic chain: per-joint
    outer products are accumulated up the tree, and each joint's rotation
    receives P_j^T S_j W_j^-T mapped through the exponential-map Jacobian.
    """
    weights = np.asarray(weights, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    d_posed_points = np.asarray(d_posed_points, dtype=np.float64)
    j_count = template.joint_count
    rot = fk.skin[:, :3, :3]

    # canonical point gradient and the per-joint adjoint M_j (3x4)
    d_points = np.einsum("kj,jba,kb->ka", weights, rot, d_posed_points)
    homog = np.concatenate([points, np.ones((points.shape[0], 1))], axis=1)
    m = np.einsum("kj,ka,kb->jab", weights, d_posed_points, homog)  # (J, 3, 4)

    d_normals = None
    if d_posed_normals is not None:
        if normals is None:
            raise ValidationError("normal gradients require the canonical normals")
        normals = np.asarray(normals, dtype=np.float64)
        d_posed_normals = np.asarray(d_posed_normals, dtype=np.float64)
        blended = np.einsum("kj,jab,kb->ka", weights, rot, normals)
        norms = np.linalg.norm(blended, axis=1, keepdims=True)
        unit = blended / norms
        d_blended = (d_posed_normals
                     - unit * np.sum(unit * d_posed_normals, axis=1, keepdims=True)) / norms
        d_normals = np.einsum("kj,jba,kb->ka", weights, rot, d_blended)
        hom0 = np.concatenate([normals, np.zeros((normals.shape[0], 1))], axis=1)
        m += np.einsum("kj,ka,kb->jab", weights, d_blended, hom0)

    # dL/dW_j = pad(M_j) A_j^-T, then subtree sums S_j = sum U_j W_j^T
    rest = np.asarray(template.rest_joints, dtype=np.float64)
    subtree = np.zeros((j_count, 4, 4))
    u_last_col = np.zeros((j_count, 3))
    for j in range(j_count):
        u = np.zeros((4, 4))
        u[:3, :] = m[j] @ _translation(-rest[j]).T
        subtree[j] = u @ fk.world[j].T
        u_last_col[j] = u[:3, 3]

    parents = template.joint_parents
    for j in reversed(list(fk.order)):
        p = int(parents[j])
        if p >= 0:
            subtree[p] += subtree[j]

    d_theta = np.zeros((j_count, 3))
    jac = so3_left_jacobian(pose.joint_rotations)
    for j in range(j_count):
        d_rhat = fk.prefix[j].T @ subtree[j] @ _rigid_inverse(fk.world[j]).T
        d_rot = d_rhat[:3, :3]
        for i in range(3):
            gen = _skew(jac[j, :, i])
            d_theta[j, i] = np.sum(d_rot * (gen @ fk.rot_local[j]))
    d_root = u_last_col.sum(axis=0)

    return SkinGrads(d_points=d_points, d_joint_rotations=d_theta,
                     d_root_translation=d_root, d_normals=d_normals)
