"""Articulated body: skinning, pose algebra, canonicalization."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volcap import bodymodel as bm
from volcap import geomath as gm
from volcap import synthcorpus as sc


def _rng(seed):
    return np.random.default_rng(np.random.PCG64(seed))


@pytest.fixture(scope="module")
def body():
    return bm.default_body(mesh_n=32)


def test_default_body_shape(body):
    assert body.n_joints == len(body.joint_names)
    assert not body.rest_mesh.is_empty()
    lo, hi = body.bounds(margin=0.0)
    v = body.rest_mesh.vertices
    assert np.all(v >= lo - 1e-9) and np.all(v <= hi + 1e-9)
    # the whole rest body must fit the pinned 1 m x 2 m view window
    w = gm.CANON_WINDOW
    assert v[:, 0].min() > w.xmin and v[:, 0].max() < w.xmax
    assert v[:, 1].min() > w.ymin and v[:, 1].max() < w.ymax


def test_identity_pose_is_a_fixed_point(body):
    pose = bm.Pose.identity(body.n_joints)
    pts = body.rest_mesh.vertices[::5]
    weights = bm.skinning_weights(body, pts)
    posed = bm.forward_skin(body, pose, pts, weights)
    assert np.allclose(posed, pts, atol=1e-12)
    mesh = bm.skin_mesh(body, pose, body.rest_mesh)
    assert np.allclose(mesh.vertices, body.rest_mesh.vertices, atol=1e-12)


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 10**6))
def test_skinning_round_trip(seed):
    body = bm.default_body(mesh_n=24)
    rng = _rng(seed)
    pose = sc.sample_pose(body, rng)
    pts = body.rest_mesh.vertices[::4]
    weights = bm.skinning_weights(body, pts)
    posed = bm.forward_skin(body, pose, pts, weights)
    back, ok = bm.inverse_skin(body, pose, posed, weights)
    assert ok.all()
    assert np.abs(back - pts).max() < 1e-9


def test_skinning_weights_are_a_partition(body):
    rng = _rng(5)
    lo, hi = body.bounds(margin=0.1)
    pts = rng.uniform(lo, hi, (200, 3))
    w = bm.skinning_weights(body, pts)
    assert w.shape == (200, body.n_joints)
    assert np.all(w >= 0.0)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-9)


def test_compose_joint_rotation_targets_one_joint(body):
    pose = bm.Pose.identity(body.n_joints)
    j = list(body.joint_names).index("l_elbow")
    out = bm.compose_joint_rotation(pose, j, np.array([0.0, 0.0, 0.4]))
    # the input pose is untouched; only the target joint moves
    assert np.all(pose.joint_rotations == 0.0)
    delta = np.linalg.norm(out.joint_rotations, axis=1)
    assert delta[j] > 0.1
    assert np.all(delta[np.arange(body.n_joints) != j] == 0.0)


def test_compose_joint_rotation_composes_in_so3(body):
    rng = _rng(6)
    pose = sc.sample_pose(body, rng)
    j = 2
    r_before = gm.rodrigues(pose.joint_rotations[j])
    delta = rng.normal(0.0, 0.3, 3)
    out = bm.compose_joint_rotation(pose, j, delta)
    r_after = gm.rodrigues(out.joint_rotations[j])
    assert np.allclose(r_after, gm.rodrigues(delta) @ r_before, atol=1e-9)


def test_capsule_sdf_sign(body):
    # joint centers sit deep inside the capsule union
    inside = bm.capsule_union_sdf(body, body.joint_rest)
    assert np.all(inside < 0.0)
    far = np.array([[5.0, 5.0, 5.0], [0.0, 3.0, 0.0]])
    assert np.all(bm.capsule_union_sdf(body, far) > 1.0)


def test_pose_flat_rotations_layout(body):
    rng = _rng(7)
    pose = sc.sample_pose(body, rng)
    flat = pose.flat_rotations()
    assert flat.shape == (body.n_joints * 3,)
    assert np.array_equal(flat, pose.joint_rotations.ravel())
    flat[0] = 99.0
    # the flat view is a copy, not an alias
    assert pose.joint_rotations[0, 0] != 99.0


def test_canonicalize_normal_map_identity_pose(body):
    """With the true mesh, identity pose and front observation, the
    canonicalized front map agrees with a direct canonical render."""
    pose = bm.Pose.identity(body.n_joints)
    mesh = body.rest_mesh.copy()
    gm.compute_vertex_normals(mesh)
    observed = gm.ortho_render_normals(mesh, "front", (96, 96))
    front, back = bm.canonicalize_normal_map(body, pose, mesh, observed,
                                             resolution=(96, 96))
    assert front.mask.sum() > 0.5 * observed.mask.sum()
    both = front.mask & observed.mask
    dots = np.einsum("ni,ni->n", front.normals[both], observed.normals[both])
    assert np.median(dots) > 0.98
    # the back view re-renders the same fetched sheet from behind, so its
    # pixels carry unit normals pointing away from the back camera
    assert back.mask.any()
    assert np.allclose(np.linalg.norm(back.normals[back.mask], axis=1), 1.0)
    assert back.normals[back.mask][:, 2].mean() > 0.0


def test_canonicalize_normal_map_empty_observation(body):
    pose = bm.Pose.identity(body.n_joints)
    mesh = body.rest_mesh.copy()
    gm.compute_vertex_normals(mesh)
    empty = gm.make_normal_map(np.zeros((64, 64, 3)),
                               np.zeros((64, 64), dtype=bool))
    front, back = bm.canonicalize_normal_map(body, pose, mesh, empty,
                                             resolution=(64, 64))
    assert not front.mask.any()
    assert not back.mask.any()
