"""Tensor container, PLY meshes, checkpoints: round trips and byte stability."""

import io as _io
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volcap import avatar as av
from volcap import bodymodel as bm
from volcap import fileio as io
from volcap import geomath as gm
from volcap import reconnet as rn


def _rng(seed):
    return np.random.default_rng(np.random.PCG64(seed))


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 10**6))
def test_tensor_round_trip(tmp_path_factory, seed):
    rng = _rng(seed)
    path = str(tmp_path_factory.mktemp("tnsr") / "blob.tnsr")
    tensors = {
        "f64": rng.normal(size=(3, 4)),
        "f32": rng.normal(size=(2, 2, 2)).astype(np.float32),
        "u4": rng.integers(0, 50, size=(7,)).astype(np.uint32),
        "bytes": rng.integers(0, 255, (4, 4)).astype(np.uint8),
        "empty": np.zeros((0, 3)),
        "scalar": np.array(2.5),
    }
    io.write_tensors(path, tensors)
    back = io.read_tensors(path)
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype
        assert back[k].shape == v.shape
        assert np.array_equal(back[k], v)


def test_tensor_bytes_are_deterministic(tmp_path):
    rng = _rng(7)
    tensors = {"a": rng.normal(size=(5, 5)),
               "b": rng.integers(0, 9, 4).astype(np.uint32)}
    pa, pb = str(tmp_path / "a.tnsr"), str(tmp_path / "b.tnsr")
    io.write_tensors(pa, tensors)
    io.write_tensors(pb, {k: v.copy() for k, v in tensors.items()})
    with open(pa, "rb") as fa, open(pb, "rb") as fb:
        assert fa.read() == fb.read()


def test_ply_round_trip_with_colors(tmp_path):
    rng = _rng(11)
    verts = rng.normal(size=(9, 3))
    faces = rng.integers(0, 9, (6, 3))
    colors = rng.random((9, 3))
    mesh = gm.TriMesh(vertices=verts, faces=faces, vertex_colors=colors)
    path = str(tmp_path / "m.ply")
    io.write_ply(path, mesh)
    back = io.read_ply(path)
    assert np.allclose(back.vertices, verts, atol=1e-6)
    assert np.array_equal(back.faces, faces)
    # colors survive the 8 bit quantization within half a step
    assert np.abs(back.vertex_colors - colors).max() <= 0.5 / 255 + 1e-9


def test_ply_round_trip_without_colors(tmp_path):
    mesh = gm.TriMesh(vertices=np.eye(3), faces=np.array([[0, 1, 2]]))
    path = str(tmp_path / "p.ply")
    io.write_ply(path, mesh)
    back = io.read_ply(path)
    assert back.vertex_colors is None
    assert np.allclose(back.vertices, mesh.vertices)


def test_avatar_checkpoint_round_trip(tmp_path):
    cfg = av.AvatarConfig(posenc_freqs=3, trunk_sizes=(16, 16), geo_sizes=(8,),
                          color_sizes=(8,), warp_embed=4,
                          warp_encoder_sizes=(8,), warp_decoder_sizes=(16,),
                          seed=5)
    nets = av.build_avatar(cfg, n_joints=6)
    rng = _rng(5)
    for net in nets.all_nets():
        for p in net.param_arrays():
            p += rng.normal(size=p.shape)
    path = str(tmp_path / "avatar.tnsr")
    io.save_avatar(path, nets)
    back = io.load_avatar(path)
    assert back.config == nets.config
    assert back.n_joints == nets.n_joints
    for na, nb in zip(nets.all_nets(), back.all_nets()):
        for pa, pb in zip(na.param_arrays(), nb.param_arrays()):
            assert np.array_equal(pa, pb)


def test_recon_checkpoint_round_trip(tmp_path):
    cfg = rn.ReconConfig(map_resolution=32, conv_channels=(6, 8),
                         conv_strides=(2,), decoder_hidden=(8,), depth_freqs=3,
                         seed=9)
    nets = rn.build_recon(cfg)
    path = str(tmp_path / "recon.tnsr")
    io.save_recon(path, nets)
    back = io.load_recon(path)
    assert back.config == cfg
    for na, nb in zip(nets.all_nets(), back.all_nets()):
        for pa, pb in zip(na.param_arrays(), nb.param_arrays()):
            assert np.array_equal(pa, pb)


def test_normal_map_round_trip(tmp_path):
    rng = _rng(13)
    mask = rng.random((12, 10)) > 0.4
    nm = gm.make_normal_map(rng.normal(size=(12, 10, 3)), mask)
    path = str(tmp_path / "nm.tnsr")
    io.save_normal_map(path, nm)
    back = io.load_normal_map(path)
    assert np.array_equal(back.mask, nm.mask)
    assert np.array_equal(back.normals, nm.normals)


def test_pose_round_trip(tmp_path):
    body = bm.default_body(mesh_n=24)
    rng = _rng(17)
    from volcap import synthcorpus as sc

    pose = sc.sample_pose(body, rng)
    path = str(tmp_path / "pose.tnsr")
    io.save_pose(path, pose)
    back = io.load_pose(path)
    assert np.array_equal(back.joint_rotations, pose.joint_rotations)
    assert np.array_equal(back.root_translation, pose.root_translation)


def test_read_tensors_rejects_garbage(tmp_path):
    path = str(tmp_path / "junk.tnsr")
    with open(path, "wb") as fh:
        fh.write(b"not a tensor file")
    with pytest.raises(ValueError):
        io.read_tensors(path)


def test_write_tensors_rejects_unsupported_dtype(tmp_path):
    path = str(tmp_path / "bad.tnsr")
    with pytest.raises(TypeError):
        io.write_tensors(path, {"x": np.arange(3, dtype=np.int64)})
