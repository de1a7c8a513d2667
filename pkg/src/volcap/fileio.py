"""Binary interchange: tensor bundles, PLY meshes, net checkpoints.

The tensor bundle is the package's on-disk unit for maps, poses and
checkpoints.  Layout, all little-endian: magic "TNSR", u32 version, u32
entry count, then per entry a u16 name length, the UTF-8 name, a u8
dtype code (0 float64, 1 float32, 2 uint8, 3 uint32), a u32 ndim, ndim
u32 dims, and the raw array bytes in C order.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from . import avatar as av
from . import geomath as gm
from . import bodymodel as bm
from . import reconnet as rn

TENSOR_MAGIC = b"TNSR"
TENSOR_VERSION = 1

_CODE_TO_DTYPE = {0: np.dtype("<f8"), 1: np.dtype("<f4"),
                  2: np.dtype("u1"), 3: np.dtype("<u4")}
_DTYPE_TO_CODE = {dt: code for code, dt in _CODE_TO_DTYPE.items()}


def write_tensors(path, tensors):
    """Write named arrays to a tensor bundle, preserving entry order.

    Array dtypes must be one of float64, float32, uint8, uint32; cast
    beforehand so the file states exactly what was stored.
    """
    entries = list(tensors.items())
    names = [name for name, _ in entries]
    if len(set(names)) != len(names):
        raise ValueError("duplicate tensor names")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<II", TENSOR_VERSION, len(entries)))
        for name, arr in entries:
            arr = np.asarray(arr)
            code = _DTYPE_TO_CODE.get(arr.dtype.newbyteorder("<"))
            if code is None:
                raise TypeError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            if len(raw) >= 1 << 16:
                raise ValueError(f"tensor name too long: {name[:40]!r}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BI", code, arr.ndim))
            if arr.ndim:
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_tensors(path):
    """Read a tensor bundle back into an ordered name -> array dict."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a tensor bundle")
    if len(data) < 12:
        raise ValueError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != TENSOR_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    offset = 12
    out = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            code, ndim = struct.unpack_from("<BI", data, offset)
            offset += 5
            if code not in _CODE_TO_DTYPE:
                raise ValueError(f"{path}: unknown dtype code {code} for {name!r}")
            dims = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
        except struct.error as exc:
            raise ValueError(f"{path}: truncated entry header") from exc
        dtype = _CODE_TO_DTYPE[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        if offset + nbytes > len(data):
            raise ValueError(f"{path}: truncated data for {name!r}")
        arr = np.frombuffer(data[offset:offset + nbytes], dtype=dtype).reshape(dims)
        offset += nbytes
        if name in out:
            raise ValueError(f"{path}: duplicate tensor name {name!r}")
        out[name] = arr.copy()
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return out


# ---------------------------------------------------------------------------
# PLY meshes


def write_ply(path, mesh):
    """Binary little-endian PLY with float positions and normals.

    Vertex colors, when present, are stored as uchar red/green/blue
    scaled from [0, 1].
    """
    v = np.asarray(mesh.vertices, dtype="<f4")
    f = np.asarray(mesh.faces, dtype="<i4")
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(v)}",
              "property float x", "property float y", "property float z"]
    cols = [v]
    if mesh.vertex_normals is not None:
        header += ["property float nx", "property float ny", "property float nz"]
        cols.append(np.asarray(mesh.vertex_normals, dtype="<f4"))
    rgb = None
    if mesh.vertex_colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        rgb = np.clip(np.round(np.asarray(mesh.vertex_colors) * 255.0),
                      0, 255).astype("u1")
    header += [f"element face {len(f)}",
               "property list uchar int vertex_indices", "end_header"]
    float_block = np.concatenate(cols, axis=1).view("u1").reshape(len(v), -1) \
        if len(v) else np.zeros((0, 0), dtype="u1")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if len(v):
            if rgb is None:
                fh.write(float_block.tobytes())
            else:
                fh.write(np.concatenate([float_block, rgb], axis=1).tobytes())
        if len(f):
            rows = np.empty((len(f), 13), dtype="u1")
            rows[:, 0] = 3
            rows[:, 1:] = f.view("u1").reshape(len(f), 12)
            fh.write(rows.tobytes())


def read_ply(path):
    """Read a mesh written by write_ply back into a TriMesh."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ValueError(f"{path}: expected binary little-endian PLY")
    n_vertex = n_face = 0
    vprops = []
    element = None
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            element = parts[1]
            if element == "vertex":
                n_vertex = int(parts[2])
            elif element == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and element == "vertex":
            vprops.append((parts[1], parts[2]))
    body = data[end + len(b"end_header\n"):]
    dtype = np.dtype([(name, {"float": "<f4", "uchar": "u1"}[typ])
                      for typ, name in vprops])
    vdata = np.frombuffer(body, dtype=dtype, count=n_vertex)
    offset = dtype.itemsize * n_vertex
    fdata = np.frombuffer(body, dtype=np.dtype([("n", "u1"), ("idx", "<i4", (3,))]),
                          count=n_face, offset=offset)
    if n_face and not np.all(fdata["n"] == 3):
        raise ValueError(f"{path}: only triangle faces are supported")
    vertices = np.stack([vdata[c] for c in "xyz"], axis=1).astype(np.float64) \
        if n_vertex else np.zeros((0, 3))
    mesh = gm.TriMesh(vertices=vertices,
                      faces=fdata["idx"].astype(np.intp).copy())
    if "nx" in dtype.names:
        mesh.vertex_normals = np.stack(
            [vdata[c] for c in ("nx", "ny", "nz")], axis=1).astype(np.float64)
    if "red" in dtype.names:
        mesh.vertex_colors = np.stack(
            [vdata[c] for c in ("red", "green", "blue")], axis=1) / 255.0
    return mesh


# ---------------------------------------------------------------------------
# normal maps and poses


def save_normal_map(path, nmap):
    write_tensors(path, {"normals": nmap.normals.astype("<f8"),
                         "mask": nmap.mask.astype("u1")})


def load_normal_map(path):
    t = read_tensors(path)
    return gm.NormalMap(normals=t["normals"], mask=t["mask"].astype(bool))


def save_pose(path, pose):
    write_tensors(path, {"joint_rotations": pose.joint_rotations.astype("<f8"),
                         "root_translation": pose.root_translation.astype("<f8")})


def load_pose(path):
    t = read_tensors(path)
    return bm.Pose(joint_rotations=t["joint_rotations"],
                   root_translation=t["root_translation"])


# ---------------------------------------------------------------------------
# net checkpoints

_META_KEY = "__meta__"


def _meta_entry(meta):
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return np.frombuffer(blob, dtype="u1").copy()


def _parse_meta(tensors):
    if _META_KEY not in tensors:
        raise ValueError("checkpoint is missing its metadata entry")
    return json.loads(tensors.pop(_META_KEY).tobytes().decode("utf-8"))


def _net_param_items(prefix, net):
    if hasattr(net, "kernels"):
        mats, tag = net.kernels, "k"
    else:
        mats, tag = net.weights, "w"
    for i, m in enumerate(mats):
        yield f"{prefix}.{tag}{i}", m
    for i, b in enumerate(net.biases):
        yield f"{prefix}.b{i}", b


def _restore_net(prefix, net, tensors):
    for name, arr in _net_param_items(prefix, net):
        saved = tensors.pop(name, None)
        if saved is None:
            raise ValueError(f"checkpoint is missing {name!r}")
        if saved.shape != arr.shape:
            raise ValueError(f"checkpoint entry {name!r} has shape "
                             f"{saved.shape}, expected {arr.shape}")
        arr[...] = saved


def _config_from_dict(cls, d):
    # JSON turns tuples into lists; dataclass defaults tell us which
    # fields to convert back.
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    coerced = {}
    for key, value in d.items():
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        coerced[key] = value
    return cls(**coerced)


_AVATAR_NET_NAMES = ("trunk", "geo_head", "color_head",
                     "warp_encoder", "warp_decoder")


def save_avatar(path, nets):
    entries = {_META_KEY: _meta_entry({
        "kind": "avatar",
        "config": dataclasses.asdict(nets.config),
        "n_joints": nets.n_joints,
    })}
    for net_name in _AVATAR_NET_NAMES:
        entries.update(_net_param_items(net_name, getattr(nets, net_name)))
    write_tensors(path, entries)


def load_avatar(path):
    tensors = read_tensors(path)
    meta = _parse_meta(tensors)
    if meta.get("kind") != "avatar":
        raise ValueError(f"{path}: not an avatar checkpoint")
    config = _config_from_dict(av.AvatarConfig, meta["config"])
    nets = av.build_avatar(config, int(meta["n_joints"]))
    for net_name in _AVATAR_NET_NAMES:
        _restore_net(net_name, getattr(nets, net_name), tensors)
    if tensors:
        raise ValueError(f"{path}: unexpected entries {sorted(tensors)}")
    return nets


def save_recon(path, nets):
    entries = {_META_KEY: _meta_entry({
        "kind": "recon",
        "config": dataclasses.asdict(nets.config),
    })}
    entries.update(_net_param_items("conv", nets.conv))
    entries.update(_net_param_items("decoder", nets.decoder))
    write_tensors(path, entries)


def load_recon(path):
    tensors = read_tensors(path)
    meta = _parse_meta(tensors)
    if meta.get("kind") != "recon":
        raise ValueError(f"{path}: not a reconstruction checkpoint")
    config = _config_from_dict(rn.ReconConfig, meta["config"])
    nets = rn.build_recon(config)
    _restore_net("conv", nets.conv, tensors)
    _restore_net("decoder", nets.decoder, tensors)
    if tensors:
        raise ValueError(f"{path}: unexpected entries {sorted(tensors)}")
    return nets
