"""File formats for pipeline artifacts.

Everything numeric round-trips losslessly:

- Grids are a versioned JSON container with base64-packed little-endian
  arrays (vertices, tets, sdf, frozen).
- Meshes are OBJ (positions and faces, printed with 17 significant digits so
  float64 survives the text round trip) plus a JSON sidecar holding the
  provenance arrays (``source_edges``, ``parent_tets``) along with face areas
  and normals.
- Kernel sets are binary little-endian PLY point clouds with one vertex per
  kernel: baked world position for interoperability with external viewers,
  then the authoritative attributes (face, barycentric weights, tau, scale,
  rotation, color, opacity, parent tet, mode, and — when present — the full
  SH coefficient block) as double/int properties.
- Images are 8-bit PNG (color as RGBA, normals mapped (n+1)/2, masks as
  grayscale); depth is raw little-endian float32 with a JSON header.
- Manifests, partitions, and job configs are JSON; loss logs are CSV.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .embed import GaussianSet, positions as kernel_positions
from .extract import ExtractedMesh
from .grid import TetGrid

GRID_FORMAT_VERSION = 1
MESH_SIDECAR_VERSION = 1

_FLOAT_FMT = "%.17g"  # shortest text form that round-trips float64


# ---------------------------------------------------------------------------
# base64 array packing (shared by the JSON containers)

def _pack_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    le = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    data = arr.astype(le, copy=False).tobytes()
    return {
        "dtype": np.dtype(le).str,
        "shape": list(arr.shape),
        "data": base64.b64encode(data).decode("ascii"),
    }


def _unpack_array(blob: dict) -> np.ndarray:
    raw = base64.b64decode(blob["data"])
    arr = np.frombuffer(raw, dtype=np.dtype(blob["dtype"]))
    return arr.reshape(blob["shape"]).copy()


# ---------------------------------------------------------------------------
# grids

def save_grid(grid: TetGrid, path) -> None:
    doc = {
        "format": "tetgs-grid",
        "version": GRID_FORMAT_VERSION,
        "cell_size": grid.cell_size,
        "vertices": _pack_array(grid.vertices),
        "tets": _pack_array(grid.tets),
        "sdf": _pack_array(grid.sdf),
        "frozen": _pack_array(grid.frozen),
    }
    Path(path).write_text(json.dumps(doc))


def load_grid(path) -> TetGrid:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "tetgs-grid":
        raise ValueError(f"{path}: not a grid container")
    if doc.get("version") != GRID_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported grid container version "
                         f"{doc.get('version')}")
    return TetGrid(
        vertices=_unpack_array(doc["vertices"]).astype(np.float64),
        tets=_unpack_array(doc["tets"]).astype(np.int64),
        sdf=_unpack_array(doc["sdf"]).astype(np.float64),
        frozen=_unpack_array(doc["frozen"]).astype(bool),
        cell_size=float(doc["cell_size"]),
    )


# ---------------------------------------------------------------------------
# meshes: OBJ + provenance sidecar

def save_mesh(mesh: ExtractedMesh, obj_path, sidecar_path=None) -> None:
    obj_path = Path(obj_path)
    if sidecar_path is None:
        sidecar_path = obj_path.with_suffix(".provenance.json")
    lines = []
    for v in mesh.verts:
        lines.append("v %s %s %s" % tuple(_FLOAT_FMT % c for c in v))
    for f in mesh.faces:
        lines.append("f %d %d %d" % (f[0] + 1, f[1] + 1, f[2] + 1))
    obj_path.write_text("\n".join(lines) + "\n")

    sidecar = {
        "format": "tetgs-mesh-provenance",
        "version": MESH_SIDECAR_VERSION,
        "source_edges": _pack_array(mesh.source_edges),
        "parent_tets": _pack_array(mesh.parent_tets),
        "areas": _pack_array(mesh.areas),
        "normals": _pack_array(mesh.normals),
    }
    Path(sidecar_path).write_text(json.dumps(sidecar))


def load_mesh(obj_path, sidecar_path=None) -> ExtractedMesh:
    obj_path = Path(obj_path)
    if sidecar_path is None:
        sidecar_path = obj_path.with_suffix(".provenance.json")
    verts = []
    faces = []
    for line in obj_path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    doc = json.loads(Path(sidecar_path).read_text())
    if doc.get("format") != "tetgs-mesh-provenance":
        raise ValueError(f"{sidecar_path}: not a mesh provenance sidecar")
    return ExtractedMesh(
        verts=np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        source_edges=_unpack_array(doc["source_edges"]).astype(np.int64),
        faces=np.asarray(faces, dtype=np.int64).reshape(-1, 3),
        parent_tets=_unpack_array(doc["parent_tets"]).astype(np.int64),
        areas=_unpack_array(doc["areas"]).astype(np.float64),
        normals=_unpack_array(doc["normals"]).astype(np.float64),
    )


# ---------------------------------------------------------------------------
# kernel PLY

_PLY_SCALARS = [
    ("x", "double"), ("y", "double"), ("z", "double"),
    ("face", "int32"),
    ("bary_0", "double"), ("bary_1", "double"), ("bary_2", "double"),
    ("tau", "double"),
    ("scale_0", "double"), ("scale_1", "double"), ("scale_2", "double"),
    ("rot_w", "double"), ("rot_x", "double"), ("rot_y", "double"),
    ("rot_z", "double"),
    ("red", "double"), ("green", "double"), ("blue", "double"),
    ("opacity", "double"),
    ("parent_tet", "int32"),
    ("mode", "uchar"),
]
_PLY_DTYPES = {"double": "<f8", "int32": "<i4", "uchar": "u1"}


def _kernel_record_dtype(with_sh: bool) -> np.dtype:
    props = list(_PLY_SCALARS)
    if with_sh:
        props += [(f"sh_{i}_{c}", "double") for i in range(16) for c in "rgb"]
    return np.dtype([(name, _PLY_DTYPES[kind]) for name, kind in props])


def save_kernels(gaussians: GaussianSet, path) -> None:
    n = len(gaussians)
    with_sh = gaussians.sh is not None
    rec = np.zeros(n, dtype=_kernel_record_dtype(with_sh))
    pos = kernel_positions(gaussians)
    rec["x"], rec["y"], rec["z"] = pos.T
    rec["face"] = gaussians.face
    for k in range(3):
        rec[f"bary_{k}"] = gaussians.bary[:, k]
        rec[f"scale_{k}"] = gaussians.scale[:, k]
    rec["tau"] = gaussians.tau
    for k, axis in enumerate("wxyz"):
        rec[f"rot_{axis}"] = gaussians.rotation[:, k]
    rec["red"], rec["green"], rec["blue"] = gaussians.rgb.T
    rec["opacity"] = gaussians.opacity
    rec["parent_tet"] = gaussians.parent_tet
    rec["mode"] = gaussians.mode
    if with_sh:
        for i in range(16):
            for k, c in enumerate("rgb"):
                rec[f"sh_{i}_{c}"] = gaussians.sh[:, i, k]

    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n}"]
    for name in rec.dtype.names:
        kind = "double" if rec.dtype[name] == np.dtype("<f8") else (
            "int32" if rec.dtype[name] == np.dtype("<i4") else "uchar")
        header.append(f"property {kind} {name}")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def load_kernels(path, mesh: ExtractedMesh) -> GaussianSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    if header[0] != "ply" or header[1] != "format binary_little_endian 1.0":
        raise ValueError(f"{path}: not a binary little-endian PLY")
    count = None
    props = []
    for line in header[2:]:
        parts = line.split()
        if parts[0] == "element":
            count = int(parts[2])
        elif parts[0] == "property":
            props.append((parts[2], _PLY_DTYPES[parts[1]]))
    rec = np.frombuffer(raw[end:], dtype=np.dtype(props), count=count)

    with_sh = "sh_0_r" in rec.dtype.names
    sh = None
    if with_sh:
        sh = np.stack(
            [np.stack([rec[f"sh_{i}_{c}"] for c in "rgb"], axis=1)
             for i in range(16)], axis=1).astype(np.float64)
    return GaussianSet(
        mesh=mesh,
        face=rec["face"].astype(np.int64),
        bary=np.stack([rec[f"bary_{k}"] for k in range(3)], axis=1),
        tau=rec["tau"].astype(np.float64),
        scale=np.stack([rec[f"scale_{k}"] for k in range(3)], axis=1),
        rotation=np.stack([rec[f"rot_{a}"] for a in "wxyz"], axis=1),
        rgb=np.stack([rec[c] for c in ("red", "green", "blue")], axis=1),
        opacity=rec["opacity"].astype(np.float64),
        parent_tet=rec["parent_tet"].astype(np.int64),
        mode=rec["mode"].astype(np.uint8),
        sh=sh,
    )


# ---------------------------------------------------------------------------
# images

def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_color_png(color: np.ndarray, path, alpha: np.ndarray | None = None) -> None:
    """Color in [0,1] as 8-bit RGBA; alpha defaults to fully opaque."""
    rgb = _to_u8(color)
    if alpha is None:
        a = np.full(rgb.shape[:2], 255, dtype=np.uint8)
    else:
        a = _to_u8(alpha)
    Image.fromarray(np.dstack([rgb, a]), mode="RGBA").save(path)


def load_color_png(path):
    img = np.asarray(Image.open(path).convert("RGBA"), dtype=np.float64) / 255.0
    return img[..., :3], img[..., 3]


def save_normal_png(normal: np.ndarray, path) -> None:
    """Unit normals mapped (n+1)/2 into 8-bit RGB."""
    Image.fromarray(_to_u8((np.asarray(normal) + 1.0) / 2.0), mode="RGB").save(path)


def load_normal_png(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return img * 2.0 - 1.0


def save_mask_png(mask: np.ndarray, path) -> None:
    """Masks as 8-bit grayscale, nonzero = set."""
    mask = np.asarray(mask)
    if mask.dtype == bool:
        data = np.where(mask, np.uint8(255), np.uint8(0))
    else:
        data = _to_u8(mask)
    Image.fromarray(data, mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def save_depth(depth: np.ndarray, path) -> None:
    """Raw little-endian float32 with a JSON header alongside."""
    depth = np.asarray(depth, dtype="<f4")
    path = Path(path)
    path.write_bytes(depth.tobytes())
    header = {"dtype": "<f4", "height": depth.shape[0], "width": depth.shape[1]}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(header))


def load_depth(path) -> np.ndarray:
    path = Path(path)
    header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    flat = np.frombuffer(path.read_bytes(), dtype=header["dtype"])
    return flat.reshape(header["height"], header["width"]).astype(np.float32)


# ---------------------------------------------------------------------------
# manifests, configs, loss logs

def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_manifest(path, stage: str, inputs: dict, parameters: dict,
                   outputs: dict, metrics: dict | None = None) -> dict:
    """Record a stage run: content hashes of inputs, parameters, artifacts."""
    manifest = {
        "stage": stage,
        "inputs": {name: {"path": str(p), "sha256": file_sha256(p)}
                   for name, p in inputs.items()},
        "parameters": parameters,
        "outputs": {name: str(p) for name, p in outputs.items()},
        "metrics": metrics or {},
    }
    save_json(manifest, path)
    return manifest


def save_loss_log(rows, path, header=("step", "total", "global", "local",
                                      "sa", "nc")) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in np.asarray(rows):
            writer.writerow([_FLOAT_FMT % v for v in row])


def load_loss_log(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)  # header
        return np.array([[float(v) for v in row] for row in reader])
