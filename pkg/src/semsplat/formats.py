"""File formats: scene checkpoints, PLY meshes/point clouds, PFM, SEMF, cameras.

All binary formats are little-endian. PFM follows the usual bottom-up scanline
order with scale -1.0. The ".semf" logit dump is magic "SEMF", u32 H, W, C,
then f32 row-major H*W*C.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .scene import Camera, GaussianScene

CHECKPOINT_MAGIC = b"AGSC"
CHECKPOINT_VERSION = 1
SEMF_MAGIC = b"SEMF"


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, scene: GaussianScene):
    """Binary scene dump: magic, version, count, class_count, raw f32 fields."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<III", CHECKPOINT_VERSION, len(scene),
                            scene.class_count))
        f.write(scene.raw_bytes())


def load_checkpoint(path) -> GaussianScene:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: bad checkpoint magic {magic!r}")
        version, count, class_count = struct.unpack("<III", f.read(12))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        width = 14 + class_count
        data = np.frombuffer(f.read(count * width * 4), dtype="<f4")
    if data.size != count * width:
        raise DataError(f"{path}: truncated checkpoint")
    rec = data.reshape(count, width).astype(np.float64)
    return GaussianScene(
        rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10],
        rec[:, 11:14], rec[:, 14:], class_count=class_count,
    )


def save_optimizer_state(path, arrays: dict):
    """Sidecar for Adam moments: magic, count, then name/shape/f64 blocks."""
    with open(path, "wb") as f:
        f.write(b"AGSO")
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_optimizer_state(path) -> dict:
    out = {}
    with open(path, "rb") as f:
        if f.read(4) != b"AGSO":
            raise DataError(f"{path}: bad optimizer sidecar magic")
        (n,) = struct.unpack("<I", f.read(4))
        for _ in range(n):
            (ln,) = struct.unpack("<I", f.read(4))
            name = f.read(ln).decode()
            (nd,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{nd}I", f.read(4 * nd))
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape)
            out[name] = arr.copy()
    return out


# ------------------------------------------------------------------------ PFM

def write_pfm(path, data):
    """Grayscale (H, W) or color (H, W, 3) float map, little-endian."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
        rows = data[::-1]
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
        rows = data[::-1]
    else:
        raise DataError("PFM supports (H, W) or (H, W, 3) arrays")
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(rows.astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise DataError(f"{path}: not a PFM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = w * h * (3 if header == b"PF" else 1)
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(count * 4), dtype=dtype)
    if data.size != count:
        raise DataError(f"{path}: truncated PFM payload")
    shape = (h, w, 3) if header == b"PF" else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32).copy()


# ----------------------------------------------------------------------- SEMF

def write_semf(path, logits):
    logits = np.asarray(logits, dtype=np.float32)
    if logits.ndim != 3:
        raise DataError("semantic logits must be (H, W, C)")
    h, w, c = logits.shape
    with open(path, "wb") as f:
        f.write(SEMF_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(np.ascontiguousarray(logits, dtype="<f4").tobytes())


def read_semf(path, expect_classes=None):
    with open(path, "rb") as f:
        if f.read(4) != SEMF_MAGIC:
            raise DataError(f"{path}: bad SEMF magic")
        h, w, c = struct.unpack("<III", f.read(12))
        if expect_classes is not None and c != expect_classes:
            raise DataError(
                f"{path}: expected {expect_classes} classes, found {c}")
        data = np.frombuffer(f.read(h * w * c * 4), dtype="<f4")
    if data.size != h * w * c:
        raise DataError(f"{path}: truncated SEMF payload")
    return data.reshape(h, w, c).astype(np.float32).copy()


# ----------------------------------------------------------------- PNG / PPM

def write_png(path, image):
    """(H, W, 3) floats in [0, 1] -> 8-bit PNG."""
    from PIL import Image

    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path, "PNG")


def read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_ppm(path, image):
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


# ----------------------------------------------------------------------- PLY

def write_ply_points(path, points, colors=None, classes=None, binary=True):
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    props = ["property float x", "property float y", "property float z"]
    if colors is not None:
        props += ["property uchar red", "property uchar green",
                  "property uchar blue"]
    if classes is not None:
        props += ["property int class"]
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {n}\n"
        + "\n".join(props) + "\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode())
        if binary:
            for i in range(n):
                f.write(struct.pack("<3f", *points[i].astype(np.float32)))
                if colors is not None:
                    c = np.clip(colors[i] * 255.0 + 0.5, 0, 255).astype(np.uint8)
                    f.write(struct.pack("<3B", *c))
                if classes is not None:
                    f.write(struct.pack("<i", int(classes[i])))
        else:
            lines = []
            for i in range(n):
                parts = [f"{v:.9g}" for v in points[i]]
                if colors is not None:
                    c = np.clip(colors[i] * 255.0 + 0.5, 0, 255).astype(int)
                    parts += [str(int(v)) for v in c]
                if classes is not None:
                    parts += [str(int(classes[i]))]
                lines.append(" ".join(parts))
            f.write(("\n".join(lines) + "\n").encode())


def write_ply_mesh(path, vertices, faces, binary=True):
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\n"
        f"element vertex {len(vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(faces)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode())
        if binary:
            f.write(vertices.astype("<f4").tobytes())
            rec = np.empty((len(faces), 13), dtype=np.uint8)
            rec[:, 0] = 3
            rec[:, 1:] = faces.astype("<i4").view(np.uint8).reshape(len(faces), 12)
            f.write(rec.tobytes())
        else:
            for v in vertices:
                f.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n".encode())
            for tri in faces:
                f.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n".encode())


def read_ply(path):
    """Reads the PLY subset this package writes: xyz [+rgb] [+class] [+faces].

    Returns a dict with keys points, colors, classes, faces (absent -> None).
    """
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise DataError(f"{path}: not a PLY file")
        fmt = None
        n_vert = n_face = 0
        vert_props = []
        current = None
        while True:
            line = f.readline()
            if not line:
                raise DataError(f"{path}: unterminated PLY header")
            tokens = line.decode("ascii").strip().split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                current = tokens[1]
                if current == "vertex":
                    n_vert = int(tokens[2])
                elif current == "face":
                    n_face = int(tokens[2])
            elif tokens[0] == "property" and current == "vertex":
                if tokens[1] == "list":
                    raise DataError(f"{path}: list property on vertices")
                vert_props.append((tokens[2], tokens[1]))
            elif tokens[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise DataError(f"{path}: unsupported PLY format {fmt}")
        type_map = {"float": ("<f4", 4), "float32": ("<f4", 4),
                    "double": ("<f8", 8), "uchar": ("<u1", 1),
                    "uint8": ("<u1", 1), "int": ("<i4", 4),
                    "int32": ("<i4", 4)}
        names = [p[0] for p in vert_props]
        if fmt == "binary_little_endian":
            dtype = np.dtype([(nm, type_map[tp][0]) for nm, tp in vert_props])
            verts = np.frombuffer(f.read(dtype.itemsize * n_vert), dtype=dtype,
                                  count=n_vert)
            faces = []
            for _ in range(n_face):
                (cnt,) = struct.unpack("<B", f.read(1))
                idx = struct.unpack(f"<{cnt}i", f.read(4 * cnt))
                if cnt != 3:
                    raise DataError(f"{path}: non-triangular face")
                faces.append(idx)
        else:
            rows = []
            for _ in range(n_vert):
                rows.append(f.readline().split())
            verts = {nm: np.array([float(r[i]) for r in rows])
                     for i, nm in enumerate(names)}
            faces = []
            for _ in range(n_face):
                parts = f.readline().split()
                if int(parts[0]) != 3:
                    raise DataError(f"{path}: non-triangular face")
                faces.append([int(v) for v in parts[1:4]])

    def col(nm):
        if nm not in names:
            return None
        return np.asarray(verts[nm], dtype=np.float64)

    points = np.stack([col("x"), col("y"), col("z")], axis=1)
    colors = None
    if "red" in names:
        colors = np.stack([col("red"), col("green"), col("blue")], axis=1) / 255.0
    classes = col("class")
    if classes is not None:
        classes = classes.astype(np.int64)
    faces_arr = np.asarray(faces, dtype=np.int64) if n_face else None
    return {"points": points, "colors": colors, "classes": classes,
            "faces": faces_arr}


# -------------------------------------------------------------- camera files

def write_camera(path, cam: Camera):
    """Text: 'fx fy cx cy' then the 3x4 [R|t] pose, row-major, full precision."""
    pose = np.hstack([cam.rotation, cam.translation[:, None]])
    with open(path, "w") as f:
        f.write(f"{cam.fx!r} {cam.fy!r} {cam.cx!r} {cam.cy!r}\n")
        for row in pose:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_camera(path, width, height) -> Camera:
    with open(path) as f:
        vals = f.read().split()
    if len(vals) != 16:
        raise DataError(f"{path}: camera file must hold 16 numbers")
    fx, fy, cx, cy = (float(v) for v in vals[:4])
    pose = np.array([float(v) for v in vals[4:]]).reshape(3, 4)
    R, t = pose[:, :3], pose[:, 3]
    err = np.abs(R @ R.T - np.eye(3)).max()
    if err > 1e-6:
        raise DataError(f"{path}: rotation not orthonormal (err={err:.3g})")
    if err > 1e-12:
        # project to the nearest rotation so downstream invariants hold
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, rotation=R, translation=t,
                  width=width, height=height)


def resolve_view_paths(directory, index):
    base = Path(directory) / f"view_{index:03d}"
    return {
        "image": base.with_suffix(".png"),
        "depth": base.with_suffix(".pfm"),
        "logits": base.with_suffix(".semf"),
        "camera": base.with_suffix(".cam"),
        "gt_depth": Path(str(base) + "_gtdepth.pfm"),
    }
