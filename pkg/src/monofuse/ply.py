"""Minimal PLY writer/reader for surfel clouds and evaluation point clouds."""

import numpy as np

_DTYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "uchar": "u1",
    "uint8": "u1",
    "char": "i1",
    "short": "<i2",
    "ushort": "<u2",
    "int": "<i4",
    "int32": "<i4",
    "uint": "<u4",
}


def write_surfel_ply(
    path,
    positions: np.ndarray,
    normals: np.ndarray,
    colors: np.ndarray,
    radii: np.ndarray,
    confidences: np.ndarray,
    binary: bool = True,
) -> None:
    """Write surfels as PLY vertices: x y z nx ny nz red green blue radius confidence.

    colors are float [0, 1] and stored as uchar; everything else float32.
    """
    n = len(positions)
    rgb = np.clip(np.asarray(colors, dtype=np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property float nx",
        "property float ny",
        "property float nz",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property float radius",
        "property float confidence",
        "end_header",
    ]
    rec = np.empty(
        n,
        dtype=[
            ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
            ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
            ("red", "u1"), ("green", "u1"), ("blue", "u1"),
            ("radius", "<f4"), ("confidence", "<f4"),
        ],
    )
    pos = np.asarray(positions, dtype=np.float32)
    nrm = np.asarray(normals, dtype=np.float32)
    rec["x"], rec["y"], rec["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
    rec["nx"], rec["ny"], rec["nz"] = nrm[:, 0], nrm[:, 1], nrm[:, 2]
    rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    rec["radius"] = np.asarray(radii, dtype=np.float32)
    rec["confidence"] = np.asarray(confidences, dtype=np.float32)

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            for row in rec:
                vals = []
                for name in rec.dtype.names:
                    v = row[name]
                    vals.append(str(int(v)) if name in ("red", "green", "blue") else repr(float(v)))
                fh.write((" ".join(vals) + "\n").encode("ascii"))


def write_point_ply(path, points: np.ndarray, binary: bool = True) -> None:
    """Write a bare xyz point cloud."""
    pts = np.asarray(points, dtype=np.float32)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(pts, dtype="<f4").tobytes())
        else:
            for p in pts:
                fh.write(
                    f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n".encode("ascii")
                )


def read_ply(path) -> dict[str, np.ndarray]:
    """Read the vertex element of an ascii or binary_little_endian PLY.

    Returns a dict of per-property arrays; list properties and non-vertex
    elements are not supported.
    """
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        count = 0
        props: list[tuple[str, str]] = []
        in_vertex = False
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            parts = line.decode("ascii").strip().split()
            if not parts:
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                in_vertex = parts[1] == "vertex"
                if in_vertex:
                    count = int(parts[2])
            elif parts[0] == "property" and in_vertex:
                if parts[1] == "list":
                    raise ValueError("list properties unsupported")
                props.append((parts[2], parts[1]))
            elif parts[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise ValueError(f"unsupported PLY format {fmt}")
        dtype = np.dtype([(name, _DTYPES[t]) for name, t in props])
        if fmt == "binary_little_endian":
            data = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype, count=count)
        else:
            rows = [fh.readline().split() for _ in range(count)]
            data = np.zeros(count, dtype=dtype)
            for i, row in enumerate(rows):
                for (name, _), tok in zip(props, row):
                    data[name][i] = float(tok)
    return {name: np.array(data[name]) for name, _ in props}


def read_xyz(path) -> np.ndarray:
    """Read just the xyz coordinates of a PLY vertex cloud as (N, 3) float64."""
    fields = read_ply(path)
    return np.stack([fields["x"], fields["y"], fields["z"]], axis=1).astype(np.float64)
