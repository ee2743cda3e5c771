"""Scene, dataset and image files.

Scene files are a JSON manifest plus a sidecar blob of little-endian floats
laid out field by field in manifest order.  Images are PPM (8-bit, ASCII or
binary) or PFM (32-bit float).  A reader for textureless splat PLY files is
provided for interoperability.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .appearance import SH_C0
from .scene import Camera, Dataset, Scene, TextureMap, View, num_sh_coeffs, orthonormalize_frames

SCENE_FORMAT = "surfelkit-scene"
SCENE_VERSION = "1.0"
DTYPES = {"float32": "<f4", "float64": "<f8"}
FRAME_TOL = 1e-6


class SceneFormatError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


def _scene_fields(scene: Scene) -> list:
    return [
        ("positions", scene.positions),
        ("tangent_u", scene.tangent_u),
        ("tangent_v", scene.tangent_v),
        ("scales", scene.scales),
        ("opacities", scene.opacities),
        ("sh", scene.sh),
    ]


def save_scene(scene: Scene, path, precision: str = "float32") -> None:
    """Write ``path`` (JSON manifest) and ``path`` + ``.bin`` (float blob).

    The default 32-bit blob reproduces float32-representable values exactly;
    ``precision="float64"`` stores doubles for exact round trips of any scene.
    """
    if precision not in DTYPES:
        raise ValueError(f"precision must be one of {sorted(DTYPES)}")
    path = Path(path)
    dtype = np.dtype(DTYPES[precision])
    fields, chunks = [], []
    for name, arr in _scene_fields(scene):
        fields.append({"name": name, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    textures = []
    for i, t in enumerate(scene.textures):
        if t is None:
            continue
        textures.append({"surfel": i, "width": t.width, "height": t.height, "channels": t.channels,
                         "resolution": t.resolution, "cutoff": t.cutoff})
        chunks.append(np.ascontiguousarray(t.texels, dtype=dtype).tobytes())
    blob_name = path.name + ".bin"
    manifest = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "count": len(scene),
        "sh_degree": scene.sh_degree,
        "background": scene.background.tolist(),
        "dtype": precision,
        "blob": blob_name,
        "fields": fields,
        "textures": textures,
    }
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (path.parent / blob_name).write_bytes(b"".join(chunks))


def load_scene(path, normalize_frames: bool = True) -> Scene:
    """Read a scene written by :func:`save_scene`.

    Tangent frames off unit-orthonormal by more than 1e-6 are re-orthonormalized
    (Gram-Schmidt of t_v against t_u); frames within tolerance are kept bit-exact.
    """
    path = Path(path)
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"{path}: invalid manifest JSON ({e})") from e
    if m.get("format") != SCENE_FORMAT:
        raise SceneFormatError(f"{path}: not a {SCENE_FORMAT} manifest")
    if m.get("version") != SCENE_VERSION:
        raise SceneFormatError(f"{path}: unsupported version {m.get('version')!r} (expected {SCENE_VERSION})")
    n = int(m["count"])
    degree = int(m["sh_degree"])
    dtype = np.dtype(DTYPES[m.get("dtype", "float32")])
    blob = (path.parent / m["blob"]).read_bytes()
    expected = {"positions": (n, 3), "tangent_u": (n, 3), "tangent_v": (n, 3), "scales": (n, 2),
                "opacities": (n,), "sh": (n, num_sh_coeffs(degree), 3)}
    offset = 0

    def take(name, shape):
        nonlocal offset
        nbytes = int(np.prod(shape)) * dtype.itemsize
        if offset + nbytes > len(blob):
            raise SceneFormatError(
                f"{path}: blob truncated in field '{name}' (needs {nbytes} bytes at offset {offset}, "
                f"{len(blob) - offset} available)")
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=offset)
        offset += nbytes
        arr = arr.astype(np.float64).reshape(shape)
        bad = np.argwhere(~np.isfinite(arr))
        if bad.size:
            raise SceneFormatError(f"{path}: non-finite value in field '{name}' at index {tuple(bad[0])}")
        return arr

    data = {}
    for f in m["fields"]:
        name = f["name"]
        shape = tuple(f["shape"])
        if name not in expected:
            raise SceneFormatError(f"{path}: unknown field '{name}'")
        if shape != expected[name]:
            raise SceneFormatError(f"{path}: field '{name}' has shape {shape}, expected {expected[name]}")
        data[name] = take(name, shape)
    missing = set(expected) - set(data)
    if missing:
        raise SceneFormatError(f"{path}: missing fields {sorted(missing)}")
    textures = [None] * n
    for t in m.get("textures", []):
        shape = (int(t["width"]), int(t["height"]), int(t["channels"]))
        texels = take(f"texels[{t['surfel']}]", shape)
        textures[int(t["surfel"])] = TextureMap(texels, float(t["resolution"]), float(t["cutoff"]))
    if offset != len(blob):
        raise SceneFormatError(f"{path}: blob has {len(blob) - offset} trailing bytes")
    background = np.asarray(m["background"], dtype=np.float64)
    if not np.all(np.isfinite(background)):
        raise SceneFormatError(f"{path}: non-finite background")
    scene = Scene(data["positions"], data["tangent_u"], data["tangent_v"], data["scales"],
                  data["opacities"], data["sh"], textures, background, degree)
    if normalize_frames and n:
        tu, tv = scene.tangent_u, scene.tangent_v
        off = ((np.abs(np.linalg.norm(tu, axis=1) - 1) > FRAME_TOL)
               | (np.abs(np.linalg.norm(tv, axis=1) - 1) > FRAME_TOL)
               | (np.abs(np.sum(tu * tv, axis=1)) > FRAME_TOL))
        if off.any():
            tu[off], tv[off] = orthonormalize_frames(tu[off], tv[off])
    return scene


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------


def _read_tokens(data: bytes, count: int, pos: int = 0):
    """Read ``count`` whitespace-separated header tokens (``#`` comments allowed)."""
    tokens = []
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError(f"unexpected end of header at byte offset {pos}")
        tokens.append((data[start:pos], start))
    return tokens, pos


def _int_token(tok, what):
    raw, off = tok
    try:
        v = int(raw)
    except ValueError:
        raise ImageFormatError(f"invalid {what} {raw!r} at byte offset {off}") from None
    if v <= 0:
        raise ImageFormatError(f"{what} must be positive at byte offset {off}")
    return v


def read_ppm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P3", b"P6"):
        raise ImageFormatError(f"bad PPM magic {magic!r} at byte offset 0")
    toks, pos = _read_tokens(data, 3, 2)
    w = _int_token(toks[0], "width")
    h = _int_token(toks[1], "height")
    maxval = _int_token(toks[2], "maxval")
    if maxval > 65535:
        raise ImageFormatError(f"maxval {maxval} too large at byte offset {toks[2][1]}")
    if magic == b"P3":
        vals, _ = _read_tokens(data, w * h * 3, pos) if w * h else ([], pos)
        try:
            arr = np.array([int(t) for t, _ in vals], dtype=np.float64)
        except ValueError:
            bad = next(t for t in vals if not t[0].isdigit())
            raise ImageFormatError(f"invalid sample {bad[0]!r} at byte offset {bad[1]}") from None
    else:
        pos += 1  # single whitespace after maxval
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = w * h * 3 * dt.itemsize
        if len(data) - pos < need:
            raise ImageFormatError(f"pixel data truncated at byte offset {len(data)} (expected {need} bytes from {pos})")
        arr = np.frombuffer(data, dtype=dt, count=w * h * 3, offset=pos).astype(np.float64)
    return (arr / maxval).reshape(h, w, 3)


def quantize8(img) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 8 bits."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def write_ppm(img, binary: bool = True) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.shape[-1] != 3:
        raise ValueError("PPM needs 3 channels")
    h, w = img.shape[:2]
    q = quantize8(img)
    if binary:
        return f"P6\n{w} {h}\n255\n".encode() + q.tobytes()
    rows = "\n".join(" ".join(str(v) for v in row.ravel()) for row in q)
    return f"P3\n{w} {h}\n255\n{rows}\n".encode()


def read_pfm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"PF", b"Pf"):
        raise ImageFormatError(f"bad PFM magic {magic!r} at byte offset 0")
    toks, pos = _read_tokens(data, 3, 2)
    w = _int_token(toks[0], "width")
    h = _int_token(toks[1], "height")
    try:
        scale = float(toks[2][0])
    except ValueError:
        raise ImageFormatError(f"invalid scale {toks[2][0]!r} at byte offset {toks[2][1]}") from None
    if scale == 0:
        raise ImageFormatError(f"zero scale at byte offset {toks[2][1]}")
    pos += 1
    c = 3 if magic == b"PF" else 1
    dt = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    need = w * h * c * 4
    if len(data) - pos < need:
        raise ImageFormatError(f"pixel data truncated at byte offset {len(data)} (expected {need} bytes from {pos})")
    arr = np.frombuffer(data, dtype=dt, count=w * h * c, offset=pos).astype(np.float64)
    arr = arr.reshape(h, w, c)[::-1]  # rows are stored bottom to top
    return arr if c == 3 else arr[..., 0]


def write_pfm(img, little_endian: bool = True) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    color = img.ndim == 3
    if color and img.shape[-1] != 3:
        raise ValueError("PFM needs 1 or 3 channels")
    h, w = img.shape[:2]
    dt = "<f4" if little_endian else ">f4"
    header = f"{'PF' if color else 'Pf'}\n{w} {h}\n{-1.0 if little_endian else 1.0}\n".encode()
    return header + np.ascontiguousarray(img[::-1], dtype=dt).tobytes()


def read_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] in (b"P3", b"P6"):
        return read_ppm(data)
    if data[:2] in (b"PF", b"Pf"):
        return read_pfm(data)
    raise ImageFormatError(f"{path}: unrecognized image magic {data[:2]!r} at byte offset 0")


def write_image(path, img, binary: bool = True) -> None:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".pfm":
        path.write_bytes(write_pfm(img))
    elif ext == ".ppm":
        path.write_bytes(write_ppm(img, binary))
    else:
        raise ValueError(f"unsupported image extension {ext!r} (use .ppm or .pfm)")


# --------------------------------------------------------------------------
# cameras and datasets
# --------------------------------------------------------------------------


def save_camera(cam: Camera, path) -> None:
    Path(path).write_text(json.dumps(cam.to_dict(), indent=1, sort_keys=True))


def load_camera(path) -> Camera:
    d = json.loads(Path(path).read_text())
    return Camera.from_dict(d["camera"] if "camera" in d else d)


def save_dataset(dataset: Dataset, path, image_format: str = "pfm") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    views = []
    for i, v in enumerate(dataset):
        name = f"view_{i:03d}.{image_format}"
        write_image(path.parent / name, v.image)
        views.append({"camera": v.camera.to_dict(), "image": name})
    path.write_text(json.dumps({"views": views}, indent=1, sort_keys=True))


def load_dataset(path) -> Dataset:
    path = Path(path)
    d = json.loads(path.read_text())
    views = []
    for i, v in enumerate(d["views"]):
        img_path = path.parent / v["image"]
        if not img_path.exists():
            raise FileNotFoundError(f"{path}: view {i} image {v['image']!r} not found")
        cam = Camera.from_dict(v["camera"])
        img = read_image(img_path)
        if img.ndim == 2:
            img = img[..., None]
        if img.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"{path}: view {i} image is {img.shape[1]}x{img.shape[0]}, "
                             f"camera expects {cam.width}x{cam.height}")
        views.append(View(cam, img))
    return Dataset(views)


# --------------------------------------------------------------------------
# PLY import
# --------------------------------------------------------------------------

_PLY_TYPES = {"char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2", "int": "i4", "uint": "u4",
              "float": "f4", "double": "f8", "int8": "i1", "uint8": "u1", "int16": "i2",
              "uint16": "u2", "int32": "i4", "uint32": "u4", "float32": "f4", "float64": "f8"}


def _parse_ply(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError("not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[data.index(b"\n", end) + 1:]
    fmt, count, props = None, 0, []
    in_vertex = False
    for line in header:
        parts = line.split()
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
                raise ValueError("list properties on vertices are not supported")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt == "ascii":
        rows = np.array(body.decode("ascii").split()[:count * len(props)], dtype=np.float64)
        rows = rows.reshape(count, len(props))
        return {name: rows[:, i] for i, (name, _) in enumerate(props)}
    order = {"binary_little_endian": "<", "binary_big_endian": ">"}.get(fmt)
    if order is None:
        raise ValueError(f"unsupported PLY format {fmt!r}")
    dt = np.dtype([(name, order + t) for name, t in props])
    arr = np.frombuffer(body, dtype=dt, count=count)
    return {name: arr[name].astype(np.float64) for name, _ in props}


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """(N, 4) quaternions ``(w, x, y, z)`` -> (N, 3, 3) rotation matrices."""
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=1)


def import_ply(path, background=(0.0, 0.0, 0.0)) -> Scene:
    """Load a textureless splat PLY (x/y/z, f_dc_*, f_rest_*, opacity, scale_*, rot_*).

    Stored opacities are logits and scales are logs.  Splat files encode color
    as ``0.5 + SH``; the constant offset is folded into the DC coefficient.
    """
    v = _parse_ply(Path(path).read_bytes())
    n = len(v["x"])
    pos = np.column_stack([v["x"], v["y"], v["z"]])
    rest = sorted((k for k in v if k.startswith("f_rest_")), key=lambda k: int(k[7:]))
    k_total = 1 + len(rest) // 3
    degree = int(round(np.sqrt(k_total))) - 1
    if num_sh_coeffs(degree) != k_total:
        raise ValueError(f"f_rest count {len(rest)} does not match any SH degree")
    sh = np.zeros((n, k_total, 3))
    sh[:, 0] = np.column_stack([v[f"f_dc_{c}"] for c in range(3)]) + 0.5 / SH_C0
    for c in range(3):
        for k in range(1, k_total):
            sh[:, k, c] = v[rest[c * (k_total - 1) + k - 1]]
    R = quaternion_to_matrix(np.column_stack([v[f"rot_{i}"] for i in range(4)]))
    scales = np.exp(np.column_stack([v["scale_0"], v["scale_1"]]))
    opac = 1.0 / (1.0 + np.exp(-v["opacity"]))
    return Scene(pos, R[:, :, 0], R[:, :, 1], scales, opac, sh, background=np.asarray(background, float),
                 sh_degree=degree)
