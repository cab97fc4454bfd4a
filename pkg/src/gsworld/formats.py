"""On-disk formats.

Everything structured lives in one chunked binary container:

    magic  "GSDW" (4 bytes)
    version u32 little-endian (currently 1)
    chunks  repeated [tag: 4 ascii bytes][length: u32 LE][payload]

The first chunk is always "MANI", a UTF-8 JSON manifest. Payload chunks:
"PRIM" scene primitive records (float32), "AENC"/"PROJ"/"DNSR" model
parameters (float64, so checkpoints round-trip bit-exactly), "ADAM" optimizer
moments, "GTOK" token matrices (float32), "SALI" per-token salience, "PCLD"
colored point clouds.

Dense float maps (language/depth/condition channels) use a separate bare
format: little-endian float32 in row-major order plus a JSON sidecar header
at <path>.json.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autoencoder import AutoencoderModel
from .conditions import ColoredPointCloud, SparseConditionMap
from .diffusion import ToyDenoiser
from .errors import (
    BadMagicError,
    FormatError,
    TruncatedFileError,
    UnsupportedVersionError,
    ValidationError,
)
from .nn import Adam, MlpParams
from .scene import Aabb, GaussianScene
from .tokenizer import HEAD_NAMES, FourierConfig, ProjectorParams

MAGIC = b"GSDW"
VERSION = 1


# ---------------------------------------------------------------------------
# container primitives
# ---------------------------------------------------------------------------

def write_chunks(path, manifest: dict, chunks=()) -> None:
    """Write a container file: manifest chunk first, then payload chunks."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    payload = [("MANI", json.dumps(manifest, sort_keys=True).encode("utf-8"))]
    payload.extend(chunks)
    for tag, data in payload:
        tag_bytes = tag.encode("ascii")
        if len(tag_bytes) != 4:
            raise ValidationError(f"chunk tag must be 4 ascii bytes, got {tag!r}")
        blob += tag_bytes
        blob += struct.pack("<I", len(data))
        blob += data
    with open(path, "wb") as fh:
        fh.write(blob)


def read_chunks(path):
    """Read a container file; returns (manifest, {tag: payload bytes})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise TruncatedFileError(f"{path}: file shorter than the container header")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: container version {version} not supported")
    offset = 8
    chunks = {}
    order = []
    while offset < len(blob):
        if offset + 8 > len(blob):
            raise TruncatedFileError(f"{path}: truncated chunk header at byte {offset}")
        tag = blob[offset : offset + 4]
        (length,) = struct.unpack("<I", blob[offset + 4 : offset + 8])
        offset += 8
        if offset + length > len(blob):
            raise TruncatedFileError(f"{path}: chunk {tag!r} truncated (needs {length} bytes)")
        try:
            name = tag.decode("ascii")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: non-ascii chunk tag {tag!r}") from exc
        chunks[name] = blob[offset : offset + length]
        order.append(name)
        offset += length
    if not order or order[0] != "MANI":
        raise FormatError(f"{path}: first chunk must be the MANI manifest")
    try:
        manifest = json.loads(chunks["MANI"].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: manifest is not valid UTF-8 JSON: {exc}") from exc
    return manifest, chunks


def _floats(buffer: bytes, count: int, dtype: str, what: str) -> np.ndarray:
    arr = np.frombuffer(buffer, dtype=np.dtype(dtype).newbyteorder("<"))
    if arr.size != count:
        raise TruncatedFileError(f"{what}: expected {count} values, found {arr.size}")
    return arr.astype(np.float64)


def _require(chunks: dict, tag: str, path) -> bytes:
    if tag not in chunks:
        raise FormatError(f"{path}: missing {tag} chunk")
    return chunks[tag]


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

_PRIM_FIXED = 14  # position 3 + logit 1 + log-scale 3 + rotation 4 + color 3


def save_scene(scene: GaussianScene, path) -> None:
    """Scene container: manifest + float32 primitive records in declaration
    order (position, opacity logit, log-scale, rotation, color, latent)."""
    records = np.hstack(
        [
            scene.positions,
            scene.opacity_logits[:, None],
            scene.log_scales,
            scene.rotations,
            scene.colors,
            scene.lang,
        ]
    ).astype("<f4")
    manifest = {
        "kind": "scene",
        "scene_id": scene.scene_id,
        "count": scene.count,
        "lang_dim": scene.lang_dim,
        "lang_levels": scene.lang_levels,
        "bounds": {"min": scene.bounds.min.tolist(), "max": scene.bounds.max.tolist()},
    }
    write_chunks(path, manifest, [("PRIM", records.tobytes())])


def load_scene(path) -> GaussianScene:
    manifest, chunks = read_chunks(path)
    if manifest.get("kind") != "scene":
        raise FormatError(f"{path}: not a scene container (kind={manifest.get('kind')!r})")
    try:
        count = int(manifest["count"])
        lang_dim = int(manifest["lang_dim"])
        lang_levels = int(manifest.get("lang_levels", 1))
        bounds = Aabb(manifest["bounds"]["min"], manifest["bounds"]["max"])
        scene_id = str(manifest["scene_id"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: scene manifest missing field: {exc}") from exc
    width = _PRIM_FIXED + lang_dim
    flat = _floats(_require(chunks, "PRIM", path), count * width, "float32", f"{path}: PRIM records")
    rec = flat.reshape(count, width)
    return GaussianScene(
        positions=rec[:, 0:3],
        opacity_logits=rec[:, 3],
        log_scales=rec[:, 4:7],
        rotations=rec[:, 7:11],
        colors=rec[:, 11:14],
        lang=rec[:, 14:],
        scene_id=scene_id,
        bounds=bounds,
        lang_levels=lang_levels,
    )


def scene_payload_bytes(path) -> bytes:
    """The PRIM chunk bytes (used to diff scene content ignoring the manifest)."""
    _, chunks = read_chunks(path)
    return _require(chunks, "PRIM", path)


# ---------------------------------------------------------------------------
# dense float maps (bare float32 + JSON sidecar)
# ---------------------------------------------------------------------------

def save_float_map(path, array) -> None:
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValidationError("float maps must be (H, W) or (H, W, C)")
    header = {
        "height": arr.shape[0],
        "width": arr.shape[1],
        "channels": arr.shape[2],
        "dtype": "float32",
        "order": "row-major",
    }
    with open(path, "wb") as fh:
        fh.write(arr.astype("<f4").tobytes())
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(header, fh, sort_keys=True)
        fh.write("\n")


def load_float_map(path) -> np.ndarray:
    try:
        with open(str(path) + ".json", "r", encoding="utf-8") as fh:
            header = json.load(fh)
        shape = (int(header["height"]), int(header["width"]), int(header["channels"]))
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: missing JSON header sidecar") from exc
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad JSON header: {exc}") from exc
    with open(path, "rb") as fh:
        flat = np.frombuffer(fh.read(), dtype="<f4")
    if flat.size != shape[0] * shape[1] * shape[2]:
        raise TruncatedFileError(f"{path}: expected {shape} values, found {flat.size}")
    arr = flat.astype(np.float64).reshape(shape)
    return arr[:, :, 0] if shape[2] == 1 else arr


def save_condition_map(path_base, cond: SparseConditionMap) -> None:
    """Condition maps as raw float maps: <base>_rgb.raw and <base>_depth.raw.
    Invalid pixels are already the 0 sentinel, so validity is implied by
    depth > 0."""
    save_float_map(str(path_base) + "_rgb.raw", cond.rgb)
    save_float_map(str(path_base) + "_depth.raw", cond.depth)


def load_condition_map(path_base) -> SparseConditionMap:
    rgb = load_float_map(str(path_base) + "_rgb.raw")
    depth = load_float_map(str(path_base) + "_depth.raw")
    return SparseConditionMap(rgb=rgb, depth=depth, valid=depth > 0.0)


# ---------------------------------------------------------------------------
# MLP (de)serialization shared by model checkpoints
# ---------------------------------------------------------------------------

def _mlp_spec(params: MlpParams) -> dict:
    return {
        "shapes": [[w.shape[0], w.shape[1]] for w in params.weights],
        "activations": list(params.activations),
    }


def _mlp_values(params: MlpParams) -> list:
    out = []
    for w, b in zip(params.weights, params.biases):
        out.append(w.reshape(-1))
        out.append(b)
    return out


def _mlp_from_spec(spec: dict, flat: np.ndarray, cursor: int):
    weights, biases = [], []
    for fan_in, fan_out in spec["shapes"]:
        n = fan_in * fan_out
        weights.append(flat[cursor : cursor + n].reshape(fan_in, fan_out).copy())
        cursor += n
        biases.append(flat[cursor : cursor + fan_out].copy())
        cursor += fan_out
    return MlpParams(weights=weights, biases=biases, activations=list(spec["activations"])), cursor


def _mlp_size(spec: dict) -> int:
    return sum(fi * fo + fo for fi, fo in spec["shapes"])


def _pack_f64(arrays) -> bytes:
    return np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays]).astype("<f8").tobytes()


# ---------------------------------------------------------------------------
# model checkpoints
# ---------------------------------------------------------------------------

def save_autoencoder(model: AutoencoderModel, path) -> None:
    """AENC checkpoint plus the JSON hyperparameter sidecar at <path>.json."""
    manifest = {
        "kind": "autoencoder",
        "scene_id": model.scene_id,
        "encoder": _mlp_spec(model.encoder),
        "decoder": _mlp_spec(model.decoder),
        "dtype": "float64",
    }
    write_chunks(path, manifest, [("AENC", _pack_f64(_mlp_values(model.encoder) + _mlp_values(model.decoder)))])
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_autoencoder(path) -> AutoencoderModel:
    manifest, chunks = read_chunks(path)
    if manifest.get("kind") != "autoencoder":
        raise FormatError(f"{path}: not an autoencoder checkpoint")
    total = _mlp_size(manifest["encoder"]) + _mlp_size(manifest["decoder"])
    flat = _floats(_require(chunks, "AENC", path), total, "float64", f"{path}: AENC values")
    encoder, cursor = _mlp_from_spec(manifest["encoder"], flat, 0)
    decoder, _ = _mlp_from_spec(manifest["decoder"], flat, cursor)
    return AutoencoderModel(encoder=encoder, decoder=decoder, scene_id=str(manifest["scene_id"]))


def save_projector(proj: ProjectorParams, path) -> None:
    manifest = {
        "kind": "projector",
        "token_dim": proj.token_dim,
        "fourier_bands": proj.fourier.num_bands,
        "fourier_base": proj.fourier.base,
        "heads": {name: _mlp_spec(proj.heads[name]) for name in HEAD_NAMES},
        "dtype": "float64",
    }
    values = []
    for name in HEAD_NAMES:
        values.extend(_mlp_values(proj.heads[name]))
    values.append(proj.fusion_logits)
    write_chunks(path, manifest, [("PROJ", _pack_f64(values))])


def load_projector(path) -> ProjectorParams:
    manifest, chunks = read_chunks(path)
    if manifest.get("kind") != "projector":
        raise FormatError(f"{path}: not a projector checkpoint")
    total = sum(_mlp_size(manifest["heads"][name]) for name in HEAD_NAMES) + len(HEAD_NAMES)
    flat = _floats(_require(chunks, "PROJ", path), total, "float64", f"{path}: PROJ values")
    heads, cursor = {}, 0
    for name in HEAD_NAMES:
        heads[name], cursor = _mlp_from_spec(manifest["heads"][name], flat, cursor)
    fusion = flat[cursor : cursor + len(HEAD_NAMES)].copy()
    return ProjectorParams(
        heads=heads,
        fusion_logits=fusion,
        token_dim=int(manifest["token_dim"]),
        fourier=FourierConfig(num_bands=int(manifest["fourier_bands"]), base=float(manifest["fourier_base"])),
    )


def save_denoiser(model: ToyDenoiser, path) -> None:
    manifest = {
        "kind": "denoiser",
        "channels": model.channels,
        "token_dim": model.token_dim,
        "time_bands": model.time_bands,
        "mlp": _mlp_spec(model.mlp),
        "dtype": "float64",
    }
    write_chunks(path, manifest, [("DNSR", _pack_f64(_mlp_values(model.mlp)))])


def load_denoiser(path) -> ToyDenoiser:
    manifest, chunks = read_chunks(path)
    if manifest.get("kind") != "denoiser":
        raise FormatError(f"{path}: not a denoiser checkpoint")
    flat = _floats(_require(chunks, "DNSR", path), _mlp_size(manifest["mlp"]), "float64", f"{path}: DNSR values")
    mlp, _ = _mlp_from_spec(manifest["mlp"], flat, 0)
    return ToyDenoiser(
        mlp=mlp,
        channels=int(manifest["channels"]),
        token_dim=int(manifest["token_dim"]),
        time_bands=int(manifest["time_bands"]),
    )


def save_optimizer_state(opt: Adam, shapes, path) -> None:
    """Adam moments + step count, enough to resume training bit-exactly."""
    manifest = {
        "kind": "adam",
        "t": opt.t,
        "lr": opt.lr,
        "shapes": [list(s) for s in shapes],
    }
    arrays = (opt.m or []) + (opt.v or [])
    write_chunks(path, manifest, [("ADAM", _pack_f64(arrays) if arrays else b"")])


def load_optimizer_state(path, arrays_like) -> Adam:
    manifest, chunks = read_chunks(path)
    if manifest.get("kind") != "adam":
        raise FormatError(f"{path}: not an optimizer-state file")
    opt = Adam(lr=float(manifest["lr"]))
    opt.t = int(manifest["t"])
    total = 2 * sum(int(np.prod(a.shape)) for a in arrays_like)
    flat = _floats(_require(chunks, "ADAM", path), total, "float64", f"{path}: ADAM values")
    cursor = 0
    moments = []
    for _ in range(2):
        group = []
        for a in arrays_like:
            n = int(np.prod(a.shape))
            group.append(flat[cursor : cursor + n].reshape(a.shape).copy())
            cursor += n
        moments.append(group)
    opt.m, opt.v = moments
    return opt


# ---------------------------------------------------------------------------
# token dumps and point clouds
# ---------------------------------------------------------------------------

def save_tokens(path, tokens: np.ndarray, scene_hash: str, salience: np.ndarray | None = None) -> None:
    """GTOK dump: float32 row-major (N, token_dim) plus the source scene hash;
    optional per-token salience rides in a SALI chunk so samplers can run
    from the dump alone."""
    t = np.asarray(tokens, dtype=np.float64)
    if t.ndim != 2:
        raise ValidationError("tokens must be (N, token_dim)")
    manifest = {
        "kind": "tokens",
        "count": t.shape[0],
        "token_dim": t.shape[1],
        "scene_hash": scene_hash,
        "has_salience": salience is not None,
    }
    chunks = [("GTOK", t.astype("<f4").tobytes())]
    if salience is not None:
        s = np.asarray(salience, dtype=np.float64)
        if s.shape != (t.shape[0],):
            raise ValidationError("salience must have one value per token")
        chunks.append(("SALI", s.astype("<f4").tobytes()))
    write_chunks(path, manifest, chunks)


def load_tokens(path):
    """Returns (tokens (N, D), scene_hash, salience or None)."""
    manifest, chunks = read_chunks(path)
    if manifest.get("kind") != "tokens":
        raise FormatError(f"{path}: not a token dump")
    count, dim = int(manifest["count"]), int(manifest["token_dim"])
    tokens = _floats(_require(chunks, "GTOK", path), count * dim, "float32", f"{path}: GTOK values").reshape(count, dim)
    salience = None
    if manifest.get("has_salience"):
        salience = _floats(_require(chunks, "SALI", path), count, "float32", f"{path}: SALI values")
    return tokens, str(manifest["scene_hash"]), salience


def save_point_cloud(cloud: ColoredPointCloud, path) -> None:
    records = np.hstack([cloud.positions, cloud.colors]).astype("<f4")
    write_chunks(path, {"kind": "pointcloud", "count": len(cloud)}, [("PCLD", records.tobytes())])


def load_point_cloud(path) -> ColoredPointCloud:
    manifest, chunks = read_chunks(path)
    if manifest.get("kind") != "pointcloud":
        raise FormatError(f"{path}: not a point cloud file")
    count = int(manifest["count"])
    rec = _floats(_require(chunks, "PCLD", path), count * 6, "float32", f"{path}: PCLD records").reshape(count, 6)
    return ColoredPointCloud(positions=rec[:, :3], colors=rec[:, 3:])
