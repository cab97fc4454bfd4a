"""Command-line entry point: one binary, one subcommand per pipeline stage.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Failures print a single machine-parseable JSON line to stderr. All
subcommands are deterministic given (inputs, seed); option precedence is
flags > --config file > defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import formats
from .autoencoder import make_autoencoder, train_autoencoder
from .conditions import SparseConditionMap, build_spatial_condition, build_temporal_condition
from .dataset import (
    QaRecord,
    TrajectoryClip,
    _QA_FIELDS,
    build_trajectory_qa,
    emit_qa_record,
    parse_qa_record,
    filter_scenes_by_psnr,
)
from .diffusion import DualCondition, make_schedule, make_toy_denoiser, train_toy_denoiser
from .errors import FormatError, GsworldError, NumericError, ValidationError
from .geometry import Pose
from .nn import Adam
from .render import fit_language_field, render
from .sampling import SamplingConfig, TextQueryEmbedding, hybrid_sample, language_guided_sample
from .scene import CameraModel
from .tokenizer import make_projector, scene_token_hash, token_matrix, tokenize_scene, train_projector

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(GsworldError):
    pass


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc


def _load_camera(path) -> CameraModel:
    return CameraModel.from_json_dict(_load_json(path))


def _load_npy(path) -> np.ndarray:
    try:
        return np.asarray(np.load(path), dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: not a readable .npy array: {exc}") from exc


def _write_png(path, image) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path, format="PNG")


def _write_loss_csv(path, losses) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        for i, loss in enumerate(losses):
            writer.writerow([i, repr(float(loss))])


def _resolve(args, config, key, default=None, required=False):
    value = getattr(args, key.replace("-", "_"), None)
    if value is None:
        value = config.get(key, default)
    if required and value is None:
        raise UsageError(f"missing required option --{key}")
    return value


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_render(args, config):
    scene = formats.load_scene(_resolve(args, config, "scene", required=True))
    cam = _load_camera(_resolve(args, config, "camera", required=True))
    tile_size = int(_resolve(args, config, "tile-size", 16))
    threads = int(_resolve(args, config, "threads", 1))
    out = _resolve(args, config, "out", required=True)
    result = render(scene, cam, tile_size=tile_size, num_threads=threads)
    _write_png(f"{out}/color.png", result.color)
    formats.save_float_map(f"{out}/lang.raw", result.lang)
    formats.save_float_map(f"{out}/depth.raw", result.depth)
    formats.save_float_map(f"{out}/weight_sum.raw", result.weight_sum)
    print(json.dumps({"rendered": out, "splats_skipped": result.skipped}, sort_keys=True))


def _cmd_fit_lang(args, config):
    scene = formats.load_scene(_resolve(args, config, "scene", required=True))
    cam_paths = _resolve(args, config, "camera", required=True)
    target_paths = _resolve(args, config, "target", required=True)
    if len(cam_paths) != len(target_paths):
        raise UsageError("--camera and --target must be given the same number of times")
    cameras = [_load_camera(p) for p in cam_paths]
    targets = [formats.load_float_map(p) for p in target_paths]
    targets = [t[:, :, None] if t.ndim == 2 else t for t in targets]
    iters = int(_resolve(args, config, "iters", 500))
    lr = float(_resolve(args, config, "lr", 0.05))
    out = _resolve(args, config, "out", required=True)
    fitted, losses = fit_language_field(scene, cameras, targets, iters=iters, lr=lr)
    formats.save_scene(fitted, out)
    _write_loss_csv(str(out) + ".loss.csv", losses)
    print(json.dumps({"scene": str(out), "final_loss": losses[-1]}, sort_keys=True))


def _cmd_tokenize(args, config):
    scene = formats.load_scene(_resolve(args, config, "scene", required=True))
    proj = formats.load_projector(_resolve(args, config, "projector", required=True))
    decoder = formats.load_autoencoder(_resolve(args, config, "autoencoder", required=True))
    out = _resolve(args, config, "out", required=True)
    tokens = tokenize_scene(scene, proj, decoder)
    formats.save_tokens(out, token_matrix(tokens), scene_token_hash(scene), salience=scene.opacities)
    print(json.dumps({"tokens": str(out), "count": len(tokens)}, sort_keys=True))


def _cmd_sample(args, config):
    tokens, _, salience = formats.load_tokens(_resolve(args, config, "tokens", required=True))
    mode = _resolve(args, config, "mode", required=True)
    cfg = SamplingConfig(
        budget=int(_resolve(args, config, "n", 4096)),
        uniform_fraction=float(_resolve(args, config, "uniform-fraction", 0.5)),
        seed=int(_resolve(args, config, "seed", 0)),
        temperature=float(_resolve(args, config, "temperature", 1.0)),
    )
    if mode == "hybrid":
        if salience is None:
            raise ValidationError("token dump carries no salience; re-tokenize from the scene")
        result = hybrid_sample(salience, cfg)
    elif mode == "language":
        query_path = _resolve(args, config, "query", required=True)
        query = TextQueryEmbedding(tokens=np.atleast_2d(_load_npy(query_path)))
        result = language_guided_sample(tokens, query, cfg)
    else:
        raise UsageError(f"unknown sampling mode {mode!r} (hybrid or language)")
    out = _resolve(args, config, "out", required=True)
    with open(out, "w", encoding="utf-8") as fh:
        for idx, score in zip(result.indices.tolist(), result.scores.tolist()):
            fh.write(json.dumps({"index": idx, "score": score}) + "\n")
    print(json.dumps({"selected": int(result.indices.size), "method": result.method}, sort_keys=True))


def _cmd_condition(args, config):
    cloud = formats.load_point_cloud(_resolve(args, config, "cloud", required=True))
    cam = _load_camera(_resolve(args, config, "camera", required=True))
    shift = _resolve(args, config, "shift")
    pose_text = _resolve(args, config, "pose")
    if (shift is None) == (pose_text is None):
        raise UsageError("give exactly one of --shift or --pose")
    if shift is not None:
        cond = build_spatial_condition(cloud, cam, float(shift))
    else:
        values = [float(v) for v in str(pose_text).split(",")]
        if len(values) != 7:
            raise UsageError("--pose expects 7 comma-separated numbers x,y,z,qx,qy,qz,qw")
        cond = build_temporal_condition(cloud, cam, Pose.from_7tuple(values))
    out = _resolve(args, config, "out", required=True)
    formats.save_condition_map(out, cond)
    _write_png(str(out) + "_preview.png", cond.rgb)  # invalid pixels stay black
    print(json.dumps({"condition": str(out), "valid_pixels": int(cond.valid.sum())}, sort_keys=True))


def _qa_record_to_line(record: QaRecord) -> str:
    return json.dumps({f: getattr(record, f) for f in _QA_FIELDS}, ensure_ascii=False)


def _cmd_dataset(args, config):
    subtask = _resolve(args, config, "subtask", required=True)
    out = _resolve(args, config, "out", required=True)
    if subtask == "qa":
        src = getattr(args, "in_", None)
        if src is None:
            src = config.get("in")
        if src is None:
            raise UsageError("missing required option --in")
        with open(src, "r", encoding="utf-8") as fh:
            text = fh.read()
        try:
            records = [parse_qa_record(text)]
            single = True
        except (FormatError, ValidationError):
            records = [parse_qa_record(line) for line in text.splitlines() if line.strip()]
            single = False
        with open(out, "w", encoding="utf-8") as fh:
            if single:
                fh.write(emit_qa_record(records[0]))
            else:
                for rec in records:
                    fh.write(_qa_record_to_line(rec) + "\n")
        print(json.dumps({"records": len(records), "out": str(out)}, sort_keys=True))
    elif subtask == "trajectory":
        clip_data = _load_json(_resolve(args, config, "clip", required=True))
        try:
            poses = [Pose.from_7tuple(p) for p in clip_data["poses"]]
            times = clip_data["times"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"clip json needs 'poses' and 'times': {exc}") from exc
        prompt, target = build_trajectory_qa(TrajectoryClip(poses=tuple(poses), times=tuple(times)))
        with open(out, "w", encoding="utf-8") as fh:
            json.dump({"prompt": prompt, "target": target}, fh, ensure_ascii=False, sort_keys=True)
            fh.write("\n")
        print(json.dumps({"out": str(out)}, sort_keys=True))
    elif subtask == "filter":
        manifest = _load_json(_resolve(args, config, "manifest", required=True))
        threshold = float(_resolve(args, config, "threshold", 25.0))
        scenes = {}
        try:
            for scene_id, pairs in manifest["scenes"].items():
                scenes[scene_id] = [
                    (formats.load_float_map(a), formats.load_float_map(b)) for a, b in pairs
                ]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"filter manifest needs scenes: {{id: [[render, gt], ...]}}: {exc}") from exc
        kept = filter_scenes_by_psnr(scenes, threshold)
        with open(out, "w", encoding="utf-8") as fh:
            json.dump({"kept": kept}, fh, sort_keys=True)
            fh.write("\n")
        print(json.dumps({"kept": len(kept), "out": str(out)}, sort_keys=True))
    else:
        raise UsageError(f"unknown dataset subtask {subtask!r} (qa, trajectory or filter)")


def _cmd_train(args, config):
    target = _resolve(args, config, "target", required=True)
    out = _resolve(args, config, "out", required=True)
    iters = int(_resolve(args, config, "iters", 200))
    lr = float(_resolve(args, config, "lr", 1e-3))
    seed = int(_resolve(args, config, "seed", 0))
    resume = _resolve(args, config, "resume")
    if iters < 1:
        raise UsageError("--iters must be >= 1")

    if target == "autoencoder":
        features = _load_npy(_resolve(args, config, "features", required=True))
        batch = int(_resolve(args, config, "batch", 0))
        if resume:
            model = formats.load_autoencoder(resume)
            opt = formats.load_optimizer_state(
                str(resume) + ".opt", model.encoder.parameter_arrays() + model.decoder.parameter_arrays()
            )
        else:
            hidden = _resolve(args, config, "hidden", [256, 64])
            model = make_autoencoder(
                scene_id=str(_resolve(args, config, "scene-id", "scene")),
                feature_dim=features.shape[1],
                latent_dim=int(_resolve(args, config, "latent-dim", 3)),
                hidden_dims=[int(h) for h in hidden],
                seed=seed,
            )
            opt = Adam(lr=lr)
        trained, losses = train_autoencoder(
            model, features, iters=iters, lr=lr, batch=batch, seed=seed, start_iter=opt.t, optimizer=opt
        )
        formats.save_autoencoder(trained, out)
        arrays = trained.encoder.parameter_arrays() + trained.decoder.parameter_arrays()
        formats.save_optimizer_state(opt, [a.shape for a in arrays], str(out) + ".opt")
    elif target == "projector":
        scene = formats.load_scene(_resolve(args, config, "scene", required=True))
        decoder = formats.load_autoencoder(_resolve(args, config, "autoencoder", required=True))
        token_targets = _load_npy(_resolve(args, config, "targets", required=True))
        if resume:
            proj = formats.load_projector(resume)
            opt = formats.load_optimizer_state(str(resume) + ".opt", proj.parameter_arrays())
        else:
            proj = make_projector(
                token_dim=int(_resolve(args, config, "token-dim", token_targets.shape[1])),
                feature_dim=decoder.feature_dim,
                hidden=int(_resolve(args, config, "hidden-width", 32)),
                seed=seed,
            )
            opt = Adam(lr=lr)
        trained, losses = train_projector(proj, scene, decoder, token_targets, iters=iters, lr=lr, optimizer=opt)
        formats.save_projector(trained, out)
        formats.save_optimizer_state(opt, [a.shape for a in trained.parameter_arrays()], str(out) + ".opt")
    elif target == "denoiser":
        latent_paths = _resolve(args, config, "latents", required=True)
        steps = int(_resolve(args, config, "steps", 50))
        token_dim = int(_resolve(args, config, "token-dim", 8))
        highlevel_path = _resolve(args, config, "highlevel")
        schedule = make_schedule(steps)
        data = []
        for p in latent_paths:
            latent = _load_npy(p)
            if latent.ndim == 2:
                latent = latent[:, :, None]
            h, w = latent.shape[:2]
            empty = SparseConditionMap(
                rgb=np.zeros((h, w, 3)), depth=np.zeros((h, w)), valid=np.zeros((h, w), dtype=bool)
            )
            high = None
            types = None
            if highlevel_path:
                high = np.atleast_2d(_load_npy(highlevel_path))
                types = np.zeros((2, high.shape[1]))
                token_dim = high.shape[1]
            data.append((latent, DualCondition(low_level=empty, high_level=high, type_embeddings=types)))
        if resume:
            model = formats.load_denoiser(resume)
            opt = formats.load_optimizer_state(str(resume) + ".opt", model.mlp.parameter_arrays())
        else:
            model = make_toy_denoiser(data[0][0].shape[2], token_dim, seed=seed)
            opt = Adam(lr=lr)
        trained, losses = train_toy_denoiser(
            data, schedule, iters=iters, lr=lr, seed=seed, token_dim=token_dim,
            model=model, start_iter=opt.t, optimizer=opt,
        )
        formats.save_denoiser(trained, out)
        formats.save_optimizer_state(opt, [a.shape for a in trained.mlp.parameter_arrays()], str(out) + ".opt")
    else:
        raise UsageError(f"unknown training target {target!r} (autoencoder, projector or denoiser)")
    _write_loss_csv(str(out) + ".loss.csv", losses)
    print(json.dumps({"target": target, "out": str(out), "final_loss": losses[-1]}, sort_keys=True))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsworld", description=__doc__)
    parser.add_argument("--config", help="JSON config file; flags override its values")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render color/lang/depth maps from a scene")
    p.add_argument("--scene")
    p.add_argument("--camera")
    p.add_argument("--out")
    p.add_argument("--tile-size", type=int, choices=(8, 16, 32))
    p.add_argument("--threads", type=int)
    p.set_defaults(handler=_cmd_render)

    p = sub.add_parser("fit-lang", help="fit per-splat language latents to target maps")
    p.add_argument("--scene")
    p.add_argument("--camera", action="append")
    p.add_argument("--target", action="append")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_fit_lang)

    p = sub.add_parser("tokenize", help="project a scene into Gaussian tokens")
    p.add_argument("--scene")
    p.add_argument("--projector")
    p.add_argument("--autoencoder")
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_tokenize)

    p = sub.add_parser("sample", help="select a token subset (hybrid or language-guided)")
    p.add_argument("--tokens")
    p.add_argument("--mode", choices=("hybrid", "language"))
    p.add_argument("--query", help=".npy query embedding (language mode)")
    p.add_argument("--n", type=int)
    p.add_argument("--uniform-fraction", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_sample)

    p = sub.add_parser("condition", help="build a sparse condition map from a point cloud")
    p.add_argument("--cloud")
    p.add_argument("--camera")
    p.add_argument("--shift", type=float, help="lateral shift in meters (spatial)")
    p.add_argument("--pose", help="x,y,z,qx,qy,qz,qw future ego pose (temporal)")
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_condition)

    p = sub.add_parser("dataset", help="QA/trajectory/filter dataset tooling")
    p.add_argument("--subtask", choices=("qa", "trajectory", "filter"))
    p.add_argument("--in", dest="in_")
    p.add_argument("--clip")
    p.add_argument("--manifest")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_dataset)

    p = sub.add_parser("train", help="train the autoencoder, projector or toy denoiser")
    p.add_argument("--target", choices=("autoencoder", "projector", "denoiser"))
    p.add_argument("--features", help=".npy feature matrix (autoencoder)")
    p.add_argument("--scene")
    p.add_argument("--autoencoder")
    p.add_argument("--targets", help=".npy target tokens (projector)")
    p.add_argument("--latents", action="append", help=".npy latent (denoiser); repeatable")
    p.add_argument("--highlevel", help=".npy high-level condition tokens (denoiser)")
    p.add_argument("--steps", type=int)
    p.add_argument("--token-dim", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--hidden-width", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--scene-id")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume")
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_train)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config = {}
    if args.config:
        try:
            loaded = _load_json(args.config)
        except (OSError, FormatError) as exc:
            _fail(exc)
            return EXIT_DATA
        if not isinstance(loaded, dict):
            _fail(UsageError("--config must contain a JSON object"))
            return EXIT_USAGE
        config = loaded
    # merge: command-specific section overrides top level
    section = config.get(args.command, {})
    merged = {k: v for k, v in config.items() if not isinstance(v, dict)}
    merged.update(section if isinstance(section, dict) else {})
    try:
        args.handler(args, merged)
        return EXIT_OK
    except UsageError as exc:
        _fail(exc)
        return EXIT_USAGE
    except NumericError as exc:
        _fail(exc)
        return EXIT_NUMERIC
    except (GsworldError, OSError) as exc:
        _fail(exc)
        return EXIT_DATA


def _fail(exc) -> None:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
