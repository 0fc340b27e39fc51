"""Command-line client for the SLAM service.

Every subcommand builds an HTTP request against the service API. By
default the app is mounted in-process (no server needed); pass --server
to talk to a running instance instead. `serve` starts one.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import asyncio
import json
import sys

import httpx


def _post(args, path, payload) -> dict:
    if args.server:
        with httpx.Client(base_url=args.server.rstrip("/"), timeout=None) as client:
            resp = client.post(path, json=payload)
    else:
        from .service.app import app

        async def _go():
            transport = httpx.ASGITransport(app=app)
            async with httpx.AsyncClient(
                transport=transport, base_url="http://monofuse.local", timeout=None
            ) as client:
                return await client.post(path, json=payload)

        resp = asyncio.run(_go())
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise RuntimeError(f"{path} failed ({resp.status_code}): {detail}")
    return resp.json()


def _print(data: dict, as_json: bool):
    if as_json:
        print(json.dumps(data, indent=2))
        return
    for key, value in data.items():
        if isinstance(value, dict):
            print(f"{key}:")
            for k2, v2 in value.items():
                print(f"  {k2}: {v2}")
        elif isinstance(value, list):
            print(f"{key}: {', '.join(str(v) for v in value) if value else '-'}")
        else:
            print(f"{key}: {value}")


def cmd_run(args) -> int:
    payload = {
        "dataset_dir": args.dataset,
        "config_path": args.config,
        "overrides": args.set or [],
        "evaluate": args.evaluate,
        "outputs": {
            "trajectory_path": args.trajectory,
            "ply_path": args.ply,
            "state_path": args.state,
            "timing_path": args.timing,
            "min_confidence": args.min_confidence,
        },
    }
    data = _post(args, "/runs", payload)
    _print(data, args.json)
    return 0


def cmd_synth(args) -> int:
    payload = {
        "out_dir": args.out_dir,
        "preset": args.preset,
        "frames": args.frames,
        "width": args.width,
        "height": args.height,
        "focal": args.focal,
        "seed": args.seed,
        "depth_format": args.depth_format,
        "png_divisor": args.png_divisor,
        "side": args.side,
        "supersample": args.supersample,
        "depth_scale_error": args.depth_scale_error,
    }
    data = _post(args, "/synth", payload)
    _print(data, args.json)
    return 0


def cmd_eval_traj(args) -> int:
    payload = {
        "est_path": args.estimated,
        "gt_path": args.ground_truth,
        "mode": args.mode,
        "with_scale": args.with_scale,
    }
    data = _post(args, "/eval/trajectory", payload)
    _print(data, args.json)
    return 0


def cmd_eval_surface(args) -> int:
    payload = {
        "model_path": args.model,
        "reference_path": args.reference,
        "voxel": args.voxel,
        "align": not args.no_align,
        "min_confidence": args.min_confidence,
    }
    data = _post(args, "/eval/surface", payload)
    _print(data, args.json)
    return 0


def cmd_export(args) -> int:
    payload = {
        "state_path": args.state,
        "ply_path": args.ply,
        "trajectory_path": args.trajectory,
        "min_confidence": args.min_confidence,
        "binary_ply": not args.ascii_ply,
    }
    data = _post(args, "/export", payload)
    _print(data, args.json)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monofuse",
        description="Dense monocular SLAM: map sequences, generate synthetic data, "
        "evaluate trajectories and surfaces.",
    )
    parser.add_argument("--server", help="service URL (default: run in-process)")
    parser.add_argument("--json", action="store_true", help="print raw JSON responses")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="process a dataset directory into a trajectory + model")
    p.add_argument("dataset", help="dataset directory (odometry layout)")
    p.add_argument("--config", help="YAML/JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override, e.g. --set surfels.delta_t=100")
    p.add_argument("--trajectory", help="write estimated poses here")
    p.add_argument("--ply", help="write the surfel model here")
    p.add_argument("--state", help="write reusable run state (npz) here")
    p.add_argument("--timing", help="write per-frame timing CSV here")
    p.add_argument("--min-confidence", type=float, default=0.0)
    p.add_argument("--evaluate", action="store_true",
                   help="report t_rel/ATE against the dataset's ground truth")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    p.add_argument("out_dir")
    p.add_argument("--preset", default="square",
                   choices=["wall", "ground", "square", "corner"])
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--focal", type=float, default=160.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth-format", default="pfm", choices=["pfm", "png"])
    p.add_argument("--png-divisor", type=float, default=256.0)
    p.add_argument("--side", type=float, default=16.0, help="square route side (m)")
    p.add_argument("--supersample", type=int, default=1)
    p.add_argument("--depth-scale-error", type=float, default=1.0,
                   help="write depth divided by this factor (scale-recovery tests)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval-traj", help="compare two pose files")
    p.add_argument("estimated")
    p.add_argument("ground_truth")
    p.add_argument("--mode", default="both", choices=["trel", "ate", "both"])
    p.add_argument("--with-scale", action="store_true",
                   help="similarity (scale-correcting) alignment for ATE")
    p.set_defaults(func=cmd_eval_traj)

    p = sub.add_parser("eval-surface", help="surface accuracy of a model vs a reference cloud")
    p.add_argument("model", help="model PLY")
    p.add_argument("reference", help="reference PLY (pre-filtered of dynamics)")
    p.add_argument("--voxel", type=float, default=0.2)
    p.add_argument("--no-align", action="store_true")
    p.add_argument("--min-confidence", type=float, default=0.0)
    p.set_defaults(func=cmd_eval_surface)

    p = sub.add_parser("export", help="re-export artifacts from saved run state")
    p.add_argument("--state", required=True)
    p.add_argument("--ply")
    p.add_argument("--trajectory")
    p.add_argument("--min-confidence", type=float, default=0.0)
    p.add_argument("--ascii-ply", action="store_true")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (httpx.HTTPError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
