"""Command-line entry point.

Subcommands::

    make-synthetic   write a class-separable PNG dataset
    train-teacher    train the teacher network
    train-student    train the student (distilling from a teacher checkpoint)
    eval             encode gallery/queries and write metrics.csv, pr.csv
    retrieve         print the top-k gallery ids for a query (locally or via --server)
    augment-preview  save a before/after grid of the batch augmentation
    serve            run the HTTP retrieval service

Training and evaluation read ``--config FILE`` plus any number of
``--set key=value`` overrides (dotted keys, YAML values).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .backbone import ConfigError
from .config import load_config

logger = logging.getLogger("vithash")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. loss.gamma=0.3 (repeatable)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded deterministic kernels; reruns give identical outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vithash", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="write a synthetic class-folder dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-teacher", help="train the teacher network")
    _add_config_args(p)

    p = sub.add_parser("train-student", help="train the student network")
    _add_config_args(p)
    p.add_argument("--teacher", help="teacher checkpoint (required when distilling)")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gallery-split", choices=("train", "test"))
    p.add_argument("--query-split", choices=("train", "test"))
    p.add_argument("--map-cutoff", type=int, help="truncate MAP to the top N results")
    p.add_argument("--out", help="output directory (default: <output_dir>/eval/<role>)")

    p = sub.add_parser("retrieve", help="print top-k gallery ids for a query")
    p.add_argument("--k", type=int, default=10)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--code", help="comma-separated ternary code, e.g. 1,-1,0,1")
    src.add_argument("--image", help="query image (needs --checkpoint locally, or a server with one)")
    p.add_argument("--index", help="gallery code file (local mode)")
    p.add_argument("--checkpoint", help="network checkpoint for --image in local mode")
    p.add_argument("--server", help="base URL of a running `vithash serve` instance")
    p.add_argument("--show-distance", action="store_true")

    p = sub.add_parser("augment-preview", help="write a before/after augmentation grid")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--n", type=int, default=8, help="number of images")
    p.add_argument("--lam", type=float, help="mixing ratio (default: augment.lambda_max)")
    p.add_argument("--p", type=float, help="mask probability (default: augment.p_max)")

    p = sub.add_parser("serve", help="run the HTTP retrieval service")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def _config(args):
    overrides = list(args.overrides)
    if getattr(args, "deterministic", False):
        overrides.append("deterministic=true")
    return load_config(args.config, overrides)


def cmd_make_synthetic(args) -> int:
    from .data import make_synthetic

    m = make_synthetic(args.out, args.classes, args.per_class, args.image_size, args.seed)
    print(f"wrote {len(m)} images in {len(m.class_names)} classes to {args.out}")
    return 0


def cmd_train_teacher(args) -> int:
    from .training import train_teacher

    res = train_teacher(_config(args))
    print(res.checkpoint)
    return 0


def cmd_train_student(args) -> int:
    from .training import train_student

    res = train_student(_config(args), args.teacher)
    print(res.checkpoint)
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate

    cfg = _config(args)
    if args.map_cutoff is not None:
        cfg.eval.map_cutoff = args.map_cutoff
    roles = (args.gallery_split or cfg.eval.gallery_split, args.query_split or cfg.eval.query_split)
    report = evaluate(cfg, args.checkpoint, roles, out_dir=args.out)
    print(f"map\t{report.map:.6f}")
    for k, v in report.precision.items():
        print(f"precision@{k}\t{v:.6f}")
    for k, v in report.recall.items():
        print(f"recall@{k}\t{v:.6f}")
    return 0


def _parse_code(text: str) -> list[int]:
    try:
        code = [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise ConfigError(f"cannot parse code {text!r}; expected comma-separated -1/0/1") from None
    if any(x not in (-1, 0, 1) for x in code):
        raise ConfigError("code entries must be -1, 0 or 1")
    return code


def _print_results(ids, dists, show_distance: bool) -> None:
    for i, d in zip(ids, dists):
        print(f"{i}\t{d:g}" if show_distance else i)


def cmd_retrieve(args) -> int:
    if args.server:
        import httpx

        base = args.server.rstrip("/")
        with httpx.Client(timeout=60) as client:
            if args.image:
                r = client.post(f"{base}/encode", json={"image_paths": [str(Path(args.image).resolve())]})
                r.raise_for_status()
                code = r.json()["codes"][0]
            else:
                code = _parse_code(args.code)
            r = client.post(f"{base}/query", json={"code": code, "k": args.k})
            if r.status_code >= 400:
                raise ConfigError(f"server error {r.status_code}: {r.json().get('detail')}")
            body = r.json()
        if body.get("note"):
            logger.info(body["note"])
        res = body["results"]
        _print_results([x["item_id"] for x in res], [x["distance"] for x in res], args.show_distance)
        return 0

    from .retrieval import RetrievalIndex, query

    if not args.index:
        raise ConfigError("--index is required without --server")
    index = RetrievalIndex.load(args.index)
    if args.image:
        if not args.checkpoint:
            raise ConfigError("--image needs --checkpoint in local mode")
        import torch

        from .data import normalize, preprocess
        from .hashing import sign_quantize
        from .training import load_network

        net, _ = load_network(args.checkpoint, code_bits=index.code_bits)
        net.eval()
        img = preprocess(args.image, net.encoder.config.image_size)
        if img is None:
            raise ConfigError(f"cannot decode {args.image}")
        with torch.no_grad():
            code = sign_quantize(net(normalize(img[None]))[1])[0]
    else:
        code = np.array(_parse_code(args.code), dtype=np.int8)
    if code.shape[0] != index.code_bits:
        raise ConfigError(f"query code has {code.shape[0]} bits, index has {index.code_bits}")
    res = query(index, code, args.k)
    _print_results(res.item_ids.tolist(), res.distances.tolist(), args.show_distance)
    return 0


def cmd_augment_preview(args) -> int:
    import torch
    from PIL import Image

    from .augmentation import mix_augment
    from .data import ImageStore, scan_dataset

    cfg = _config(args)
    manifest = scan_dataset(cfg.data.root)
    store = ImageStore(manifest.subset(range(min(args.n, len(manifest)))), cfg.data.image_size)
    lam = cfg.augment.lambda_max if args.lam is None else args.lam
    p = cfg.augment.p_max if args.p is None else args.p
    gen = torch.Generator().manual_seed(cfg.seed)
    patch = cfg.augment.patch_size or cfg.student.patch_size
    aug = mix_augment(store.images, store.labels, lam, p, cfg.augment, gen, patch_size=patch)
    b = store.images.shape[0]
    top = torch.cat(list(aug.images[:b]), dim=2)
    bottom = torch.cat(list(aug.images[b:]), dim=2) if aug.images.shape[0] > b else torch.zeros_like(top)
    grid = torch.cat([top, bottom], dim=1)
    arr = (grid.clamp(0, 1).permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(args.out)
    print(args.out)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import app_from_files

    uvicorn.run(app_from_files(args.index, args.checkpoint), host=args.host, port=args.port)
    return 0


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "eval": cmd_eval,
    "retrieve": cmd_retrieve,
    "augment-preview": cmd_augment_preview,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"vithash: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
