"""``p2u`` command line.

Exit status: 0 success, 2 usage, 3 remote or protocol failure, 4 bad data or
file format, 5 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import format_rows, run_bench
from .channel import ChannelConfig
from .codec import KIND_UPDATE, Bitstream, decode, encode
from .errors import FormatError, ModelMismatchError, P2UError, ProtocolError, RemoteError
from .evalnet import LabeledDataset, MlpSpec, load_dataset, random_mlp, save_dataset, top1_accuracy, train_mlp
from .model_store import SUPPORTED_BITWIDTHS, QuantizedModel, load_model, model_from_bytes, save_model
from .quant import dequantize, quantize

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_REMOTE = 3
EXIT_DATA = 4
EXIT_INTERNAL = 5

# config-file keys and how to parse them
GLOBAL_KEYS = {
    "repo_dir": str,
    "channel_bandwidth": float,
    "channel_delay": float,
    "repetitions": int,
    "seed": int,
    "output": str,
    "host": str,
    "port": int,
}
DEFAULTS = {
    "repo_dir": ".",
    "channel_bandwidth": 100e6,
    "channel_delay": 0.01,
    "repetitions": 5,
    "seed": 0,
    "output": "table",
    "host": "127.0.0.1",
    "port": 7878,
}


class UsageError(Exception):
    pass


def read_config(path: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; dashes and underscores are interchangeable."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in GLOBAL_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown setting {line!r}")
        try:
            out[key] = GLOBAL_KEYS[key](value.strip())
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {value.strip()!r}") from exc
    return out


def _bitwidth_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of bitwidths: {text!r}")
    bad = [v for v in values if v not in SUPPORTED_BITWIDTHS]
    if bad or not values:
        raise argparse.ArgumentTypeError(f"bitwidths must be drawn from {SUPPORTED_BITWIDTHS}")
    return values


def _dims(text: str) -> tuple[int, ...]:
    try:
        return MlpSpec(tuple(int(v) for v in text.replace(",", " ").split())).dims
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="p2u",
        description="Progressive precision delivery of neural-network weights.",
        epilog="Exit status: 0 ok, 2 usage, 3 remote/protocol, 4 data/format, 5 internal.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="key=value file supplying defaults for the global flags")
    p.add_argument("--repo-dir", help="directory of *.p2um models to serve (default .)")
    p.add_argument("--channel-bandwidth", type=float, help="simulated bandwidth in bit/s (default 100e6)")
    p.add_argument("--channel-delay", type=float, help="simulated propagation delay in s (default 0.01)")
    p.add_argument("--repetitions", type=int, help="timing repetitions, median reported (default 5)")
    p.add_argument("--seed", type=int, help="seed for every randomized step (default 0)")
    p.add_argument("--output", choices=["table", "csv", "json"], help="report format (default table)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    q = sub.add_parser("quantize", help="quantize a P2UM model and write a P2UB bitstream")
    q.add_argument("model", help="input .p2um")
    q.add_argument("-b", "--bitwidth", type=int, choices=SUPPORTED_BITWIDTHS, required=True)
    q.add_argument("-o", "--out", required=True, help="output .p2ub")
    q.set_defaults(func=cmd_quantize)

    d = sub.add_parser("dequantize", help="decode a model bitstream back to a P2UM file")
    d.add_argument("bitstream", help="input .p2ub (model kind)")
    d.add_argument("-o", "--out", required=True, help="output .p2um")
    d.set_defaults(func=cmd_dequantize)

    i = sub.add_parser("inspect", help="describe a .p2um or .p2ub file")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)

    m = sub.add_parser("make-model", help="write a seeded MLP, random or trained on a CSV dataset")
    m.add_argument("--dims", type=_dims, required=True, help="layer widths, e.g. 16,64,4")
    m.add_argument("--name", default="mlp")
    m.add_argument("--train", metavar="CSV", help="fit the MLP to this dataset")
    m.add_argument("--epochs", type=int, default=100)
    m.add_argument("-o", "--out", required=True, help="output .p2um")
    m.set_defaults(func=cmd_make_model)

    s = sub.add_parser("make-dataset", help="write a seeded synthetic classification CSV")
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--features", type=int, default=16)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_make_dataset)

    b = sub.add_parser("bench", help="baseline vs progressive delivery table")
    b.add_argument("model", help="input .p2um")
    b.add_argument("--bitwidths", type=_bitwidth_list, default=[16, 8, 4], help="base bitwidths (default 16,8,4)")
    b.add_argument("--dataset", help="labelled CSV for the Top-1 column (n/a without it)")
    b.add_argument("--no-wallclock", action="store_true",
                   help="report zero compute time so output depends only on inputs")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("serve", help="serve every model in --repo-dir")
    v.add_argument("--host")
    v.add_argument("--port", type=int)
    v.set_defaults(func=cmd_serve)

    f = sub.add_parser("fetch", help="fetch a base model and its precision update from a server")
    f.add_argument("model_id")
    f.add_argument("-b", "--bitwidth", type=int, choices=SUPPORTED_BITWIDTHS, default=8, help="base bitwidth")
    f.add_argument("--host")
    f.add_argument("--port", type=int)
    f.add_argument("--trigger", default="immediate", help="immediate, manual or after:SECONDS")
    f.add_argument("--tolerance", type=float, help="max |W' - W| accepted; lets the server shrink the update")
    f.add_argument("--no-update", action="store_true", help="never request the update")
    f.add_argument("--low-out", help="write the low-precision model here (default <id>.low.p2um)")
    f.add_argument("--proxy-out", help="write the proxy model here (default <id>.proxy.p2um)")
    f.set_defaults(func=cmd_fetch)
    return p


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset global flags from the config file, then from defaults."""
    config = read_config(args.config) if args.config else {}
    for key, default in DEFAULTS.items():
        if getattr(args, key, None) is None:
            setattr(args, key, config.get(key, default))
    if args.repetitions < 1:
        raise UsageError("--repetitions must be at least 1")
    if args.output not in ("table", "csv", "json"):
        raise UsageError(f"unknown output format {args.output!r}")
    try:
        args.channel = ChannelConfig(args.channel_bandwidth, args.channel_delay)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return args


def _emit(args, payload: dict) -> None:
    if args.output == "json":
        print(json.dumps(payload, indent=2))
    elif args.output == "csv":
        print(",".join(payload))
        print(",".join(str(v) for v in payload.values()))
    else:
        for k, v in payload.items():
            print(f"{k}: {v}")


def cmd_quantize(args) -> int:
    model = load_model(args.model)
    qmodel = quantize(model, args.bitwidth)
    stream = encode(qmodel)
    Path(args.out).write_bytes(stream.data)
    _emit(args, {
        "model": model.name,
        "bitwidth": args.bitwidth,
        "parameters": model.num_parameters,
        "size_bytes": stream.size,
        "encode_s": round(stream.encode_seconds, 6),
        "sha256": stream.checksum.hex(),
    })
    return EXIT_OK


def cmd_dequantize(args) -> int:
    obj = decode(Path(args.bitstream).read_bytes())
    if not isinstance(obj, QuantizedModel):
        raise FormatError("bitstream holds an update, not a model; apply it to its base instead")
    save_model(dequantize(obj), args.out)
    _emit(args, {"model": obj.name, "bitwidth": obj.bitwidth, "written": args.out})
    return EXIT_OK


def cmd_inspect(args) -> int:
    data = Path(args.path).read_bytes()
    if data[:4] == b"P2UM":
        model = model_from_bytes(data)
        info = {"format": "P2UM", "name": model.name, "tensors": len(model), "parameters": model.num_parameters}
        info.update({f"tensor.{t.name}": "x".join(map(str, t.shape)) for t in model})
    else:
        obj = decode(data)
        info = {
            "format": "P2UB",
            "kind": "update" if data[5] == KIND_UPDATE else "model",
            "name": obj.name,
            "bitwidth": obj.bitwidth,
            "size_bytes": len(data),
            "sha256": Bitstream(data).checksum.hex(),
        }
        if data[5] == KIND_UPDATE:
            info["base_bitwidth"] = obj.base_bitwidth
            info["base_checksum"] = obj.base_checksum.hex()
        info.update({f"tensor.{t.name}": "x".join(map(str, t.shape)) for t in obj.tensors})
    _emit(args, info)
    return EXIT_OK


def cmd_make_model(args) -> int:
    spec = MlpSpec(args.dims)
    if args.train:
        data = load_dataset(args.train)
        data.check(spec)
        model = train_mlp(spec, data, epochs=args.epochs, seed=args.seed, name=args.name)
    else:
        model = random_mlp(spec, args.seed, args.name)
    save_model(model, args.out)
    info = {"model": model.name, "dims": ",".join(map(str, spec.dims)), "parameters": model.num_parameters}
    if args.train:
        info["train_top1"] = round(top1_accuracy(spec, model, data), 4)
    _emit(args, info)
    return EXIT_OK


def cmd_make_dataset(args) -> int:
    from sklearn.datasets import make_classification

    if args.samples < 1 or args.features < 2 or args.classes < 2:
        raise UsageError("need at least 1 sample, 2 features and 2 classes")
    X, y = make_classification(
        n_samples=args.samples,
        n_features=args.features,
        n_informative=max(2, args.features // 2),
        n_classes=args.classes,
        n_clusters_per_class=1,
        random_state=args.seed,
    )
    save_dataset(LabeledDataset(X.astype(np.float32), y), args.out)
    _emit(args, {"samples": args.samples, "features": args.features, "classes": args.classes, "written": args.out})
    return EXIT_OK


def cmd_bench(args) -> int:
    model = load_model(args.model)
    dataset = load_dataset(args.dataset) if args.dataset else None
    rows, _ = run_bench(
        model,
        args.bitwidths,
        args.channel,
        repetitions=args.repetitions,
        dataset=dataset,
        wallclock=not args.no_wallclock,
    )
    sys.stdout.write(format_rows(rows, args.output))
    return EXIT_OK


def cmd_serve(args) -> int:
    from .proto.server import ServerRepository, serve

    repo = ServerRepository.from_directory(args.repo_dir)
    if not repo.model_ids:
        raise UsageError(f"no *.p2um models in {args.repo_dir}")
    print(f"serving {', '.join(repo.model_ids)} on {args.host}:{args.port}", flush=True)
    try:
        serve(repo, (args.host, args.port))
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_fetch(args) -> int:
    from .proto.client import TriggerPolicy, fetch_progressive

    try:
        trigger = TriggerPolicy.parse("manual" if args.no_update else args.trigger)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    result = fetch_progressive(
        (args.host, args.port), args.model_id, args.bitwidth, trigger, tolerance=args.tolerance, channel=args.channel
    )
    if result.low is not None:
        low_out = args.low_out or f"{args.model_id}.low.p2um"
        save_model(result.low, low_out)
        print(f"wrote {low_out}", file=sys.stderr)
    if result.proxy is not None:
        proxy_out = args.proxy_out or f"{args.model_id}.proxy.p2um"
        save_model(result.proxy, proxy_out)
        print(f"wrote {proxy_out}", file=sys.stderr)
    if result.report is not None:
        report = result.report.validate()
        if args.output == "json":
            print(json.dumps(report.as_dict(), indent=2))
        elif args.output == "csv":
            sys.stdout.write(report.to_csv())
        else:
            print(report.to_table())
    if result.error is not None:
        print(f"p2u: fetch stopped after phase {result.phase!r}: {result.error}", file=sys.stderr)
        if isinstance(result.error, (RemoteError, ProtocolError, OSError)):
            return EXIT_REMOTE
        raise result.error
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with status 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        resolve(args)
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"p2u: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RemoteError, ProtocolError, ConnectionError) as exc:
        print(f"p2u: {exc}", file=sys.stderr)
        return EXIT_REMOTE
    except (FormatError, ModelMismatchError, OSError, ValueError) as exc:
        print(f"p2u: {exc}", file=sys.stderr)
        return EXIT_DATA
    except P2UError as exc:
        print(f"p2u: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logging.getLogger(__name__).debug("internal error", exc_info=True)
        print(f"p2u: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
