"""Command-line entry point: run the segmentation service with uvicorn."""

from __future__ import annotations

import argparse

import uvicorn

from .app import create_app
from .backends import get_backend
from .growing import DEFAULT_THRESHOLD


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(prog="segservice",
                                     description="Promptable-segmentation HTTP service")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8421)
    parser.add_argument("--backend", default="region-growing",
                        help="registered backend name (default: region-growing)")
    parser.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD,
                        help="region-growing color distance threshold, 0-255 scale")
    args = parser.parse_args(argv)
    kwargs = {"threshold": args.threshold} if args.backend == "region-growing" else {}
    app = create_app(get_backend(args.backend, **kwargs))
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")


if __name__ == "__main__":
    main()
