"""CLI runner: `modelshim --port 8008 --embed clip:... --segment sam:...`."""

from __future__ import annotations

import argparse

import uvicorn

from .app import create_app
from .config import ShimConfig


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="modelshim", description=__doc__)
    parser.add_argument("--host", default=None, help="listen address")
    parser.add_argument("--port", type=int, default=None, help="listen port")
    parser.add_argument("--embed", default=None, help="embedding engine id (hash:<dim> | clip:<hf-id>)")
    parser.add_argument("--segment", default=None, help="segmentation engine id (boxfill | grabcut[:iters] | sam:<hf-id>)")
    parser.add_argument("--chat-upstream", default=None, help="upstream chat endpoint base URL")
    parser.add_argument("--device", default=None, help="inference device (cpu, cuda, ...)")
    args = parser.parse_args(argv)

    config = ShimConfig.from_env(
        host=args.host,
        port=args.port,
        embedding_model=args.embed,
        segmentation_model=args.segment,
        chat_upstream=args.chat_upstream,
        device=args.device,
    )
    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="info")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
