"""Run the service: ``python -m mlmserve --port 8500`` or the ``mlmserve`` script."""

import argparse
import logging

import uvicorn

from .app import create_app


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mlmserve")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8500)
    parser.add_argument("--seed", type=int, default=0, help="model init seed")
    parser.add_argument("--dim", type=int, default=64, help="embedding dimension")
    parser.add_argument("--vocab-size", type=int, default=2048)
    parser.add_argument("--feature-dim", type=int, default=32,
                        help="raw image feature dimension accepted by /v1/project")
    parser.add_argument("--max-len", type=int, default=256, help="context length")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO)
    app = create_app(
        seed=args.seed, dim=args.dim, vocab_size=args.vocab_size,
        feature_dim=args.feature_dim, max_len=args.max_len,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
