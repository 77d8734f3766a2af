import argparse

import uvicorn
from fastapi import FastAPI

from pianotune.api.scorer_router import MockScorerState, create_scorer_router
from pianotune.utils.common import configure_logging, get_random_port
from pianotune.version import __version__


def create_app(state: MockScorerState | None = None) -> FastAPI:
    """Reference scoring server with deterministic, audio-derived ratings."""
    app = FastAPI(title="pianotune mock scorer", version=__version__)
    app.state.scorer_state = state or MockScorerState()
    app.include_router(create_scorer_router())
    return app


def main() -> None:
    """Entry point for the pianotune-mock-scorer command."""
    parser = argparse.ArgumentParser(description="Mock aesthetic scoring server")
    parser.add_argument("--port", type=int, help="Port to run the server on (default: random)")
    parser.add_argument("--delay", type=float, default=0.0, help="Seconds to wait before every answer")
    parser.add_argument(
        "--fail-first",
        type=int,
        default=0,
        help="Answer the first N requests with HTTP 503",
    )
    parser.add_argument("--token", help="Require this bearer token")
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    args = parser.parse_args()

    configure_logging(args.debug)
    state = MockScorerState(delay_seconds=args.delay, required_token=args.token)
    state.fail_next(*([503] * args.fail_first))
    app = create_app(state)

    port = args.port
    if not port:
        sock, port = get_random_port()
        print(f"Mock scorer available at: http://127.0.0.1:{port}")
        uvicorn.run(app, fd=sock.fileno())
    else:
        print(f"Mock scorer available at: http://127.0.0.1:{port}")
        uvicorn.run(app, host="127.0.0.1", port=port)


if __name__ == "__main__":
    main()
