import signal
import threading
from typing import Optional

from routers.launcher import EXIT_ENV, EXIT_PASS
from services.store_service import serve
from utils.logger import logger


def run_store(listen_addr: str, stop: Optional[threading.Event] = None) -> int:
    """
    Serves the rendezvous store until interrupted.

    Args:
        listen_addr (str): "host:port" to bind.
        stop (Optional[threading.Event]): Set it to stop serving; SIGINT and SIGTERM set it too.

    Returns:
        int: 0 after a clean stop, 2 when the address cannot be bound.
    """
    try:
        server = serve(listen_addr)
    except OSError as e:
        logger.error(f"Cannot bind rendezvous store to {listen_addr}: {e}")
        return EXIT_ENV

    if stop is None:
        stop = threading.Event()
        if threading.current_thread() is threading.main_thread():
            for signum in (signal.SIGINT, signal.SIGTERM):
                signal.signal(signum, lambda *_: stop.set())

    try:
        while not stop.wait(0.5):
            pass
    finally:
        server.stop()
    return EXIT_PASS
