from prometheus_client import Counter, Gauge, start_http_server

from utils.logger import logger

ops_submitted = Counter("mw_ops_submitted_total", "Collective calls accepted by a communicator.", ["op"])
ops_completed = Counter("mw_ops_completed_total", "Collective calls that reached a terminal state.", ["op", "outcome"])
worlds_broken = Counter("mw_worlds_broken_total", "Worlds transitioned to Broken.")
heartbeats_published = Counter("mw_heartbeats_published_total", "Watchdog heartbeat increments written to the store.")
store_requests = Counter("mw_store_requests_total", "Requests served by the rendezvous store.", ["opcode"])
worlds = Gauge("mw_worlds", "Registered worlds by status.", ["status"])


def serve_metrics(port: int) -> None:
    """Expose the default registry over HTTP on the given port."""
    start_http_server(port)
    logger.info(f"Prometheus metrics served on port {port}.")
