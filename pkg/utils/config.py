import os
from dotenv import load_dotenv
from typing import Optional


def _int_env(name: str, default: Optional[int]) -> Optional[int]:
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{name} must be an integer, got {raw!r}.")


def _bool_env(name: str, default: bool) -> bool:
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    return raw.strip().lower() in ("1", "true", "yes", "on")


class Settings:
    """
    Class to manage environment variables for the library and the mwctl CLI.
    Loads variables from a .env file using python-dotenv.
    """

    def __init__(self):
        load_dotenv()

        # Rendezvous store endpoint used when no address is passed explicitly
        self.MW_STORE_ADDR: str = os.getenv("MW_STORE_ADDR", "127.0.0.1:29500")
        self.MW_STORE_TIMEOUT_MS: int = _int_env("MW_STORE_TIMEOUT_MS", 5000)

        # World lifecycle
        self.MW_INIT_TIMEOUT_MS: int = _int_env("MW_INIT_TIMEOUT_MS", 30000)

        # Poller
        self.MW_POLLER_YIELD: bool = _bool_env("MW_POLLER_YIELD", False)
        self.MW_OP_DEFAULT_TIMEOUT_MS: Optional[int] = _int_env("MW_OP_DEFAULT_TIMEOUT_MS", None)
        self.MW_INBOX_LIMIT_BYTES: int = _int_env("MW_INBOX_LIMIT_BYTES", 64 * 1024 * 1024)

        # Watchdog
        self.MW_HEARTBEAT_INTERVAL_MS: int = _int_env("MW_HEARTBEAT_INTERVAL_MS", 1000)
        self.MW_LIVENESS_TIMEOUT_MS: int = _int_env("MW_LIVENESS_TIMEOUT_MS", 3000)
        self.MW_SCAN_INTERVAL_MS: int = _int_env("MW_SCAN_INTERVAL_MS", 500)

        # Logging level
        self.LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
        self.MW_LOG_FILE: Optional[str] = os.getenv("MW_LOG_FILE") or None

        # Error tracking and metrics, both off unless configured
        self.SENTRY_DSN: Optional[str] = os.getenv("SENTRY_DSN") or None
        self.MW_METRICS_PORT: Optional[int] = _int_env("MW_METRICS_PORT", None)


settings = Settings()
