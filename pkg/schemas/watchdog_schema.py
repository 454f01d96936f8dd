from pydantic import BaseModel, ConfigDict, Field, model_validator

from utils.config import settings


class WatchdogConfig(BaseModel):
    """
    Watchdog timings in seconds.

    Raises:
        ValueError: If liveness_timeout < 2 × heartbeat_interval.
    """
    model_config = ConfigDict(frozen=True)

    heartbeat_interval: float = Field(settings.MW_HEARTBEAT_INTERVAL_MS / 1000.0, gt=0)
    liveness_timeout: float = Field(settings.MW_LIVENESS_TIMEOUT_MS / 1000.0, gt=0)
    scan_interval: float = Field(settings.MW_SCAN_INTERVAL_MS / 1000.0, gt=0)

    @model_validator(mode="after")
    def liveness_covers_two_beats(self):
        if self.liveness_timeout < 2 * self.heartbeat_interval:
            raise ValueError(
                f"liveness_timeout ({self.liveness_timeout}s) must be at least twice "
                f"heartbeat_interval ({self.heartbeat_interval}s)."
            )
        return self
