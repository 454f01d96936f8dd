import logging
import sys
from logging.handlers import RotatingFileHandler

from utils.config import settings

# Configure logging
logger = logging.getLogger("multiworld")
logger.setLevel(getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO))
logger.propagate = False

formatter = logging.Formatter(
    "%(asctime)s - %(name)s - %(process)d - %(threadName)s - %(levelname)s - %(message)s"
)

# stdout carries mwctl records, so the console handler writes to stderr
console_handler = logging.StreamHandler(sys.stderr)
console_handler.setLevel(logger.level)
console_handler.setFormatter(formatter)
logger.addHandler(console_handler)

# Create a rotating file handler when a log file is configured
if settings.MW_LOG_FILE:
    file_handler = RotatingFileHandler(settings.MW_LOG_FILE, maxBytes=1024 * 1024 * 10, backupCount=5)
    file_handler.setLevel(logging.INFO)
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)
