import logging
import logging.handlers
import os
import sys
from typing import Dict, Any, Optional

LOGGER_NAME = 'dronet_bench'
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """Get the package logger, or a child of it for a module."""
    if name:
        return logging.getLogger(f"{LOGGER_NAME}.{name}")
    return logging.getLogger(LOGGER_NAME)


class LoggingManager:
    def __init__(self, config: Dict[str, Any]):
        self.config = config
        self.logger = None
        self.error_logger = None
        self._setup_logging()

    def _setup_logging(self):
        """Setup logging: console on stderr plus optional rotating files."""
        self.logger = get_logger()
        self.logger.setLevel(getattr(logging, str(self.config.get('level', 'INFO')).upper(), logging.INFO))
        self.logger.handlers.clear()
        self.logger.propagate = False

        # stdout is reserved for data
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(getattr(logging, str(self.config.get('console_level', 'WARNING')).upper(),
                                         logging.WARNING))
        console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        self.logger.addHandler(console_handler)

        main_log_path = self.config.get('main_log')
        if main_log_path:
            self.logger.addHandler(self._rotating_handler(main_log_path, logging.INFO))

        self.error_logger = logging.getLogger(f'{LOGGER_NAME}_errors')
        self.error_logger.setLevel(logging.ERROR)
        self.error_logger.handlers.clear()
        self.error_logger.propagate = False

        error_log_path = self.config.get('error_log')
        if error_log_path:
            self.error_logger.addHandler(self._rotating_handler(error_log_path, logging.ERROR))

    def _rotating_handler(self, path: str, level: int) -> logging.Handler:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        handler = logging.handlers.RotatingFileHandler(
            path,
            maxBytes=self.config.get('max_file_size', 10485760),  # 10MB
            backupCount=self.config.get('backup_count', 5)
        )
        handler.setLevel(level)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        return handler

    def info(self, message: str):
        """Log info message."""
        self.logger.info(message)

    def record_failure(self, message: str):
        """Record a failed command in the error log; the console has already shown it."""
        self.error_logger.error(message)

    def warning(self, message: str):
        """Log warning message."""
        self.logger.warning(message)

    def debug(self, message: str):
        """Log debug message."""
        self.logger.debug(message)

    def log_progress(self, current: int, total: int, message: str = ""):
        """Log progress information."""
        percentage = (current / total * 100) if total > 0 else 0
        self.info(f"Progress: {current}/{total} ({percentage:.1f}%) {message}")

    def log_layer(self, index: int, kind: str, output_shape, macs: int):
        """Log a layer of a propagated network."""
        self.debug(f"Layer {index}: {kind} -> {output_shape} ({macs} MACs)")

    def log_benchmark(self, name: str, size: int, fps: float, median_ms: float):
        """Log a benchmark result."""
        self.info(f"Benchmark {name}@{size}: {fps:.2f} FPS (median {median_ms:.2f} ms)")

    def log_skip(self, what: str, reason: str):
        """Log a skipped work item."""
        self.warning(f"Skipped {what}: {reason}")

    def log_training_step(self, step: int, loss: float):
        """Log training progress."""
        self.info(f"Step {step}: loss {loss:.6f}")
