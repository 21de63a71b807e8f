#logger.py
"""
Logging module with configurable levels per module type
"""
import logging
import os
from datetime import datetime
from typing import Any, Dict


class PerformanceLogger:
    """Performance logger with configurable levels"""

    _instance = None

    MODULE_TYPES = ('plume', 'belief', 'env', 'planner', 'training', 'eval', 'storage', 'cli')

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
            cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        if self._initialized:
            return

        self._initialized = True
        self._loggers = {}
        self._module_types = {}
        self._log_dir = "logs"
        self._default_level = 'INFO'

        # Default settings
        self.settings = {f'{module_type}_level': 'INFO' for module_type in self.MODULE_TYPES}
        self.settings['file_logging'] = False   # Library use stays console-only
        self.settings['log_dir'] = self._log_dir

    def initialize_with_config(self, config: Dict[str, Any]):
        """
        Initialize from the `logging` block of a run configuration.
        Must be called explicitly by the entry point.
        """
        logging_block = config.get('logging', {}) if config else {}
        if logging_block:
            self.update_settings(logging_block)
        return self

    def setup_logger(self, name: str, log_file: str, level: str = 'INFO'):
        """Configure a logger"""
        level_map = {
            'DEBUG': logging.DEBUG,
            'INFO': logging.INFO,
            'WARNING': logging.WARNING,
            'ERROR': logging.ERROR,
            'CRITICAL': logging.CRITICAL
        }
        log_level = level_map.get(str(level).upper(), logging.INFO)

        logger = logging.getLogger(name)
        logger.setLevel(log_level)
        logger.propagate = False

        # Remove existing handlers
        for handler in list(logger.handlers):
            handler.close()
        logger.handlers.clear()

        formatter = logging.Formatter(
            '%(asctime)s.%(msecs)03d [%(levelname)-8s] %(name)s - %(message)s',
            datefmt='%H:%M:%S'
        )

        if self.settings.get('file_logging'):
            os.makedirs(self._log_dir, exist_ok=True)
            log_path = os.path.join(self._log_dir, log_file)
            file_handler = logging.FileHandler(log_path, encoding='utf-8')
            file_handler.setLevel(log_level)
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)

        console_handler = logging.StreamHandler()
        console_handler.setLevel(log_level)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

        self._loggers[name] = logger
        return logger

    def get_logger(self, name: str, module_type: str = 'cli'):
        """Get a logger with current level settings"""
        self._module_types[name] = module_type
        log_file = f"{module_type}_{datetime.now().strftime('%Y%m%d')}.log"

        level = self.settings.get(f'{module_type}_level', self._default_level)

        if name in self._loggers:
            logger = self._loggers[name]
            logger.setLevel(logging.getLevelName(str(level).upper()))
            for handler in logger.handlers:
                handler.setLevel(logging.getLevelName(str(level).upper()))
            return logger

        return self.setup_logger(name, log_file, level)

    def update_settings(self, settings: dict):
        """Update logging settings and reconfigure existing loggers"""
        handlers_changed = (
            settings.get('file_logging', self.settings.get('file_logging')) != self.settings.get('file_logging')
            or settings.get('log_dir', self._log_dir) != self._log_dir
        )
        self.settings.update(settings)
        self._log_dir = self.settings.get('log_dir', self._log_dir)

        for name in list(self._loggers):
            module_type = self._module_types.get(name, 'cli')
            if handlers_changed:
                log_file = f"{module_type}_{datetime.now().strftime('%Y%m%d')}.log"
                self.setup_logger(name, log_file, self.settings.get(f'{module_type}_level', self._default_level))
            else:
                self.get_logger(name, module_type)


# Singleton instance
perf_logger = PerformanceLogger()
