"""
Logging configuration shared by the CLI and the test scripts
"""

import logging
import os

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level=logging.INFO, log_file=None):
    """Install a console handler and, when given, a file handler for the stage log"""
    root = logging.getLogger()
    root.setLevel(level)

    # Replace handlers from a previous run in the same process
    for handler in list(root.handlers):
        if getattr(handler, "_lab_handler", False):
            root.removeHandler(handler)
            handler.close()

    formatter = logging.Formatter(LOG_FORMAT)

    console = logging.StreamHandler()
    console.setFormatter(formatter)
    console._lab_handler = True
    root.addHandler(console)

    if log_file:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(formatter)
        file_handler._lab_handler = True
        root.addHandler(file_handler)

    return root
