import os
import logging

import torch

# Configure logging
LOG_LEVEL = os.environ.get("SOFTHJB_LOG_LEVEL", "INFO").upper()
logging.basicConfig(level=getattr(logging, LOG_LEVEL, logging.INFO),
                    format='%(asctime)s - %(levelname)s - %(message)s')

# Custom logger setup
logger = logging.getLogger('softhjb')

# All numerics run in double precision
torch.set_default_dtype(torch.float64)

DEFAULT_THREADS = int(os.environ.get("SOFTHJB_THREADS", "0"))


def debug_log(message, error=None, level='info'):
    """Enhanced debug logging with traceback support

    Args:
        message (str): Message to log
        error (Exception, optional): Exception to log stacktrace
        level (str): Log level ('info', 'warning', 'error')
    """
    if error:
        logger.error(f"{message}: {str(error)}")
        import traceback
        logger.error(traceback.format_exc())
    elif level == 'warning':
        logger.warning(message)
    elif level == 'error':
        logger.error(message)
    else:
        logger.info(message)


def set_threads(threads=None):
    """Cap the number of intra-op torch threads (0 or None keeps the torch default)"""
    threads = threads if threads is not None else DEFAULT_THREADS
    if threads and threads > 0:
        torch.set_num_threads(threads)
        logger.info(f"Torch thread count capped at {threads}")
    return torch.get_num_threads()
