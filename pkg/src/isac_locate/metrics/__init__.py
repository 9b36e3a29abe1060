from .context import TrialContext
from .aggregator import ErrorRateAggregator
from .logger import TrialLogger


def init_trial_logger(log_path) -> TrialLogger:
    """Create and start a JSONL trial writer."""
    trial_logger = TrialLogger(log_path)
    trial_logger.start()
    return trial_logger


def shutdown_trial_logger(trial_logger: TrialLogger):
    """Stop the writer and flush what is queued."""
    trial_logger.stop()
