import time
from typing import Any, Dict


class TrialContext:
    """
    Context object for the metrics of a single Monte Carlo trial.
    Lightweight and picklable so worker processes can return it.
    """
    def __init__(self, experiment: str, curve: str, trial: int, n_targets: int, seed_key: tuple):
        self.start_time = time.time()
        self.data: Dict[str, Any] = {
            "experiment": experiment,
            "curve": curve,
            "trial": trial,
            "K": n_targets,
            "seed_key": list(seed_key),
            # Default values
            "events": 0,
            "errors": 0,
            "error": False,
            "degenerate": False,
            "rejections": 0,
            "feasible_set_size": None,
            "candidates_evaluated": None,
            "tau": None,
            "error_type": None,
            "wall_time": 0.0,
        }

    def mark_stage(self, name: str, value: Any):
        """Record a generic stage value."""
        self.data[name] = value

    def set_flag(self, key: str, value: bool):
        """Set a boolean flag."""
        self.data[key] = value

    def record_outcome(self, errors: int, events: int):
        """Record error events out of ``events`` opportunities (targets or trials)."""
        self.data["errors"] = int(errors)
        self.data["events"] = int(events)
        self.data["error"] = errors > 0

    def set_error(self, error: Exception):
        """Record a failure that made the trial degenerate."""
        self.data["error_type"] = f"{type(error).__name__}: {error}"
        self.data["degenerate"] = True

    def finalize(self) -> Dict[str, Any]:
        """
        Finalize the context, record wall time, and return the data dict.
        Should be called at the end of the trial.
        """
        self.data["wall_time"] = round(time.time() - self.start_time, 4)
        return self.data
