import threading
from typing import Dict, List, Tuple

from scipy.stats import binomtest


def wilson_interval(errors: int, events: int, confidence: float = 0.95) -> Tuple[float, float]:
    """Wilson score interval for errors / events."""
    if events == 0:
        return 0.0, 1.0
    ci = binomtest(int(errors), int(events)).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


class ErrorRateAggregator:
    """
    In-memory aggregator of error counts per (curve, K).
    Thread-safe counter management; insertion order is preserved.
    """
    def __init__(self):
        self._lock = threading.Lock()
        self.stats: Dict[Tuple[str, int], Dict[str, int]] = {}

    def record(self, data: Dict):
        """Update counters from a finalized trial record."""
        key = (data["curve"], int(data["K"]))
        with self._lock:
            s = self.stats.setdefault(
                key, {"trials": 0, "errors": 0, "events": 0, "degenerate": 0, "rejections": 0}
            )
            s["trials"] += 1
            s["errors"] += int(data.get("errors", 0))
            s["events"] += int(data.get("events", 0))
            s["rejections"] += int(data.get("rejections", 0))
            if data.get("degenerate"):
                s["degenerate"] += 1

    def snapshot(self) -> List[Dict]:
        """Return one row per (curve, K) with the error probability and its Wilson CI."""
        with self._lock:
            items = [(k, v.copy()) for k, v in self.stats.items()]

        rows = []
        for (curve, k), s in items:
            low, high = wilson_interval(s["errors"], s["events"])
            rows.append({
                "curve": curve,
                "K": k,
                "error_prob": s["errors"] / s["events"] if s["events"] else 0.0,
                "ci_low": low,
                "ci_high": high,
                "trials": s["trials"],
                "errors": s["errors"],
                "events": s["events"],
                "degenerate": s["degenerate"],
                "rejections": s["rejections"],
            })
        return rows
