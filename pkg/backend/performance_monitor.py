"""
Performance monitoring for pipeline stages
Tracks wall time per stage and feeds the timings block of every report
"""

import time
import logging
import functools
from typing import Dict, List, Any, Callable, Optional
from dataclasses import dataclass, field


@dataclass
class PerformanceMetric:
    """Single timed operation"""
    operation: str
    start_time: float
    end_time: float = 0.0
    duration: float = 0.0
    success: bool = True
    error: Optional[str] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def complete(self, success: bool = True, error: Optional[str] = None):
        """Mark operation as complete"""
        self.end_time = time.perf_counter()
        self.duration = self.end_time - self.start_time
        self.success = success
        self.error = error

    def to_dict(self) -> Dict[str, Any]:
        return {
            "operation": self.operation,
            "duration_seconds": round(self.duration, 4),
            "success": self.success,
            "error": self.error,
            "metadata": self.metadata
        }


class PerformanceMonitor:
    """Monitors and tracks stage timings"""

    def __init__(self):
        self.metrics: List[PerformanceMetric] = []
        self._open: List[PerformanceMetric] = []
        self.logger = logging.getLogger(__name__)
        self.workflow_start_time: float = 0.0
        self.workflow_end_time: float = 0.0

    def start_workflow(self):
        """Mark workflow start"""
        self.workflow_start_time = time.perf_counter()
        self.workflow_end_time = 0.0
        self.metrics = []

    def end_workflow(self):
        self.workflow_end_time = time.perf_counter()

    def start_operation(self, operation: str, metadata: Optional[Dict[str, Any]] = None) -> PerformanceMetric:
        metric = PerformanceMetric(
            operation=operation,
            start_time=time.perf_counter(),
            metadata=metadata or {}
        )
        self.metrics.append(metric)
        self._open.append(metric)
        return metric

    def end_operation(self, success: bool = True, error: Optional[str] = None):
        """End the innermost open operation"""
        if self._open:
            self._open.pop().complete(success, error)

    def get_total_duration(self) -> float:
        if self.workflow_start_time and self.workflow_end_time:
            return self.workflow_end_time - self.workflow_start_time
        elif self.workflow_start_time:
            return time.perf_counter() - self.workflow_start_time
        return 0.0

    def stage_durations(self) -> Dict[str, float]:
        """Total seconds per operation name"""
        totals: Dict[str, float] = {}
        for metric in self.metrics:
            totals[metric.operation] = totals.get(metric.operation, 0.0) + metric.duration
        return {op: round(total, 4) for op, total in totals.items()}

    def get_summary(self) -> Dict[str, Any]:
        return {
            "total_duration_seconds": round(self.get_total_duration(), 4),
            "total_operations": len(self.metrics),
            "failed_operations": len([m for m in self.metrics if not m.success]),
            "stages": self.stage_durations(),
            "detailed_metrics": [m.to_dict() for m in self.metrics]
        }

    def get_formatted_report(self) -> str:
        """Human-readable timing table"""
        summary = self.get_summary()
        lines = [
            "=" * 60,
            "TIMINGS",
            "=" * 60,
            f"Total Duration: {summary['total_duration_seconds']:.2f}s",
            f"Stages: {summary['total_operations']} ({summary['failed_operations']} failed)",
            "-" * 60
        ]
        for op_name, seconds in sorted(summary["stages"].items(), key=lambda x: x[1], reverse=True):
            lines.append(f"{op_name:<40} {seconds:>10.2f}s")
        lines.append("=" * 60)
        return "\n".join(lines)


def time_operation(operation_name: str = None):
    """
    Decorator to time a method on an object that owns a performance_monitor

    Usage:
        @time_operation("stage.train")
        def train_node(self, state):
            ...
    """
    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            op_name = operation_name or f"{func.__module__}.{func.__name__}"

            monitor = None
            if args and hasattr(args[0], 'performance_monitor'):
                monitor = args[0].performance_monitor

            if monitor:
                monitor.start_operation(op_name, {"function": func.__name__})

            start_time = time.perf_counter()
            error = None
            success = True

            try:
                return func(*args, **kwargs)
            except Exception as e:
                success = False
                error = str(e)
                raise
            finally:
                duration = time.perf_counter() - start_time
                if monitor:
                    monitor.end_operation(success, error)

                logger = logging.getLogger(func.__module__)
                if success:
                    logger.debug(f"{op_name} completed in {duration:.2f}s")
                else:
                    logger.warning(f"{op_name} failed after {duration:.2f}s: {error}")

        return wrapper
    return decorator
