import time
from contextlib import contextmanager
from typing import Dict, List, Optional
from utils.logger import get_logger

logger = get_logger()


class Provenance:
    """Collects warnings, stage timings and artifacts for one run.

    A warning is recorded once per (module, message) pair no matter how many
    times it is raised.
    """

    def __init__(self):
        self.warnings: List[Dict[str, str]] = []
        self.timings: Dict[str, float] = {}
        self.records: Dict[str, object] = {}
        self._seen = set()

    def warn(self, module: str, message: str):
        key = (module, message)
        if key in self._seen:
            return
        self._seen.add(key)
        self.warnings.append({'module': module, 'message': message})
        logger.warning(f'{module}: {message}')

    def record(self, key: str, value):
        self.records[key] = value

    @contextmanager
    def timed(self, stage: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[stage] = self.timings.get(stage, 0.0) + time.perf_counter() - start

    def to_dict(self) -> dict:
        return {
            'timings_s': dict(self.timings),
            'warnings': list(self.warnings),
            **self.records,
        }


def warn(provenance: Optional[Provenance], module: str, message: str):
    """Record on `provenance` when given, otherwise just log."""
    if provenance is None:
        logger.warning(f'{module}: {message}')
    else:
        provenance.warn(module, message)
