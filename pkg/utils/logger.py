import hashlib
import json
import logging
import sys
from utils.env import get_verbosity

_LEVELS = {
    'quiet': logging.WARNING,
    'normal': logging.INFO,
    'debug': logging.DEBUG,
}

def get_logger():
    logger = logging.getLogger('skullengine')
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        formatter = logging.Formatter('[%(levelname)s] %(message)s')
        handler.setFormatter(formatter)
        logger.addHandler(handler)
        logger.setLevel(_LEVELS[get_verbosity()])
        logger.propagate = False
    return logger

def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON form of a config mapping."""
    canonical = json.dumps(config, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

def package_versions() -> dict:
    from importlib import metadata
    versions = {}
    for name in ('numpy', 'scipy', 'torch', 'nibabel', 'pydantic'):
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    from engine import __version__
    versions['engine'] = __version__
    return versions

def log_run_record(command: str, config: dict, seed=None, **extra):
    """Emit one machine-readable JSON line describing a CLI run."""
    record = {
        'event': 'run',
        'command': command,
        'config_hash': config_hash(config),
        'seed': seed,
        'versions': package_versions(),
    }
    record.update(extra)
    get_logger().info(json.dumps(record, sort_keys=True, default=str))
    return record
