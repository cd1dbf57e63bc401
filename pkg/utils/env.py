import os
from typing import Optional
from dotenv import find_dotenv, load_dotenv

VERBOSITY_VAR = 'SKULLENGINE_VERBOSITY'
VERBOSITY_LEVELS = ('quiet', 'normal', 'debug')

_env_loaded = False

def ensure_env_loaded():
    """Load the nearest .env (cwd upwards) once; real environment wins."""
    global _env_loaded
    if _env_loaded:
        return
    env_path = find_dotenv(usecwd=True)
    if env_path:
        load_dotenv(dotenv_path=env_path, override=False)
    _env_loaded = True

def get_env(var_name: str, default: Optional[str] = None) -> Optional[str]:
    ensure_env_loaded()
    return os.getenv(var_name, default)

def get_verbosity() -> str:
    """Output verbosity switch; unknown values fall back to 'normal'."""
    value = (get_env(VERBOSITY_VAR, 'normal') or 'normal').strip().lower()
    if value not in VERBOSITY_LEVELS:
        return 'normal'
    return value
