
class Color:
    RED = '\033[91m'
    GREEN = '\033[92m'
    YELLOW = '\033[93m'
    RESET = '\033[0m'

STATUS_COLORS = {
    'clean': Color.GREEN,
    'degraded': Color.YELLOW,
    'failed': Color.RED,
}

def print_colored(text, color):
    print(f"{color}{text}{Color.RESET}")

def print_status(status, text):
    """Print a run summary line coloured by pipeline status."""
    print_colored(f"[{status}] {text}", STATUS_COLORS.get(status, Color.YELLOW))
