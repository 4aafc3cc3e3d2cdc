"""
Exception hierarchy shared by the simulator and the command line.
"""


class MuvisError(Exception):
    """Base class for every error raised on purpose by this package"""


class ConfigError(MuvisError, ValueError):
    """Scenario configuration could not be read or failed validation"""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path} {message}" if path else message)


class SimulationError(MuvisError, RuntimeError):
    """Simulation reached a degenerate state (e.g. sounding eats the whole epoch)"""


class UsageError(MuvisError):
    """Command line could not be interpreted"""
