"""Error taxonomy shared across modules.

ConfigError covers anything wrong with user-supplied configuration; the CLI
maps it to exit code 2.  InvariantError marks a violated scheme or kernel
invariant detected mid-run (a bug, or a schedule file that breaks a budget);
the CLI maps it to exit code 3.
"""

__all__ = ["ConfigError", "InvariantError"]


class ConfigError(ValueError):
    """Invalid run or scheme configuration."""


class InvariantError(RuntimeError):
    """A runtime invariant was violated; the run aborts with a diagnostic."""
