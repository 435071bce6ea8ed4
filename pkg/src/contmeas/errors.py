"""Exception types shared across the package.

Two failure families matter to callers: bad input documents (config errors,
CLI exit code 2) and violated numerical contracts discovered while running
(CLI exit code 3). Everything else is a plain bug and raises the usual
builtin exceptions.
"""


class ConfigError(ValueError):
    """A config document or CLI argument is malformed or inconsistent.

    The message should name the offending field path, e.g. ``model.counting[1].kraus``.
    """


class ContractViolationError(RuntimeError):
    """A numerical contract failed at run time (positivity, trace, overflow...).

    The message should name the quantity and, where meaningful, the time at
    which it failed.
    """
