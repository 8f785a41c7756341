"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MacselError(Exception):
    exit_code = 1


class ConfigError(MacselError, ValueError):
    exit_code = 2


class ParseError(MacselError, ValueError):
    exit_code = 2


class InputError(MacselError, ValueError):
    """Missing or malformed simulation stimulus."""

    exit_code = 2


class StructuralError(MacselError):
    """Netlist violates a structural invariant (e.g. contains a cycle)."""

    exit_code = 2


class MappingError(MacselError):
    exit_code = 2


class ProfileError(MacselError, KeyError):
    exit_code = 2

    def __str__(self):
        return Exception.__str__(self)


class EmptyWorkloadError(MacselError, ValueError):
    exit_code = 2


class PartitionError(MacselError, ValueError):
    exit_code = 2


class InfeasibleError(MacselError):
    """No selection satisfies the requested threshold."""

    exit_code = 3


class ScheduleError(MacselError):
    exit_code = 3


class TrainingError(MacselError, ArithmeticError):
    exit_code = 4
