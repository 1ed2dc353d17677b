"""
Error taxonomy. Every error carries the CLI exit code that reports it.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FINGERPRINT = 3
EXIT_NUMERIC = 4
EXIT_POLICY_COLLAPSE = 5


class SoftHJBError(Exception):
    exit_code = 1


class ConfigError(SoftHJBError):
    """Config schema violation; `errors` is a list of (json_pointer, message)"""
    exit_code = EXIT_CONFIG

    def __init__(self, errors):
        self.errors = list(errors)
        lines = [f"{pointer or '/'}: {message}" for pointer, message in self.errors]
        super().__init__("invalid configuration:\n  " + "\n  ".join(lines))


class DimensionMismatch(SoftHJBError, ValueError):
    exit_code = EXIT_CONFIG


class FingerprintMismatch(SoftHJBError):
    exit_code = EXIT_FINGERPRINT

    def __init__(self, expected, found):
        self.expected = expected
        self.found = found
        super().__init__(f"dataset fingerprint {found} does not match config fingerprint {expected}")


class NonFiniteLoss(SoftHJBError):
    exit_code = EXIT_NUMERIC

    def __init__(self, epoch, batch_index, replay_path=None):
        self.epoch = epoch
        self.batch_index = batch_index
        self.replay_path = replay_path
        message = f"non-finite loss at epoch {epoch}, batch {batch_index}"
        if replay_path:
            message += f" (replay bundle: {replay_path})"
        super().__init__(message)


class CurvatureCollapse(SoftHJBError):
    """1 + beta * sigma_k^2 * c1(x) * dJ/dC fell below the floor: the posterior Gaussian is improper"""
    exit_code = EXIT_POLICY_COLLAPSE

    def __init__(self, message, state=None, trajectory_index=None):
        self.state = state
        self.trajectory_index = trajectory_index
        if trajectory_index is not None:
            message = f"{message} (trajectory {trajectory_index})"
        super().__init__(message)


class DegenerateCost(SoftHJBError):
    exit_code = EXIT_POLICY_COLLAPSE


class QuadratureNonConvergent(SoftHJBError):
    exit_code = EXIT_NUMERIC
