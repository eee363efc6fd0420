class GridBpError(Exception):
    """Base class for every error raised by the toolkit."""


class CaseParseError(GridBpError):
    def __init__(self, message, line_number=None, path=None):
        self.line_number = line_number
        self.path = path
        location = ""
        if path is not None:
            location += f"{path}"
        if line_number is not None:
            location += f":{line_number}"
        super().__init__(f"{location}: {message}" if location else message)


class TopologyError(GridBpError):
    pass


class FactorGraphError(GridBpError):
    pass


class NumericalError(GridBpError):
    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)


class RetrievabilityError(GridBpError):
    def __init__(self, message, line_id=None):
        self.line_id = line_id
        super().__init__(message)


class PartitionError(GridBpError):
    pass


class ConfigError(GridBpError, ValueError):
    pass
