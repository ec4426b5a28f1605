"""Exception hierarchy shared by every module."""


class TweetGeoError(Exception):
    """Base class for all package errors."""


class ContractError(TweetGeoError):
    """A caller violated an operation's precondition."""


class ShapeError(ContractError):
    pass


class DegenerateInputError(ContractError):
    pass


class DistributionError(ContractError):
    pass


class NumericalError(TweetGeoError):
    pass


class ConfigError(TweetGeoError):
    pass


class TemplateError(ConfigError):
    pass


class DataError(TweetGeoError):
    pass


class CorpusParseError(DataError):
    def __init__(self, path, lineno, message):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class IntegrityError(DataError):
    pass


class CheckpointError(TweetGeoError):
    pass
