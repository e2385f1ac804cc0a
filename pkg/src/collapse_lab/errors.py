"""Exception types raised across the package."""


class CollapseLabError(Exception):
    """Base class for all package errors."""


class ContractError(CollapseLabError, ValueError):
    """Inputs violate a documented precondition (shapes, finiteness, ranges)."""


class DegenerateBatchError(CollapseLabError, ValueError):
    pass


class DegenerateFeatureError(CollapseLabError, ValueError):
    def __init__(self, message, cls=None, index=None):
        super().__init__(message)
        self.cls = cls
        self.index = index


class DivergenceError(CollapseLabError, RuntimeError):
    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


class GeneratorDegenerateError(CollapseLabError, RuntimeError):
    pass


class DimensionError(CollapseLabError, ValueError):
    pass


class DomainError(CollapseLabError, ValueError):
    pass


class ParseError(CollapseLabError, ValueError):
    def __init__(self, message, offset=None, line=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if offset is not None:
            loc.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.offset = offset
        self.line = line


class ConfigError(CollapseLabError, ValueError):
    pass


class SchemaError(CollapseLabError, ValueError):
    pass
