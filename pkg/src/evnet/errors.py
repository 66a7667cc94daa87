"""Exception hierarchy. Every error raised by the package derives from EvnetError."""


class EvnetError(Exception):
    pass


class ShapeError(EvnetError, ValueError):
    pass


class RoutingError(EvnetError, ValueError):
    pass


class GraphError(EvnetError, ValueError):
    pass


class SchemaError(EvnetError, ValueError):
    pass


class ConversionError(EvnetError, ValueError):
    pass


class ClassificationError(EvnetError, TypeError):
    pass


class StateError(EvnetError, RuntimeError):
    pass


class ConfigError(EvnetError, ValueError):
    pass


class ReportError(EvnetError, ValueError):
    pass


class SceneError(EvnetError, ValueError):
    pass


class FormatError(EvnetError, ValueError):
    pass
