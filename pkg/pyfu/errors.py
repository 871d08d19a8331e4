"""Exceptions raised by the PyFu package."""


class PyFuError(Exception):
    """Exception to indicate a general PyFu error."""


class PyFuShapeError(PyFuError):
    """Exception to indicate a tensor or raster shape contract violation."""


class PyFuValueError(PyFuError):
    """Exception to indicate an invalid argument value."""


class PyFuConfigError(PyFuError):
    """Exception to indicate an invalid run configuration."""


class PyFuDataError(PyFuError):
    """Exception to indicate malformed or missing dataset files."""


class PyFuOverlapError(PyFuError):
    """Exception to indicate that lidar and camera do not overlap."""


class PyFuNumericalError(PyFuError):
    """Exception to indicate a non-finite loss or gradient."""
