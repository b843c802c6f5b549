"""Figure regeneration for the benchmark harness CSV outputs."""

from .figures import FigureSpec, MissingColumn, RenderResult, checksum_values, render

__version__ = "0.1.0"
