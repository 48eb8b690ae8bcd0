"""stfoundry: multi-task spatiotemporal modeling over synthetic road networks."""

from .cli import __version__

__all__ = ["__version__"]
