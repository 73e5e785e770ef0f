"""Figure scripts for simulation outputs.

Reads the schema-versioned CSV/JSON aggregates written by the analysis
CLI and renders the standard figure set; nothing is recomputed here.
"""

from .render import render
from .spec import EXPECTED_SCHEMA_VERSION, FigureSpec, InputError

__version__ = "0.1.0"
