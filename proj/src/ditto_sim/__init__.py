"""Python bindings for the ditto simulator."""

import json

from ._core import DittoError, Trace, cosine, generate_trace, variants
from . import _core

__all__ = ["DittoError", "Trace", "analyze", "compare", "cosine", "generate_trace",
           "simulate", "variants", "verify"]


def simulate(trace, variant="ditto", preset="ditto", lane_divisor=64):
    """Run one variant; returns the run summary as a dict."""
    return json.loads(_core._simulate(trace, variant, preset, lane_divisor))


def compare(trace, lane_divisor=64):
    return json.loads(_core._compare(trace, lane_divisor))


def analyze(trace, model="trace"):
    return json.loads(_core._analyze(trace, model))


def verify(trace):
    """Bit-exactness report of every difference path against direct execution."""
    return json.loads(_core._verify(trace))
